"""End-to-end scenarios: train, pick targets, perturb, let the server act, verify."""
from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..autodiff import NumericError
from ..data import Dataset, ErasedSplit, InsufficientTargets, TargetSet, gen_blobs, load_idx, select_targets, split
from ..model import ModelParams, TrainConfig, accuracy, mlp_init, predict, train
from ..perturb import PerturbedRequest, perturb
from ..unlearn import UnlearnDiverged, run_unlearning
from ..verify import VerificationInconclusive, VerificationReport, model_oracle, verify
from .config import (PHASE_DATA, PHASE_INIT, PHASE_MIX, PHASE_SPLIT, ExperimentConfig,
                     phase_seed)

log = logging.getLogger(__name__)

PHASES = ("train", "perturb", "unlearn", "verify")


@dataclass
class MetricsReport:
    scenario: str
    seed: int
    esr: float
    d: float
    objective: str
    behavior: str
    uv: float = float("nan")
    ao: float = float("nan")
    au: float = float("nan")
    rt_ms: dict = field(default_factory=lambda: {p: 0.0 for p in PHASES})
    decision: str = "error"
    alpha: float = float("nan")
    lhs: float = float("nan")
    flags: list = field(default_factory=list)


@dataclass
class ScenarioArtifacts:
    split: Optional[ErasedSplit] = None
    trained: Optional[ModelParams] = None
    targets: Optional[TargetSet] = None
    request: Optional[PerturbedRequest] = None
    released: Optional[ModelParams] = None
    verification: Optional[VerificationReport] = None


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset == "idx":
        return load_idx(cfg.idx_images, cfg.idx_labels, cfg.n_classes)
    return gen_blobs(cfg.n_per_class, cfg.n_classes, cfg.dim, cfg.spread, phase_seed(cfg.seed, PHASE_DATA))


def build_split(cfg: ExperimentConfig) -> ErasedSplit:
    return split(build_dataset(cfg), cfg.esr, cfg.heldout_fraction, phase_seed(cfg.seed, PHASE_SPLIT))


def train_model(cfg: ExperimentConfig, sp: ErasedSplit) -> ModelParams:
    init = mlp_init(cfg.layers, phase_seed(cfg.seed, PHASE_INIT))
    return train(init, sp.train.X, sp.train.y, cfg.train_config())


def pick_targets(cfg: ExperimentConfig, params: ModelParams, sp: ErasedSplit) -> TargetSet:
    mode = cfg.wrong_label_mode
    return select_targets(params, sp.heldout, cfg.m, cfg.conf_threshold,
                          int(mode) if mode.lstrip("-").isdigit() else mode)


def utility_set(sp: ErasedSplit, targets: TargetSet) -> Dataset:
    """Held-out rows that are not verification targets."""
    return sp.heldout.subset(np.setdiff1d(np.arange(len(sp.heldout)), targets.heldout_idx))


def suppression_oracle(params: ModelParams, refused: np.ndarray):
    """theta* that refuses to answer on exact matches of the submitted rows."""
    blocked = {row.tobytes() for row in np.asarray(refused, dtype=np.float64)}

    def ask(x: np.ndarray):
        if np.asarray(x, dtype=np.float64).tobytes() in blocked:
            return None
        return predict(params, x)[0]

    return ask


def apply_behavior(cfg: ExperimentConfig, trained: ModelParams, sp: ErasedSplit,
                   request: Dataset, flags: list) -> tuple[ModelParams, object]:
    """Return (parameters behind the API, query oracle) for the configured server."""
    objective = cfg.unlearn_objective()
    remaining = sp.remaining
    if cfg.behavior == "noop":
        released = trained
    elif cfg.behavior == "suppression":
        return trained, suppression_oracle(trained, request.X)
    elif cfg.behavior == "finetune":
        ft = TrainConfig(cfg.finetune_lr, cfg.finetune_epochs, len(request), 0.0, 0)
        released = train(trained, request.X, request.y, ft)
    else:
        erased = request
        if cfg.behavior == "honest_mix":
            n_extra = int(round(cfg.mix_ratio * len(request)))
            if n_extra:
                rng = np.random.default_rng(phase_seed(cfg.seed, PHASE_MIX))
                pick = rng.choice(len(remaining), size=min(n_extra, len(remaining)), replace=False)
                extra = remaining.subset(np.sort(pick))
                erased = Dataset(np.vstack([request.X, extra.X]), np.concatenate([request.y, extra.y]),
                                 request.n_classes, request.value_range)
                keep = np.setdiff1d(np.arange(len(remaining)), pick)
                remaining = remaining.subset(keep)
        try:
            released = run_unlearning(trained, erased, objective, remaining)
        except UnlearnDiverged as exc:
            flags.append(f"unlearn_diverged@{exc.step}")
            released = exc.params
    return released, model_oracle(released)


@contextmanager
def _timed(rt: dict, phase: str):
    start = time.perf_counter()
    try:
        yield
    finally:
        rt[phase] += (time.perf_counter() - start) * 1000.0


def run_scenario(cfg: ExperimentConfig) -> tuple[MetricsReport, ScenarioArtifacts]:
    """Run one configured experiment.  Failures end up in ``report.flags``, never raised."""
    report = MetricsReport(cfg.name, cfg.seed, cfg.esr, cfg.d, cfg.objective, cfg.behavior)
    art = ScenarioArtifacts()
    rt = report.rt_ms
    try:
        with _timed(rt, "train"):
            art.split = build_split(cfg)
            art.trained = train_model(cfg, art.split)
            art.targets = pick_targets(cfg, art.trained, art.split)
        util = utility_set(art.split, art.targets)
        report.ao = accuracy(art.trained, util.X, util.y)

        with _timed(rt, "perturb"):
            art.request = perturb(art.trained, art.split.erased, art.targets,
                                  cfg.perturb_config(), cfg.unlearn_objective())
        if art.request.diverged:
            report.flags.append("perturb_diverged")

        with _timed(rt, "unlearn"):
            art.released, oracle = apply_behavior(cfg, art.trained, art.split,
                                                  art.request.perturbed, report.flags)
        report.au = accuracy(art.released, util.X, util.y)

        with _timed(rt, "verify"):
            art.verification = verify(oracle, art.targets, cfg.n_classes, cfg.tau, cfg.beta_override)
        test = art.verification.test
        report.uv, report.alpha, report.lhs = art.verification.uv, test.alpha, test.lhs
        report.decision = test.decision
        if test.degenerate != "none":
            report.flags.append(test.degenerate)
    except VerificationInconclusive as exc:
        report.decision = "inconclusive"
        report.flags.append(f"inconclusive:{exc.answered}_answered")
    except InsufficientTargets as exc:
        report.flags.append(f"insufficient_targets:{exc}")
    except NumericError as exc:
        report.flags.append(f"numeric:{exc}")
    except ValueError as exc:
        report.flags.append(f"error:{exc}")
    if report.flags:
        log.info("scenario %s seed %d flags: %s", cfg.name, cfg.seed, report.flags)
    return report, art


def sweep_configs(cfg: ExperimentConfig, axis: str | None = None,
                  grid: tuple[float, ...] | None = None) -> list[ExperimentConfig]:
    axis = axis or cfg.sweep_axis
    grid = cfg.sweep_grid if grid is None else grid
    if axis not in ("esr", "d"):
        raise ValueError("sweep needs axis esr or d")
    points = list(dict.fromkeys(float(v) for v in grid))   # dedupe, keep order
    if not points:
        raise ValueError("empty sweep grid")
    return [cfg.replace(**{axis: v}, seed=cfg.seed ^ i, sweep_axis="none", sweep_grid=())
            for i, v in enumerate(points)]


def run_sweep(cfg: ExperimentConfig, axis: str | None = None,
              grid: tuple[float, ...] | None = None) -> list[MetricsReport]:
    return [run_scenario(c)[0] for c in sweep_configs(cfg, axis, grid)]
