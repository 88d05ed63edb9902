"""Experiment configuration and the line-based ``key = value`` config format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from ..data import MIN_TARGETS
from ..model import TrainConfig
from ..perturb import PerturbConfig
from ..unlearn import UnlearnObjective

BEHAVIORS = ("honest", "noop", "suppression", "finetune", "honest_mix")
SWEEP_AXES = ("none", "esr", "d")

# sub-stream ids, so that changing one phase's settings leaves the others' draws intact
PHASE_DATA, PHASE_SPLIT, PHASE_INIT, PHASE_TRAIN, PHASE_PERTURB, PHASE_MIX = range(6)


class ConfigError(ValueError):
    pass


def phase_seed(seed: int, phase: int) -> int:
    return int(np.random.SeedSequence([seed, phase]).generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "reference"
    # data
    dataset: str = "blobs"             # "blobs" | "idx"
    n_per_class: int = 200
    n_classes: int = 10
    dim: int = 8
    spread: float = 0.05
    idx_images: str = ""
    idx_labels: str = ""
    # model / training
    layers: tuple[int, ...] = (8, 32, 10)
    train_lr: float = 0.05
    train_epochs: int = 30
    train_batch_size: int = 32
    train_momentum: float = 0.9
    # split / targets
    esr: float = 0.02
    heldout_fraction: float = 0.2
    m: int = 50
    conf_threshold: float = 0.9
    wrong_label_mode: str = "second_best"
    # perturbation
    d: float = 0.3
    eta: float = 0.5
    n: int = 200
    strategy: str = "descent"
    restarts: int = 5
    inner_steps: int = 40
    label_mode: str = "targeted"
    # unlearning objective
    objective: str = "grad_ascent"
    unlearn_steps: int = 3
    unlearn_lr: float = 1.0
    damping: float = 1e-2
    solver: str = "explicit"
    sparsity: float = 0.5
    # server behaviour
    behavior: str = "honest"
    finetune_epochs: int = 5
    finetune_lr: float = 0.1
    mix_ratio: float = 1.0
    # test
    tau: float = 0.05
    beta_override: float | None = None
    seed: int = 0
    # sweeps
    sweep_axis: str = "none"
    sweep_grid: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.dataset not in ("blobs", "idx"):
            raise ConfigError(f"dataset must be blobs or idx, not {self.dataset!r}")
        if self.dataset == "idx" and not (self.idx_images and self.idx_labels):
            raise ConfigError("idx dataset needs idx_images and idx_labels")
        if self.behavior not in BEHAVIORS:
            raise ConfigError(f"behavior must be one of {BEHAVIORS}")
        if self.sweep_axis not in SWEEP_AXES:
            raise ConfigError(f"sweep_axis must be one of {SWEEP_AXES}")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ConfigError("mix_ratio must lie in [0, 1]")
        if len(self.layers) < 2:
            raise ConfigError("layers needs at least two sizes")
        if self.dataset == "blobs" and (self.layers[0] != self.dim or self.layers[-1] != self.n_classes):
            raise ConfigError("layers must start at dim and end at n_classes")
        if not (0.0 < self.esr < 1.0 and 0.0 < self.heldout_fraction < 1.0):
            raise ConfigError("esr and heldout_fraction must lie in (0, 1)")
        if self.m < MIN_TARGETS:
            raise ConfigError(f"m must be at least {MIN_TARGETS}")
        if not 0.0 <= self.conf_threshold <= 1.0:
            raise ConfigError("conf_threshold must lie in [0, 1]")
        if not 0.0 < self.tau <= 0.5:
            raise ConfigError("tau must lie in (0, 0.5]")
        if self.finetune_epochs < 0 or self.finetune_lr <= 0:
            raise ConfigError("finetune_epochs >= 0 and finetune_lr > 0 required")
        try:
            self.train_config()
            self.perturb_config()
            self.unlearn_objective()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.train_lr, self.train_epochs, self.train_batch_size,
                           self.train_momentum, phase_seed(self.seed, PHASE_TRAIN))

    def perturb_config(self) -> PerturbConfig:
        return PerturbConfig(d=self.d, eta=self.eta, n=self.n, strategy=self.strategy,
                             restarts=self.restarts, inner_steps=self.inner_steps,
                             label_mode=self.label_mode, seed=phase_seed(self.seed, PHASE_PERTURB))

    def unlearn_objective(self) -> UnlearnObjective:
        return UnlearnObjective(kind=self.objective, steps=self.unlearn_steps,
                                learning_rate=self.unlearn_lr, damping=self.damping,
                                solver=self.solver, sparsity=self.sparsity)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _convert(name: str, raw: str, typ):
    raw = raw.strip()
    try:
        if name in ("layers",):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if name == "sweep_grid":
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if name == "beta_override":
            return None if raw.lower() in ("", "none") else float(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw, types[key])
    return ExperimentConfig(**values)


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text(), str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif v is None:
            v = "none"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
