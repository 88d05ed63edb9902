"""Gradient-matching perturbations of the erased set.

The perturbation delta is optimised so that the unlearning gradient on the
perturbed erased samples points the same way as the gradient that would
push the verification targets to wrong labels.  Honest unlearning on the
perturbed request then moves the targets; skipping it leaves them alone.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import NORM_FLOOR, NumericError, Tape, gradient
from .data import Dataset, TargetSet
from .model import ModelParams, forward_tape, loss_ce
from .unlearn import UnlearnObjective, UnsupportedObjective, flat_param_grad, unlearn_loss_tape

TARGETED = "targeted"
UNTARGETED = "untargeted"
DESCENT = "descent"
RESTARTS = "restarts"
MAX_RESTARTS = 10


@dataclass(frozen=True)
class PerturbConfig:
    d: float = 0.3                 # l-inf radius in feature units
    eta: float = 0.5
    n: int = 200
    strategy: str = DESCENT
    restarts: int = 5
    inner_steps: int = 40
    label_mode: str = TARGETED
    init_scale: float = 0.1        # initial draw is N(0, 1) * init_scale * d
    seed: int = 0
    grad_mode: str = "autodiff"    # "finite_difference" is for cross-checks only

    def __post_init__(self):
        if self.d < 0:
            raise ValueError("d must be non-negative")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.n < 0 or self.inner_steps < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.strategy not in (DESCENT, RESTARTS):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not 1 <= self.restarts <= MAX_RESTARTS:
            raise ValueError(f"restarts must lie in [1, {MAX_RESTARTS}]")
        if self.label_mode not in (TARGETED, UNTARGETED):
            raise ValueError(f"unknown label mode {self.label_mode!r}")
        if self.grad_mode not in ("autodiff", "finite_difference"):
            raise ValueError(f"unknown grad mode {self.grad_mode!r}")


@dataclass
class MatchTrace:
    phi_per_iter: list[float] = field(default_factory=list)
    best_phi: float = float("inf")
    best_iter: int = -1

    def record(self, phi: float) -> bool:
        """Append phi; return True if it is a new best."""
        self.phi_per_iter.append(phi)
        if phi < self.best_phi:
            self.best_phi, self.best_iter = phi, len(self.phi_per_iter) - 1
            return True
        return False


@dataclass
class PerturbedRequest:
    original: Dataset
    delta: np.ndarray
    trace: MatchTrace
    diverged: bool = False
    best_restart: int = 0

    @property
    def perturbed(self) -> Dataset:
        X = self.original.clamp(self.original.X + self.delta)
        return Dataset(X, self.original.y, self.original.n_classes, self.original.value_range)

    @property
    def best_phi(self) -> float:
        return self.trace.best_phi

    def save(self, out_dir: str | Path, cfg: PerturbConfig) -> None:
        """Write perturbed.csv plus a metadata sidecar."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.perturbed.to_csv(out / "perturbed.csv")
        meta = {
            "d": cfg.d, "eta": cfg.eta, "n": cfg.n, "strategy": cfg.strategy,
            "restarts": cfg.restarts, "inner_steps": cfg.inner_steps,
            "label_mode": cfg.label_mode, "seed": cfg.seed,
            "best_phi": self.trace.best_phi, "best_iter": self.trace.best_iter,
            "diverged": self.diverged, "n_classes": self.original.n_classes,
            "value_range": list(self.original.value_range),
        }
        (out / "perturbed.json").write_text(json.dumps(meta, indent=2))


def load_request(out_dir: str | Path) -> tuple[Dataset, dict]:
    out = Path(out_dir)
    meta = json.loads((out / "perturbed.json").read_text())
    ds = Dataset.from_csv(out / "perturbed.csv", meta["n_classes"], tuple(meta["value_range"]))
    return ds, meta


def target_gradient(objective: UnlearnObjective, params: ModelParams, targets: TargetSet,
                    label_mode: str = TARGETED) -> np.ndarray:
    """Flat gradient whose descent direction misclassifies the targets, at fixed params.

    targeted:   sum_t grad CE(x_t, y_wrong_t)   (descending it raises the wrong class)
    untargeted: -sum_t grad CE(x_t, y_t)        (descending it lowers the true class)
    """
    if not objective.gradient_defined:
        raise UnsupportedObjective(f"{objective.kind} has no pointwise unlearning gradient")
    if targets.m == 0:
        raise ValueError("no targets")
    if label_mode == TARGETED:
        labels, sign = targets.y_wrong, 1.0
    elif label_mode == UNTARGETED:
        labels, sign = targets.y_true, -1.0
    else:
        raise ValueError(f"unknown label mode {label_mode!r}")
    tape = Tape()
    ids = [tape.leaf(a, requires_grad=True) for a in params.arrays()]
    ce = loss_ce(tape, forward_tape(tape, ids, tape.const(targets.X)), labels)
    # loss_ce is a mean; scale back to a sum over targets
    total = tape.apply("scale", ce, c=sign * targets.m)
    return tape.value(flat_param_grad(tape, total, ids)).copy()


def match_loss_tape(tape: Tape, g_t: int, g_u: int) -> int:
    """1 - cosine(g_t, g_u) with both norms floored at 1e-12."""
    num = tape.apply("dot", g_t, g_u)
    nt = tape.apply("floor", tape.apply("l2_norm", g_t), lo=NORM_FLOOR)
    nu = tape.apply("floor", tape.apply("l2_norm", g_u), lo=NORM_FLOOR)
    cos = tape.apply("divide", num, tape.apply("mul", nt, nu))
    return tape.apply("subtract", tape.const(1.0), cos)


def match_loss(g_t: np.ndarray, g_u: np.ndarray) -> float:
    g_t = np.asarray(g_t, dtype=np.float64)
    g_u = np.asarray(g_u, dtype=np.float64)
    if g_t.shape != g_u.shape or g_t.ndim != 1:
        raise ValueError("match_loss needs two equal-length vectors")
    tape = Tape()
    return float(tape.value(match_loss_tape(tape, tape.const(g_t), tape.const(g_u))))


def phi_and_grad(objective: UnlearnObjective, params: ModelParams, X: np.ndarray, y: np.ndarray,
                 g_t: np.ndarray, delta: np.ndarray, need_grad: bool = True) -> tuple[float, np.ndarray | None]:
    """phi(delta) and d phi / d delta by double backprop."""
    tape = Tape()
    ids = [tape.leaf(a, requires_grad=True) for a in params.arrays()]
    d_id = tape.leaf(delta, requires_grad=True)
    x_id = tape.apply("add", tape.const(X), d_id)
    loss = unlearn_loss_tape(objective, tape, ids, x_id, y)
    g_u = flat_param_grad(tape, loss, ids, create_graph=need_grad)
    phi = match_loss_tape(tape, tape.const(g_t), g_u)
    if not need_grad:
        return float(tape.value(phi)), None
    (gd,) = gradient(tape, phi, [d_id])
    return float(tape.value(phi)), tape.value(gd)


def phi_grad_fd(objective, params, X, y, g_t, delta, eps: float = 1e-6) -> np.ndarray:
    """Central-difference d phi / d delta (slow; cross-checking only)."""
    out = np.empty(delta.size)
    flat = delta.ravel()
    for k in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[k] += eps
        down[k] -= eps
        f_up, _ = phi_and_grad(objective, params, X, y, g_t, up.reshape(delta.shape), need_grad=False)
        f_dn, _ = phi_and_grad(objective, params, X, y, g_t, down.reshape(delta.shape), need_grad=False)
        out[k] = (f_up - f_dn) / (2 * eps)
    return out.reshape(delta.shape)


def _project(delta: np.ndarray, X: np.ndarray, d: float, value_range) -> np.ndarray:
    delta = np.clip(X + np.clip(delta, -d, d), *value_range) - X
    # the subtraction can round one ulp past d
    return np.clip(delta, -d, d)


def _initial_delta(rng: np.random.Generator, X: np.ndarray, cfg: PerturbConfig, value_range) -> np.ndarray:
    return _project(rng.standard_normal(X.shape) * cfg.init_scale * cfg.d, X, cfg.d, value_range)


def _phi_grad(cfg, objective, params, X, y, g_t, delta):
    phi, grad = phi_and_grad(objective, params, X, y, g_t, delta)
    if cfg.grad_mode == "finite_difference":
        grad = phi_grad_fd(objective, params, X, y, g_t, delta)
    return phi, grad


def _check_inputs(objective: UnlearnObjective, erased: Dataset):
    if not objective.gradient_defined:
        raise UnsupportedObjective(f"{objective.kind} has no pointwise unlearning gradient")
    if len(erased) == 0:
        raise ValueError("erased set is empty")


def udpd(params: ModelParams, erased: Dataset, targets: TargetSet, cfg: PerturbConfig,
         objective: UnlearnObjective) -> PerturbedRequest:
    """Projected gradient descent on delta, returning the best-phi iterate."""
    _check_inputs(objective, erased)
    g_t = target_gradient(objective, params, targets, cfg.label_mode)
    X, y, vr = erased.X, erased.y, erased.value_range
    rng = np.random.default_rng(cfg.seed)
    delta = _initial_delta(rng, X, cfg, vr)
    trace = MatchTrace()
    best = delta
    diverged = False
    for i in range(max(cfg.n, 1)):
        try:
            phi, grad = _phi_grad(cfg, objective, params, X, y, g_t, delta)
        except NumericError:
            diverged = True
            break
        if trace.record(phi):
            best = delta
        if i >= cfg.n:
            break  # n == 0: evaluate the initial draw only
        delta = _project(delta - cfg.eta * grad, X, cfg.d, vr)
    if trace.best_iter < 0:
        trace.best_phi, trace.best_iter = float("nan"), -1
    return PerturbedRequest(erased, best, trace, diverged)


def _adam_run(params, erased, g_t, cfg, objective, delta, trace) -> tuple[np.ndarray, bool]:
    X, y, vr = erased.X, erased.y, erased.value_range
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = np.zeros_like(delta)
    v = np.zeros_like(delta)
    best = delta
    for step in range(max(cfg.inner_steps, 1)):
        try:
            phi, grad = _phi_grad(cfg, objective, params, X, y, g_t, delta)
        except NumericError:
            return best, True
        if trace.record(phi):
            best = delta
        if step >= cfg.inner_steps:
            break
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad * grad
        m_hat = m / (1 - beta1 ** (step + 1))
        v_hat = v / (1 - beta2 ** (step + 1))
        delta = _project(delta - cfg.eta * m_hat / (np.sqrt(v_hat) + eps), X, cfg.d, vr)
    return best, False


def udpd_restarts(params: ModelParams, erased: Dataset, targets: TargetSet, cfg: PerturbConfig,
                  objective: UnlearnObjective) -> PerturbedRequest:
    """R independent Adam runs on delta; keeps the globally best phi (ties -> lowest restart).

    Restart r draws its start from child r of the seed's SeedSequence, so the
    candidates of R restarts always include those of any smaller R.
    """
    _check_inputs(objective, erased)
    g_t = target_gradient(objective, params, targets, cfg.label_mode)
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.restarts)
    overall = MatchTrace()
    best_delta, best_restart, any_diverged = None, 0, False
    for r, child in enumerate(children):
        delta0 = _initial_delta(np.random.default_rng(child), erased.X, cfg, erased.value_range)
        trace = MatchTrace()
        cand, diverged = _adam_run(params, erased, g_t, cfg, objective, delta0, trace)
        any_diverged |= diverged
        if trace.best_iter < 0:
            continue
        if trace.best_phi < overall.best_phi:
            best_delta, best_restart = cand, r
            overall.best_phi = trace.best_phi
            overall.best_iter = len(overall.phi_per_iter) + trace.best_iter
        overall.phi_per_iter.extend(trace.phi_per_iter)
    if best_delta is None:
        fallback = _initial_delta(np.random.default_rng(children[0]), erased.X, cfg, erased.value_range)
        overall.best_phi, overall.best_iter = float("nan"), -1
        return PerturbedRequest(erased, fallback, overall, diverged=True)
    return PerturbedRequest(erased, best_delta, overall, diverged=any_diverged,
                            best_restart=best_restart)


def perturb(params: ModelParams, erased: Dataset, targets: TargetSet, cfg: PerturbConfig,
            objective: UnlearnObjective) -> PerturbedRequest:
    if cfg.strategy == RESTARTS:
        return udpd_restarts(params, erased, targets, cfg, objective)
    return udpd(params, erased, targets, cfg, objective)
