"""Approximate unlearning: gradient ascent, influence-function (HBU) removal, saliency-masked ascent."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import NumericError, Tape, gradient
from .data import Dataset
from .model import ModelParams, forward_tape, loss_ce

GRAD_ASCENT = "grad_ascent"
HBU = "hbu"
SALUN = "salun"
KINDS = (GRAD_ASCENT, HBU, SALUN)


class UnsupportedObjective(ValueError):
    pass


class UnlearnDiverged(NumericError):
    """Raised when an iterate goes non-finite; ``params`` is the last finite iterate."""

    def __init__(self, message: str, params: ModelParams, step: int):
        super().__init__(message)
        self.params = params
        self.step = step


class IllConditioned(NumericError):
    def __init__(self, message: str, condition: float):
        super().__init__(message)
        self.condition = condition


class CGNotConverged(NumericError):
    pass


@dataclass(frozen=True)
class UnlearnObjective:
    kind: str = GRAD_ASCENT
    steps: int = 3
    learning_rate: float = 1.0
    damping: float = 1e-2          # HBU
    solver: str = "explicit"       # HBU: "explicit" | "cg"
    cg_max_iters: int = 500
    cg_tol: float = 1e-10
    sparsity: float = 0.5          # SalUn: fraction of coordinates updated

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.kind == HBU:
            if self.damping <= 0:
                raise ValueError("damping must be positive")
            if self.solver not in ("explicit", "cg"):
                raise ValueError(f"unknown solver {self.solver!r}")
        if self.kind == SALUN and not 0 < self.sparsity < 1:
            raise ValueError("sparsity must lie in (0, 1)")

    @property
    def gradient_defined(self) -> bool:
        return self.kind in (GRAD_ASCENT, SALUN)


def unlearn_loss_tape(objective: UnlearnObjective, tape: Tape, param_ids, x_id: int, y) -> int:
    """Record L_u = -mean CE on the tape."""
    if not objective.gradient_defined:
        raise UnsupportedObjective(f"{objective.kind} has no pointwise unlearning loss")
    ce = loss_ce(tape, forward_tape(tape, param_ids, x_id), y)
    return tape.apply("scale", ce, c=-1.0)


def flat_param_grad(tape: Tape, loss_id: int, param_ids, create_graph: bool = False) -> int:
    """Concatenate d(loss)/d(params) in layer order into one vector node."""
    grads = gradient(tape, loss_id, param_ids, create_graph=create_graph)
    return tape.apply("concat", *[tape.apply("reshape", g, shape=(-1,)) for g in grads])


def unlearn_grad(objective: UnlearnObjective, params: ModelParams, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Flat gradient of L_u over (X, y) at ``params``."""
    if not objective.gradient_defined:
        raise UnsupportedObjective(f"{objective.kind} has no pointwise unlearning gradient")
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    tape = Tape()
    ids = [tape.leaf(a, requires_grad=True) for a in params.arrays()]
    loss = unlearn_loss_tape(objective, tape, ids, tape.const(X), y)
    return tape.value(flat_param_grad(tape, loss, ids)).copy()


def _masked_ascent(params: ModelParams, objective: UnlearnObjective, data: Dataset,
                   mask: np.ndarray | None) -> ModelParams:
    if len(data) == 0:
        raise ValueError("erased set is empty")
    theta = params.flat()
    current = params
    for step in range(objective.steps):
        g = unlearn_grad(objective, current, data.X, data.y)
        update = objective.learning_rate * g
        if mask is not None:
            update = np.where(mask, update, 0.0)
        nxt = theta - update
        if not np.all(np.isfinite(nxt)):
            raise UnlearnDiverged(f"non-finite parameters at step {step}", current, step)
        theta = nxt
        current = params.with_flat(theta)
    return current


def unlearn_ga(params: ModelParams, erased: Dataset, objective: UnlearnObjective) -> ModelParams:
    """``steps`` iterations of theta <- theta - lr * grad L_u on the erased set."""
    if objective.kind != GRAD_ASCENT:
        raise UnsupportedObjective("unlearn_ga needs a grad_ascent objective")
    return _masked_ascent(params, objective, erased, None)


def saliency_mask(params: ModelParams, erased: Dataset, sparsity: float) -> np.ndarray:
    """Boolean mask of coordinates whose |d CE/d theta| is in the top ``sparsity`` fraction."""
    ce_grad = -unlearn_grad(UnlearnObjective(GRAD_ASCENT), params, erased.X, erased.y)
    k = int(np.floor(sparsity * ce_grad.size))
    if k == 0:
        raise ValueError("sparsity selects no coordinates")
    mag = np.abs(ce_grad)
    threshold = np.partition(mag, mag.size - k)[mag.size - k]
    mask = mag >= threshold
    if not mask.any():
        raise ValueError("empty saliency mask")
    return mask


def unlearn_salun(params: ModelParams, erased: Dataset, objective: UnlearnObjective) -> ModelParams:
    if objective.kind != SALUN:
        raise UnsupportedObjective("unlearn_salun needs a salun objective")
    mask = saliency_mask(params, erased, objective.sparsity)
    return _masked_ascent(params, objective, erased, mask)


# --- influence-function removal -------------------------------------------------


def conjugate_gradient(matvec: Callable[[np.ndarray], np.ndarray], b: np.ndarray,
                       max_iters: int, tol: float) -> np.ndarray:
    """Solve A x = b for symmetric positive definite A given only ``matvec``."""
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = r @ r
    b_norm = np.sqrt(b @ b)
    if b_norm == 0.0:
        return x
    for _ in range(max_iters):
        Ap = matvec(p)
        curvature = p @ Ap
        if curvature <= 0:
            raise CGNotConverged("system is not positive definite along a search direction")
        step = rs / curvature
        x += step * p
        r -= step * Ap
        rs_new = r @ r
        if np.sqrt(rs_new) <= tol * b_norm:
            return x
        p = r + (rs_new / rs) * p
        rs = rs_new
    raise CGNotConverged(f"no convergence within {max_iters} iterations "
                         f"(residual {np.sqrt(rs):.3e})")


def influence_removal(theta: np.ndarray, erased_grad_sum: np.ndarray,
                      hvp: Callable[[np.ndarray], np.ndarray], n_remaining: int,
                      damping: float, solver: str = "explicit",
                      cg_max_iters: int = 500, cg_tol: float = 1e-10,
                      max_condition: float = 1e12) -> np.ndarray:
    """theta + (H + damping I)^-1 erased_grad_sum / n_remaining.

    ``hvp(v)`` returns H v for the Hessian H of the mean loss on the remaining data.
    """
    P = theta.size
    if solver == "explicit":
        H = np.column_stack([hvp(e) for e in np.eye(P)])
        A = 0.5 * (H + H.T) + damping * np.eye(P)
        cond = float(np.linalg.cond(A))
        if not np.isfinite(cond) or cond > max_condition:
            raise IllConditioned(f"damped Hessian condition number {cond:.3e}", cond)
        step = np.linalg.solve(A, erased_grad_sum)
    elif solver == "cg":
        step = conjugate_gradient(lambda v: hvp(v) + damping * v, erased_grad_sum,
                                  cg_max_iters, cg_tol)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    return theta + step / n_remaining


class _HessianVectorProduct:
    """H v for mean CE over a dataset; the first-order graph is built once."""

    def __init__(self, params: ModelParams, data: Dataset):
        self.tape = Tape()
        self.ids = [self.tape.leaf(a, requires_grad=True) for a in params.arrays()]
        ce = loss_ce(self.tape, forward_tape(self.tape, self.ids, self.tape.const(data.X)), data.y)
        self.flat_grad = flat_param_grad(self.tape, ce, self.ids, create_graph=True)
        self._mark = len(self.tape)

    def __call__(self, v: np.ndarray) -> np.ndarray:
        tape = self.tape
        s = tape.apply("dot", self.flat_grad, tape.const(v))
        grads = gradient(tape, s, self.ids)
        out = np.concatenate([tape.value(g).ravel() for g in grads])
        # drop the per-call nodes so repeated products do not grow the tape
        del tape.nodes[self._mark:]
        return out


def unlearn_hbu(params: ModelParams, erased: Dataset, objective: UnlearnObjective,
                remaining: Dataset) -> ModelParams:
    """One-shot removal: theta + (H + lambda I)^-1 sum_{z in erased} grad l(z) / |remaining|."""
    if objective.kind != HBU:
        raise UnsupportedObjective("unlearn_hbu needs an hbu objective")
    if len(remaining) == 0 or len(erased) == 0:
        raise ValueError("erased and remaining sets must be nonempty")
    if objective.solver == "explicit" and params.n_params > 5000:
        raise ValueError("explicit Hessian limited to 5,000 parameters; use solver='cg'")
    # sum of per-sample CE gradients == n * mean-CE gradient
    ce_sum = -len(erased) * unlearn_grad(UnlearnObjective(GRAD_ASCENT), params, erased.X, erased.y)
    theta = influence_removal(
        params.flat(), ce_sum, _HessianVectorProduct(params, remaining), len(remaining),
        objective.damping, objective.solver, objective.cg_max_iters, objective.cg_tol)
    return params.with_flat(theta)


def run_unlearning(params: ModelParams, erased: Dataset, objective: UnlearnObjective,
                   remaining: Dataset | None = None) -> ModelParams:
    """Dispatch on ``objective.kind``."""
    if objective.kind == GRAD_ASCENT:
        return unlearn_ga(params, erased, objective)
    if objective.kind == SALUN:
        return unlearn_salun(params, erased, objective)
    if remaining is None:
        raise ValueError("hbu needs the remaining dataset")
    return unlearn_hbu(params, erased, objective, remaining)
