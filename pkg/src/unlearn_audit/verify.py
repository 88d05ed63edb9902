"""Black-box querying of the released model and the one-sided misprediction t-test."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .data import MIN_TARGETS, TargetSet
from .model import ModelParams, predict
from .tdist import t_quantile

REJECT = "reject_H0"
FAIL = "fail_to_reject"

# An oracle maps one feature row to a predicted class, or None when it refuses to answer.
Oracle = Callable[[np.ndarray], Optional[int]]


class CLTPreconditionError(ValueError):
    """Fewer than 30 answered queries: the normal approximation is not justified."""


class VerificationInconclusive(RuntimeError):
    def __init__(self, message: str, answered: int):
        super().__init__(message)
        self.answered = answered


@dataclass(frozen=True)
class QueryOutcome:
    results: tuple[int, ...]       # 1 = misprediction
    predicted: tuple[Optional[int], ...]
    refused: tuple[int, ...]       # indices the oracle declined to answer

    @property
    def m(self) -> int:
        return len(self.results)

    @property
    def alpha(self) -> float:
        return sum(self.results) / self.m


@dataclass(frozen=True)
class HypothesisTestResult:
    alpha: float
    beta: float
    m: int
    tau: float
    t_quantile: float
    lhs: float
    decision: str
    degenerate: str = "none"       # "none" | "alpha_one" | "alpha_zero"

    @property
    def rejected(self) -> bool:
        return self.decision == REJECT


@dataclass(frozen=True)
class TargetRecord:
    index: int
    predicted: Optional[int]
    y_t: int
    y_wrong: int
    hit_wrong: bool


@dataclass(frozen=True)
class VerificationReport:
    test: HypothesisTestResult
    uv: float
    records: tuple[TargetRecord, ...] = field(default=())

    def to_json(self) -> str:
        payload = {"test": asdict(self.test), "uv": self.uv,
                   "records": [asdict(r) for r in self.records]}
        # json writes floats with repr, i.e. round-trip precision
        return json.dumps(payload, indent=2)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "VerificationReport":
        raw = json.loads(text)
        return cls(HypothesisTestResult(**raw["test"]), raw["uv"],
                   tuple(TargetRecord(**r) for r in raw["records"]))


def query_targets(oracle: Oracle, targets: TargetSet) -> QueryOutcome:
    """Ask the oracle about every target; refusals are dropped, not scored."""
    results, predicted, refused = [], [], []
    for i, (x, y) in enumerate(zip(targets.X, targets.y_true)):
        answer = oracle(x)
        predicted.append(answer)
        if answer is None:
            refused.append(i)
            continue
        results.append(int(int(answer) != int(y)))
    if len(results) < MIN_TARGETS:
        raise VerificationInconclusive(
            f"only {len(results)} of {targets.m} queries answered; need {MIN_TARGETS}", len(results))
    return QueryOutcome(tuple(results), tuple(predicted), tuple(refused))


def decide(alpha: float, m: int, n_classes: int, tau: float = 0.05,
           beta_override: float | None = None) -> HypothesisTestResult:
    """Reject "not unlearned" when sqrt(m-1)(alpha-beta) - sqrt(alpha-alpha^2) t_tau > 0."""
    if m < MIN_TARGETS:
        raise CLTPreconditionError(f"m = {m} < {MIN_TARGETS}")
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    beta = (n_classes - 1) / n_classes if beta_override is None else float(beta_override)
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    t_tau = t_quantile(tau, m - 1)
    lhs = math.sqrt(m - 1) * (alpha - beta) - math.sqrt(max(alpha - alpha * alpha, 0.0)) * t_tau
    degenerate = "none"
    if alpha == 1.0:
        # s -> 0, statistic -> +inf when alpha > beta
        degenerate = "alpha_one"
        decision = REJECT if alpha > beta else FAIL
    elif alpha == 0.0:
        degenerate = "alpha_zero"
        decision = FAIL
    else:
        decision = REJECT if lhs > 0 else FAIL
    return HypothesisTestResult(alpha, beta, m, tau, t_tau, lhs, decision, degenerate)


def model_oracle(params: ModelParams) -> Oracle:
    def ask(x: np.ndarray) -> int:
        return predict(params, x)[0]

    return ask


def verify(oracle: Oracle, targets: TargetSet, n_classes: int, tau: float = 0.05,
           beta_override: float | None = None) -> VerificationReport:
    outcome = query_targets(oracle, targets)
    test = decide(outcome.alpha, outcome.m, n_classes, tau, beta_override)
    records = tuple(
        TargetRecord(i, None if p is None else int(p), int(yt), int(yw),
                     p is not None and int(p) == int(yw))
        for i, (p, yt, yw) in enumerate(zip(outcome.predicted, targets.y_true, targets.y_wrong))
    )
    return VerificationReport(test, outcome.alpha, records)
