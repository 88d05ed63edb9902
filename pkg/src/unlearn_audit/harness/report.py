"""CSV / JSON persistence of scenario metrics."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path
from typing import Iterable

from .scenario import MetricsReport

COLUMNS = ("scenario", "seed", "esr", "d", "objective", "behavior", "uv", "ao", "au",
           "rt_train_ms", "rt_perturb_ms", "rt_unlearn_ms", "rt_verify_ms",
           "decision", "alpha", "lhs", "flags")
TIMING_COLUMNS = ("rt_train_ms", "rt_perturb_ms", "rt_unlearn_ms", "rt_verify_ms")


def report_row(r: MetricsReport) -> dict:
    row = {
        "scenario": r.scenario, "seed": r.seed, "esr": repr(float(r.esr)), "d": repr(float(r.d)),
        "objective": r.objective, "behavior": r.behavior,
        "uv": repr(float(r.uv)), "ao": repr(float(r.ao)), "au": repr(float(r.au)),
        "decision": r.decision, "alpha": repr(float(r.alpha)), "lhs": repr(float(r.lhs)),
        "flags": ";".join(r.flags),
    }
    for phase in ("train", "perturb", "unlearn", "verify"):
        row[f"rt_{phase}_ms"] = f"{r.rt_ms.get(phase, 0.0):.3f}"
    return row


def write_report(reports: Iterable[MetricsReport], path: str | Path, fmt: str = "csv") -> None:
    reports = list(reports)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=COLUMNS, lineterminator="\n")
            writer.writeheader()
            for r in reports:
                writer.writerow(report_row(r))
    elif fmt == "json":
        Path(path).write_text(json.dumps([asdict(r) for r in reports], indent=2))
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def read_json_report(path: str | Path) -> list[MetricsReport]:
    return [MetricsReport(**raw) for raw in json.loads(Path(path).read_text())]
