"""Command line entry point: ``unlearn-audit <command> ...``.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..autodiff import NumericError
from ..data import DataFormatError, InsufficientTargets, TargetSet
from ..model import CheckpointFormatError, load_checkpoint, save_checkpoint
from ..perturb import load_request, perturb
from ..unlearn import run_unlearning
from ..verify import VerificationInconclusive, model_oracle, verify
from .config import ConfigError, load_config
from .report import write_report
from .scenario import build_split, pick_targets, run_scenario, run_sweep, train_model

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("unlearn_audit")


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    params = train_model(cfg, build_split(cfg))
    save_checkpoint(params, args.out)
    log.info("saved %d parameters to %s", params.n_params, args.out)
    return EXIT_OK


def _cmd_perturb(args) -> int:
    cfg = load_config(args.config)
    params = load_checkpoint(args.ckpt)
    sp = build_split(cfg)
    targets = pick_targets(cfg, params, sp)
    req = perturb(params, sp.erased, targets, cfg.perturb_config(), cfg.unlearn_objective())
    out = Path(args.out_dir)
    req.save(out, cfg.perturb_config())
    targets.save(out / "targets.npz")
    log.info("best phi %.6f, request in %s", req.best_phi, out)
    return EXIT_OK


def _cmd_unlearn(args) -> int:
    cfg = load_config(args.config)
    params = load_checkpoint(args.ckpt)
    request, _ = load_request(args.request)
    remaining = build_split(cfg).remaining
    released = run_unlearning(params, request, cfg.unlearn_objective(), remaining)
    save_checkpoint(released, args.out)
    return EXIT_OK


def _cmd_verify(args) -> int:
    cfg = load_config(args.config)
    params = load_checkpoint(args.ckpt)
    report = verify(model_oracle(params), TargetSet.load(args.targets), cfg.n_classes,
                    cfg.tau, cfg.beta_override)
    report.save(args.json)
    print(f"{report.test.decision} alpha={report.test.alpha:.4f} lhs={report.test.lhs:.4f}")
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    report, _ = run_scenario(cfg)
    write_report([report], args.report)
    print(f"{report.decision} uv={report.uv:.4f} ao={report.ao:.4f} au={report.au:.4f}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    try:
        grid = tuple(float(v) for v in args.grid.split(",") if v.strip())
        reports = run_sweep(cfg, args.axis, grid)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    write_report(reports, args.report)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unlearn-audit",
                                description="Verify machine unlearning with perturbed erasure requests.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train the reference model")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("perturb", help="select targets and craft the perturbed erasure request")
    s.add_argument("--config", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=_cmd_perturb)

    s = sub.add_parser("unlearn", help="run the configured unlearning objective on a request")
    s.add_argument("--config", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--request", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_unlearn)

    s = sub.add_parser("verify", help="query a model on the targets and run the t-test")
    s.add_argument("--config", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--targets", required=True)
    s.add_argument("--json", required=True)
    s.set_defaults(func=_cmd_verify)

    s = sub.add_parser("run", help="run one end-to-end scenario")
    s.add_argument("--config", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(func=_cmd_run)

    s = sub.add_parser("sweep", help="sweep esr or d")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", required=True, choices=("esr", "d"))
    s.add_argument("--grid", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(func=_cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, VerificationInconclusive, InsufficientTargets) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointFormatError, DataFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
