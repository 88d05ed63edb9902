import csv
import math

import numpy as np
import pytest

from unlearn_audit.harness import (COLUMNS, ConfigError, ExperimentConfig, MetricsReport, dump_config,
                                   parse_config, read_json_report, run_scenario, sweep_configs, write_report)
from unlearn_audit.harness.cli import EXIT_CONFIG, EXIT_IO, main
from unlearn_audit.harness.config import phase_seed
from unlearn_audit.harness.scenario import build_split, suppression_oracle, utility_set
from unlearn_audit.verify import FAIL

HEADER = ("scenario,seed,esr,d,objective,behavior,uv,ao,au,rt_train_ms,rt_perturb_ms,"
          "rt_unlearn_ms,rt_verify_ms,decision,alpha,lhs,flags")


@pytest.fixture(scope="module")
def honest():
    return run_scenario(ExperimentConfig())


# --- config ------------------------------------------------------------------------

def test_parse_config_basic():
    cfg = parse_config("# comment\nseed = 7\nlayers = 8, 16, 10  # trailing\nbeta_override = none\nd=0.1\n")
    assert cfg.seed == 7 and cfg.layers == (8, 16, 10) and cfg.beta_override is None and cfg.d == 0.1


def test_parse_config_errors():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("colour = red\n")
    with pytest.raises(ConfigError):
        parse_config("seed 7\n")
    with pytest.raises(ConfigError):
        parse_config("seed = seven\n")
    with pytest.raises(ConfigError):
        parse_config("behavior = lazy\n")
    with pytest.raises(ConfigError):
        parse_config("m = 10\nesr = 2\n")


def test_dump_parse_round_trip():
    cfg = ExperimentConfig(seed=3, d=0.2, sweep_axis="esr", sweep_grid=(0.01, 0.02), beta_override=0.8)
    assert parse_config(dump_config(cfg)) == cfg


def test_phase_seeds_are_independent():
    seeds = {phase_seed(0, p) for p in range(6)}
    assert len(seeds) == 6 and phase_seed(1, 0) != phase_seed(0, 0)


# --- reports -------------------------------------------------------------------------

def _report(**kw):
    base = dict(scenario="s", seed=1, esr=0.02, d=0.3, objective="grad_ascent", behavior="honest",
                uv=0.5, ao=1.0, au=0.9, decision=FAIL, alpha=0.5, lhs=-1.25, flags=["x", "y"])
    base.update(kw)
    return MetricsReport(**base)


def test_csv_columns_and_sizes(tmp_path):
    assert ",".join(COLUMNS) == HEADER
    write_report([], tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == HEADER + "\n"
    write_report([_report()], tmp_path / "one.csv")
    lines = (tmp_path / "one.csv").read_text().splitlines()
    assert len(lines) == 2
    row = next(csv.DictReader(open(tmp_path / "one.csv")))
    assert row["flags"] == "x;y" and float(row["lhs"]) == -1.25 and row["rt_train_ms"] == "0.000"


def test_json_round_trip(tmp_path):
    reps = [_report(), _report(seed=2, rt_ms={"train": 1.5, "perturb": 2.0, "unlearn": 0.0, "verify": 3.25})]
    write_report(reps, tmp_path / "r.json", fmt="json")
    assert read_json_report(tmp_path / "r.json") == reps


def test_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        write_report([], tmp_path / "x", fmt="xml")


# --- scenarios -----------------------------------------------------------------------

def test_honest_reference_scenario(honest):
    rep, art = honest
    assert rep.decision in ("reject_H0", "fail_to_reject")
    assert 0 <= rep.uv <= 1 and 0 <= rep.ao <= 1 and 0 <= rep.au <= 1
    assert all(v >= 0 for v in rep.rt_ms.values()) and set(rep.rt_ms) == {"train", "perturb", "unlearn", "verify"}
    assert art.targets.m == 50 and len(art.verification.records) == 50
    # reference seed 0 recorded run
    assert rep.decision == "reject_H0" and rep.uv >= 0.8


def test_utility_set_excludes_targets(honest):
    _, art = honest
    util = utility_set(art.split, art.targets)
    assert len(util) == len(art.split.heldout) - art.targets.m


def test_noop_and_finetune_fail_to_reject():
    for behavior in ("noop", "finetune"):
        rep, _ = run_scenario(ExperimentConfig(behavior=behavior))
        assert rep.decision == "fail_to_reject" and rep.uv <= 0.2


def test_suppression_cannot_imitate_unlearning():
    rep, art = run_scenario(ExperimentConfig(behavior="suppression"))
    assert rep.decision == "fail_to_reject"
    oracle = suppression_oracle(art.trained, art.request.perturbed.X)
    assert oracle(art.request.perturbed.X[0]) is None
    assert oracle(art.targets.X[0]) is not None


def test_honest_mix_runs():
    rep, _ = run_scenario(ExperimentConfig(behavior="honest_mix", mix_ratio=1.0))
    assert rep.decision in ("reject_H0", "fail_to_reject") and not any(f.startswith("error") for f in rep.flags)


def test_failures_are_flagged_not_raised():
    rep, _ = run_scenario(ExperimentConfig(conf_threshold=0.99999999, m=200))
    assert rep.decision == "error" and rep.flags and rep.flags[0].startswith("insufficient_targets")


def test_scenario_determinism(tmp_path):
    cfg = ExperimentConfig(seed=5)
    a, b = run_scenario(cfg)[0], run_scenario(cfg)[0]
    a.rt_ms = b.rt_ms = {}
    assert a == b or (math.isnan(a.lhs) and math.isnan(b.lhs))


def test_sweep_configs_dedupe_and_seeds():
    cfgs = sweep_configs(ExperimentConfig(seed=6), "d", (0.1, 0.2, 0.1, 0.3))
    assert [c.d for c in cfgs] == [0.1, 0.2, 0.3]
    assert [c.seed for c in cfgs] == [6 ^ 0, 6 ^ 1, 6 ^ 2]
    assert len(sweep_configs(ExperimentConfig(), "esr", (0.01, 0.02, 0.03, 0.04, 0.05))) == 5
    with pytest.raises(ValueError):
        sweep_configs(ExperimentConfig(), "esr", ())


def test_split_reused_across_configs():
    a = build_split(ExperimentConfig(seed=2))
    b = build_split(ExperimentConfig(seed=2, m=40, d=0.1))
    assert np.array_equal(a.erased_idx, b.erased_idx)


# --- CLI ---------------------------------------------------------------------------------

def test_cli_pipeline(tmp_path):
    cfg = tmp_path / "ref.cfg"
    cfg.write_text(dump_config(ExperimentConfig()))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "m.evec")]) == 0
    assert main(["perturb", "--config", str(cfg), "--ckpt", str(tmp_path / "m.evec"),
                 "--out-dir", str(tmp_path / "req")]) == 0
    assert (tmp_path / "req" / "perturbed.csv").exists() and (tmp_path / "req" / "targets.npz").exists()
    assert main(["unlearn", "--config", str(cfg), "--ckpt", str(tmp_path / "m.evec"),
                 "--request", str(tmp_path / "req"), "--out", str(tmp_path / "u.evec")]) == 0
    assert main(["verify", "--config", str(cfg), "--ckpt", str(tmp_path / "u.evec"),
                 "--targets", str(tmp_path / "req" / "targets.npz"), "--json", str(tmp_path / "v.json")]) == 0
    assert '"decision": "reject_H0"' in (tmp_path / "v.json").read_text()
    assert main(["run", "--config", str(cfg), "--report", str(tmp_path / "r.csv")]) == 0
    assert (tmp_path / "r.csv").read_text().startswith(HEADER)


def test_cli_sweep_and_exit_codes(tmp_path):
    cfg = tmp_path / "ref.cfg"
    cfg.write_text("n = 20\n")
    assert main(["sweep", "--config", str(cfg), "--axis", "d", "--grid", "0,0.3", "--report",
                 str(tmp_path / "s.csv")]) == 0
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 3
    assert main(["sweep", "--config", str(cfg), "--axis", "d", "--grid", ",", "--report",
                 str(tmp_path / "s.csv")]) == EXIT_CONFIG
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense = 1\n")
    assert main(["run", "--config", str(bad), "--report", str(tmp_path / "x.csv")]) == EXIT_CONFIG
    assert main(["run", "--config", str(tmp_path / "missing.cfg"), "--report", "x"]) == EXIT_IO
    (tmp_path / "junk.evec").write_bytes(b"nope")
    assert main(["verify", "--config", str(cfg), "--ckpt", str(tmp_path / "junk.evec"),
                 "--targets", "t.npz", "--json", "v.json"]) == EXIT_IO
