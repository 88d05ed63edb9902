from .config import ConfigError, ExperimentConfig, dump_config, load_config, parse_config
from .report import COLUMNS, read_json_report, write_report
from .scenario import MetricsReport, ScenarioArtifacts, run_scenario, run_sweep, sweep_configs

__all__ = [
    "ConfigError", "ExperimentConfig", "dump_config", "load_config", "parse_config",
    "COLUMNS", "read_json_report", "write_report",
    "MetricsReport", "ScenarioArtifacts", "run_scenario", "run_sweep", "sweep_configs",
]
