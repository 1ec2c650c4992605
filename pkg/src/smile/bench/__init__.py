from .config import ConfigError, ExperimentConfig, config_from_dict, load_config
from .runner import GridRow, RunResult, run_experiment, write_results, write_trace
