"""Configuration, contraction-rate harness and command-line interface."""
from .config import ConfigError, load_config
from .rates import RateTable, cmd_rates, log_log_slope, ols_slope

__all__ = ["ConfigError", "RateTable", "cmd_rates", "load_config", "log_log_slope", "ols_slope"]
