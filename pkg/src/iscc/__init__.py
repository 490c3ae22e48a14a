"""Integrated sensing, communication and computation scheduling for NR-V2X
sidelink vehicles with an edge server, plus learned and greedy schedulers."""
from .config import ConfigError, RngStreams, SimConfig, load_config, save_config
from .env import ActionVector, IsccEnv

__all__ = ["ActionVector", "ConfigError", "IsccEnv", "RngStreams", "SimConfig", "load_config",
           "save_config"]
__version__ = "0.1.0"
