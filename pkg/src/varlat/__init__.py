"""Latency-variance profiling, variance-aware lock scheduling and a transaction simulator."""

__version__ = "0.1.0"

from .collector import Collector, ProfileSet
from .lockmgr import LockManager, LockMode, SchedulerPolicy
from .metrics import lp_norm, percentile
from .sim import SimResult, run_sim
from .vartree import SelectionParams, build_tree, select_factors
from .workload import SimConfig, load_config

__all__ = [
    "Collector", "ProfileSet", "LockManager", "LockMode", "SchedulerPolicy", "lp_norm",
    "percentile", "SimResult", "run_sim", "SelectionParams", "build_tree", "select_factors",
    "SimConfig", "load_config",
]
