"""Multi-task learning benchmark engine for radio-access-network tasks."""

from .autodiff import Graph, Trace, AdamState, adam_step
from .harness import ExperimentConfig, MetricsReport, sweep_design_space, run_experiment
from .models import ArchitectureConfig, MTLModel, count_params
from .scenario import PRESETS, ScenarioConfig, build_datasets
from .topology import TopologyConfig, TrainConfig, run_topology
from .weighting import Weighting

__version__ = "0.1.0"
