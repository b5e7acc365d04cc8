"""Neural ODE processes for network dynamics.

Simulate families of ODE dynamics on graphs, sample sparse and noisy
observations, train a stochastic-process model across many dynamics
instances, and predict full trajectories for unseen instances from a
handful of observations.
"""

__version__ = "0.1.0"

from .dynamics import DynamicsParams, SolverConfig, Trajectory, integrate, rhs
from .errors import (
    ConfigError,
    DataFormatError,
    IntegrationError,
    NDP4NDError,
    NumericalError,
    ParameterError,
)
from .graph import Topology, TopologySpec, generate_topology, in_degree, load_edge_list
from .metrics import dtw_exact, fastdtw, mae, observed_ratio, trajectory_dtw
from .model import (
    ModelConfig,
    NDP4NDModel,
    PredictiveDistribution,
    TrainSettings,
    fit,
    load_model,
    moment_match,
    predict_grid,
    save_model,
)
from .taskgen import (
    Observation,
    ObservationSet,
    ScenarioSpec,
    TrajectoryTask,
    sample_observations,
    sample_task,
    scenario_preset,
    snapshots,
    split_context_target,
)

__all__ = [
    "__version__",
    "ConfigError", "DataFormatError", "IntegrationError", "NDP4NDError",
    "NumericalError", "ParameterError",
    "Topology", "TopologySpec", "generate_topology", "in_degree", "load_edge_list",
    "DynamicsParams", "SolverConfig", "Trajectory", "integrate", "rhs",
    "Observation", "ObservationSet", "ScenarioSpec", "TrajectoryTask",
    "sample_task", "sample_observations", "split_context_target", "snapshots",
    "scenario_preset",
    "ModelConfig", "NDP4NDModel", "PredictiveDistribution", "TrainSettings",
    "fit", "predict_grid", "moment_match", "save_model", "load_model",
    "mae", "dtw_exact", "fastdtw", "trajectory_dtw", "observed_ratio",
]
