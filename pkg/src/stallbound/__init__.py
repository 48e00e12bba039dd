"""Stall-duration bounds and joint placement/access optimisation for
erasure-coded video storage."""
from .analysis import (
    BoundReport,
    DomainError,
    Evaluator,
    bound_report,
    chunk_mgf,
    download_mgf,
    file_service_mgf,
    h_ij,
    mean_stall_bound,
    server_loads,
    t_domain_max,
    tail_bound,
    weighted_objective,
)
from .model import (
    AuxVars,
    ConfigError,
    InfeasibleError,
    ServerParams,
    SystemConfig,
    VideoFile,
    load_config,
    loads_config,
    project_access,
    save_config,
    validate_config,
)
from .optimizer import SolverSettings, SolveTrace, alternate, objective_gradient, trace_frontier

__version__ = "0.1.0"
