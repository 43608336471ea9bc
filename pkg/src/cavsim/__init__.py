"""Multi-lane freeway microsimulation of mixed HV/CAV traffic.

Human drivers follow a psycho-physiological (Wiedemann-99 style)
car-following model; CAVs run an enhanced intelligent driver model with
CACC/ACC gap modes and optional local platoon coordination. The analytics
layer reproduces network productivity, hard-braking, TTC, lane-change and
interaction-state metrics from the recorded trajectories.
"""
from .core import (CaccMode, CaccParams, HvParams, InteractionState,
                   JoinKind, LanePolicy, Platoon, RoadNetwork,
                   ScenarioConfig, Strategy, TrajectoryRecord, VehicleClass,
                   VehicleState, desk_config, kmh_to_ms, load_config,
                   ms_to_kmh, save_config, validate_config)
from .engine import (GapViolationError, RunResult, RunSummary,
                     TrajectoryFrame, run_scenario)

__version__ = "0.1.0"

__all__ = [
    "CaccMode", "CaccParams", "HvParams", "InteractionState", "JoinKind",
    "LanePolicy", "Platoon", "RoadNetwork", "ScenarioConfig", "Strategy",
    "TrajectoryRecord", "VehicleClass", "VehicleState", "desk_config",
    "kmh_to_ms", "load_config", "ms_to_kmh", "save_config",
    "validate_config", "GapViolationError", "RunResult", "RunSummary",
    "TrajectoryFrame", "run_scenario", "__version__",
]
