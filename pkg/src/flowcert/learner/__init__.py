"""Learning pipeline: datasets, SOS program assembly, and the alternation."""

from .dataset import (
    DemoTrajectory,
    ScalingRecord,
    TrajectoryDataset,
    ensure_terminal_attractor,
    load_trajectories_csv,
    mse,
    normalize,
    recenter,
    save_trajectories_csv,
    subsample,
)
from .pipeline import (
    LearnConfig,
    LearnError,
    LearnResult,
    PhaseInfeasibleError,
    denormalize,
    learn,
    learn_unconstrained,
    preprocess,
    warm_start,
)

__all__ = [
    "DemoTrajectory",
    "ScalingRecord",
    "TrajectoryDataset",
    "ensure_terminal_attractor",
    "load_trajectories_csv",
    "mse",
    "normalize",
    "recenter",
    "save_trajectories_csv",
    "subsample",
    "LearnConfig",
    "LearnError",
    "LearnResult",
    "PhaseInfeasibleError",
    "denormalize",
    "learn",
    "learn_unconstrained",
    "preprocess",
    "warm_start",
]
