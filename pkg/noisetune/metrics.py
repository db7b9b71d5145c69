"""Trajectory error metrics."""

from collections.abc import Sequence

import numpy as np

from .errors import ConfigError
from .liegroup import Pose2, wrap_angle


def rmse(estimated: Sequence[Pose2], gt: Sequence[Pose2]) -> tuple[float, float]:
    """``(translation RMSE in m, wrapped heading RMSE in rad)`` over the states."""
    if len(estimated) != len(gt):
        raise ConfigError(f"trajectory lengths differ: {len(estimated)} vs {len(gt)}")
    if not estimated:
        raise ConfigError("cannot compute RMSE of empty trajectories")
    position = np.array([[e.tx - g.tx, e.ty - g.ty] for e, g in zip(estimated, gt)])
    heading = np.array([wrap_angle(e.theta - g.theta) for e, g in zip(estimated, gt)])
    trans = float(np.sqrt(np.mean(np.sum(position**2, axis=1))))
    rot = float(np.sqrt(np.mean(heading**2)))
    return trans, rot


def mean_rmse(pairs: Sequence[tuple[Sequence[Pose2], Sequence[Pose2]]]) -> tuple[float, float]:
    """Average of per-trajectory RMSEs over ``(estimated, gt)`` pairs."""
    values = np.array([rmse(e, g) for e, g in pairs])
    return float(values[:, 0].mean()), float(values[:, 1].mean())
