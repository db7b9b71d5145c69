"""
Factor-graph problem definition: pose variables, GPS/odometry/prior factors, the noise
parameter vector theta, residuals, whitening and analytic linearization.

theta holds VARIANCES (the diagonal of each class covariance). Residual channel k is weighted
by ``1 / theta_k``; a finite-difference perturbation adds directly to a variance entry.
"""

import enum
import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GraphError, MissingVariableError
from .liegroup import Pose2, adjoint, compose, inverse, inverse_left_jacobian, log

logger = logging.getLogger(__name__)

EPS_VAR = 1e-8

GPS_MODES = ("position2", "pose3")


# --- Noise parameters ---


@dataclass(frozen=True, eq=False)
class NoiseParams:
    """Per-channel variances shared by every factor of a class.

    Flattening order is ``[gps..., odom...]``; ``gps`` has 2 entries in position mode and 3 in
    pose mode. Entries below ``EPS_VAR`` are projected up to it.
    """

    gps: np.ndarray
    odom: np.ndarray

    def __post_init__(self):
        gps = np.asarray(self.gps, dtype=float).reshape(-1)
        odom = np.asarray(self.odom, dtype=float).reshape(-1)
        if gps.size not in (2, 3):
            raise ConfigError(f"gps variances must have 2 or 3 entries, got {gps.size}")
        if odom.size != 3:
            raise ConfigError(f"odom variances must have 3 entries, got {odom.size}")
        if not (np.all(np.isfinite(gps)) and np.all(np.isfinite(odom))):
            raise ConfigError("noise variances must be finite")
        object.__setattr__(self, "gps", np.maximum(gps, EPS_VAR))
        object.__setattr__(self, "odom", np.maximum(odom, EPS_VAR))

    @classmethod
    def from_vector(cls, values, gps_dim: int = 2) -> "NoiseParams":
        values = np.asarray(values, dtype=float).reshape(-1)
        if values.size != gps_dim + 3:
            raise ConfigError(f"expected {gps_dim + 3} theta entries, got {values.size}")
        return cls(values[:gps_dim], values[gps_dim:])

    @property
    def gps_dim(self) -> int:
        return self.gps.size

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.gps, self.odom])

    def labels(self) -> list[str]:
        return [f"theta_gps{i}" for i in range(self.gps_dim)] + [
            f"theta_odom{i}" for i in range(3)
        ]

    def scaled(self, factor: float) -> "NoiseParams":
        return NoiseParams(self.gps * factor, self.odom * factor)

    def perturbed(self, index: int, step: float) -> "NoiseParams":
        vector = self.as_vector()
        vector[index] += step
        return NoiseParams.from_vector(vector, self.gps_dim)

    def channel(self, kind: "FactorKind") -> np.ndarray:
        """Variances that weight a factor of ``kind``."""
        if kind is FactorKind.GPS:
            return self.gps[:2]
        if kind is FactorKind.GPS_POSE:
            if self.gps_dim != 3:
                raise ConfigError("pose-mode GPS factors need 3 gps variances")
            return self.gps
        return self.odom

    def __repr__(self):
        return f"NoiseParams(gps={self.gps.tolist()}, odom={self.odom.tolist()})"


def project(theta: np.ndarray) -> np.ndarray:
    """Entry-wise ``max(theta, EPS_VAR)``."""
    return np.maximum(np.asarray(theta, dtype=float), EPS_VAR)


# --- Factors ---


class FactorKind(enum.Enum):
    GPS = "gps"  # position-only GPS, 2-D residual
    GPS_POSE = "gps_pose"  # full pose GPS, 3-D residual
    ODOM = "odom"  # between factor on consecutive poses
    PRIOR = "prior"  # unary pose prior weighted by the odom channels

    @property
    def channel_class(self) -> str:
        return "gps" if self in (FactorKind.GPS, FactorKind.GPS_POSE) else "odom"

    @property
    def dim(self) -> int:
        return 2 if self is FactorKind.GPS else 3


@dataclass(frozen=True, eq=False)
class Factor:
    """A measurement potential over one or two poses.

    ``variances`` overrides the class theta for this factor only (toy problems); learning
    never touches it.
    """

    kind: FactorKind
    keys: tuple[int, ...]
    measurement: object
    variances: np.ndarray | None = None

    @classmethod
    def gps(cls, pose_id: int, z, variances=None) -> "Factor":
        z = np.asarray(z, dtype=float).reshape(2)
        return cls(FactorKind.GPS, (pose_id,), z, _override(variances, 2))

    @classmethod
    def gps_pose(cls, pose_id: int, z: Pose2, variances=None) -> "Factor":
        return cls(FactorKind.GPS_POSE, (pose_id,), z, _override(variances, 3))

    @classmethod
    def odom(cls, prev_id: int, next_id: int, z: Pose2, variances=None) -> "Factor":
        return cls(FactorKind.ODOM, (prev_id, next_id), z, _override(variances, 3))

    @classmethod
    def prior(cls, pose_id: int, z: Pose2, variances=None) -> "Factor":
        return cls(FactorKind.PRIOR, (pose_id,), z, _override(variances, 3))

    def weights(self, theta: NoiseParams) -> np.ndarray:
        if self.variances is not None:
            return self.variances
        return theta.channel(self.kind)


def _override(variances, dim):
    if variances is None:
        return None
    variances = np.maximum(np.asarray(variances, dtype=float).reshape(dim), EPS_VAR)
    return variances


def _lookup(states: Mapping[int, Pose2], key: int) -> Pose2:
    try:
        return states[key]
    except (KeyError, IndexError):
        raise MissingVariableError(key) from None


def residual(factor: Factor, states: Mapping[int, Pose2]) -> np.ndarray:
    """Unwhitened residual of ``factor`` at ``states``."""
    kind = factor.kind
    if kind is FactorKind.GPS:
        x = _lookup(states, factor.keys[0])
        return x.translation - factor.measurement
    if kind is FactorKind.ODOM:
        x_prev = _lookup(states, factor.keys[0])
        x_next = _lookup(states, factor.keys[1])
        relative = compose(inverse(x_prev), x_next)
        return log(compose(inverse(factor.measurement), relative))
    # GPS_POSE and PRIOR: x (-) z
    x = _lookup(states, factor.keys[0])
    return log(compose(x, inverse(factor.measurement)))


def whitened_residual(
    factor: Factor, states: Mapping[int, Pose2], theta: NoiseParams
) -> np.ndarray:
    """Residual divided channel-wise by the standard deviation."""
    return residual(factor, states) / np.sqrt(factor.weights(theta))


def linearize(factor: Factor, states: Mapping[int, Pose2]) -> tuple[list[np.ndarray], np.ndarray]:
    """Analytic Jacobian blocks (one per key, left perturbation ``tau (+) x``) and residual."""
    kind = factor.kind
    r = residual(factor, states)
    if kind is FactorKind.GPS:
        x = _lookup(states, factor.keys[0])
        block = np.array([[1.0, 0.0, -x.ty], [0.0, 1.0, x.tx]])
        return [block], r
    if kind is FactorKind.ODOM:
        x_prev = _lookup(states, factor.keys[0])
        j_next = inverse_left_jacobian(r) @ adjoint(inverse(compose(x_prev, factor.measurement)))
        return [-j_next, j_next], r
    return [inverse_left_jacobian(r)], r


# --- Graph ---


@dataclass(frozen=True, eq=False)
class FactorGraph:
    """Ordered pose variables with initial values plus the factors over them."""

    initial: tuple[Pose2, ...]
    factors: tuple[Factor, ...]
    gps_mode: str = "position2"
    strict: bool = field(default=True, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "initial", tuple(self.initial))
        object.__setattr__(self, "factors", tuple(self.factors))
        if self.gps_mode not in GPS_MODES:
            raise ConfigError(f"unknown gps_mode {self.gps_mode!r}")
        self.validate(strict=self.strict)

    @property
    def num_poses(self) -> int:
        return len(self.initial)

    def states(self) -> dict[int, Pose2]:
        return dict(enumerate(self.initial))

    @classmethod
    def from_measurements(
        cls,
        initial: Sequence[Pose2],
        gps: Sequence,
        odom: Sequence[Pose2],
        gps_mode: str = "position2",
    ) -> "FactorGraph":
        """Chain graph: one GPS factor per pose, one odometry factor per consecutive pair."""
        return cls(initial, chain_factors(gps, odom, gps_mode), gps_mode)

    def validate(self, strict: bool = True) -> None:
        """Check ids and connectivity; ``strict`` also enforces the GPS+odometry chain topology."""
        n = self.num_poses
        if n == 0:
            raise GraphError("graph has no poses")
        for factor in self.factors:
            for key in factor.keys:
                if not 0 <= key < n:
                    raise MissingVariableError(key)
            if factor.kind is FactorKind.ODOM and factor.keys[1] != factor.keys[0] + 1:
                raise GraphError(f"odometry factor {factor.keys} does not join consecutive poses")
        linked = {f.keys[0] for f in self.factors if f.kind is FactorKind.ODOM}
        if n > 1 and len(linked) != n - 1:
            raise GraphError("graph is not connected: missing odometry links")
        if not strict:
            return
        gps_kind = FactorKind.GPS if self.gps_mode == "position2" else FactorKind.GPS_POSE
        gps_counts = np.zeros(n, dtype=int)
        odom_counts = np.zeros(max(n - 1, 0), dtype=int)
        for factor in self.factors:
            if factor.kind is gps_kind:
                gps_counts[factor.keys[0]] += 1
            elif factor.kind is FactorKind.ODOM:
                odom_counts[factor.keys[0]] += 1
            else:
                raise GraphError(f"{factor.kind.value} factors are not allowed in a chain graph")
        if np.any(gps_counts != 1) or np.any(odom_counts != 1):
            raise GraphError("chain graph needs exactly one GPS per pose and one odometry per pair")


def chain_factors(gps: Sequence, odom: Sequence[Pose2], gps_mode: str = "position2") -> list:
    factors = []
    for i, z in enumerate(gps):
        if gps_mode == "pose3":
            factors.append(Factor.gps_pose(i, z if isinstance(z, Pose2) else Pose2.from_array(z)))
        else:
            factors.append(Factor.gps(i, z))
        if i > 0:
            factors.append(Factor.odom(i - 1, i, odom[i - 1]))
    return factors


def total_objective(
    graph_or_factors: FactorGraph | Iterable[Factor],
    states: Mapping[int, Pose2],
    theta: NoiseParams,
) -> float:
    """``H(x, theta) = 1/2 sum_i ||whitened_residual_i||^2``."""
    factors = (
        graph_or_factors.factors if isinstance(graph_or_factors, FactorGraph) else graph_or_factors
    )
    total = 0.0
    for factor in factors:
        w = whitened_residual(factor, states, theta)
        total += 0.5 * float(w @ w)
    return total


def stack_jacobian(
    factors: Sequence[Factor], states: Mapping[int, Pose2], theta: NoiseParams, num_poses: int
) -> tuple[np.ndarray, np.ndarray]:
    """Dense whitened Jacobian and residual of all factors (diagnostics and test oracles)."""
    rows = sum(f.kind.dim for f in factors)
    jac = np.zeros((rows, 3 * num_poses))
    res = np.zeros(rows)
    row = 0
    for factor in factors:
        blocks, r = linearize(factor, states)
        scale = 1.0 / np.sqrt(factor.weights(theta))
        d = r.size
        for key, block in zip(factor.keys, blocks):
            jac[row : row + d, 3 * key : 3 * key + 3] = scale[:, None] * block
        res[row : row + d] = scale * r
        row += d
    return jac, res
