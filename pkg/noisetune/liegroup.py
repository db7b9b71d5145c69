"""
SE(2) group operations for planar robot poses.

Poses are immutable ``Pose2`` values with the heading wrapped to (-pi, pi]. Tangent vectors are
plain length-3 numpy arrays ordered ``(rho_x, rho_y, phi)``.

Perturbations use the left (global) convention throughout the package:

    tau (+) Y = Exp(tau) o Y
    Y1 (-) Y2 = Log(Y1 o Y2^-1)

The smoother, the factor Jacobians, the noise injection of the data generator and the
finite-difference sensitivities all share these two operators.
"""

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

# Below this |phi| the closed forms of V(phi) and its inverse switch to Taylor series.
TAYLOR_THRESHOLD = 1e-9
# phi - sin(phi) cancels below this; the left Jacobian uses its series instead.
SERIES_THRESHOLD = 1e-2
DEFAULT_STEP = 1e-6


def wrap_angle(angle: float) -> float:
    """Wrap ``angle`` to the half-open interval (-pi, pi]."""
    if -math.pi < angle <= math.pi:
        return angle
    wrapped = math.pi - math.fmod(math.pi - angle, 2.0 * math.pi)
    if wrapped > math.pi:
        wrapped -= 2.0 * math.pi
    elif wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True, slots=True)
class Pose2:
    """Planar pose: position in meters, heading in radians."""

    tx: float
    ty: float
    theta: float

    def __post_init__(self):
        if not (math.isfinite(self.tx) and math.isfinite(self.ty) and math.isfinite(self.theta)):
            raise ValueError(f"non-finite pose ({self.tx}, {self.ty}, {self.theta})")
        object.__setattr__(self, "tx", float(self.tx))
        object.__setattr__(self, "ty", float(self.ty))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @classmethod
    def identity(cls) -> "Pose2":
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, values) -> "Pose2":
        tx, ty, theta = (float(v) for v in values)
        return cls(tx, ty, theta)

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty])

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def matrix(self) -> np.ndarray:
        """3x3 homogeneous transform."""
        out = np.eye(3)
        out[:2, :2] = self.rotation()
        out[:2, 2] = self.translation
        return out

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.theta])

    def __matmul__(self, other: "Pose2") -> "Pose2":
        return compose(self, other)


def tangent(rho_x: float, rho_y: float, phi: float) -> np.ndarray:
    """Build a tangent vector, rejecting non-finite components."""
    tau = np.array([rho_x, rho_y, phi], dtype=float)
    if not np.all(np.isfinite(tau)):
        raise ValueError(f"non-finite tangent vector {tau}")
    return tau


def compose(a: Pose2, b: Pose2) -> Pose2:
    """Group composition ``a o b``."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(
        a.tx + c * b.tx - s * b.ty,
        a.ty + s * b.tx + c * b.ty,
        a.theta + b.theta,
    )


def inverse(p: Pose2) -> Pose2:
    """Group inverse ``(-R(-theta) t, -theta)``."""
    c, s = math.cos(p.theta), math.sin(p.theta)
    return Pose2(-(c * p.tx + s * p.ty), -(-s * p.tx + c * p.ty), -p.theta)


def _v_coefficients(phi: float) -> tuple[float, float]:
    """``(sin(phi)/phi, (1 - cos(phi))/phi)``, the entries of V(phi)."""
    if abs(phi) < TAYLOR_THRESHOLD:
        return 1.0 - phi * phi / 6.0, phi / 2.0
    # 1 - cos(phi) = 2 sin^2(phi/2) keeps full precision for small phi.
    half = math.sin(0.5 * phi)
    return math.sin(phi) / phi, 2.0 * half * half / phi


def _second_order_coefficients(phi: float) -> tuple[float, float]:
    """``((phi - sin(phi))/phi^2, (1 - cos(phi))/phi^2)``, with a series near zero."""
    if abs(phi) < SERIES_THRESHOLD:
        phi2 = phi * phi
        phi4 = phi2 * phi2
        return (
            phi * (1.0 / 6.0 - phi2 / 120.0 + phi4 / 5040.0),
            0.5 - phi2 / 24.0 + phi4 / 720.0,
        )
    half = math.sin(0.5 * phi)
    return (phi - math.sin(phi)) / (phi * phi), 2.0 * half * half / (phi * phi)


def v_matrix(phi: float) -> np.ndarray:
    """Translation part of the SE(2) left Jacobian, ``[[a, -b], [b, a]]``."""
    a, b = _v_coefficients(phi)
    return np.array([[a, -b], [b, a]])


def v_inverse(phi: float) -> np.ndarray:
    a, b = _v_coefficients(phi)
    det = a * a + b * b
    return np.array([[a, b], [-b, a]]) / det


def exp(tau) -> Pose2:
    """Exact SE(2) exponential of ``(rho_x, rho_y, phi)``."""
    rho_x, rho_y, phi = (float(v) for v in tau)
    a, b = _v_coefficients(phi)
    return Pose2(a * rho_x - b * rho_y, b * rho_x + a * rho_y, phi)


def log(p: Pose2) -> np.ndarray:
    """SE(2) logarithm, the inverse of :func:`exp` for |theta| <= pi."""
    phi = p.theta
    if math.pi - abs(phi) < 1e-9:
        # V^-1 stays finite on SE(2) (det V = 4/pi^2 at pi) but the heading sign is ambiguous.
        logger.warning("log: heading %.12f is within 1e-9 of pi; result is ill-conditioned", phi)
    a, b = _v_coefficients(phi)
    det = a * a + b * b
    rho_x = (a * p.tx + b * p.ty) / det
    rho_y = (-b * p.tx + a * p.ty) / det
    return np.array([rho_x, rho_y, phi])


def oplus(tau, y: Pose2) -> Pose2:
    """Left plus: ``Exp(tau) o y``."""
    return compose(exp(tau), y)


def ominus(y1: Pose2, y2: Pose2) -> np.ndarray:
    """Left minus: ``Log(y1 o y2^-1)``."""
    return log(compose(y1, inverse(y2)))


def adjoint(p: Pose2) -> np.ndarray:
    """Adjoint matrix acting on ``(rho, phi)`` tangents: ``Exp(Ad_p tau) = p Exp(tau) p^-1``."""
    out = np.eye(3)
    out[:2, :2] = p.rotation()
    out[0, 2] = p.ty
    out[1, 2] = -p.tx
    return out


def left_jacobian(tau) -> np.ndarray:
    """SE(2) left Jacobian: ``Exp(tau + d) ~= Exp(J_l(tau) d) o Exp(tau)``."""
    rho_x, rho_y, phi = (float(v) for v in tau)
    a, b = _v_coefficients(phi)
    out = np.eye(3)
    out[:2, :2] = [[a, -b], [b, a]]
    p, q = _second_order_coefficients(phi)
    out[0, 2] = p * rho_x + q * rho_y
    out[1, 2] = -q * rho_x + p * rho_y
    return out


def inverse_left_jacobian(tau) -> np.ndarray:
    return np.linalg.inv(left_jacobian(tau))


def _perturb(at, step_vector):
    if isinstance(at, Pose2):
        return oplus(step_vector, at)
    return np.asarray(at, dtype=float) + step_vector


def _difference(a, b) -> np.ndarray:
    if isinstance(a, Pose2):
        return ominus(a, b)
    return np.asarray(a, dtype=float) - np.asarray(b, dtype=float)


def numeric_left_jacobian(
    f: Callable, at, step: float = DEFAULT_STEP, central: bool = False
) -> np.ndarray:
    """Left Jacobian of ``f`` at ``at`` by finite differences.

    ``at`` is either a ``Pose2`` (perturbed as ``step * e_j (+) at``) or a vector (perturbed by
    plain addition). ``f`` may return a ``Pose2`` (differences taken with ``(-)``) or a vector.
    Forward differences by default; ``central=True`` is the verification mode.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    dim = 3 if isinstance(at, Pose2) else np.asarray(at).size
    base = f(at)
    columns = []
    for j in range(dim):
        e = np.zeros(dim)
        e[j] = step
        if central:
            column = _difference(f(_perturb(at, e)), f(_perturb(at, -e))) / (2.0 * step)
        else:
            column = _difference(f(_perturb(at, e)), base) / step
        columns.append(np.atleast_1d(column))
    return np.column_stack(columns)
