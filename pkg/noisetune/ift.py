"""
Linear-Gaussian chain with closed-form sensitivities.

Points in the plane observed by absolute position fixes and relative displacements. The MAP
estimate is the weighted least-squares solution ``x = (A^T W A)^-1 A^T W b`` with
``W = diag(1 / variance)``, and differentiating the optimality condition gives the exact
``dx/dtheta_k = (A^T W A)^-1 A^T (dW/dtheta_k) (b - A x)``. Used to validate the
finite-difference sensitivities of :mod:`noisetune.learner`.

Theta uses the same five-channel layout as SE(2) chains; the heading odometry channel has no
rows here, so its sensitivity column is zero.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .graph import NoiseParams
from .learner import sensitivity_matrix


@dataclass(frozen=True, eq=False)
class LinearGaussianChain:
    """``T`` planar points; ``fixes`` is ``(T, 2)`` and ``displacements`` is ``(T - 1, 2)``."""

    fixes: np.ndarray
    displacements: np.ndarray

    def __post_init__(self):
        fixes = np.asarray(self.fixes, dtype=float).reshape(-1, 2)
        displacements = np.asarray(self.displacements, dtype=float).reshape(-1, 2)
        if len(fixes) < 1 or len(displacements) != len(fixes) - 1:
            raise ConfigError("need T position fixes and T - 1 displacements")
        object.__setattr__(self, "fixes", fixes)
        object.__setattr__(self, "displacements", displacements)

    @classmethod
    def simulate(cls, length: int, theta: NoiseParams, seed: int = 0) -> "LinearGaussianChain":
        """Random walk ground truth with measurements drawn at ``theta``."""
        rng = np.random.default_rng(seed)
        truth = np.cumsum(rng.normal(size=(length, 2)), axis=0)
        fixes = truth + rng.normal(size=(length, 2)) * np.sqrt(theta.gps[:2])
        steps = np.diff(truth, axis=0)
        displacements = steps + rng.normal(size=steps.shape) * np.sqrt(theta.odom[:2])
        return cls(fixes, displacements)

    @property
    def length(self) -> int:
        return len(self.fixes)

    def design(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(A, b, channel)``: design matrix, stacked measurements, theta index of every row."""
        t = self.length
        n_rows = 2 * t + 2 * (t - 1)
        a = np.zeros((n_rows, 2 * t))
        b = np.zeros(n_rows)
        channel = np.zeros(n_rows, dtype=int)
        row = 0
        for i in range(t):
            for d in range(2):
                a[row, 2 * i + d] = 1.0
                b[row] = self.fixes[i, d]
                channel[row] = d
                row += 1
        for i in range(t - 1):
            for d in range(2):
                a[row, 2 * (i + 1) + d] = 1.0
                a[row, 2 * i + d] = -1.0
                b[row] = self.displacements[i, d]
                channel[row] = 2 + d
                row += 1
        return a, b, channel

    def _weights(self, theta: NoiseParams, channel: np.ndarray) -> np.ndarray:
        if theta.gps_dim != 2:
            raise ConfigError("the linear chain uses position-mode theta")
        return 1.0 / theta.as_vector()[channel]

    def solve(self, theta: NoiseParams) -> np.ndarray:
        """MAP estimate, flattened ``(2T,)``."""
        a, b, channel = self.design()
        w = self._weights(theta, channel)
        normal = a.T @ (w[:, None] * a)
        return np.linalg.solve(normal, a.T @ (w * b))

    def analytic_sensitivity(self, theta: NoiseParams) -> np.ndarray:
        """Exact ``(2T x 5)`` sensitivity of :meth:`solve`."""
        a, b, channel = self.design()
        vector = theta.as_vector()
        w = self._weights(theta, channel)
        normal = a.T @ (w[:, None] * a)
        x = np.linalg.solve(normal, a.T @ (w * b))
        innovation = b - a @ x
        columns = []
        for k in range(vector.size):
            d_w = np.where(channel == k, -1.0 / vector[k] ** 2, 0.0)
            columns.append(np.linalg.solve(normal, a.T @ (d_w * innovation)))
        return np.column_stack(columns)

    def fd_sensitivity(
        self, theta: NoiseParams, fd_floor: float = 1e-6, fd_rel: float = 1e-4, central: bool = False
    ) -> np.ndarray:
        return sensitivity_matrix(
            theta,
            self.solve,
            difference=lambda upper, lower: upper - lower,
            fd_floor=fd_floor,
            fd_rel=fd_rel,
            central=central,
        )
