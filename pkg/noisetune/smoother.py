"""
Inner-loop optimizer: an incremental Gauss-Newton smoother over chain-structured SE(2) factor
graphs, a batch reference solver, MAP extraction and Gaussian posterior sampling.

The incremental solver keeps a square-root information factor R over the natural temporal
ordering. R is block upper-bidiagonal: for a chain, eliminating pose i leaves a conditional on
pose i+1 only, plus a cached "message" factor on pose i+1. Adding a timestep re-eliminates the
suffix of the ordering starting at the oldest variable touched by a new or relinearized factor;
the prefix conditionals and the message entering the suffix are reused unchanged.

Relinearization is fluid: a variable is relinearized (its delta folded into its linearization
point) only when ``max|delta|`` exceeds ``relin_threshold``. Back-substitution is partial
(wildfire): below the re-eliminated suffix it stops as soon as a variable's delta moves by less
than ``wildfire_threshold``. Both magnitudes are taken in the variable's own frame
(``Ad(x^-1) delta``); the stored left delta of a pose far from the origin mixes heading into
translation.

``relin_threshold == 0`` is the exact mode: every cycle is a full Gauss-Newton step with the
batch solver's step halving, so the result matches :func:`solve_batch`.

Estimates are ``delta (+) linearization_point`` with the left plus of :mod:`noisetune.liegroup`.
"""

import logging
import time
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_triangular
from scipy.sparse.linalg import spsolve_triangular

from .errors import (
    ConfigError,
    GraphError,
    NonConvergenceError,
    NonFiniteError,
    RankError,
)
from .graph import (
    Factor,
    FactorGraph,
    NoiseParams,
    linearize,
    total_objective,
    whitened_residual,
)
from .graph import chain_factors as _chain_factors
from .liegroup import Pose2, adjoint, compose, inverse, oplus

logger = logging.getLogger(__name__)

# Local deltas at or below this count as converged when relin_threshold is 0.
_CONVERGED = 1e-12
_PIVOT_TOL = 1e-10

BATCH_MAX_ITERATIONS = 100
BATCH_TOL = 1e-10
BATCH_MAX_HALVINGS = 20


@dataclass(frozen=True)
class SmootherConfig:
    relin_threshold: float = 0.1
    # None: min(relin_threshold, 1e-3), so relin_threshold == 0 gives exact back-substitution.
    wildfire_threshold: float | None = None
    max_iterations: int = 4

    def __post_init__(self):
        if self.relin_threshold < 0:
            raise ConfigError(f"relin_threshold must be >= 0, got {self.relin_threshold}")
        if self.wildfire_threshold is not None and self.wildfire_threshold < 0:
            raise ConfigError(f"wildfire_threshold must be >= 0, got {self.wildfire_threshold}")
        if self.max_iterations < 1:
            raise ConfigError(f"max_iterations must be >= 1, got {self.max_iterations}")

    @property
    def effective_wildfire(self) -> float:
        if self.wildfire_threshold is None:
            return min(self.relin_threshold, 1e-3)
        return self.wildfire_threshold


@dataclass
class SolveReport:
    iterations: int
    final_objective: float
    converged: bool
    relinearized_count: int
    wall_time: float


class SmootherState:
    """Single-owner mutable solver memory. ``clone()`` gives an independent copy."""

    def __init__(self, theta: NoiseParams, config: SmootherConfig | None = None):
        self.theta = theta
        self.config = config or SmootherConfig()
        self.linearization_points: list[Pose2] = []
        self.delta: list[np.ndarray] = []
        self.factors: list[Factor] = []
        self.dirty: set[int] = set()
        self._estimates: list[Pose2] = []
        self._touching: list[list[int]] = []  # factor indices per variable
        self._unary: list[list[int]] = []
        self._binary: list[list[int]] = []  # factors on (i, i+1), stored under i
        self._linear: list[tuple[list[np.ndarray], np.ndarray]] = []
        self._costs: list[float] = []
        self._r_diag: list[np.ndarray] = []
        self._r_off: list[np.ndarray | None] = []
        self._d: list[np.ndarray] = []
        self._messages: list[tuple[np.ndarray, np.ndarray] | None] = []

    # --- Bookkeeping ---

    @property
    def num_variables(self) -> int:
        return len(self.linearization_points)

    def clone(self) -> "SmootherState":
        other = SmootherState.__new__(SmootherState)
        other.theta = self.theta
        other.config = self.config
        # Arrays and poses are never mutated in place, so shallow list copies are independent.
        for name in (
            "linearization_points",
            "delta",
            "factors",
            "_estimates",
            "_linear",
            "_costs",
            "_r_diag",
            "_r_off",
            "_d",
            "_messages",
        ):
            setattr(other, name, list(getattr(self, name)))
        for name in ("_touching", "_unary", "_binary"):
            setattr(other, name, [list(v) for v in getattr(self, name)])
        other.dirty = set(self.dirty)
        return other

    def current_estimate(self, variable: int) -> Pose2:
        return self._estimates[variable]

    def objective(self) -> float:
        return float(sum(self._costs))

    @property
    def exact(self) -> bool:
        return self.config.relin_threshold == 0

    def _threshold(self) -> float:
        return _CONVERGED if self.exact else self.config.relin_threshold

    def _local_magnitude(self, variable: int, delta: np.ndarray) -> float:
        # Ad(x^-1) delta: the same correction seen from the variable's own frame.
        local = adjoint(inverse(self.linearization_points[variable])) @ delta
        return float(np.max(np.abs(local)))

    def delta_magnitude(self, variable: int) -> float:
        """``max|delta|`` of ``variable`` expressed in the frame of its linearization point.

        Relinearization and wildfire thresholds compare against this, so they do not grow with
        the pose's distance from the origin.
        """
        return self._local_magnitude(variable, self.delta[variable])

    def _mark(self, variable: int) -> None:
        if self.delta_magnitude(variable) > self._threshold():
            self.dirty.add(variable)
        else:
            self.dirty.discard(variable)

    def _linearize_factor(self, index: int) -> None:
        factor = self.factors[index]
        blocks, r = linearize(factor, self.linearization_points)
        scale = 1.0 / np.sqrt(factor.weights(self.theta))
        whitened = [scale[:, None] * b for b in blocks]
        rhs = -scale * r
        if not (np.all(np.isfinite(rhs)) and all(np.all(np.isfinite(b)) for b in whitened)):
            raise NonFiniteError(f"non-finite linearization of factor {index} {factor.keys}")
        self._linear[index] = (whitened, rhs)

    def _cost(self, index: int, states) -> float:
        factor = self.factors[index]
        w = whitened_residual(factor, states, self.theta)
        if not np.all(np.isfinite(w)):
            raise NonFiniteError(f"non-finite residual for factor {index} {factor.keys}")
        return 0.5 * float(w @ w)

    def _update_cost(self, index: int) -> None:
        self._costs[index] = self._cost(index, self._estimates)

    def _relinearize(self, variables) -> int:
        """Fold the deltas of ``variables`` into their linearization points.

        Returns the first variable whose conditional must be re-eliminated.
        """
        start = self.num_variables
        touched = set()
        for i in variables:
            self.linearization_points[i] = self._estimates[i]
            self.delta[i] = np.zeros(3)
            self.dirty.discard(i)
            touched.update(self._touching[i])
        for index in sorted(touched):
            self._linearize_factor(index)
            start = min(start, min(self.factors[index].keys))
        return start

    # --- Updates ---

    def add_variables(self, new_factors: Sequence[Factor], inits: Sequence[Pose2]) -> SolveReport:
        """Append ``inits`` as new variables, attach ``new_factors`` and update the estimate."""
        started = time.perf_counter()
        first_new = self.num_variables
        n = first_new + len(inits)
        for factor in new_factors:
            for key in factor.keys:
                if not 0 <= key < n:
                    raise GraphError(f"factor {factor.keys} references unknown variable {key}")
            if len(factor.keys) == 2 and factor.keys[1] != factor.keys[0] + 1:
                raise GraphError(f"binary factor {factor.keys} does not join consecutive poses")
        for pose in inits:
            self.linearization_points.append(pose)
            self.delta.append(np.zeros(3))
            self._estimates.append(pose)
            self._touching.append([])
            self._unary.append([])
            self._binary.append([])
            self._r_diag.append(np.eye(3))
            self._r_off.append(None)
            self._d.append(np.zeros(3))
            self._messages.append(None)

        start = first_new
        for factor in new_factors:
            index = len(self.factors)
            self.factors.append(factor)
            self._linear.append(([], np.zeros(0)))
            self._costs.append(0.0)
            for key in factor.keys:
                self._touching[key].append(index)
            if len(factor.keys) == 1:
                self._unary[factor.keys[0]].append(index)
            else:
                self._binary[factor.keys[0]].append(index)
            self._linearize_factor(index)
            start = min(start, min(factor.keys))
        stale = set(range(len(self.factors) - len(new_factors), len(self.factors)))

        if self.exact:
            iterations, relinearized = self._exact_cycles(start, stale)
        else:
            iterations, relinearized = self._fluid_cycles(start, stale)
        return SolveReport(
            iterations=iterations,
            final_objective=self.objective(),
            converged=not self.dirty,
            relinearized_count=relinearized,
            wall_time=time.perf_counter() - started,
        )

    def _fluid_cycles(self, start: int, stale: set[int]) -> tuple[int, int]:
        iterations = 0
        relinearized = 0
        while iterations < self.config.max_iterations:
            pending = sorted(self.dirty)
            if iterations > 0 and not pending:
                break
            start = min(start, self._relinearize(pending))
            relinearized += len(pending)
            self._eliminate_from(start)
            for i in self._back_substitute(start):
                self._estimates[i] = oplus(self.delta[i], self.linearization_points[i])
                stale.update(self._touching[i])
            iterations += 1
            start = self.num_variables
        for index in sorted(stale):
            self._update_cost(index)
        return iterations, relinearized

    def _exact_cycles(self, start: int, stale: set[int]) -> tuple[int, int]:
        # Every cycle relinearizes all moved variables, i.e. one full Gauss-Newton step,
        # accepted with the same step halving as solve_batch.
        for index in sorted(stale):
            self._update_cost(index)
        objective = self.objective()
        iterations = 0
        relinearized = 0
        while iterations < self.config.max_iterations:
            if iterations > 0 and not self.dirty:
                break
            moved = [i for i, d in enumerate(self.delta) if np.any(d)]
            start = min(start, self._relinearize(moved))
            relinearized += len(moved)
            self._eliminate_from(start)
            self._back_substitute(start)
            objective = self._halving_update(objective)
            iterations += 1
            start = self.num_variables
        return iterations, relinearized

    def _halving_update(self, objective: float) -> float:
        steps = list(self.delta)
        alpha = 1.0
        for _halving in range(BATCH_MAX_HALVINGS + 1):
            candidate = [oplus(alpha * s, x) for s, x in zip(steps, self.linearization_points)]
            costs = [self._cost(index, candidate) for index in range(len(self.factors))]
            total = float(sum(costs))
            if total <= objective * (1.0 + 1e-12) + 1e-15:
                break
            alpha *= 0.5
        else:
            raise NonConvergenceError(
                f"objective increased after {BATCH_MAX_HALVINGS} step halvings",
                last_iterate=list(self._estimates),
            )
        self.delta = [alpha * s for s in steps]
        self._estimates = candidate
        self._costs = costs
        for i in range(self.num_variables):
            self._mark(i)
        return total

    def add_timestep(self, new_factors: Sequence[Factor], new_pose_init: Pose2) -> SolveReport:
        return self.add_variables(new_factors, [new_pose_init])

    def _eliminate_from(self, start: int) -> None:
        n = self.num_variables
        message = self._messages[start] if start > 0 else None
        for i in range(start, n):
            last = i == n - 1
            width = 3 if last else 6
            rows = []
            if message is not None:
                a, b = message
                row = np.zeros((a.shape[0], width + 1))
                row[:, :3] = a
                row[:, -1] = b
                rows.append(row)
            for index in self._unary[i]:
                blocks, rhs = self._linear[index]
                row = np.zeros((rhs.size, width + 1))
                row[:, :3] = blocks[0]
                row[:, -1] = rhs
                rows.append(row)
            if not last:
                for index in self._binary[i]:
                    blocks, rhs = self._linear[index]
                    row = np.zeros((rhs.size, width + 1))
                    row[:, :3] = blocks[0]
                    row[:, 3:6] = blocks[1]
                    row[:, -1] = rhs
                    rows.append(row)
            if not rows:
                raise RankError(i)
            stacked = np.vstack(rows)
            if stacked.shape[0] < 3:
                raise RankError(i)
            r = np.linalg.qr(stacked, mode="r")
            if r.shape[0] < 3:
                raise RankError(i)
            scale = max(1.0, float(np.max(np.abs(stacked[:, :3]))))
            for k in range(3):
                if abs(r[k, k]) <= _PIVOT_TOL * scale:
                    raise RankError(i, pivot=abs(r[k, k]))
                if r[k, k] < 0:
                    r[k, :] = -r[k, :]
            self._r_diag[i] = r[:3, :3].copy()
            self._d[i] = r[:3, -1].copy()
            if last:
                self._r_off[i] = None
            else:
                self._r_off[i] = r[:3, 3:6].copy()
                rest = r[3:, 3:]
                message = (rest[:, :3].copy(), rest[:, 3].copy())
                self._messages[i + 1] = message

    def _back_substitute(self, start: int) -> list[int]:
        n = self.num_variables
        wildfire = self.config.effective_wildfire
        changed = []
        for i in reversed(range(n)):
            rhs = self._d[i]
            if i < n - 1:
                rhs = rhs - self._r_off[i] @ self.delta[i + 1]
            new = solve_triangular(self._r_diag[i], rhs, lower=False)
            if not np.all(np.isfinite(new)):
                raise NonFiniteError(f"non-finite delta for variable {i}")
            if i < start and self._local_magnitude(i, new - self.delta[i]) < wildfire:
                break
            self.delta[i] = new
            self._mark(i)
            changed.append(i)
        return changed

    # --- Queries ---

    def map_estimate(self) -> list[Pose2]:
        if not self.linearization_points:
            raise ConfigError("smoother state is empty: no update performed yet")
        return list(self._estimates)

    def sqrt_information(self) -> tuple[sp.csr_matrix, list[int]]:
        """``(R, ordering)`` with ``R^T R`` the Gauss-Newton information at the linearization point."""
        n = self.num_variables
        if n == 0:
            raise ConfigError("smoother state is empty: no update performed yet")
        blocks = [[None] * n for _ in range(n)]
        for i in range(n):
            blocks[i][i] = sp.csr_matrix(self._r_diag[i])
            if i < n - 1:
                blocks[i][i + 1] = sp.csr_matrix(self._r_off[i])
        return sp.bmat(blocks, format="csr"), list(range(n))

    def sample_posterior(self, n: int, seed=None, noise: np.ndarray | None = None) -> list:
        """Draw ``n`` trajectories from the Gaussian induced by the current linearization.

        ``noise`` (shape ``(3 * num_variables, n)``) replaces the standard-normal draws.
        """
        r, _ordering = self.sqrt_information()
        dim = r.shape[0]
        if noise is None:
            rng = np.random.default_rng(seed)
            noise = rng.standard_normal((dim, n))
        noise = np.asarray(noise, dtype=float).reshape(dim, n)
        xi = spsolve_triangular(r, noise, lower=False)
        xi = np.asarray(xi).reshape(dim, n)
        samples = []
        for s in range(n):
            samples.append(
                [
                    oplus(self.delta[i] + xi[3 * i : 3 * i + 3, s], lin)
                    for i, lin in enumerate(self.linearization_points)
                ]
            )
        return samples

    def log_det_sqrt_information(self) -> float:
        """``sum log diag R``, i.e. half the log-determinant of the information matrix."""
        return float(sum(np.sum(np.log(np.diag(r))) for r in self._r_diag))


# --- Module-level API ---


def add_timestep(
    state: SmootherState, new_factors: Sequence[Factor], new_pose_init: Pose2
) -> SolveReport:
    return state.add_timestep(new_factors, new_pose_init)


def map_estimate(state: SmootherState) -> list[Pose2]:
    return state.map_estimate()


def sqrt_information(state: SmootherState) -> tuple[sp.csr_matrix, list[int]]:
    return state.sqrt_information()


def sample_posterior(state: SmootherState, n: int, seed=None, noise=None) -> list:
    return state.sample_posterior(n, seed=seed, noise=noise)


def dump_sqrt_information(state: SmootherState, path) -> Path:
    """Write R as ``row col value`` triplets, one per line."""
    path = Path(path)
    r, _ordering = state.sqrt_information()
    coo = r.tocoo()
    with path.open("w", encoding="utf-8") as handle:
        for row, col, value in zip(coo.row, coo.col, coo.data):
            handle.write(f"{row} {col} {value:.17g}\n")
    logger.debug("wrote %d R entries to %s", coo.nnz, path)
    return path


# --- Incremental runs over a trajectory ---


@dataclass
class IncrementalRun:
    estimate: list[Pose2]
    init: list[Pose2]
    state: SmootherState
    reports: list[SolveReport] = field(default_factory=list)

    @property
    def wall_time(self) -> float:
        return sum(r.wall_time for r in self.reports)


def run_incremental(
    trajectory,
    theta: NoiseParams,
    config: SmootherConfig | None = None,
    init: Sequence[Pose2] | None = None,
) -> IncrementalRun:
    """Feed ``trajectory`` (a :class:`noisetune.datagen.Trajectory`) into a fresh smoother.

    New poses are initialized by dead reckoning (current estimate of the previous pose composed
    with the odometry) unless ``init`` replays a recorded initialization. In position mode the
    first two poses enter together: a lone position fix leaves the heading unobservable.
    """
    gps_mode = getattr(trajectory, "gps_mode", "position2")
    gps, odom = trajectory.gps_measurements, trajectory.odom_measurements
    count = len(gps)
    if count == 0:
        raise ConfigError("trajectory has no poses")
    factors = _chain_factors(gps, odom, gps_mode)
    per_step: list[list[Factor]] = [[] for _ in range(count)]
    for factor in factors:
        per_step[max(factor.keys)].append(factor)

    state = SmootherState(theta, config)
    used_init: list[Pose2] = []
    reports = []

    def first_pose():
        if init is not None:
            return init[0]
        z = gps[0]
        if gps_mode == "pose3":
            return z if isinstance(z, Pose2) else Pose2.from_array(z)
        return Pose2(float(z[0]), float(z[1]), 0.0)

    def next_init(t, previous: Pose2):
        if init is not None:
            return init[t]
        return compose(previous, odom[t - 1])

    pose0 = first_pose()
    used_init.append(pose0)
    if gps_mode == "position2" and count >= 2:
        pose1 = next_init(1, pose0)
        used_init.append(pose1)
        reports.append(state.add_variables(per_step[0] + per_step[1], [pose0, pose1]))
        t = 2
    else:
        reports.append(state.add_variables(per_step[0], [pose0]))
        t = 1
    while t < count:
        pose = next_init(t, state.current_estimate(t - 1))
        used_init.append(pose)
        reports.append(state.add_timestep(per_step[t], pose))
        t += 1
    return IncrementalRun(state.map_estimate(), used_init, state, reports)


# --- Batch reference solver ---


def _sparse_system(
    factors: Sequence[Factor], states: Sequence[Pose2], theta: NoiseParams
) -> tuple[sp.csr_matrix, np.ndarray]:
    rows, cols, vals = [], [], []
    residuals = []
    row = 0
    for factor in factors:
        blocks, r = linearize(factor, states)
        scale = 1.0 / np.sqrt(factor.weights(theta))
        for key, block in zip(factor.keys, blocks):
            whitened = scale[:, None] * block
            rr, cc = np.indices(whitened.shape).reshape(2, -1)
            rows.extend(row + rr)
            cols.extend(3 * key + cc)
            vals.extend(whitened[rr, cc])
        residuals.append(scale * r)
        row += r.size
    jac = sp.csr_matrix((vals, (rows, cols)), shape=(row, 3 * len(states)))
    return jac, np.concatenate(residuals)


def _first_singular_variable(dense: np.ndarray) -> int:
    r = np.linalg.qr(dense, mode="r")
    diag = np.abs(np.diag(r))
    scale = max(1.0, float(np.max(np.abs(r))) if r.size else 1.0)
    bad = np.nonzero(diag <= _PIVOT_TOL * scale)[0]
    if bad.size:
        return int(bad[0] // 3)
    # Fewer rows than unknowns: the first variable past the last full pivot.
    return int(min(r.shape) // 3)


def _least_squares_step(jac: sp.csr_matrix, res: np.ndarray) -> np.ndarray:
    """Gauss-Newton step ``argmin_s |J s + r|`` from a QR factorization of ``J``."""
    dense = jac.toarray()
    if dense.shape[0] < dense.shape[1]:
        raise RankError(_first_singular_variable(dense))
    q, r = np.linalg.qr(dense)
    diag = np.abs(np.diag(r))
    scale = max(1.0, float(np.max(np.abs(dense))))
    bad = np.nonzero(diag <= _PIVOT_TOL * scale)[0]
    if bad.size:
        raise RankError(int(bad[0] // 3), pivot=float(diag[bad[0]]))
    return solve_triangular(r, -(q.T @ res), lower=False)


def solve_batch(
    graph: FactorGraph, theta: NoiseParams, init: Sequence[Pose2] | None = None
) -> tuple[list[Pose2], SolveReport]:
    """Gauss-Newton with step halving over the whole graph.

    Converged means the last Gauss-Newton step had ``max|step| < BATCH_TOL``.
    """
    started = time.perf_counter()
    states = list(init if init is not None else graph.initial)
    if len(states) != graph.num_poses:
        raise ConfigError(f"init has {len(states)} poses, graph has {graph.num_poses}")
    factors = graph.factors
    objective = total_objective(factors, states, theta)
    iterations = 0
    converged = False
    for _ in range(BATCH_MAX_ITERATIONS):
        jac, res = _sparse_system(factors, states, theta)
        if not np.all(np.isfinite(res)):
            raise NonFiniteError("non-finite residual in batch solve")
        step = _least_squares_step(jac, res).reshape(-1, 3)
        if np.max(np.abs(step)) < BATCH_TOL:
            converged = True
            break
        alpha = 1.0
        for _halving in range(BATCH_MAX_HALVINGS + 1):
            candidate = [oplus(alpha * s, x) for s, x in zip(step, states)]
            new_objective = total_objective(factors, candidate, theta)
            if new_objective <= objective * (1.0 + 1e-12) + 1e-15:
                break
            alpha *= 0.5
        else:
            raise NonConvergenceError(
                f"objective increased after {BATCH_MAX_HALVINGS} step halvings", last_iterate=states
            )
        states, objective = candidate, new_objective
        iterations += 1
    if not converged:
        logger.warning("batch solve stopped after %d iterations without converging", iterations)
    report = SolveReport(
        iterations=iterations,
        final_objective=objective,
        converged=converged,
        relinearized_count=0,
        wall_time=time.perf_counter() - started,
    )
    logger.debug("batch solve: %d iterations, objective %.6g", iterations, objective)
    return states, report


def information_matrix(
    factors: Sequence[Factor], states: Sequence[Pose2] | Mapping, theta: NoiseParams
) -> np.ndarray:
    """Dense ``J^T J`` of the whitened system (test oracle)."""
    states = list(states.values()) if isinstance(states, Mapping) else list(states)
    jac, _res = _sparse_system(factors, states, theta)
    return (jac.T @ jac).toarray()


__all__ = [
    "IncrementalRun",
    "SmootherConfig",
    "SmootherState",
    "SolveReport",
    "add_timestep",
    "dump_sqrt_information",
    "information_matrix",
    "map_estimate",
    "run_incremental",
    "sample_posterior",
    "solve_batch",
    "sqrt_information",
]
