"""
Outer-loop noise-parameter learner.

The tracking loss of a dataset is the mean squared left-difference between the smoother's MAP
estimate and ground truth. Its gradient with respect to the noise variances goes through the
sensitivity ``dx/dtheta`` of the MAP estimate, estimated column by column with forward finite
differences: every column is one extra incremental run with a single variance nudged up. The
perturbed runs replay the initialization of the unperturbed run so that each column measures
the response of the same fixed point.

Training is plain projected gradient descent (``descend``); LEO reuses the same loop.
"""

import csv
import logging
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, NoisetuneError, PerturbationError, TrainingError, TrajectoryError
from .graph import NoiseParams, project
from .liegroup import Pose2, ominus
from .metrics import mean_rmse
from .smoother import IncrementalRun, SmootherConfig, run_incremental
from .workers import run_work_items

logger = logging.getLogger(__name__)

TRACE_TAIL = ("loss", "grad_norm", "wall_time_s", "rmse_trans_m", "rmse_rot_rad")


@dataclass(frozen=True)
class TrainConfig:
    """Gradient-descent settings; ``lam`` is the L2 weight on theta."""

    alpha: float = 0.1
    lam: float = 1e-4
    iterations: int = 100
    fd_floor: float = 1e-6
    fd_rel: float = 1e-4
    parallel_fd: bool = False
    n_threads: int = 4
    seed: int = 0
    max_relative_step: float | None = 0.1
    batch_size: int | None = None
    central_fd: bool = False
    smoother: SmootherConfig = field(default_factory=SmootherConfig)

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be at least 1, got {self.iterations}")
        if not (self.fd_floor > 0 and self.fd_rel > 0):
            raise ConfigError("finite-difference steps must be positive")
        if self.n_threads < 1:
            raise ConfigError(f"n_threads must be at least 1, got {self.n_threads}")
        if self.max_relative_step is not None and not self.max_relative_step > 0:
            raise ConfigError("max_relative_step must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")

    @property
    def threads(self) -> int:
        return self.n_threads if self.parallel_fd else 1


# --- Trace ---


@dataclass
class IterationRecord:
    iteration: int
    theta: np.ndarray
    loss: float
    grad_norm: float
    wall_time: float
    rmse_trans: float = float("nan")
    rmse_rot: float = float("nan")


@dataclass
class TrainTrace:
    """Per-iteration history of a training run."""

    labels: list[str]
    records: list[IterationRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def append(self, record: IterationRecord) -> None:
        self.records.append(record)

    @property
    def header(self) -> list[str]:
        return ["iter", *self.labels, *TRACE_TAIL]

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    def mean_iteration_time(self) -> float:
        if not self.records:
            return float("nan")
        return float(np.mean([r.wall_time for r in self.records]))

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(self.header)
            for r in self.records:
                writer.writerow(
                    [r.iteration, *(f"{v:.17g}" for v in r.theta)]
                    + [f"{v:.17g}" for v in (r.loss, r.grad_norm, r.wall_time)]
                    + [f"{r.rmse_trans:.17g}", f"{r.rmse_rot:.17g}"]
                )
        return path

    @classmethod
    def read_csv(cls, path) -> "TrainTrace":
        path = Path(path)
        with path.open(newline="", encoding="utf-8") as handle:
            rows = list(csv.reader(handle))
        if not rows or rows[0][0] != "iter" or tuple(rows[0][-len(TRACE_TAIL) :]) != TRACE_TAIL:
            raise ConfigError(f"{path} is not a training trace")
        labels = rows[0][1 : -len(TRACE_TAIL)]
        trace = cls(labels)
        width = len(labels)
        for row in rows[1:]:
            values = [float(v) for v in row[1:]]
            loss, grad_norm, wall, trans, rot = values[width:]
            trace.append(
                IterationRecord(int(row[0]), np.array(values[:width]), loss, grad_norm, wall, trans, rot)
            )
        return trace


# --- Loss and sensitivity ---


def trajectory_error(estimate: Sequence[Pose2], gt: Sequence[Pose2]) -> np.ndarray:
    """``vec(x_hat (-) x_gt)`` stacked over the states."""
    return np.concatenate([ominus(e, g) for e, g in zip(estimate, gt, strict=True)])


def fd_step(value: float, floor: float = 1e-6, relative: float = 1e-4) -> float:
    return max(floor, relative * value)


def _difference_quotient(
    solve, theta: NoiseParams, k: int, base, difference, floor: float, relative: float, central: bool
) -> np.ndarray:
    vector = theta.as_vector()
    tau = fd_step(vector[k], floor, relative)
    upper = solve(theta.perturbed(k, tau))
    if central:
        # Backward step stays inside the feasible set.
        back = min(tau, 0.5 * vector[k])
        lower = solve(theta.perturbed(k, -back))
        return difference(upper, lower) / (tau + back)
    return difference(upper, base) / tau


def sensitivity_matrix(
    theta: NoiseParams,
    solve: Callable[[NoiseParams], object],
    base=None,
    difference: Callable = trajectory_error,
    fd_floor: float = 1e-6,
    fd_rel: float = 1e-4,
    central: bool = False,
    n_threads: int = 1,
) -> np.ndarray:
    """Finite-difference ``d solve(theta) / d theta``, one column per variance.

    ``solve`` maps noise parameters to an estimate and ``difference(a, b)`` measures
    ``a - b`` as a flat vector. Columns run as independent work items; a failure in column ``k``
    surfaces as :class:`PerturbationError` with ``parameter == k``.
    """
    vector = theta.as_vector()
    if base is None and not central:
        base = solve(theta)

    def column(k: int) -> Callable[[], np.ndarray]:
        def run():
            try:
                return _difference_quotient(
                    solve, theta, k, base, difference, fd_floor, fd_rel, central
                )
            except PerturbationError:
                raise
            except NoisetuneError as e:
                raise PerturbationError(k, e) from e

        return run

    columns = run_work_items([column(k) for k in range(vector.size)], n_threads)
    return np.column_stack(columns)


def fd_sensitivity(
    theta: NoiseParams,
    trajectory,
    config: TrainConfig | None = None,
    base_run: IncrementalRun | None = None,
) -> np.ndarray:
    """``(3T x m)`` sensitivity of the MAP trajectory to each variance."""
    config = config or TrainConfig()
    if base_run is None:
        base_run = run_incremental(trajectory, theta, config.smoother)

    def solve(params: NoiseParams) -> list[Pose2]:
        return run_incremental(trajectory, params, config.smoother, init=base_run.init).estimate

    return sensitivity_matrix(
        theta,
        solve,
        base=base_run.estimate,
        fd_floor=config.fd_floor,
        fd_rel=config.fd_rel,
        central=config.central_fd,
        n_threads=config.threads,
    )


def central_sensitivity(
    theta: NoiseParams, trajectory, config: TrainConfig | None = None
) -> np.ndarray:
    """Central-difference variant of :func:`fd_sensitivity` (diagnostics)."""
    config = config or TrainConfig()
    base_run = run_incremental(trajectory, theta, config.smoother)

    def solve(params: NoiseParams) -> list[Pose2]:
        return run_incremental(trajectory, params, config.smoother, init=base_run.init).estimate

    return sensitivity_matrix(
        theta,
        solve,
        fd_floor=config.fd_floor,
        fd_rel=config.fd_rel,
        central=True,
        n_threads=config.threads,
    )


def _base_runs(theta, dataset, config) -> list[IncrementalRun]:
    def item(j, trajectory):
        def run():
            try:
                return run_incremental(trajectory, theta, config.smoother)
            except NoisetuneError as e:
                if isinstance(e, ConfigError):
                    raise
                raise TrajectoryError(j, e) from e

        return run

    return run_work_items([item(j, t) for j, t in enumerate(dataset)], config.threads)


def tracking_loss(theta: NoiseParams, dataset: Sequence, config: TrainConfig | None = None) -> float:
    """``(1/(2|D|)) sum_j ||vec(x_hat_j (-) x_gt_j)||^2 + lam ||theta||^2``."""
    config = config or TrainConfig()
    if not dataset:
        raise ConfigError("empty training set")
    runs = _base_runs(theta, dataset, config)
    errors = [trajectory_error(r.estimate, t.gt_poses) for r, t in zip(runs, dataset)]
    vector = theta.as_vector()
    return 0.5 * float(np.mean([e @ e for e in errors])) + config.lam * float(vector @ vector)


@dataclass
class StepResult:
    """Loss, gradient and training-set RMSE at one theta."""

    loss: float
    gradient: np.ndarray
    rmse: tuple[float, float] = (float("nan"), float("nan"))


def loss_and_gradient(
    theta: NoiseParams, dataset: Sequence, config: TrainConfig | None = None
) -> StepResult:
    """:func:`tracking_loss` and its gradient ``(1/|D|) sum_j S_j^T e_j + 2 lam theta``."""
    config = config or TrainConfig()
    if not dataset:
        raise ConfigError("empty training set")
    runs = _base_runs(theta, dataset, config)
    vector = theta.as_vector()
    m = vector.size

    # All (trajectory, parameter) perturbations are independent; flatten them for the pool.
    def item(j: int, k: int):
        trajectory, base = dataset[j], runs[j]

        def solve(params: NoiseParams) -> list[Pose2]:
            return run_incremental(trajectory, params, config.smoother, init=base.init).estimate

        def run():
            try:
                return _difference_quotient(
                    solve,
                    theta,
                    k,
                    base.estimate,
                    trajectory_error,
                    config.fd_floor,
                    config.fd_rel,
                    config.central_fd,
                )
            except NoisetuneError as e:
                raise TrajectoryError(j, PerturbationError(k, e)) from e

        return run

    items = [item(j, k) for j in range(len(dataset)) for k in range(m)]
    columns = run_work_items(items, config.threads)

    data_grad = np.zeros(m)
    loss = 0.0
    for j, (trajectory, base) in enumerate(zip(dataset, runs)):
        error = trajectory_error(base.estimate, trajectory.gt_poses)
        sensitivity = np.column_stack(columns[j * m : (j + 1) * m])
        data_grad += sensitivity.T @ error
        loss += float(error @ error)
    n = len(dataset)
    gradient = data_grad / n + 2.0 * config.lam * vector
    loss = 0.5 * loss / n + config.lam * float(vector @ vector)
    if not np.all(np.isfinite(gradient)):
        raise TrainingError(f"non-finite gradient at {theta!r}")
    rmse = mean_rmse([(r.estimate, t.gt_poses) for r, t in zip(runs, dataset)])
    return StepResult(loss, gradient, rmse)


def loss_gradient(theta: NoiseParams, dataset: Sequence, config: TrainConfig | None = None) -> np.ndarray:
    return loss_and_gradient(theta, dataset, config).gradient


# --- Descent ---


def gd_step(theta, gradient, alpha: float, max_relative_step: float | None = None):
    """``project(theta - alpha * gradient)``; accepts a vector or :class:`NoiseParams`."""
    params = theta if isinstance(theta, NoiseParams) else None
    vector = params.as_vector() if params is not None else np.asarray(theta, dtype=float)
    step = alpha * np.asarray(gradient, dtype=float)
    if max_relative_step is not None:
        limit = max_relative_step * np.abs(vector)
        step = np.clip(step, -limit, limit)
    updated = project(vector - step)
    if params is not None:
        return NoiseParams.from_vector(updated, params.gps_dim)
    return updated


def descend(
    theta0: NoiseParams,
    step_fn: Callable[[NoiseParams], StepResult],
    alpha: float,
    iterations: int,
    max_relative_step: float | None = None,
    label: str = "train",
) -> tuple[NoiseParams, TrainTrace]:
    """Run ``iterations`` projected gradient steps from ``theta0``.

    Record ``i`` holds the theta at which iteration ``i`` evaluated its loss and gradient. A
    solver failure aborts with :class:`TrainingError` carrying the partial trace.
    """
    theta = theta0
    trace = TrainTrace(theta0.labels())
    for i in range(iterations):
        start = time.perf_counter()
        try:
            result = step_fn(theta)
        except TrainingError as e:
            e.trace, e.theta = trace, theta
            raise
        except NoisetuneError as e:
            if isinstance(e, ConfigError):
                raise
            raise TrainingError(e, trace, theta) from e
        elapsed = time.perf_counter() - start
        grad_norm = float(np.linalg.norm(result.gradient))
        trace.append(
            IterationRecord(i, theta.as_vector(), result.loss, grad_norm, elapsed, *result.rmse)
        )
        log = logger.info if i % 10 == 0 or i == iterations - 1 else logger.debug
        log("%s iter %d: loss=%.6g |grad|=%.3g theta=%s", label, i, result.loss, grad_norm, theta)
        theta = gd_step(theta, result.gradient, alpha, max_relative_step)
    return theta, trace


def minibatch(dataset: Sequence, config: TrainConfig, iteration: int) -> Sequence:
    """The trajectories iteration ``iteration`` trains on; the whole set unless ``batch_size`` is set.

    Subsets are drawn without replacement from ``SeedSequence(seed, spawn_key=(iteration,))``, so a
    run is reproducible from its config alone.
    """
    if config.batch_size is None or config.batch_size >= len(dataset):
        return dataset
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(iteration,)))
    picked = np.sort(rng.choice(len(dataset), size=config.batch_size, replace=False))
    return [dataset[j] for j in picked]


def train(
    dataset: Sequence, config: TrainConfig, theta0: NoiseParams
) -> tuple[NoiseParams, TrainTrace]:
    """Learn the noise variances on ``dataset`` by gradient descent on the tracking loss."""
    if not dataset:
        raise ConfigError("empty training set")
    iteration = iter(range(config.iterations))
    logger.info(
        "training on %d trajectories: alpha=%g lambda=%g iterations=%d clip=%s batch=%s threads=%d",
        len(dataset),
        config.alpha,
        config.lam,
        config.iterations,
        config.max_relative_step,
        config.batch_size,
        config.threads,
    )
    return descend(
        theta0,
        lambda theta: loss_and_gradient(theta, minibatch(dataset, config, next(iteration)), config),
        config.alpha,
        config.iterations,
        config.max_relative_step,
        label="ours",
    )
