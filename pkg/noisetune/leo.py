"""
LEO baseline: energy-based noise learning.

The energy of a trajectory is the factor-graph objective. LEO lowers the energy of ground truth
relative to samples from the smoother's Gaussian posterior:

    grad = (1/|D|) sum_j [ dE/dtheta(x_gt_j) - mean_s dE/dtheta(x_s_j) ]

with ``dE/dv = -r^2 / (2 v^2)`` summed over the factor channels that ``v`` weights. Sampling is
the expensive part, and per-trajectory samplers run as independent work items.

Runs seed every (iteration, trajectory) pair with its own stream so results do not depend on
the thread count.
"""

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NoisetuneError, TrajectoryError
from .graph import Factor, NoiseParams, chain_factors, residual, total_objective
from .learner import StepResult, TrainTrace, descend
from .liegroup import Pose2
from .metrics import mean_rmse
from .smoother import SmootherConfig, SmootherState, run_incremental
from .workers import run_work_items

logger = logging.getLogger(__name__)

# Training-set size -> (posterior samples, threads)
LEO_SCHEDULE = {1: (10, 4), 5: (10, 4), 10: (8, 3), 20: (4, 2), 30: (4, 2)}

Sampler = Callable[[SmootherState, object, int, np.random.SeedSequence], Sequence[Sequence[Pose2]]]


@dataclass(frozen=True)
class LeoConfig:
    n_samples: int = 10
    n_threads: int = 4
    alpha: float = 0.1
    iterations: int = 100
    seed: int = 0
    max_relative_step: float | None = 0.1
    smoother: SmootherConfig = field(default_factory=SmootherConfig)

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigError(f"n_samples must be at least 1, got {self.n_samples}")
        if self.n_threads < 1:
            raise ConfigError(f"n_threads must be at least 1, got {self.n_threads}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be at least 1, got {self.iterations}")

    @classmethod
    def scheduled(cls, train_size: int, **overrides) -> "LeoConfig":
        """Sample and thread counts for ``train_size`` from the LEO schedule (nearest size at or
        below, smallest entry for anything smaller)."""
        sizes = sorted(LEO_SCHEDULE)
        key = max((s for s in sizes if s <= train_size), default=sizes[0])
        n_samples, n_threads = LEO_SCHEDULE[key]
        overrides.setdefault("n_samples", n_samples)
        overrides.setdefault("n_threads", n_threads)
        return cls(**overrides)


def energy(theta: NoiseParams, states, factors: Sequence[Factor]) -> float:
    return total_objective(factors, states, theta)


def grad_energy_theta(theta: NoiseParams, states, factors: Sequence[Factor]) -> np.ndarray:
    """``dE/dtheta`` at ``states``; factors with their own variances do not contribute."""
    grad = np.zeros(theta.gps_dim + 3)
    for factor in factors:
        if factor.variances is not None:
            continue
        offset = 0 if factor.kind.channel_class == "gps" else theta.gps_dim
        variances = factor.weights(theta)
        r = residual(factor, states)
        grad[offset : offset + r.size] -= r**2 / (2.0 * variances**2)
    return grad


def contrastive_gradient(gt_terms, sample_terms) -> np.ndarray:
    """``mean_j (gt_j - mean_s sample_js)``.

    ``gt_terms`` is ``(J, m)`` and ``sample_terms`` is ``(J, S, m)``.
    """
    gt_terms = np.asarray(gt_terms, dtype=float)
    sample_terms = np.asarray(sample_terms, dtype=float)
    if gt_terms.ndim == 1:
        gt_terms, sample_terms = gt_terms[None], sample_terms[None]
    return np.mean(gt_terms - sample_terms.mean(axis=1), axis=0)


def laplace_loss(theta: NoiseParams, trajectory, state: SmootherState, factors=None) -> float:
    """Negative log-likelihood of ground truth under the Laplace posterior ``N(x_hat, (R^T R)^-1)``.

    Computed as ``E(x_gt) - E(x_hat) + (3T/2) log 2 pi - sum log diag R``.
    """
    if factors is None:
        factors = chain_factors(
            trajectory.gps_measurements, trajectory.odom_measurements, trajectory.gps_mode
        )
    estimate = state.map_estimate()
    dim = 3 * len(estimate)
    return (
        energy(theta, trajectory.gt_poses, factors)
        - energy(theta, estimate, factors)
        + 0.5 * dim * np.log(2.0 * np.pi)
        - state.log_det_sqrt_information()
    )


def posterior_sampler(state: SmootherState, trajectory, n: int, seed) -> list:
    return state.sample_posterior(n, seed=seed)


@dataclass
class _TrajectoryTerms:
    gt: np.ndarray
    samples: np.ndarray
    loss: float
    estimate: list


def _trajectory_terms(theta, trajectory, config, n_samples, seed, sampler) -> _TrajectoryTerms:
    factors = chain_factors(
        trajectory.gps_measurements, trajectory.odom_measurements, trajectory.gps_mode
    )
    run = run_incremental(trajectory, theta, config.smoother)
    samples = sampler(run.state, trajectory, n_samples, seed)
    return _TrajectoryTerms(
        grad_energy_theta(theta, trajectory.gt_poses, factors),
        np.array([grad_energy_theta(theta, s, factors) for s in samples]),
        laplace_loss(theta, trajectory, run.state, factors),
        run.estimate,
    )


def leo_step(
    theta: NoiseParams,
    dataset: Sequence,
    config: LeoConfig,
    iteration: int = 0,
    sampler: Sampler | None = None,
) -> StepResult:
    """Contrastive gradient, mean Laplace loss and training RMSE at ``theta``."""
    if not dataset:
        raise ConfigError("empty training set")
    sampler = sampler or posterior_sampler

    def item(j, trajectory):
        seed = np.random.SeedSequence(config.seed, spawn_key=(iteration, j))

        def run():
            try:
                return _trajectory_terms(theta, trajectory, config, config.n_samples, seed, sampler)
            except NoisetuneError as e:
                if isinstance(e, ConfigError):
                    raise
                raise TrajectoryError(j, e) from e

        return run

    terms = run_work_items([item(j, t) for j, t in enumerate(dataset)], config.n_threads)
    gradient = contrastive_gradient([t.gt for t in terms], [t.samples for t in terms])
    loss = float(np.mean([t.loss for t in terms]))
    rmse = mean_rmse([(t.estimate, d.gt_poses) for t, d in zip(terms, dataset)])
    return StepResult(loss, gradient, rmse)


def leo_gradient(
    theta: NoiseParams,
    dataset: Sequence,
    config: LeoConfig | None = None,
    iteration: int = 0,
    sampler: Sampler | None = None,
) -> np.ndarray:
    return leo_step(theta, dataset, config or LeoConfig(), iteration, sampler).gradient


def train_leo(
    dataset: Sequence,
    config: LeoConfig,
    theta0: NoiseParams,
    sampler: Sampler | None = None,
) -> tuple[NoiseParams, TrainTrace]:
    """Learn the noise variances on ``dataset`` by contrastive energy descent."""
    if not dataset:
        raise ConfigError("empty training set")
    logger.info(
        "LEO on %d trajectories: samples=%d threads=%d alpha=%g iterations=%d",
        len(dataset),
        config.n_samples,
        config.n_threads,
        config.alpha,
        config.iterations,
    )
    counter = iter(range(config.iterations))
    return descend(
        theta0,
        lambda theta: leo_step(theta, dataset, config, next(counter), sampler),
        config.alpha,
        config.iterations,
        config.max_relative_step,
        label="leo",
    )
