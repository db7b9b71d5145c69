"""Tests for the LEO baseline: energy gradients, the contrastive estimator and training."""

import unittest

import numpy as np
from scipy.stats import multivariate_normal

from noisetune.datagen import GenConfig, Trajectory, generate_trajectory
from noisetune.errors import ConfigError
from noisetune.graph import Factor, NoiseParams, chain_factors, total_objective
from noisetune.learner import trajectory_error
from noisetune.leo import (
    LEO_SCHEDULE,
    LeoConfig,
    contrastive_gradient,
    energy,
    grad_energy_theta,
    laplace_loss,
    leo_gradient,
    leo_step,
    train_leo,
)
from noisetune.liegroup import Pose2, exp, oplus
from noisetune.smoother import SmootherConfig, run_incremental

ONES = NoiseParams([1.0, 1.0], [1.0, 1.0, 1.0])
POSE_THETA = NoiseParams([0.5, 0.5, 0.1], [1.0, 1.0, 1.0])
OFFSETS = (-0.9, -0.4, 0.1, 0.6, 0.8, -0.7)


def single_pose_dataset(offsets=OFFSETS):
    """One-pose trajectories at the origin, each with a pose fix offset along x only."""
    return [Trajectory([Pose2.identity()], [[z, 0.0, 0.0]], [], "pose3") for z in offsets]


def axis_quadrature_sampler(state, trajectory, n, seed):
    # Two samples at +-1 standard deviation along x: their mean squared offset is exactly v.
    spread = np.sqrt(state.theta.gps[0])
    center = state.map_estimate()[0]
    return [[oplus([s, 0.0, 0.0], center)] for s in (spread, -spread)]


def one_dimensional_loss(v, offsets):
    return float(np.mean(offsets**2)) / (2 * v) + 0.5 * np.log(2 * np.pi * v)


class TestEnergyGradient(unittest.TestCase):
    def test_single_gps_residual(self):
        factors = [Factor.gps(0, [0.0, 0.0])]
        grad = grad_energy_theta(ONES, [Pose2(1.0, 0.0, 0.0)], factors)
        np.testing.assert_allclose(grad, [-0.5, 0, 0, 0, 0])

    def test_zero_residuals(self):
        factors = [Factor.gps(0, [1.0, 2.0]), Factor.prior(0, Pose2(1.0, 2.0, 0.3))]
        grad = grad_energy_theta(ONES, [Pose2(1.0, 2.0, 0.3)], factors)
        np.testing.assert_allclose(grad, np.zeros(5), atol=1e-12)

    def test_energy_delegates_to_objective(self):
        trajectory = generate_trajectory(GenConfig(6, 1, (0.25, 0.25), (0.01, 0.01, 0.0025)), 0)
        factors = chain_factors(trajectory.gps_measurements, trajectory.odom_measurements)
        self.assertEqual(
            energy(ONES, trajectory.gt_poses, factors),
            total_objective(factors, trajectory.gt_poses, ONES),
        )

    def test_matches_central_difference_of_energy(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            config = GenConfig(5, 1, (0.25, 0.25), (0.01, 0.01, 0.0025), seed=seed)
            trajectory = generate_trajectory(config, 0)
            factors = chain_factors(trajectory.gps_measurements, trajectory.odom_measurements)
            states = [oplus(rng.normal(0, 0.05, 3), p) for p in trajectory.gt_poses]
            theta = NoiseParams(rng.uniform(0.1, 1.0, 2), rng.uniform(0.005, 0.05, 3))
            grad = grad_energy_theta(theta, states, factors)
            vector = theta.as_vector()
            numeric = np.zeros(5)
            for k in range(5):
                h = 1e-6 * vector[k]
                upper = energy(theta.perturbed(k, h), states, factors)
                lower = energy(theta.perturbed(k, -h), states, factors)
                numeric[k] = (upper - lower) / (2 * h)
            np.testing.assert_allclose(grad, numeric, rtol=1e-6, atol=1e-6)

    def test_override_factors_do_not_contribute(self):
        factors = [Factor.gps(0, [0.0, 0.0], variances=[2.0, 2.0])]
        grad = grad_energy_theta(ONES, [Pose2(1.0, 0.0, 0.0)], factors)
        np.testing.assert_array_equal(grad, np.zeros(5))

    def test_prior_weighted_by_odometry_channels(self):
        factors = [Factor.prior(0, Pose2.identity())]
        grad = grad_energy_theta(ONES, [exp([0.0, 0.0, 1.0])], factors)
        np.testing.assert_allclose(grad, [0, 0, 0, 0, -0.5], atol=1e-12)


class TestContrastiveGradient(unittest.TestCase):
    def test_mean_over_samples_then_trajectories(self):
        gt = [[1.0, 0.0], [3.0, 2.0]]
        samples = [[[0.0, 0.0], [2.0, 0.0]], [[1.0, 1.0], [1.0, 3.0]]]
        np.testing.assert_allclose(contrastive_gradient(gt, samples), [1.0, 0.0])

    def test_single_trajectory_input(self):
        np.testing.assert_allclose(contrastive_gradient([1.0, 1.0], [[0.0, 1.0]]), [1.0, 0.0])

    def test_samples_at_ground_truth_cancel(self):
        config = GenConfig(8, 2, (0.25, 0.25), (0.01, 0.01, 0.0025), seed=2)
        dataset = [generate_trajectory(config, j) for j in range(2)]

        def ground_truth_sampler(state, trajectory, n, seed):
            return [trajectory.gt_poses] * n

        gradient = leo_gradient(ONES, dataset, LeoConfig(n_samples=3), sampler=ground_truth_sampler)
        np.testing.assert_allclose(gradient, np.zeros(5), atol=1e-12)


class TestLeoGradient(unittest.TestCase):
    def setUp(self):
        config = GenConfig(8, 2, (0.25, 0.25), (0.01, 0.01, 0.0025), seed=4)
        self.dataset = [generate_trajectory(config, j) for j in range(2)]
        self.theta = config.theta_star

    def test_same_seed_same_gradient(self):
        config = LeoConfig(n_samples=4, n_threads=1, seed=9)
        first = leo_gradient(self.theta, self.dataset, config, iteration=2)
        second = leo_gradient(self.theta, self.dataset, config, iteration=2)
        np.testing.assert_array_equal(first, second)

    def test_thread_count_does_not_change_gradient(self):
        serial = leo_gradient(self.theta, self.dataset, LeoConfig(n_samples=4, n_threads=1))
        threaded = leo_gradient(self.theta, self.dataset, LeoConfig(n_samples=4, n_threads=3))
        np.testing.assert_array_equal(serial, threaded)

    def test_iterations_draw_fresh_samples(self):
        config = LeoConfig(n_samples=4, n_threads=1)
        first = leo_gradient(self.theta, self.dataset, config, iteration=0)
        second = leo_gradient(self.theta, self.dataset, config, iteration=1)
        self.assertFalse(np.array_equal(first, second))

    def test_more_samples_lower_variance(self):
        dataset = single_pose_dataset((0.3,))

        def spread(n_samples):
            runs = [
                leo_gradient(POSE_THETA, dataset, LeoConfig(n_samples=n_samples, seed=s))
                for s in range(50)
            ]
            return np.std(runs, axis=0)[:3].sum()

        self.assertLess(spread(40), spread(10))

    def test_step_reports_loss_and_rmse(self):
        result = leo_step(self.theta, self.dataset, LeoConfig(n_samples=2))
        self.assertTrue(np.isfinite(result.loss))
        self.assertGreater(result.rmse[0], 0.0)

    def test_empty_dataset(self):
        with self.assertRaises(ConfigError):
            leo_gradient(self.theta, [], LeoConfig())


class TestLaplaceLoss(unittest.TestCase):
    def test_matches_gaussian_likelihood_on_linear_chain(self):
        rng = np.random.default_rng(5)
        length = 6
        gt = [Pose2(float(i), 0.0, 0.0) for i in range(length)]
        gps = np.array([[i + rng.normal(0, 0.3), 0.0, 0.0] for i in range(length)])
        odom = [Pose2(1.0 + rng.normal(0, 0.1), 0.0, 0.0) for _ in range(length - 1)]
        trajectory = Trajectory(gt, gps, odom, "pose3")
        theta = NoiseParams([0.09, 0.05, 0.02], [0.01, 0.02, 0.005])
        run = run_incremental(trajectory, theta, SmootherConfig(relin_threshold=0.0))

        r, _ordering = run.state.sqrt_information()
        covariance = np.linalg.inv((r.T @ r).toarray())
        xi = trajectory_error(gt, run.estimate)
        expected = -multivariate_normal(np.zeros(3 * length), covariance).logpdf(xi)
        self.assertAlmostEqual(laplace_loss(theta, trajectory, run.state), expected, places=8)

    def test_single_pose_closed_form(self):
        trajectory = single_pose_dataset((0.7,))[0]
        run = run_incremental(trajectory, POSE_THETA)
        z = trajectory.gps_measurements[0, 0]
        expected = one_dimensional_loss(POSE_THETA.gps[0], np.array([z]))
        for v in POSE_THETA.gps[1:]:
            expected += 0.5 * np.log(2 * np.pi * v)
        self.assertAlmostEqual(laplace_loss(POSE_THETA, trajectory, run.state), expected, places=10)


class TestTrainLeo(unittest.TestCase):
    def test_one_dimensional_stationary_point_matches_scan(self):
        dataset = single_pose_dataset()
        offsets = np.array([t.gps_measurements[0, 0] for t in dataset])
        grid = np.arange(0.01, 3.0, 1e-3)
        scan = grid[np.argmin([one_dimensional_loss(v, offsets) for v in grid])]

        theta0 = NoiseParams([1.0, 0.5, 0.1], [1.0, 1.0, 1.0])
        config = LeoConfig(n_samples=2, n_threads=1, alpha=0.1, iterations=100)
        theta, trace = train_leo(dataset, config, theta0, sampler=axis_quadrature_sampler)
        self.assertEqual(len(trace), 100)
        self.assertAlmostEqual(theta.gps[0], scan, delta=1e-3)
        # Channels with no residual only see the sampled spread, which is zero here.
        np.testing.assert_allclose(theta.gps[1:], theta0.gps[1:])

    def test_posterior_sampler_settles_at_mean_square_offset(self):
        dataset = single_pose_dataset()
        offsets = np.array([t.gps_measurements[0, 0] for t in dataset])
        target = float(np.mean(offsets**2))

        theta0 = NoiseParams([1.0, 0.5, 0.1], [1.0, 1.0, 1.0])
        config = LeoConfig(n_samples=50, n_threads=1, alpha=0.1, iterations=150, seed=3)
        theta, trace = train_leo(dataset, config, theta0)
        settled = np.mean([r.theta[0] for r in trace.records[-50:]])
        self.assertAlmostEqual(settled, target, delta=0.1 * target)
        self.assertTrue(np.all(np.isfinite(trace.losses)))
        # Odometry channels have no factor here, so nothing moves them.
        np.testing.assert_allclose(theta.odom, theta0.odom)

    def test_empty_dataset(self):
        with self.assertRaises(ConfigError):
            train_leo([], LeoConfig(), ONES)


class TestLeoConfig(unittest.TestCase):
    def test_schedule(self):
        self.assertEqual(LEO_SCHEDULE[10], (8, 3))
        for size, expected in ((0, (10, 4)), (1, (10, 4)), (7, (10, 4)), (10, (8, 3)), (25, (4, 2))):
            config = LeoConfig.scheduled(size, iterations=5)
            self.assertEqual((config.n_samples, config.n_threads), expected)
            self.assertEqual(config.iterations, 5)

    def test_explicit_values_override_schedule(self):
        self.assertEqual(LeoConfig.scheduled(30, n_samples=7).n_samples, 7)

    def test_invalid(self):
        for kwargs in ({"n_samples": 0}, {"iterations": 0}, {"n_threads": 0}, {"alpha": -1.0}):
            with self.subTest(**kwargs), self.assertRaises(ConfigError):
                LeoConfig(**kwargs)


if __name__ == "__main__":
    unittest.main()
