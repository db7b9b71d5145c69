"""Tests for the tracking loss, finite-difference sensitivities and the descent loop."""

import tempfile
import unittest
from pathlib import Path

import numpy as np

from noisetune.datagen import (
    GenConfig,
    Trajectory,
    generate_trajectory,
    simulate_measurements,
    split_stream,
)
from noisetune.errors import ConfigError, PerturbationError, RankError, TrainingError
from noisetune.graph import EPS_VAR, Factor, FactorGraph, NoiseParams
from noisetune.learner import (
    StepResult,
    TrainConfig,
    TrainTrace,
    central_sensitivity,
    descend,
    fd_sensitivity,
    gd_step,
    loss_and_gradient,
    loss_gradient,
    minibatch,
    sensitivity_matrix,
    tracking_loss,
    train,
    trajectory_error,
)
from noisetune.liegroup import Pose2
from noisetune.harness import evaluate
from noisetune.smoother import SmootherConfig, solve_batch

EXACT = SmootherConfig(relin_threshold=0.0, max_iterations=10)
ONES = NoiseParams([1.0, 1.0], [1.0, 1.0, 1.0])


def zero_noise_dataset(count=2, length=6):
    gt = [Pose2(0, 0, 0)]
    for i in range(1, length):
        gt.append(Pose2(gt[-1].tx + np.cos(0.1 * i), gt[-1].ty + np.sin(0.1 * i), 0.1 * i))
    return [simulate_measurements(gt, ((0, 0), (0, 0, 0)), seed=j) for j in range(count)]


def straight_line_trajectory(length=8, seed=0):
    """Poses on the x-axis with noise only along x, so the estimate stays on the axis."""
    rng = np.random.default_rng(seed)
    gt = [Pose2(float(i), 0.0, 0.0) for i in range(length)]
    gps = np.array([[i + rng.normal(0, 0.3), 0.0, 0.0] for i in range(length)])
    odom = [Pose2(1.0 + rng.normal(0, 0.1), 0.0, 0.0) for _ in range(length - 1)]
    return Trajectory(gt, gps, odom, "pose3")


def two_class_solver(theta):
    # Position fix at the origin (gps class) and a pose prior at (1, 0, 0) (odom class).
    factors = [Factor.gps(0, [0.0, 0.0]), Factor.prior(0, Pose2(1.0, 0.0, 0.0))]
    graph = FactorGraph([Pose2(0.3, 0.0, 0.0)], factors, strict=False)
    states, _report = solve_batch(graph, theta)
    return states


class TestTrainConfig(unittest.TestCase):
    def test_defaults(self):
        config = TrainConfig()
        self.assertEqual((config.alpha, config.lam, config.iterations), (0.1, 1e-4, 100))
        self.assertEqual(config.max_relative_step, 0.1)
        self.assertIsNone(config.batch_size)
        self.assertEqual(config.threads, 1)
        self.assertEqual(TrainConfig(parallel_fd=True, n_threads=3).threads, 3)

    def test_invalid(self):
        for kwargs in (
            {"iterations": 0},
            {"alpha": 0.0},
            {"lam": -1.0},
            {"fd_floor": 0.0},
            {"max_relative_step": 0.0},
            {"batch_size": 0},
        ):
            with self.subTest(**kwargs), self.assertRaises(ConfigError):
                TrainConfig(**kwargs)


class TestTrackingLoss(unittest.TestCase):
    def test_zero_error_without_regularizer(self):
        loss = tracking_loss(ONES, zero_noise_dataset(), TrainConfig(lam=0.0))
        self.assertAlmostEqual(loss, 0.0, places=20)

    def test_regularizer_only(self):
        loss = tracking_loss(ONES, zero_noise_dataset(), TrainConfig(lam=1.0))
        self.assertAlmostEqual(loss, 5.0, places=12)

    def test_weighted_mean_tracking_term(self):
        theta = NoiseParams([1.0, 1.0, 1.0], [1.0, 1.0, 1.0])
        factors = [Factor.gps_pose(0, Pose2(0, 0, 0)), Factor.gps_pose(0, Pose2(1, 0, 0))]
        graph = FactorGraph([Pose2.identity()], factors, gps_mode="pose3", strict=False)
        states, _report = solve_batch(graph, theta)
        error = trajectory_error(states, [Pose2.identity()])
        self.assertAlmostEqual(0.5 * float(error @ error), 0.125, places=9)

    def test_empty_dataset(self):
        with self.assertRaises(ConfigError):
            tracking_loss(ONES, [])


class TestSensitivity(unittest.TestCase):
    def test_two_factor_classes(self):
        s = sensitivity_matrix(ONES, two_class_solver, central=True)
        self.assertAlmostEqual(s[0, 0], 0.25, delta=1e-6)
        # d tx / d b = -a / (a + b)^2
        self.assertAlmostEqual(s[0, 2], -0.25, delta=1e-6)
        forward = sensitivity_matrix(ONES, two_class_solver)
        self.assertAlmostEqual(forward[0, 0], 0.25, delta=1e-4)

    def test_shared_variance_leaves_weighted_mean(self):
        theta = NoiseParams([1.0, 1.0, 1.0], [1.0, 1.0, 1.0])

        def solve(params):
            factors = [Factor.gps_pose(0, Pose2(0, 0, 0)), Factor.gps_pose(0, Pose2(1, 0, 0))]
            graph = FactorGraph([Pose2(0.2, 0.0, 0.0)], factors, gps_mode="pose3", strict=False)
            return solve_batch(graph, params)[0]

        np.testing.assert_allclose(sensitivity_matrix(theta, solve), np.zeros((3, 6)), atol=1e-9)

    def test_step_doubling_agrees_to_first_order(self):
        fine = sensitivity_matrix(ONES, two_class_solver, fd_rel=1e-4)
        coarse = sensitivity_matrix(ONES, two_class_solver, fd_rel=2e-4)
        np.testing.assert_allclose(fine, coarse, atol=10 * 1e-4)

    def test_failing_column_is_named(self):
        def solve(params):
            if params.odom[1] != 1.0:
                raise RankError(0)
            return two_class_solver(params)

        with self.assertRaises(PerturbationError) as ctx:
            sensitivity_matrix(ONES, solve)
        self.assertEqual(ctx.exception.parameter, 3)

    def test_trajectory_sensitivity_shape(self):
        trajectory = straight_line_trajectory(6)
        theta = NoiseParams([0.1, 0.1, 0.01], [0.01, 0.01, 0.01])
        s = fd_sensitivity(theta, trajectory, TrainConfig(smoother=EXACT))
        self.assertEqual(s.shape, (18, 6))
        # Headings stay on the axis whatever the variances.
        np.testing.assert_allclose(s[2::3], 0.0, atol=1e-8)

    def test_central_mode_agrees_with_forward(self):
        trajectory = straight_line_trajectory(6, seed=1)
        theta = NoiseParams([0.1, 0.1, 0.01], [0.01, 0.01, 0.01])
        forward = fd_sensitivity(theta, trajectory, TrainConfig(smoother=EXACT))
        central = central_sensitivity(theta, trajectory, TrainConfig(smoother=EXACT))
        np.testing.assert_allclose(central, forward, rtol=1e-3, atol=1e-6)

        dataset = [trajectory, straight_line_trajectory(6, seed=2)]
        gradient = loss_gradient(theta, dataset, TrainConfig(smoother=EXACT))
        central_gradient = loss_gradient(theta, dataset, TrainConfig(smoother=EXACT, central_fd=True))
        np.testing.assert_allclose(central_gradient, gradient, rtol=1e-3, atol=1e-6)


class TestGradient(unittest.TestCase):
    def test_zero_error_gives_zero_gradient(self):
        gradient = loss_gradient(ONES, zero_noise_dataset(), TrainConfig(lam=0.0))
        np.testing.assert_allclose(gradient, np.zeros(5), atol=1e-8)

    def test_regularizer_only_gradient(self):
        theta = NoiseParams([1.0, 2.0], [3.0, 4.0, 5.0])
        gradient = loss_gradient(theta, zero_noise_dataset(), TrainConfig(lam=0.5))
        np.testing.assert_allclose(gradient, [1, 2, 3, 4, 5], atol=1e-8)

    def test_matches_central_difference_of_loss(self):
        dataset = [straight_line_trajectory(8, seed) for seed in range(2)]
        theta = NoiseParams([0.09, 0.05, 0.02], [0.01, 0.02, 0.005])
        config = TrainConfig(lam=1e-3, smoother=EXACT)
        result = loss_and_gradient(theta, dataset, config)
        self.assertAlmostEqual(result.loss, tracking_loss(theta, dataset, config), places=12)
        vector = theta.as_vector()
        for k in range(vector.size):
            h = 1e-4 * vector[k]
            upper = tracking_loss(theta.perturbed(k, h), dataset, config)
            lower = tracking_loss(theta.perturbed(k, -h), dataset, config)
            numeric = (upper - lower) / (2 * h)
            tolerance = max(1e-3 * abs(numeric), 1e-6)
            self.assertAlmostEqual(result.gradient[k], numeric, delta=tolerance)

    def test_matches_central_difference_on_generated_trajectories(self):
        gen = GenConfig(10, 2, (0.25, 0.25), (0.01, 0.01, 0.0025), seed=11)
        dataset = [generate_trajectory(gen, j) for j in range(2)]
        theta = NoiseParams([0.3, 0.2], [0.012, 0.008, 0.003])
        config = TrainConfig(lam=0.0, smoother=EXACT)
        gradient = loss_gradient(theta, dataset, config)
        vector = theta.as_vector()
        numeric = np.zeros(vector.size)
        for k in range(vector.size):
            h = 1e-3 * vector[k]
            upper = tracking_loss(theta.perturbed(k, h), dataset, config)
            lower = tracking_loss(theta.perturbed(k, -h), dataset, config)
            numeric[k] = (upper - lower) / (2 * h)
        scale = np.max(np.abs(numeric))
        self.assertGreater(scale, 0.0)
        np.testing.assert_allclose(gradient, numeric, rtol=2e-2, atol=1e-3 * scale)

    def test_parallel_matches_serial(self):
        dataset = [straight_line_trajectory(6, seed) for seed in range(3)]
        theta = NoiseParams([0.09, 0.05, 0.02], [0.01, 0.02, 0.005])
        serial = loss_gradient(theta, dataset, TrainConfig(smoother=EXACT))
        parallel = loss_gradient(
            theta, dataset, TrainConfig(smoother=EXACT, parallel_fd=True, n_threads=3)
        )
        np.testing.assert_allclose(parallel, serial, rtol=0, atol=1e-12)

    def test_reports_training_rmse(self):
        result = loss_and_gradient(ONES, zero_noise_dataset(), TrainConfig())
        self.assertAlmostEqual(result.rmse[0], 0.0, places=9)
        self.assertAlmostEqual(result.rmse[1], 0.0, places=9)


class TestGdStep(unittest.TestCase):
    def test_zero_gradient(self):
        np.testing.assert_array_equal(gd_step(np.ones(5), np.zeros(5), 0.1), np.ones(5))

    def test_arithmetic(self):
        updated = gd_step(np.ones(5), [0.2, 0, 0, 0, 0], 0.5)
        np.testing.assert_allclose(updated, [0.9, 1, 1, 1, 1])

    def test_projection_floor(self):
        updated = gd_step(np.full(5, 1e-8), np.full(5, 1e3), 0.1)
        np.testing.assert_array_equal(updated, np.full(5, EPS_VAR))

    def test_noise_params_in_noise_params_out(self):
        updated = gd_step(ONES, [0.2, 0, 0, 0, 0], 0.5)
        self.assertIsInstance(updated, NoiseParams)
        np.testing.assert_allclose(updated.as_vector(), [0.9, 1, 1, 1, 1])

    def test_relative_step_clipping(self):
        updated = gd_step(np.ones(5), np.full(5, 100.0), 0.1, max_relative_step=0.1)
        np.testing.assert_allclose(updated, np.full(5, 0.9))


def quadratic_step(theta):
    vector = theta.as_vector()
    return StepResult(float(vector @ vector), 2.0 * vector)


class TestDescend(unittest.TestCase):
    def test_records_evaluated_thetas(self):
        theta, trace = descend(ONES, quadratic_step, 0.1, 3)
        self.assertEqual(len(trace), 3)
        np.testing.assert_allclose(trace.records[2].theta, np.full(5, 0.64))
        np.testing.assert_allclose(theta.as_vector(), np.full(5, 0.512))
        self.assertTrue(np.all(np.diff(trace.losses) < 0))
        self.assertTrue(all(r.wall_time >= 0 for r in trace.records))

    def test_failure_keeps_partial_trace(self):
        calls = []

        def failing(theta):
            calls.append(theta)
            if len(calls) == 3:
                raise RankError(4)
            return quadratic_step(theta)

        with self.assertRaises(TrainingError) as ctx:
            descend(ONES, failing, 0.1, 10)
        self.assertEqual(len(ctx.exception.trace), 2)
        self.assertIsInstance(ctx.exception.cause, RankError)
        np.testing.assert_allclose(ctx.exception.theta.as_vector(), np.full(5, 0.64))

    def test_config_errors_propagate(self):
        def broken(theta):
            raise ConfigError("bad")

        with self.assertRaises(ConfigError):
            descend(ONES, broken, 0.1, 2)


class TestTrace(unittest.TestCase):
    def test_csv_header_and_rows(self):
        _theta, trace = descend(ONES, quadratic_step, 0.1, 2)
        with tempfile.TemporaryDirectory() as tmp:
            path = trace.write_csv(Path(tmp) / "trace.csv")
            header = path.read_text().splitlines()[0]
            restored = TrainTrace.read_csv(path)
        self.assertEqual(
            header,
            "iter,theta_gps0,theta_gps1,theta_odom0,theta_odom1,theta_odom2,"
            "loss,grad_norm,wall_time_s,rmse_trans_m,rmse_rot_rad",
        )
        np.testing.assert_array_equal(restored.losses, trace.losses)

    def test_read_rejects_foreign_csv(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "other.csv"
            path.write_text("a,b\n1,2\n")
            with self.assertRaises(ConfigError):
                TrainTrace.read_csv(path)


class TestTrain(unittest.TestCase):
    def setUp(self):
        gen = GenConfig(12, 2, (0.25, 0.25), (0.01, 0.01, 0.0025), seed=5)
        self.dataset = [generate_trajectory(gen, j) for j in range(2)]
        self.theta_star = gen.theta_star
        self.config = TrainConfig(iterations=3, max_relative_step=0.02, lam=0.0)

    def test_deterministic_and_full_length(self):
        first_theta, first = train(self.dataset, self.config, self.theta_star)
        second_theta, second = train(self.dataset, self.config, self.theta_star)
        self.assertEqual(len(first), 3)
        np.testing.assert_array_equal(first_theta.as_vector(), second_theta.as_vector())
        np.testing.assert_array_equal(first.losses, second.losses)

    def test_minibatch_is_seeded_subset(self):
        config = TrainConfig(batch_size=1, seed=3)
        first = [minibatch(self.dataset, config, i) for i in range(6)]
        second = [minibatch(self.dataset, config, i) for i in range(6)]
        self.assertEqual(
            [[id(t) for t in batch] for batch in first], [[id(t) for t in batch] for batch in second]
        )
        self.assertTrue(all(len(batch) == 1 for batch in first))
        self.assertIs(minibatch(self.dataset, TrainConfig(), 0), self.dataset)
        self.assertIs(minibatch(self.dataset, TrainConfig(batch_size=5), 0), self.dataset)

    def test_empty_dataset(self):
        with self.assertRaises(ConfigError):
            train([], self.config, self.theta_star)


class TestTrainingFromMisspecifiedStart(unittest.TestCase):
    """Default settings starting from 10x the generating variances must not lose accuracy."""

    def test_test_rmse_no_worse_than_oracle(self):
        gen = GenConfig(20, 2, (0.25, 0.25), (0.01, 0.01, 0.0025), seed=7)
        dataset = [generate_trajectory(gen, j) for j in range(2)]
        held_out = GenConfig(
            30, 3, (0.25, 0.25), (0.01, 0.01, 0.0025), seed=7, stream=split_stream("test")
        )
        test_set = [generate_trajectory(held_out, j) for j in range(3)]
        theta0 = gen.theta_star.scaled(10.0)
        theta, trace = train(dataset, TrainConfig(iterations=6), theta0)

        self.assertEqual(len(trace), 6)
        self.assertTrue(np.all(np.isfinite(trace.losses)))
        ratio = theta.as_vector() / theta0.as_vector()
        # Default clipping bounds every iteration to 10% per variance.
        self.assertTrue(np.all(ratio <= 1.1**6 + 1e-9))
        self.assertTrue(np.all(ratio >= 0.9**6 - 1e-9))
        oracle_trans, _ = evaluate(gen.theta_star, test_set)
        learned_trans, _ = evaluate(theta, test_set)
        self.assertLessEqual(learned_trans, 1.10 * oracle_trans)


if __name__ == "__main__":
    unittest.main()
