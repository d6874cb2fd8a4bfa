"""
    Tests for the stochastic accelerated primal-dual method
    """

import math
import unittest

import numpy as np

from bilevelminimax.instances import QuadraticSaddle
from bilevelminimax.sapd import sapd, sapd_params


class SapdParamsTests(unittest.TestCase):
    """
        Test for sapd_params.
        """

    def setUp(self):
        self.params = sapd_params(1e-2, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0)

    def test_when_sigma_equals_L_then_first_contraction_is_known(self):
        "Check theta_bar_1 = 1 - (sqrt(5) - 1) / 4 for sigma = L = 1"

        self.assertAlmostEqual(self.params.theta_bar_1, 0.690983005625053, places=12)

    def test_when_sigma_equals_L_then_second_contraction_is_known(self):
        "Check theta_bar_2 = 1 - (sqrt(257) - 1) / 128 for sigma = L = 1"

        self.assertAlmostEqual(self.params.theta_bar_2, 0.882568597329052, places=12)

    def test_when_noise_free_then_noise_terms_vanish(self):
        "Check that delta = 0 zeroes both noise-driven contractions"

        terms = (self.params.theta_dbar_1, self.params.theta_dbar_2)

        self.assertEqual(terms, (0.0, 0.0))

    def test_when_noise_free_then_theta_is_largest_contraction(self):
        "Check theta = max(theta_bar_1, theta_bar_2)"

        self.assertEqual(self.params.theta, self.params.theta_bar_2)

    def test_when_built_then_steps_follow_theta(self):
        "Check tau = (1 - theta) / (sigma_x theta)"

        theta = self.params.theta

        self.assertAlmostEqual(self.params.tau, (1.0 - theta) / theta)

    def test_when_T_overridden_then_override_is_used(self):
        "Check that T_override replaces the derived iteration count"

        params = sapd_params(1e-2, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, T_override=5)

        self.assertEqual(params.T, 5)

    def test_when_T_exceeds_cap_then_it_is_clamped(self):
        "Check that max_T bounds the iteration count"

        params = sapd_params(1e-2, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, max_T=3)

        self.assertEqual((params.T, params.T_clamped), (3, True))

    def test_when_noise_present_then_iteration_count_grows(self):
        "Check that delta > 0 lengthens the schedule"

        noisy = sapd_params(1e-2, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)

        self.assertGreater(noisy.T, self.params.T)

    def test_when_diameter_infinite_then_raises(self):
        "Check that SAPD needs bounded domains"

        with self.assertRaises(ValueError):
            sapd_params(1e-2, 1.0, 1.0, 1.0, 0.0, math.inf, 1.0)

    def test_when_constant_not_positive_then_raises(self):
        "Check that eps_hat and the moduli must be positive"

        cases = ((0.0, 1.0, 1.0, 1.0), (1e-2, 0.0, 1.0, 1.0), (1e-2, 1.0, 1.0, 0.0))

        for args in cases:
            with self.subTest(args=args):

                with self.assertRaises(ValueError):
                    sapd_params(*args, 0.0, 1.0, 1.0)

    def test_when_noise_negative_then_raises(self):
        "Check that delta_sq must be nonnegative"

        with self.assertRaises(ValueError):
            sapd_params(1e-2, 1.0, 1.0, 1.0, -1.0, 1.0, 1.0)


class SapdTests(unittest.TestCase):
    """
        Test for sapd on box-constrained quadratic saddles.
        """

    _x_star = np.array([0.3])
    _y_star = np.array([-0.2])

    def test_when_noise_free_then_converges_to_saddle(self):
        "Check sigma |x - x*|^2 + sigma |y - y*|^2 <= 10 eps_hat^2 without noise"

        eps_hat = 1e-4
        sub = QuadraticSaddle.scalar(1.0, 2.0, x_star=self._x_star, y_star=self._y_star)

        result = sapd(eps_hat, np.zeros(1), np.zeros(1), sub)

        self.assertLessEqual(sub.distance_sq(result.x, result.y), 10.0 * eps_hat**2)

    def test_when_noisy_then_mean_squared_distance_is_bounded(self):
        "Check the expected distance over 40 seeds with delta^2 = 1"

        eps_hat = 0.5
        distances = []
        for seed in range(40):
            sub = QuadraticSaddle.scalar(
                1.0,
                2.0,
                x_star=self._x_star,
                y_star=self._y_star,
                delta=1.0,
                seed=seed,
            )
            result = sapd(eps_hat, np.zeros(1), np.zeros(1), sub, delta_sq=1.0)
            distances.append(sub.distance_sq(result.x, result.y))

        self.assertLessEqual(np.mean(distances), 1.5 * eps_hat**2)

    def test_when_run_then_two_gradients_per_iteration_plus_one(self):
        "Check grad_calls = 2T + 1"

        sub = QuadraticSaddle.scalar(1.0, 2.0)
        params = sapd_params(1e-2, 1.0, 1.0, 2.0, 0.0, 2.0, 2.0, T_override=7)

        result = sapd(1e-2, np.zeros(1), np.zeros(1), sub, params=params)

        self.assertEqual(result.grad_calls, 15)

    def test_when_run_then_problem_counter_agrees(self):
        "Check that every counted call reached the saddle problem"

        sub = QuadraticSaddle.scalar(1.0, 2.0)
        params = sapd_params(1e-2, 1.0, 1.0, 2.0, 0.0, 2.0, 2.0, T_override=7)

        result = sapd(1e-2, np.zeros(1), np.zeros(1), sub, params=params)

        self.assertEqual(sub.calls, result.grad_calls)

    def test_when_started_outside_box_then_iterates_stay_inside(self):
        "Check that the start is projected onto the domain"

        sub = QuadraticSaddle.scalar(1.0, 2.0)
        params = sapd_params(1e-2, 1.0, 1.0, 2.0, 0.0, 2.0, 2.0, T_override=0)

        result = sapd(1e-2, [4.0], [-4.0], sub, params=params)

        np.testing.assert_array_equal(np.concatenate([result.x, result.y]), [1.0, -1.0])
