"""
    Tests for the optimal first-order saddle-point method
    """

import math
import unittest

import numpy as np

from bilevelminimax.instances import QuadraticSaddle
from bilevelminimax.optfom import OptFomParams, certificate, optfom


class OptFomParamsTests(unittest.TestCase):
    """
        Test for OptFomParams.from_constants.
        """

    def setUp(self):
        self.params = OptFomParams.from_constants(1.0, 1.0, 2.0)

    def test_when_moduli_equal_then_alpha_bar_is_one(self):
        "Check alpha_bar = min(1, sqrt(8 sigma_y / sigma_x))"

        self.assertEqual(self.params.alpha_bar, 1.0)

    def test_when_moduli_equal_then_dual_step_is_half_over_sigma_y(self):
        "Check eta_y = min(1 / (2 sigma_y), 4 / (alpha_bar sigma_x))"

        self.assertEqual(self.params.eta_y, 0.5)

    def test_when_L_is_two_then_inner_step_follows_L_over_sigma_x(self):
        "Check zeta = 1 / (2 sqrt(5) (1 + 8 L / sigma_x))"

        self.assertAlmostEqual(self.params.zeta, 1.0 / (34.0 * math.sqrt(5.0)))

    def test_when_L_is_two_then_certificate_step_is_quarter(self):
        "Check zeta_hat = min(sigma_x, sigma_y) / L^2"

        self.assertEqual(self.params.zeta_hat, 0.25)


class OptFomTests(unittest.TestCase):
    """
        Test for optfom on box-constrained quadratic saddles.
        """

    _x_star = np.array([0.3, -0.2])
    _y_star = np.array([0.1, 0.4])

    def setUp(self):
        self.sub = QuadraticSaddle.scalar(
            1.0, 2.0, dim=2, x_star=self._x_star, y_star=self._y_star
        )

    def test_when_solved_to_tight_tolerance_then_x_is_the_saddle_point(self):
        "Check convergence of the primal iterate"

        result = optfom(1e-8, np.zeros(2), np.zeros(2), self.sub)

        self.assertLessEqual(np.linalg.norm(result.x - self._x_star), 1e-6)

    def test_when_solved_to_tight_tolerance_then_y_is_the_saddle_point(self):
        "Check convergence of the dual iterate"

        result = optfom(1e-8, np.zeros(2), np.zeros(2), self.sub)

        self.assertLessEqual(np.linalg.norm(result.y - self._y_star), 1e-6)

    def test_when_solved_then_certificate_is_below_target(self):
        "Check that the returned certificate meets eps_bar"

        result = optfom(1e-6, np.zeros(2), np.zeros(2), self.sub)

        self.assertLessEqual(result.certificate, 1e-6)

    def test_when_started_at_saddle_point_then_no_iteration_runs(self):
        "Check that a certified start returns immediately"

        result = optfom(1e-6, self._x_star, self._y_star, self.sub)

        self.assertEqual(result.iters, 0)

    def test_when_started_at_saddle_point_then_certificate_is_zero(self):
        "Check the certificate of the exact saddle point"

        self.assertEqual(certificate(self.sub, self._x_star, self._y_star), 0.0)

    def test_when_eps_not_positive_then_raises(self):
        "Check that eps_bar must be positive"

        for eps in (0.0, -1e-3):
            with self.subTest(eps=eps):

                with self.assertRaises(ValueError):
                    optfom(eps, np.zeros(2), np.zeros(2), self.sub)

    def test_when_iteration_cap_hit_then_budget_flag_set(self):
        "Check that max_iters stops the outer loop"

        result = optfom(1e-12, np.zeros(2), np.zeros(2), self.sub, max_iters=1)

        self.assertTrue(result.budget_exceeded)

    def test_when_gradient_budget_hit_then_budget_flag_set(self):
        "Check that max_grad_calls stops the method"

        result = optfom(1e-12, np.zeros(2), np.zeros(2), self.sub, max_grad_calls=1)

        self.assertTrue(result.budget_exceeded)

    def test_when_gradient_budget_hit_before_certificate_then_point_is_feasible(self):
        "Check that the fallback point lies in the domain"

        result = optfom(1e-12, [5.0, 5.0], [5.0, 5.0], self.sub, max_grad_calls=1)

        self.assertTrue(self.sub.prox_p.contains(result.x))

    def test_when_solved_then_grad_calls_match_the_counter(self):
        "Check that grad_calls counts every evaluation"

        result = optfom(1e-6, np.zeros(2), np.zeros(2), self.sub)

        self.assertEqual(result.grad_calls, self.sub.calls)

    def test_when_callback_given_then_it_sees_every_iteration(self):
        "Check that the callback is invoked for k = 0..iters"

        seen = []

        result = optfom(
            1e-6,
            np.zeros(2),
            np.zeros(2),
            self.sub,
            callback=lambda k, cert, calls: seen.append(k),
        )

        self.assertEqual(seen, list(range(result.iters + 1)))

    def test_when_tolerance_tightened_then_cost_grows_logarithmically(self):
        "Check that 1e-8 costs at most three times the gradients of 1e-4"

        cost = {}
        for eps in (1e-4, 1e-8):
            sub = QuadraticSaddle.scalar(
                1.0, 10.0, dim=2, x_star=self._x_star, y_star=self._y_star
            )
            cost[eps] = optfom(eps, np.zeros(2), np.zeros(2), sub).grad_calls

        self.assertLessEqual(cost[1e-8], 3 * cost[1e-4])
