"""
    Tests for the analytic toy instances and the quadratic saddles
    """

import unittest

import numpy as np

from bilevelminimax.const import FAMILY, TOY_VARIANT
from bilevelminimax.instances import (
    QuadraticSaddle,
    ToyInstance,
    instance_from_dict,
    make_toy_unconstrained,
    toy_penalized_kkt,
)


class ToyUnconstrainedTests(unittest.TestCase):
    """
        Test for the unconstrained toy.
        """

    def setUp(self):
        self.problem, self.solution = make_toy_unconstrained()

    def test_when_built_then_bilevel_optimum_is_known(self):
        "Check (x1, y1, y2) = (0.15, 0.15, 0)"

        np.testing.assert_array_equal(self.solution, [0.15, 0.15, 0.0])

    def test_when_at_optimum_then_upper_objective_is_minimal(self):
        "Check max over x2 of f at (0.15, 0.15, 0) equals 0.045"

        result = self.problem.upper_max(np.array([0.15]), np.array([0.15]), np.zeros(1))

        self.assertAlmostEqual(result, 0.045)

    def test_when_rho_large_then_penalized_point_approaches_optimum(self):
        "Check that the penalized stationary point tends to the bilevel optimum"

        primal, _ = toy_penalized_kkt(1e8)

        np.testing.assert_allclose(primal, self.solution, atol=1e-6)

    def test_when_rho_small_then_penalized_x1_lies_between_optimum_and_target(self):
        "Check 0.15 < x1 < 0.3 for rho = 4"

        primal, _ = toy_penalized_kkt(4.0)

        self.assertTrue(0.15 < primal[0] < 0.3)


class ToyInstanceTests(unittest.TestCase):
    """
        Test for the ToyInstance class.
        """

    def test_when_variant_unknown_then_raises(self):
        "Check that only the two scalar variants are accepted"

        with self.assertRaises(ValueError):
            ToyInstance(TOY_VARIANT.GroupDro)

    def test_when_variant_given_then_family_follows(self):
        "Check the family names of both variants"

        families = (
            ToyInstance(TOY_VARIANT.UnconstrainedSaddle).family,
            ToyInstance(TOY_VARIANT.ConstrainedScalar).family,
        )

        self.assertEqual(families, (FAMILY.ToyUnconstrained, FAMILY.ToyConstrained))

    def test_when_unconstrained_then_no_constrained_problem(self):
        "Check that the saddle toy has no constrained lower level"

        toy = ToyInstance(TOY_VARIANT.UnconstrainedSaddle)

        self.assertIsNone(toy.constrained_problem())

    def test_when_constrained_then_bilevel_problem_has_no_x2(self):
        "Check that the constrained toy is reformulated"

        toy = ToyInstance(TOY_VARIANT.ConstrainedScalar)

        self.assertEqual(toy.bilevel_problem().layout.n_x2, 0)

    def test_when_constrained_then_analytic_solution_is_half_half(self):
        "Check the constrained toy optimum (0.5, 0.5)"

        toy = ToyInstance(TOY_VARIANT.ConstrainedScalar)

        np.testing.assert_array_equal(toy.analytic_solution, [0.5, 0.5])

    def test_when_rebuilt_from_dict_then_variant_is_kept(self):
        "Check the toy dict round trip"

        toy = ToyInstance(TOY_VARIANT.ConstrainedScalar, seed=3)

        rebuilt = instance_from_dict(toy.to_dict())

        self.assertEqual((rebuilt.variant, rebuilt.seed), (toy.variant, 3))


class QuadraticSaddleTests(unittest.TestCase):
    """
        Test for the QuadraticSaddle class.
        """

    def test_when_scalar_built_then_lipschitz_constant_is_L(self):
        "Check the operator norm of the Jacobian"

        sub = QuadraticSaddle.scalar(1.0, 2.0)

        self.assertAlmostEqual(sub.L_grad_hbar, 2.0)

    def test_when_L_not_above_sigma_then_raises(self):
        "Check that L must exceed sigma"

        with self.assertRaises(ValueError):
            QuadraticSaddle.scalar(2.0, 2.0)

    def test_when_saddle_point_outside_box_then_raises(self):
        "Check that x* and y* must lie in the box"

        with self.assertRaises(ValueError):
            QuadraticSaddle(1.0, 1.0, 0.5, [2.0], [0.0])

    def test_when_at_saddle_point_then_gradient_vanishes(self):
        "Check grad h(x*, y*) = 0 without noise"

        sub = QuadraticSaddle(1.0, 0.5, 0.3, [0.2], [-0.4])

        gx, gy = sub.grad(np.array([0.2]), np.array([-0.4]))

        np.testing.assert_array_equal(np.concatenate([gx, gy]), [0.0, 0.0])

    def test_when_gradients_requested_then_calls_are_counted(self):
        "Check the call counter"

        sub = QuadraticSaddle.scalar(1.0, 2.0)

        for _ in range(3):
            sub.grad(np.zeros(1), np.zeros(1))

        self.assertEqual(sub.calls, 3)

    def test_when_noise_negative_then_raises(self):
        "Check that delta must be nonnegative"

        with self.assertRaises(ValueError):
            QuadraticSaddle.scalar(1.0, 2.0, delta=-1.0)
