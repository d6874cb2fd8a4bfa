"""
    Tests for the group-DRO hyperparameter tuning family
    """

import unittest

import numpy as np

from bilevelminimax.dro import DroConfig, DroInstance, capped_simplex_max, gen_dro

SMALL_DRO = DroConfig(
    n_train=200, n_val_per_group=10, minibatch=32, input_dim=4, feature_dim=2, seed=2
)
FULL_BATCH_DRO = DroConfig(
    n_train=200, n_val_per_group=10, minibatch=200, input_dim=4, feature_dim=2, seed=2
)


def finite_difference(func, point, h=1e-6):
    grad = np.zeros(point.size)
    for i in range(point.size):
        e = np.zeros(point.size)
        e[i] = h
        grad[i] = (func(point + e) - func(point - e)) / (2.0 * h)
    return grad


class DroConfigTests(unittest.TestCase):
    """
        Test for the DroConfig class.
        """

    def test_when_minority_share_small_then_last_group_is_smallest(self):
        "Check the training sizes of 200 samples with a 3% minority group"

        self.assertEqual(SMALL_DRO.train_sizes.tolist(), [65, 65, 64, 6])

    def test_when_sizes_summed_then_total_is_n_train(self):
        "Check that every training sample is assigned to a group"

        self.assertEqual(int(DroConfig().train_sizes.sum()), 2000)

    def test_when_val_cap_infeasible_then_raises(self):
        "Check that G * val_cap must reach one"

        with self.assertRaises(ValueError):
            DroConfig(val_cap=0.2)

    def test_when_eta_init_outside_range_then_raises(self):
        "Check eta_min <= eta_init <= eta_max"

        with self.assertRaises(ValueError):
            DroConfig(eta_init=20.0)

    def test_when_minibatch_exceeds_n_train_then_raises(self):
        "Check that a minibatch must fit in the training set"

        with self.assertRaises(ValueError):
            DroConfig(n_train=100, minibatch=128)


class DroInstanceTests(unittest.TestCase):
    """
        Test for the DroInstance class.
        """

    @classmethod
    def setUpClass(cls):
        cls.instance = gen_dro(SMALL_DRO)
        cls.problem = cls.instance.problem

    def _sample(self, seed):
        rng = np.random.default_rng(seed)
        u = self.problem.primal_domain.sample(rng)
        v = self.problem.dual_domain.sample(rng)
        x1, y1, y2 = self.problem.layout.split_primal(u)
        x2 = self.problem.layout.split_dual(v)[0]
        return x1, x2, y1, y2

    def test_when_generated_then_train_split_has_n_train_rows(self):
        "Check the training features"

        self.assertEqual(self.instance.train.features.shape, (200, 4))

    def test_when_generated_then_features_have_unit_norm(self):
        "Check that feature rows are normalized"

        norms = np.linalg.norm(self.instance.train.features, axis=1)

        np.testing.assert_allclose(norms, 1.0)

    def test_when_differentiated_then_ftilde1_gradient_matches_finite_differences(self):  # noqa: E501
        "Check grad f~1 over (x1, y1, y2)"

        for seed in range(3):
            with self.subTest(seed=seed):
                x1, _, y1, y2 = self._sample(seed)
                sizes = np.cumsum([x1.size, y1.size])
                point = np.concatenate([x1, y1, y2])

                approx = finite_difference(
                    lambda w: self.instance.eval_ftilde1(*np.split(w, sizes)), point
                )

                exact = self.instance.grad_ftilde1(x1, y1, y2)
                self.assertLessEqual(np.abs(exact - approx).max(), 1e-6)

    def test_when_differentiated_then_f1_gradient_matches_finite_differences(self):
        "Check grad f1 over (x1, x2, y1, y2)"

        for seed in range(3):
            with self.subTest(seed=seed):
                x1, x2, y1, y2 = self._sample(seed)
                sizes = np.cumsum([x1.size, x2.size, y1.size])
                point = np.concatenate([x1, x2, y1, y2])

                approx = finite_difference(
                    lambda w: self.instance.eval_f1(*np.split(w, sizes)), point
                )

                exact = self.instance.grad_f1(x1, x2, y1, y2)
                self.assertLessEqual(np.abs(exact - approx).max(), 1e-6)

    def test_when_midpoint_taken_then_ftilde1_is_convex_in_y1(self):
        "Check f~1(mid) <= average of the endpoint values in y1"

        for seed in range(5):
            with self.subTest(seed=seed):
                x1, _, a, y2 = self._sample(seed)
                _, _, b, _ = self._sample(seed + 100)

                mid = self.instance.eval_ftilde1(x1, 0.5 * (a + b), y2)

                ends = 0.5 * (
                    self.instance.eval_ftilde1(x1, a, y2)
                    + self.instance.eval_ftilde1(x1, b, y2)
                )
                self.assertLessEqual(mid, ends + 1e-12)

    def test_when_eta_huge_then_primal_value_uses_uniform_weights(self):
        "Check that a large eta pins the group weights to 1/G"

        x1, _, y1, _ = self._sample(0)
        x1[-1] = 1e6
        uniform = np.full(4, 0.25)

        value = self.problem.primal_value(x1, y1)

        expected = self.instance.eval_ftilde1(x1, y1, uniform)
        self.assertAlmostEqual(value, expected, delta=1e-4)

    def test_when_minibatch_smaller_than_split_then_groups_are_stratified(self):
        "Check ceil(32 / 4) = 8 picks per group, the whole 6-sample minority group"

        rng = np.random.default_rng(0)

        picks = self.instance.stratified_indices(self.instance.train, rng)

        self.assertEqual(picks.size, 30)

    def test_when_stratified_then_every_group_is_represented(self):
        "Check that each group appears in a minibatch"

        rng = np.random.default_rng(1)

        picks = self.instance.stratified_indices(self.instance.train, rng)

        groups = set(self.instance.train.groups[picks].tolist())
        self.assertEqual(groups, {0, 1, 2, 3})

    def test_when_evaluated_then_report_has_loss_and_accuracy(self):
        "Check the validation metric names"

        x1, _, y1, _ = self._sample(0)

        report = self.instance.evaluate(x1, y1)

        self.assertEqual(
            set(report),
            {
                "worst_group_loss",
                "average_loss",
                "worst_group_accuracy",
                "average_accuracy",
            },
        )

    def test_when_rebuilt_from_dict_then_data_digest_matches(self):
        "Check that regeneration from the config reproduces the data"

        rebuilt = DroInstance.from_dict(self.instance.to_dict())

        self.assertEqual(rebuilt.data_digest(), self.instance.data_digest())

    def test_when_stored_digest_tampered_then_from_dict_raises(self):
        "Check that a digest mismatch is reported"

        data = self.instance.to_dict()
        data["metadata"]["data_digest"] = "0" * 64

        with self.assertRaises(ValueError):
            DroInstance.from_dict(data)

    def test_when_unpacked_then_yields_problem_and_oracle(self):
        "Check that an instance unpacks as (problem, oracle)"

        problem, oracle = self.instance

        self.assertIs(oracle.problem, problem)


class MinibatchOracleTests(unittest.TestCase):
    """
        Test for the MinibatchOracle class.
        """

    def test_when_minibatch_is_full_split_then_measured_noise_is_zero(self):
        "Check that full-batch gradients carry no noise"

        oracle = gen_dro(FULL_BATCH_DRO).minibatch_oracle(0)

        self.assertLessEqual(max(oracle.delta_f, oracle.delta_ftilde), 1e-12)

    def test_when_minibatch_small_then_measured_noise_is_positive(self):
        "Check that stratified minibatches are noisy"

        oracle = gen_dro(SMALL_DRO).minibatch_oracle(0)

        self.assertGreater(oracle.delta_ftilde, 0.0)

    def test_when_gradient_drawn_then_call_is_counted(self):
        "Check the oracle counter"

        instance = gen_dro(SMALL_DRO)
        oracle = instance.minibatch_oracle(5)
        x1 = instance.initial_x1()
        y1, y2 = np.zeros(2), np.full(4, 0.25)

        oracle.grad_ftilde1(x1, y1, y2)

        self.assertEqual(oracle.counter.snapshot(), (0, 1))


class CappedSimplexMaxTests(unittest.TestCase):
    """
        Test for capped_simplex_max.
        """

    def test_when_cap_is_half_then_two_largest_values_share_weight(self):
        "Check max over the half-capped simplex of (3, 1, 2)"

        self.assertAlmostEqual(capped_simplex_max([3.0, 1.0, 2.0], 0.5), 2.5)

    def test_when_cap_is_one_then_result_is_max(self):
        "Check that an uncapped simplex picks the largest value"

        self.assertEqual(capped_simplex_max([3.0, 1.0, 2.0], 1.0), 3.0)
