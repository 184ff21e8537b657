"""
Tests for IBP certification, branch and bound, the error cascade,
polytope sampling and the PGD gap hunt
"""

import unittest

import pytest
import torch
import torch.nn.functional as F
from torch import nn

from models.config_models import AttackConfig, AttackInit, BabConfig
from models.result_models import Provenance, VerificationStatus
from services.attack import PGDAttack
from services.bounds import input_box
from services.data import Dataset
from services.network import Network
from services.tensor import DTYPE, Rng
from services.verify import (
    BranchAndBound,
    VerificationError,
    bab_verify,
    ibp_verified,
    loss_landscape,
    pgd_gap_hunt,
    polytope_sample,
    verified_error,
)
from tests.helpers import corners, gradient_trap_network, linear, mlp


def worst_margin_on_grid(net, x0, epsilon, y_true, per_axis=801):
    b = input_box(x0.reshape(1, -1), epsilon)
    ticks = [torch.linspace(float(b.lower[0, i]), float(b.upper[0, i]), per_axis, dtype=DTYPE) for i in range(2)]
    u, v = torch.meshgrid(*ticks, indexing="ij")
    points = torch.stack([u.reshape(-1), v.reshape(-1)], dim=1)
    with torch.no_grad():
        logits = net(points)
    margins = logits - logits[:, y_true:y_true + 1]
    margins[:, y_true] = float("-inf")
    return float(margins.max())


class TestIbpVerified(unittest.TestCase):
    """Test cases for ibp_verified"""

    def test_zero_radius_follows_the_prediction(self):
        net = mlp([2, 8, 2], seed=0)
        x = Rng(1).uniform((10, 2))
        with torch.no_grad():
            predicted = net(x).argmax(dim=1)
        verified, _ = ibp_verified(net, x, predicted, 0.0)
        self.assertTrue(bool(verified.all()))
        verified, _ = ibp_verified(net, x, 1 - predicted, 0.0)
        self.assertFalse(bool(verified.any()))

    def test_affine_margin_is_exact(self):
        net = Network([linear([[1.0, -1.0], [0.0, 0.0]], [0.0, 0.0])], (2,), 2)
        x0 = torch.tensor([[0.5, 0.2]], dtype=DTYPE)
        verified, margins = ibp_verified(net, x0, 0, 0.1)
        # z1 - z0 = -(x_a - x_b), largest at x_a = 0.4, x_b = 0.3
        self.assertAlmostEqual(float(margins[0, 1]), -0.1, places=12)
        self.assertTrue(bool(verified[0]))

    def test_elision_only_helps(self):
        net = mlp([2, 16, 16, 3], seed=2)
        x = Rng(3).uniform((30, 2))
        with torch.no_grad():
            y = net(x).argmax(dim=1)
        with_elision, _ = ibp_verified(net, x, y, 0.02, use_elision=True)
        without, _ = ibp_verified(net, x, y, 0.02, use_elision=False)
        self.assertTrue(bool((with_elision | ~without).all()))


class TestBranchAndBound(unittest.TestCase):
    """Test cases for the complete verifier"""

    def test_rejects_non_relu_networks(self):
        with self.assertRaises(VerificationError):
            BranchAndBound(mlp([2, 4, 2], activation="tanh"), BabConfig())

    def test_affine_network_resolves_at_the_root(self):
        net = Network([linear([[1.0, -1.0], [0.0, 0.0]], [0.0, 0.0])], (2,), 2)
        outcome = bab_verify(net, torch.tensor([0.5, 0.2], dtype=DTYPE), 0, 0.1, BabConfig())
        self.assertEqual(outcome.status, VerificationStatus.VERIFIED)
        self.assertEqual(outcome.nodes_explored, 1)
        self.assertAlmostEqual(outcome.best_upper_bound, -0.1, places=12)
        self.assertEqual(outcome.provenance, Provenance.BAB)

    def test_affine_network_falsified_at_a_corner(self):
        net = Network([linear([[1.0, -1.0], [0.0, 0.0]], [0.0, 0.0])], (2,), 2)
        outcome = bab_verify(net, torch.tensor([0.5, 0.45], dtype=DTYPE), 0, 0.1, BabConfig())
        self.assertEqual(outcome.status, VerificationStatus.FALSIFIED)
        self.assertEqual(outcome.counterexample_class, 1)

    def test_counterexamples_replay(self):
        checked = 0
        for seed in range(30):
            net = mlp([2, 12, 12, 2], seed=seed)
            x0 = Rng(200 + seed).uniform((2,))
            with torch.no_grad():
                y = int(net(x0.reshape(1, 2)).argmax(dim=1)[0])
            outcome = bab_verify(net, x0, y, 0.3, BabConfig(max_nodes=2000), domain=(0.0, 1.0))
            if outcome.status != VerificationStatus.FALSIFIED:
                continue
            checked += 1
            x = torch.tensor(outcome.counterexample, dtype=DTYPE).reshape(1, 2)
            self.assertTrue(bool(input_box(x0.reshape(1, 2), 0.3, (0.0, 1.0)).contains(x, tol=1e-12)[0]))
            with torch.no_grad():
                self.assertNotEqual(int(net(x).argmax(dim=1)[0]), y)
            self.assertEqual(outcome.counterexample_class, int(net(x).argmax(dim=1)[0]))
        self.assertGreater(checked, 0)

    def test_verified_outcomes_are_sound(self):
        checked = 0
        for seed in range(30):
            net = mlp([2, 12, 12, 2], seed=seed)
            x0 = Rng(300 + seed).uniform((2,))
            with torch.no_grad():
                y = int(net(x0.reshape(1, 2)).argmax(dim=1)[0])
            outcome = bab_verify(net, x0, y, 0.05, BabConfig(max_nodes=5000))
            if outcome.status != VerificationStatus.VERIFIED:
                continue
            checked += 1
            b = input_box(x0.reshape(1, 2), 0.05)
            samples = b.lower + (b.upper - b.lower) * Rng(seed).uniform((100000, 2))
            points = torch.cat([samples, corners(b.lower, b.upper)])
            with torch.no_grad():
                self.assertTrue(bool((net(points).argmax(dim=1) == y).all()))
        self.assertGreater(checked, 0)

    def test_same_input_same_outcome(self):
        net = mlp([2, 12, 12, 2], seed=4)
        x0 = torch.tensor([0.4, 0.6], dtype=DTYPE)
        first = bab_verify(net, x0, 0, 0.1, BabConfig(max_nodes=500))
        second = bab_verify(net, x0, 0, 0.1, BabConfig(max_nodes=500))
        self.assertEqual(first.status, second.status)
        self.assertEqual(first.nodes_explored, second.nodes_explored)
        self.assertEqual(first.best_upper_bound, second.best_upper_bound)

    def test_node_budget_gives_unknown(self):
        """A single node cannot settle a box whose root bound is loose"""
        net = gradient_trap_network()
        outcome = bab_verify(net, torch.tensor([0.5], dtype=DTYPE), 0, 0.25, BabConfig(max_nodes=1, attack_steps=0))
        self.assertEqual(outcome.status, VerificationStatus.UNKNOWN)
        self.assertGreater(outcome.best_upper_bound, 0.0)

    def test_label_out_of_range(self):
        with self.assertRaises(VerificationError):
            bab_verify(mlp([2, 4, 2]), torch.zeros(2, dtype=DTYPE), 3, 0.1, BabConfig())

    @pytest.mark.slow
    def test_gap_mode_brackets_the_dense_grid_maximum(self):
        """Upper and lower margin bounds sandwich a dense grid search"""
        for seed in range(50):
            net = mlp([2, 8, 8, 2], seed=seed)
            x0 = Rng(500 + seed).uniform((2,))
            cfg = BabConfig(optimality_gap=1e-4, max_nodes=200000, time_budget=600.0, min_box_width=1e-7)
            outcome = bab_verify(net, x0, 0, 0.05, cfg)
            grid_max = worst_margin_on_grid(net, x0, 0.05, 0)
            self.assertLessEqual(grid_max, outcome.best_upper_bound + 1e-12)
            self.assertLess(outcome.best_upper_bound - outcome.best_lower_bound, 1e-3)
            self.assertLessEqual(outcome.best_lower_bound, grid_max + 1e-3)


class TestVerifiedError(unittest.TestCase):
    """Test cases for the verification cascade"""

    def setUp(self):
        self.net = mlp([2, 12, 12, 2], seed=6)
        inputs = Rng(7).uniform((25, 2))
        with torch.no_grad():
            labels = self.net(inputs).argmax(dim=1)
        labels[::6] = 1 - labels[::6]
        self.data = Dataset(inputs=inputs, labels=labels, class_count=2)
        self.attack = AttackConfig(steps=20, restarts=2)
        self.bab = BabConfig(max_nodes=2000)

    def test_zero_radius_every_rate_is_nominal(self):
        rates, records = verified_error(self.net, self.data, 0.0, self.attack, self.bab, (0.0, 1.0))
        self.assertAlmostEqual(rates.nominal_err, 5 / 25)
        self.assertEqual(rates.pgd_rate, rates.nominal_err)
        self.assertEqual(rates.bab_rate, rates.nominal_err)
        self.assertEqual(rates.ibp_rate, rates.nominal_err)
        self.assertEqual(len(records), 25)

    def test_rates_are_ordered(self):
        rates, records = verified_error(self.net, self.data, 0.08, self.attack, self.bab, (0.0, 1.0))
        self.assertTrue(rates.nominal_err <= rates.pgd_rate <= rates.bab_rate <= rates.ibp_rate)
        provenances = {r.provenance for r in records}
        self.assertIn(Provenance.NOMINAL, provenances)
        for record in records:
            if record.status == VerificationStatus.VERIFIED:
                self.assertLessEqual(record.bab_upper, 0.0)

    def test_reported_epsilon(self):
        rates, _ = verified_error(self.net, self.data, 0.2, self.attack, self.bab, None, reported_epsilon=0.05)
        self.assertEqual(rates.epsilon, 0.05)


class TestGapHunt(unittest.TestCase):
    """PGD gets no gradient at the center of the gradient-trap network"""

    def setUp(self):
        self.net = gradient_trap_network()
        self.data = Dataset(inputs=torch.tensor([[0.5]], dtype=DTYPE), labels=[0], class_count=2)
        self.attack = AttackConfig(epsilon=0.25, steps=50, restarts=1, init=AttackInit.CENTER, domain_clip=None)

    def test_pgd_misses_the_attack(self):
        findings = pgd_gap_hunt(self.net, self.data, 0.25, self.attack, BabConfig())
        self.assertEqual(len(findings), 1)
        finding = findings[0]
        self.assertFalse(finding.pgd.success)
        self.assertEqual(finding.pgd_point, [0.5])
        self.assertEqual(finding.counterexample_class, 1)
        self.assertGreater(finding.counterexample[0], 0.71)
        self.assertLessEqual(finding.linf_distance, 0.25 + 1e-12)
        self.assertGreater(finding.counterexample_margin, 0.0)

    def test_bab_counterexample_seeds_pgd(self):
        outcome = bab_verify(self.net, torch.tensor([0.5], dtype=DTYPE), 0, 0.25, BabConfig())
        self.assertEqual(outcome.status, VerificationStatus.FALSIFIED)
        seeded = PGDAttack(self.net, self.attack).attack(
            self.data.inputs, 0, init=torch.tensor([outcome.counterexample], dtype=DTYPE)
        )
        self.assertTrue(bool(seeded.success[0]))

    def test_loss_landscape(self):
        rows = loss_landscape(
            self.net,
            torch.tensor([0.5], dtype=DTYPE),
            0,
            torch.tensor([0.5], dtype=DTYPE),
            torch.tensor([0.75], dtype=DTYPE),
            points_per_axis=5,
        )
        self.assertEqual(len(rows), 25)
        u, v, loss = rows[0]
        self.assertEqual((u, v), (0.0, 0.0))
        with torch.no_grad():
            expected = F.cross_entropy(self.net(torch.tensor([[0.5]], dtype=DTYPE)), torch.tensor([0]))
        self.assertAlmostEqual(loss, float(expected), places=12)


class TestPolytope(unittest.TestCase):
    """Test cases for polytope sampling"""

    def setUp(self):
        self.net = mlp([2, 16, 16, 2], seed=10)
        self.x0 = torch.tensor([0.3, 0.7], dtype=DTYPE)

    def test_samples_stay_in_the_ibp_box(self):
        sample = polytope_sample(self.net, self.x0, 0.1, samples_per_axis=41)
        self.assertEqual(sample.points.shape, (41 * 41, 2))
        self.assertEqual(sample.points_outside, 0)
        self.assertGreater(sample.area, 0.0)

    def test_zero_radius_is_a_point(self):
        sample = polytope_sample(self.net, self.x0, 0.0, samples_per_axis=5)
        self.assertEqual(sample.area, 0.0)
        self.assertTrue(bool((sample.points == sample.points[0]).all()))

    def test_hidden_layer_needs_a_projection(self):
        with self.assertRaises(VerificationError):
            polytope_sample(self.net, self.x0, 0.1, samples_per_axis=5, layer_index=1)
        sample = polytope_sample(self.net, self.x0, 0.1, samples_per_axis=5, layer_index=1, projection=(3, 7))
        self.assertEqual(sample.points.shape, (25, 2))
        self.assertEqual(sample.points_outside, 0)

    def test_invalid_projection(self):
        with self.assertRaises(VerificationError):
            polytope_sample(self.net, self.x0, 0.1, samples_per_axis=5, layer_index=1, projection=(0, 16))

    def test_box_grows_with_radius(self):
        small = polytope_sample(self.net, self.x0, 0.05, samples_per_axis=5)
        large = polytope_sample(self.net, self.x0, 0.1, samples_per_axis=5)
        self.assertGreaterEqual(large.area, small.area)

    def test_higher_dimensional_inputs_are_sampled(self):
        net = Network([nn.Linear(3, 4), nn.ReLU(), nn.Linear(4, 2)], (3,), 2)
        sample = polytope_sample(net, torch.tensor([0.5, 0.5, 0.5], dtype=DTYPE), 0.1, samples_per_axis=10, seed=3)
        self.assertEqual(sample.points.shape, (100, 2))
        self.assertEqual(sample.points_outside, 0)


if __name__ == "__main__":
    unittest.main()
