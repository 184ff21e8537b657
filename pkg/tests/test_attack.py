"""
Tests for projected gradient attacks
"""

import unittest

import torch
import torch.nn.functional as F

from models.config_models import AttackConfig, AttackInit, StepRule
from services.attack import PGDAttack, attack_box, empirical_error, pgd_attack
from services.data import Dataset
from services.network import Network
from services.tensor import DTYPE, Rng
from services.verify import ibp_verified
from tests.helpers import linear, mlp


def linear_model(w, b) -> Network:
    """Two classes with z1 - z0 = w·x + b."""
    w = torch.as_tensor(w, dtype=DTYPE)
    weight = torch.stack([torch.zeros_like(w), w])
    return Network([linear(weight, [0.0, b])], (w.numel(),), 2)


class TestPGD(unittest.TestCase):
    """Test cases for PGDAttack"""

    def test_zero_radius_keeps_the_input(self):
        net = mlp([2, 8, 2], seed=0)
        x0 = Rng(1).uniform((6, 2))
        y = torch.tensor([0, 1, 0, 1, 0, 1])
        cfg = AttackConfig(epsilon=0.0, steps=20, restarts=2)
        result = PGDAttack(net, cfg).attack(x0, y)
        self.assertTrue(torch.equal(result.x_adv, x0))
        with torch.no_grad():
            wrong = net(x0).argmax(dim=1) != y
        self.assertTrue(torch.equal(result.success, wrong))

    def test_linear_model_reaches_the_closed_form_optimum(self):
        """On a linear model the worst case is the corner x0 + eps * sign(w)"""
        w = torch.tensor([0.7, -1.3, 0.4], dtype=DTYPE)
        net = linear_model(w, -2.0)
        x0 = torch.tensor([[0.5, 0.5, 0.5]], dtype=DTYPE)
        epsilon = 0.1
        cfg = AttackConfig(epsilon=epsilon, steps=50, restarts=1, init=AttackInit.CENTER, domain_clip=None)
        result = PGDAttack(net, cfg).attack(x0, 0)
        optimum = x0 + epsilon * torch.sign(w)
        with torch.no_grad():
            best = F.cross_entropy(net(optimum), torch.tensor([0]))
        self.assertAlmostEqual(float(result.loss[0]), float(best), delta=1e-6)
        self.assertTrue(torch.allclose(result.x_adv, optimum, rtol=0.0, atol=1e-12))

    def test_iterates_stay_in_the_feasible_set(self):
        for seed in range(10):
            net = mlp([2, 16, 16, 2], seed=seed)
            x0 = Rng(100 + seed).uniform((100, 2))
            y = torch.arange(100) % 2
            epsilon = 0.15
            cfg = AttackConfig(epsilon=epsilon, steps=10, restarts=1, seed=seed)
            x_adv, _ = pgd_attack(net, x0, y, cfg)
            self.assertTrue(bool(((x_adv - x0).abs() <= epsilon + 1e-12).all()))
            self.assertTrue(bool(((x_adv >= 0.0) & (x_adv <= 1.0)).all()))

    def test_adam_step_rule(self):
        net = linear_model([1.0, 1.0], -0.5)
        x0 = torch.tensor([[0.1, 0.1]], dtype=DTYPE)
        cfg = AttackConfig.training(0.2, init=AttackInit.CENTER)
        self.assertEqual((cfg.steps, cfg.restarts, cfg.step_rule), (7, 1, StepRule.ADAM))
        result = PGDAttack(net, cfg).attack(x0, 0)
        self.assertTrue(bool(((result.x_adv - x0).abs() <= 0.2 + 1e-12).all()))
        with torch.no_grad():
            start = F.cross_entropy(net(x0), torch.tensor([0]))
        self.assertGreater(float(result.loss[0]), float(start))

    def test_same_seed_same_result(self):
        net = mlp([2, 16, 2], seed=3)
        x0 = Rng(4).uniform((20, 2))
        y = torch.arange(20) % 2
        cfg = AttackConfig(epsilon=0.1, steps=20, restarts=3, seed=7)
        first = PGDAttack(net, cfg).attack(x0, y)
        second = PGDAttack(net, cfg).attack(x0, y)
        self.assertTrue(torch.equal(first.x_adv, second.x_adv))

    def test_attack_box_clips_to_domain(self):
        lower, upper = attack_box(torch.tensor([[0.05, 0.98]], dtype=DTYPE), 0.1, (0.0, 1.0))
        self.assertEqual(lower[0, 0].item(), 0.0)
        self.assertEqual(upper[0, 1].item(), 1.0)


class TestEmpiricalError(unittest.TestCase):
    """Test cases for the PGD error rate"""

    def setUp(self):
        rng = Rng(5)
        self.inputs = rng.uniform((40, 2))
        self.net = linear_model([1.0, -1.0], 0.05)
        with torch.no_grad():
            labels = (self.net(self.inputs).argmax(dim=1) + (torch.arange(40) % 7 == 0).long()) % 2
        self.data = Dataset(inputs=self.inputs, labels=labels, class_count=2)

    def test_zero_radius_is_nominal_error(self):
        cfg = AttackConfig(epsilon=0.0, steps=5, restarts=1)
        rate, records = empirical_error(self.net, self.data, cfg)
        with torch.no_grad():
            nominal = float((self.net(self.data.inputs).argmax(dim=1) != self.data.labels).double().mean())
        self.assertEqual(rate, nominal)
        self.assertEqual(len(records), 40)

    def test_monotone_in_epsilon_on_a_linear_model(self):
        rates = []
        for epsilon in (0.01, 0.05, 0.2):
            cfg = AttackConfig(epsilon=epsilon, steps=20, restarts=1, init=AttackInit.CENTER)
            rate, _ = empirical_error(self.net, self.data, cfg)
            rates.append(rate)
        self.assertEqual(rates, sorted(rates))
        self.assertGreater(rates[-1], rates[0])

    def test_never_exceeds_ibp_verified_error(self):
        net = mlp([2, 16, 16, 2], seed=9)
        with torch.no_grad():
            labels = net(self.inputs).argmax(dim=1)
        data = Dataset(inputs=self.inputs, labels=labels, class_count=2)
        epsilon = 0.05
        rate, _ = empirical_error(net, data, AttackConfig(epsilon=epsilon, steps=20, restarts=2))
        verified, _ = ibp_verified(net, data.inputs, data.labels, epsilon, domain=(0.0, 1.0))
        self.assertLessEqual(rate, 1.0 - float(verified.double().mean()))

    def test_empty_dataset(self):
        empty = Dataset(inputs=torch.zeros(0, 2, dtype=DTYPE), labels=torch.zeros(0), class_count=2)
        with self.assertRaises(ValueError):
            empirical_error(self.net, empty, AttackConfig())


if __name__ == "__main__":
    unittest.main()
