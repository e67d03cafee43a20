"""Desk-scale end-to-end runs; set STL_SDT_SLOW=1 to enable."""

import os
import unittest

import numpy as np

from stl_sdt.envs import default_env_config, generate_dataset
from stl_sdt.evaluation import EvalConfig, alignment_sweep, rollout, suffix_alignment
from stl_sdt.policy import ablation_tokens
from stl_sdt.stl.formula import Globally
from stl_sdt.stl.robustness import (
    boolean_satisfaction,
    prefix_trace,
    robustness,
    robustness_at_all,
    robustness_bruteforce,
    suffix_trace,
)
from stl_sdt.training import TrainConfig, train
from tests.test_robustness import random_formula, random_signal

SLOW = os.environ.get("STL_SDT_SLOW") == "1"
EVAL_SEEDS = [0, 1, 2]


@unittest.skipUnless(SLOW, "set STL_SDT_SLOW=1 to run desk-scale checks")
class TestMonitorScale(unittest.TestCase):
    """The monitor at full randomized scale."""

    def test_trace_matches_bruteforce_deep(self) -> None:
        """Test 1000 depth-4 cases over signals up to 30 steps."""
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            phi = random_formula(rng, 4)
            signal = random_signal(rng, 30)
            trace = robustness_at_all(signal, phi)
            for t in range(1, signal.length + 1):
                self.assertEqual(trace[t - 1], robustness_bruteforce(signal, t, phi), msg=str(phi))

    def test_sign_soundness_deep(self) -> None:
        """Test 500 decisive cases agree with the Boolean semantics."""
        rng = np.random.default_rng(2025)
        checked = 0
        while checked < 500:
            phi = random_formula(rng, 4)
            signal = random_signal(rng, 30)
            t = int(rng.integers(1, signal.length + 1))
            rho = robustness(signal, t, phi)
            if abs(rho) <= 1e-9:
                continue
            checked += 1
            self.assertEqual(boolean_satisfaction(signal, t, phi), rho > 0, msg=str(phi))

    def test_prefix_suffix_ends(self) -> None:
        """Test 200 G-rooted cases: both ends equal full robustness and the suffix rises."""
        rng = np.random.default_rng(2026)
        for _ in range(200):
            phi = Globally(random_formula(rng, 3))
            signal = random_signal(rng, 30)
            full = robustness(signal, 1, phi)
            suffix = suffix_trace(signal, phi)
            self.assertEqual(prefix_trace(signal, phi)[-1], full)
            self.assertEqual(suffix[0], full)
            self.assertTrue(np.all(np.diff(suffix) >= 0), msg=str(phi))


@unittest.skipUnless(SLOW, "set STL_SDT_SLOW=1 to run desk-scale checks")
class TestRunLearning(unittest.TestCase):
    """Conditioned policies against behavior cloning on the toy Run task."""

    @classmethod
    def setUpClass(cls) -> None:
        """Generate the Run dataset and train the full and ablated policies."""
        cls.env_config = default_env_config("run", horizon=60)
        cls.dataset = generate_dataset(cls.env_config, 2000, seed=0)
        cls.phi = cls.dataset.formula()
        cls.policies = {}
        for mode in ("full", "no-suffix", "no-prefix", "bc"):
            config = TrainConfig(steps=20000, seed=0, tokens=ablation_tokens(mode), safe_only=mode == "bc")
            cls.policies[mode] = train(cls.dataset, config).policy

    def evaluate(self, mode: str):
        config = EvalConfig(suffix="fixed", episodes=20, seeds=EVAL_SEEDS)
        return rollout(self.policies[mode], self.env_config, self.phi, config, self.dataset.stats)

    def test_dataset_satisfaction(self) -> None:
        """Test the generated dataset is mostly unsafe."""
        self.assertGreaterEqual(self.dataset.stats.satisfaction, 0.1)
        self.assertLessEqual(self.dataset.stats.satisfaction, 0.3)

    def test_conditioned_policy_beats_safe_cloning(self) -> None:
        """Test satisfaction at a positive target suffix against BC on safe data."""
        full = self.evaluate("full").satisfaction_rate
        self.assertGreaterEqual(full, 0.8)
        self.assertGreater(full, self.evaluate("bc").satisfaction_rate)

    def test_dropping_suffix_token_hurts(self) -> None:
        """Test the no-suffix layout satisfies less often and no-prefix runs."""
        full = self.evaluate("full").satisfaction_rate
        self.assertLess(self.evaluate("no-suffix").satisfaction_rate, full)
        self.assertEqual(len(self.evaluate("no-prefix").episodes), 60)

    def test_suffix_alignment(self) -> None:
        """Test achieved suffix ranks with the target suffix over a sweep."""
        stats = self.dataset.stats
        targets = np.linspace(0.0, max(stats.suffix_max), 5)
        grid = [(stats.target_reward_default, float(s)) for s in targets]
        rows = alignment_sweep(
            self.policies["full"], self.env_config, self.phi, grid, EvalConfig(episodes=20, seeds=EVAL_SEEDS), stats
        )
        self.assertGreaterEqual(suffix_alignment(rows), 0.5)

    def test_evaluation_is_deterministic(self) -> None:
        """Test repeated evaluation reproduces the report exactly."""
        self.assertEqual(self.evaluate("full").to_dict(), self.evaluate("full").to_dict())

    def test_training_is_deterministic(self) -> None:
        """Test a repeated short run reproduces every loss."""
        config = TrainConfig(steps=200, seed=1)
        self.assertEqual(train(self.dataset, config).losses, train(self.dataset, config).losses)


if __name__ == "__main__":
    unittest.main()
