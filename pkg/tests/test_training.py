"""Tests for batch sampling and the training loop."""

import csv
import os
import tempfile
import unittest
from dataclasses import replace

import numpy as np

from stl_sdt.data import reward_prefix
from stl_sdt.envs import default_env_config, generate_dataset
from stl_sdt.errors import DataError, MissingStatsError, UsageError
from stl_sdt.policy import ablation_tokens, load_checkpoint
from stl_sdt.training import LOSS_COLUMNS, TrainConfig, policy_config_for, sample_batch, train


def tiny_dataset(n: int = 3, seed: int = 0):
    return generate_dataset(default_env_config("circle", horizon=10), n, seed=seed)


def tiny_config(**overrides) -> TrainConfig:
    values = dict(steps=5, batch_size=4, context=4, embed_dim=8, n_layers=1, log_every=0)
    values.update(overrides)
    return TrainConfig(**values).validate()


class TestSampleBatch(unittest.TestCase):
    """Windows cut from annotated trajectories."""

    def setUp(self) -> None:
        """Set up a small annotated dataset."""
        self.dataset = tiny_dataset()

    def test_windows_are_consistent(self) -> None:
        """Test real steps are contiguous at the end and match their trajectory."""
        batch = sample_batch(self.dataset, 32, 4, np.random.default_rng(0))
        self.assertEqual(batch.states.shape, (32, 4, self.dataset.trajectories[0].states.shape[1]))
        for i in range(32):
            mask = batch.mask[i]
            first = int(np.argmax(mask))
            self.assertTrue(mask[first:].all())
            self.assertFalse(mask[:first].any())
            steps = batch.timesteps[i, first:]
            np.testing.assert_array_equal(np.diff(steps), 1)
            if first > 0:
                self.assertEqual(steps[0], 0)
            match = [
                traj for traj in self.dataset.trajectories
                if np.array_equal(traj.states[steps], batch.states[i, first:])
            ]
            self.assertTrue(match)
            traj = match[0]
            np.testing.assert_array_equal(batch.suffix[i, first:], traj.suffix[steps])
            np.testing.assert_array_equal(batch.returns[i, first:], traj.return_to_go[steps])
            np.testing.assert_array_equal(
                batch.reward_prefix[i, first:], reward_prefix(traj.rewards, inclusive=False)[steps]
            )
            np.testing.assert_array_equal(batch.states[i, :first], 0.0)

    def test_requires_annotations(self) -> None:
        """Test trajectories without robustness annotations are rejected."""
        bare = replace(
            self.dataset,
            trajectories=[t.with_annotations(prefix=None) for t in self.dataset.trajectories],
        )
        with self.assertRaises(MissingStatsError):
            sample_batch(bare, 2, 4, np.random.default_rng(0))

    def test_empty_dataset(self) -> None:
        """Test sampling from no trajectories is a data error."""
        with self.assertRaises(DataError):
            sample_batch(replace(self.dataset, trajectories=[]), 2, 4, np.random.default_rng(0))


class TestTrain(unittest.TestCase):
    """The optimization loop."""

    def setUp(self) -> None:
        """Set up a small dataset and a temporary directory."""
        self.dataset = tiny_dataset()
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self) -> None:
        """Remove the temporary directory."""
        self.tmp.cleanup()

    def test_deterministic(self) -> None:
        """Test two runs with one seed give identical losses and parameters."""
        first = train(self.dataset, tiny_config(seed=3))
        second = train(self.dataset, tiny_config(seed=3))
        self.assertEqual(first.losses, second.losses)
        for name, p in first.policy.params.items():
            np.testing.assert_array_equal(second.policy.params[name].data, p.data)

    def test_loss_log_and_checkpoint(self) -> None:
        """Test the loss CSV has one row per step and the checkpoint reloads."""
        log_path = os.path.join(self.tmp.name, "loss.csv")
        ckpt = os.path.join(self.tmp.name, "policy.ckpt")
        result = train(self.dataset, tiny_config(steps=3), checkpoint=ckpt, loss_log=log_path)
        with open(log_path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        self.assertEqual(tuple(rows[0]), LOSS_COLUMNS)
        self.assertEqual([row[0] for row in rows[1:]], ["1", "2", "3"])
        self.assertEqual(float(rows[1][1]), result.losses[0]["loss"])
        policy, meta = load_checkpoint(ckpt)
        self.assertEqual(meta["env"], "circle")
        self.assertEqual(meta["stats"], self.dataset.stats.to_dict())
        for name, p in result.policy.params.items():
            np.testing.assert_array_equal(policy.params[name].data, p.data)

    def test_callbacks(self) -> None:
        """Test progress and evaluation hooks fire on their schedules."""
        messages, evals = [], []
        train(
            self.dataset,
            tiny_config(steps=4, log_every=2, eval_every=2),
            log_callback=messages.append,
            eval_callback=lambda step, policy: evals.append(step),
        )
        self.assertEqual(len(messages), 2)
        self.assertEqual(evals, [2, 4])

    def test_overfits_small_dataset(self) -> None:
        """Test the loss falls to a tenth of its start on four trajectories."""
        dataset = tiny_dataset(n=4)
        result = train(
            dataset,
            tiny_config(steps=200, lr=1e-2, batch_size=16, embed_dim=16, init_log_std=0.0, entropy_weight=0.0),
        )
        initial = result.losses[0]["loss"]
        self.assertGreater(initial, 0.0)
        self.assertLessEqual(result.losses[-1]["loss"], 0.1 * initial)

    def test_ablation_layouts_train(self) -> None:
        """Test every ablation layout and the MLP baseline run."""
        for mode in ("no-prefix", "no-suffix", "reward-prefix", "bc"):
            with self.subTest(mode=mode):
                result = train(self.dataset, tiny_config(steps=1, tokens=ablation_tokens(mode)))
                self.assertEqual(result.policy.config.tokens, ablation_tokens(mode))
        result = train(self.dataset, tiny_config(steps=1, architecture="mlp"))
        self.assertIn("mlp.l1.w", result.policy.params)

    def test_policy_config_from_stats(self) -> None:
        """Test input scales and horizon are derived from the dataset."""
        config = policy_config_for(self.dataset, tiny_config(reward_scale=2.5))
        self.assertEqual(config.reward_scale, 2.5)
        self.assertEqual(config.max_timestep, 10)
        self.assertEqual(config.state_mean, self.dataset.stats.state_mean)

    def test_invalid_config(self) -> None:
        """Test nonsensical settings are usage errors."""
        with self.assertRaises(UsageError):
            TrainConfig(steps=0).validate()
        with self.assertRaises(UsageError):
            TrainConfig(lr=-1.0).validate()
        with self.assertRaises(UsageError):
            TrainConfig.from_dict({"learning_rate": 0.1})

    def test_safe_only_needs_safe_data(self) -> None:
        """Test behavior cloning on an unsafe-only dataset fails early."""
        unsafe = replace(self.dataset, spec="G(x > 100)")
        with self.assertRaises(DataError):
            train(unsafe, tiny_config(safe_only=True))


if __name__ == "__main__":
    unittest.main()
