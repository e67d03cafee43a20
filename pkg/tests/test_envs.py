"""Tests for the point-mass environments and dataset generation."""

import math
import unittest

import numpy as np

from stl_sdt.data import full_robustness, relabel_costs
from stl_sdt.envs import (
    SCHEMA,
    BehaviorMix,
    EnvState,
    PointMassEnv,
    default_env_config,
    generate_dataset,
    per_step_costs,
    step,
)
from stl_sdt.errors import UsageError


class TestDynamics(unittest.TestCase):
    """Euler steps, rewards and costs."""

    def test_run_step_from_rest(self) -> None:
        """Test one unit push along x from rest."""
        config = default_env_config("run")
        state, r = step(config, EnvState(), (1.0, 0.0))
        self.assertAlmostEqual(state.vx, 0.1)
        self.assertAlmostEqual(state.x, 0.01)
        self.assertAlmostEqual(r, 0.1)

    def test_zero_action_at_rest(self) -> None:
        """Test a resting state stays put with zero reward."""
        for kind in ("run", "circle"):
            state, r = step(default_env_config(kind), EnvState(), (0.0, 0.0))
            self.assertEqual(state, EnvState())
            self.assertEqual(r, 0.0)

    def test_actions_are_clipped(self) -> None:
        """Test out-of-bound actions act as the bound."""
        config = default_env_config("run")
        clipped, _ = step(config, EnvState(), (50.0, -50.0))
        bounded, _ = step(config, EnvState(), (1.0, -1.0))
        self.assertEqual(clipped, bounded)

    def test_circle_reward_sign(self) -> None:
        """Test tangential motion on the circle earns positive reward counter-clockwise."""
        config = default_env_config("circle")
        _, ccw = step(config, EnvState(1.0, 0.0, 0.0, 0.5), (0.0, 0.0))
        _, cw = step(config, EnvState(1.0, 0.0, 0.0, -0.5), (0.0, 0.0))
        self.assertGreater(ccw, 0.0)
        self.assertLess(cw, 0.0)

    def test_costs(self) -> None:
        """Test boundary and strict velocity costs."""
        run = default_env_config("run")
        self.assertEqual(per_step_costs(run, EnvState(y=run.y_lim + 0.1)), (1, 0))
        self.assertEqual(per_step_costs(run, EnvState(vx=run.v_lim)), (0, 0))
        self.assertEqual(per_step_costs(run, EnvState(vx=run.v_lim + 0.01)), (0, 1))
        circle = default_env_config("circle")
        self.assertEqual(per_step_costs(circle, EnvState(x=0.5, vx=5.0)), (0, 0))
        self.assertEqual(per_step_costs(circle, EnvState(x=-1.2)), (1, 0))

    def test_env_wrapper(self) -> None:
        """Test the stateful wrapper ends after the horizon."""
        env = PointMassEnv(default_env_config("run", horizon=10))
        env.reset(EnvState())
        done = False
        steps = 0
        while not done:
            _, _, done = env.step((1.0, 0.0))
            steps += 1
        self.assertEqual(steps, 10)

    def test_config_validation(self) -> None:
        """Test invalid configurations are usage errors."""
        with self.assertRaises(UsageError):
            default_env_config("run", dt=0.0)
        with self.assertRaises(UsageError):
            default_env_config("run", horizon=5)
        with self.assertRaises(UsageError):
            default_env_config("reach", goal_a=(0.95, 0.0))
        with self.assertRaises(UsageError):
            default_env_config("swim")


class TestGenerateDataset(unittest.TestCase):
    """Scripted behavior datasets."""

    def test_deterministic(self) -> None:
        """Test the same seed gives bit-identical trajectories."""
        config = default_env_config("circle", horizon=20)
        first = generate_dataset(config, 5, seed=7)
        second = generate_dataset(config, 5, seed=7)
        for a, b in zip(first.trajectories, second.trajectories):
            np.testing.assert_array_equal(a.states, b.states)
            np.testing.assert_array_equal(a.actions, b.actions)
            np.testing.assert_array_equal(a.rewards, b.rewards)
        self.assertEqual(first.stats, second.stats)

    def test_derived_channels(self) -> None:
        """Test speed and absolute channels match the primaries."""
        dataset = generate_dataset(default_env_config("run", horizon=20), 3, seed=1)
        col = {name: i for i, name in enumerate(SCHEMA)}
        for traj in dataset.trajectories:
            s = traj.states
            np.testing.assert_allclose(
                s[:, col["speed"]] ** 2, s[:, col["vx"]] ** 2 + s[:, col["vy"]] ** 2, rtol=1e-12
            )
            np.testing.assert_array_equal(s[:, col["abs_x"]], np.abs(s[:, col["x"]]))
            np.testing.assert_array_equal(s[:, col["abs_y"]], np.abs(s[:, col["y"]]))

    def test_conservative_behavior_satisfies(self) -> None:
        """Test a noiseless conservative controller satisfies its specification."""
        for kind in ("run", "circle"):
            with self.subTest(kind=kind):
                dataset = generate_dataset(
                    default_env_config(kind), 1, mix=[BehaviorMix(1.0, 0.3, 0.0)], seed=0
                )
                self.assertGreater(full_robustness(dataset.trajectories[0], dataset.formula()), 0.0)

    def test_aggressive_behavior_mostly_violates(self) -> None:
        """Test aggressive gains drive satisfaction below one half."""
        dataset = generate_dataset(
            default_env_config("run"), 40, mix=[BehaviorMix(1.0, -0.3, 0.3)], seed=2
        )
        self.assertLess(dataset.stats.satisfaction, 0.5)

    def test_default_mix_satisfaction_range(self) -> None:
        """Test the default mix yields a minority of satisfying trajectories."""
        for kind in ("run", "circle"):
            with self.subTest(kind=kind):
                dataset = generate_dataset(default_env_config(kind), 200, seed=0)
                self.assertGreaterEqual(dataset.stats.satisfaction, 0.05)
                self.assertLessEqual(dataset.stats.satisfaction, 0.4)

    def test_circle_reward_tension(self) -> None:
        """Test the best safe Circle return is below the best overall return."""
        dataset = generate_dataset(default_env_config("circle"), 200, seed=0)
        self.assertLess(dataset.stats.r_max, dataset.stats.max_total_reward)

    def test_relabel_matches_robustness(self) -> None:
        """Test zero relabeled cost exactly when the built-in formula holds."""
        checked = 0
        for kind in ("run", "circle"):
            dataset = generate_dataset(default_env_config(kind), 300, seed=4)
            phi = dataset.formula()
            for traj in dataset.trajectories:
                rho = full_robustness(traj, phi)
                if abs(rho) <= 1e-6:
                    continue
                cost = float(np.sum(relabel_costs(traj, kind)))
                self.assertEqual(cost == 0.0, rho > 0.0)
                checked += 1
        self.assertGreaterEqual(checked, 500)

    def test_invalid_arguments(self) -> None:
        """Test an empty mix and a zero count are rejected."""
        config = default_env_config("run")
        with self.assertRaises(UsageError):
            generate_dataset(config, 0)
        with self.assertRaises(UsageError):
            generate_dataset(config, 1, mix=[])
        with self.assertRaises(UsageError):
            BehaviorMix.from_list([1.0, 0.1])

    def test_initial_state_near_circle(self) -> None:
        """Test circle episodes start inside the boundary."""
        dataset = generate_dataset(default_env_config("circle"), 10, seed=3)
        for traj in dataset.trajectories:
            x0, y0 = traj.states[0][:2]
            self.assertLess(math.hypot(x0, y0), 1.0)


if __name__ == "__main__":
    unittest.main()
