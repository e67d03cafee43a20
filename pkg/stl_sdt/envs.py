"""Point-mass analogues of the Run, Circle and Reach safety tasks.

States are ``(x, y, vx, vy)`` with derived channels ``speed``, ``abs_x`` and
``abs_y``. Dynamics are a double integrator with semi-implicit Euler steps.
"""

import math
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from stl_sdt.config import dataclass_from_dict
from stl_sdt.data import OfflineDataset, Trajectory, annotate_dataset
from stl_sdt.errors import UsageError
from stl_sdt.stl.specs import builtin_spec_text

ENV_KINDS = ("run", "circle", "reach")
SCHEMA: Tuple[str, ...] = ("x", "y", "vx", "vy", "speed", "abs_x", "abs_y")
ACTION_DIM = 2


@dataclass
class EnvConfig:
    """Physical limits and task geometry of a toy environment."""

    kind: str = "run"
    dt: float = 0.1
    action_bound: float = 1.0
    horizon: int = 60
    x_lim: float = 1.0
    y_lim: float = 1.0
    v_lim: float = 1.5
    radius: float = 1.0
    goal_a: Tuple[float, float] = (0.5, 0.0)
    goal_b: Tuple[float, float] = (-0.5, 0.0)
    goal_half_width: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        self.goal_a = tuple(float(v) for v in self.goal_a)  # type: ignore[assignment]
        self.goal_b = tuple(float(v) for v in self.goal_b)  # type: ignore[assignment]

    def validate(self) -> "EnvConfig":
        if self.kind not in ENV_KINDS:
            raise UsageError(f"unknown env kind '{self.kind}'; choose from {', '.join(ENV_KINDS)}")
        if self.dt <= 0:
            raise UsageError("dt must be positive")
        if self.horizon < 10:
            raise UsageError("horizon must be at least 10 steps")
        for name in ("action_bound", "x_lim", "y_lim", "v_lim", "radius", "goal_half_width"):
            if getattr(self, name) <= 0:
                raise UsageError(f"{name} must be positive")
        if self.kind == "reach":
            for name in ("goal_a", "goal_b"):
                gx, gy = getattr(self, name)
                if abs(gx) + self.goal_half_width >= self.x_lim:
                    raise UsageError(f"{name} box must lie inside the safe region |x| < x_lim")
            if _boxes_overlap(self.goal_a, self.goal_b, self.goal_half_width):
                raise UsageError("goal boxes must not overlap")
        return self

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["goal_a"] = list(self.goal_a)
        data["goal_b"] = list(self.goal_b)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "EnvConfig":
        return dataclass_from_dict(cls, data).validate()


def _boxes_overlap(a: Sequence[float], b: Sequence[float], d: float) -> bool:
    return abs(a[0] - b[0]) < 2 * d and abs(a[1] - b[1]) < 2 * d


def default_env_config(kind: str, **overrides) -> EnvConfig:
    return EnvConfig(kind=kind, **overrides).validate()


@dataclass(frozen=True)
class EnvState:
    x: float = 0.0
    y: float = 0.0
    vx: float = 0.0
    vy: float = 0.0

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)

    @property
    def abs_x(self) -> float:
        return abs(self.x)

    @property
    def abs_y(self) -> float:
        return abs(self.y)

    def channels(self) -> np.ndarray:
        """State vector in ``SCHEMA`` order."""
        return np.array([self.x, self.y, self.vx, self.vy, self.speed, self.abs_x, self.abs_y])


def reward(config: EnvConfig, state: EnvState) -> float:
    """Reward earned on arriving in ``state``.

    Run pays forward velocity. Circle and Reach pay counter-clockwise angular
    momentum damped by the distance from the reference circle.
    """
    if config.kind == "run":
        return state.vx
    radius = math.hypot(state.x, state.y)
    return (-state.y * state.vx + state.x * state.vy) / (1.0 + abs(radius - config.radius))


def step(config: EnvConfig, state: EnvState, action: Sequence[float]) -> Tuple[EnvState, float]:
    """Advance one step; actions are clipped to the bound, never rejected."""
    bound = config.action_bound
    ax = min(max(float(action[0]), -bound), bound)
    ay = min(max(float(action[1]), -bound), bound)
    vx = state.vx + ax * config.dt
    vy = state.vy + ay * config.dt
    nxt = EnvState(state.x + vx * config.dt, state.y + vy * config.dt, vx, vy)
    return nxt, reward(config, nxt)


def per_step_costs(config: EnvConfig, state: EnvState) -> Tuple[int, int]:
    """Original position and velocity costs ``(c_p, c_v)`` of a state."""
    if config.kind == "run":
        return int(state.abs_y > config.y_lim), int(state.speed > config.v_lim)
    return int(state.abs_x > config.x_lim), 0


class PointMassEnv:
    """Stateful reset/step wrapper around the pure dynamics."""

    def __init__(self, config: EnvConfig) -> None:
        self.config = config.validate()
        self.state = EnvState()
        self.t = 0

    def reset(self, state: Optional[EnvState] = None, rng: Optional[np.random.Generator] = None) -> EnvState:
        """Start an episode at ``state`` or at a randomized initial state."""
        if state is None:
            rng = rng if rng is not None else np.random.default_rng(self.config.seed)
            state = initial_state(self.config, rng)
        self.state = state
        self.t = 1
        return state

    def step(self, action: Sequence[float]) -> Tuple[EnvState, float, bool]:
        self.state, r = step(self.config, self.state, action)
        self.t += 1
        return self.state, r, self.t > self.config.horizon

    def costs(self) -> Tuple[int, int]:
        return per_step_costs(self.config, self.state)


def initial_state(config: EnvConfig, rng: np.random.Generator) -> EnvState:
    if config.kind == "run":
        return EnvState(0.0, float(rng.uniform(-0.3, 0.3)))
    angle = -math.pi / 2 + float(rng.uniform(-0.3, 0.3))
    r0 = config.radius * float(rng.uniform(0.6, 0.8))
    return EnvState(r0 * math.cos(angle), r0 * math.sin(angle))


# Behavior policies


@dataclass(frozen=True)
class BehaviorMix:
    """One component of a behavior mixture.

    ``margin`` is the fractional safety margin the controller keeps from the
    limit (negative margins aim beyond it) and ``noise`` the action noise scale.
    """

    fraction: float
    margin: float
    noise: float

    @classmethod
    def from_list(cls, entry: Sequence[float]) -> "BehaviorMix":
        if len(entry) != 3:
            raise UsageError(f"behavior mix entries are [fraction, margin, noise], got {entry}")
        return cls(float(entry[0]), float(entry[1]), float(entry[2]))


DEFAULT_MIXES: Dict[str, List[BehaviorMix]] = {
    "run": [BehaviorMix(0.2, 0.1, 0.3), BehaviorMix(0.3, -0.03, 0.3), BehaviorMix(0.5, -0.2, 0.4)],
    "circle": [BehaviorMix(0.2, 0.15, 0.3), BehaviorMix(0.3, 0.0, 0.3), BehaviorMix(0.5, -0.2, 0.4)],
    "reach": [BehaviorMix(0.3, 0.15, 0.3), BehaviorMix(0.3, 0.0, 0.3), BehaviorMix(0.4, -0.2, 0.4)],
}

Controller = Callable[[EnvState, int], np.ndarray]


def _validate_mix(mix: Sequence[BehaviorMix]) -> np.ndarray:
    if not mix:
        raise UsageError("behavior mix must not be empty")
    fractions = np.array([m.fraction for m in mix], dtype=np.float64)
    if np.any(fractions < 0) or fractions.sum() <= 0:
        raise UsageError("behavior mix fractions must be nonnegative with a positive sum")
    if any(m.noise < 0 for m in mix):
        raise UsageError("behavior noise must be nonnegative")
    return fractions / fractions.sum()


def make_controller(
    config: EnvConfig, behavior: BehaviorMix, rng: np.random.Generator
) -> Controller:
    """Scripted proportional controller with randomized gains and margin jitter."""
    gain = float(rng.uniform(1.5, 3.0))
    margin = behavior.margin + float(rng.uniform(-0.03, 0.03))

    if config.kind == "run":
        target = config.v_lim * (1.0 - margin)
        lateral = float(rng.uniform(1.0, 2.0))

        def run_controller(state: EnvState, t: int) -> np.ndarray:
            ax = gain * (target - state.vx)
            ay = -lateral * state.y - 2.0 * state.vy
            return np.array([ax, ay])

        return run_controller

    radius_set = config.x_lim * (1.0 - margin)
    speed = float(rng.uniform(0.6, 1.0))
    seek_goal = config.kind == "reach" and bool(rng.uniform() < 0.6)
    visited = [False]

    def circle_controller(state: EnvState, t: int) -> np.ndarray:
        px, py = state.x, state.y
        if seek_goal and not visited[0]:
            gx, gy = config.goal_a
            dx, dy = gx - px, gy - py
            dist = math.hypot(dx, dy)
            if dist < config.goal_half_width / 2:
                visited[0] = True
            else:
                scale = min(speed, dist) / max(dist, 1e-9)
                return np.array([gain * (dx * scale - state.vx), gain * (dy * scale - state.vy)])
        r = max(math.hypot(px, py), 1e-9)
        ux, uy = px / r, py / r
        radial = 1.5 * (radius_set - r)
        vx_des = -uy * speed + ux * radial
        vy_des = ux * speed + uy * radial
        # centripetal feed-forward keeps the point on the circle at speed
        cx, cy = -ux * speed**2 / r, -uy * speed**2 / r
        return np.array([cx + gain * (vx_des - state.vx), cy + gain * (vy_des - state.vy)])

    return circle_controller


@dataclass
class EpisodeArrays:
    """Raw per-step arrays of one generated episode."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs_p: np.ndarray
    costs_v: np.ndarray


def run_episode(
    config: EnvConfig,
    policy: Callable[[EnvState, int], Sequence[float]],
    start: EnvState,
    noise: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> EpisodeArrays:
    """Roll ``policy`` for ``config.horizon`` steps from ``start``.

    Step ``t`` records the state ``s_t``, the clipped action applied in it and the
    reward of the transition it causes.
    """
    horizon = config.horizon
    states = np.empty((horizon, len(SCHEMA)))
    actions = np.empty((horizon, ACTION_DIM))
    rewards = np.empty(horizon)
    costs_p = np.empty(horizon)
    costs_v = np.empty(horizon)
    state = start
    bound = config.action_bound
    for t in range(horizon):
        action = np.asarray(policy(state, t + 1), dtype=np.float64)
        if noise > 0 and rng is not None:
            action = action + rng.normal(0.0, noise, ACTION_DIM)
        action = np.clip(action, -bound, bound)
        states[t] = state.channels()
        costs_p[t], costs_v[t] = per_step_costs(config, state)
        actions[t] = action
        state, rewards[t] = step(config, state, action)
    return EpisodeArrays(states, actions, rewards, costs_p, costs_v)


def generate_dataset(
    config: EnvConfig,
    n_trajectories: int,
    mix: Optional[Sequence[BehaviorMix]] = None,
    seed: Optional[int] = None,
    log_callback: Optional[Callable[[str], None]] = None,
) -> OfflineDataset:
    """Generate an offline dataset of mixed-quality scripted behavior.

    Every trajectory draws its behavior component, gains, margin jitter, initial
    state and noise from its own child of ``SeedSequence(seed)``, so the dataset
    is fully determined by ``(config, seed)``.

    Returns:
        An ``OfflineDataset`` with header, statistics and relabeled costs.
    """
    config.validate()
    if n_trajectories < 1:
        raise UsageError("n_trajectories must be at least 1")
    mix = list(mix) if mix is not None else DEFAULT_MIXES[config.kind]
    weights = _validate_mix(mix)
    seed = config.seed if seed is None else seed
    children = np.random.SeedSequence(seed).spawn(n_trajectories)
    trajectories = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        component = int(rng.choice(len(mix), p=weights))
        behavior = mix[component]
        controller = make_controller(config, behavior, rng)
        start = initial_state(config, rng)
        raw = run_episode(config, controller, start, behavior.noise, rng)
        trajectories.append(
            Trajectory(
                schema=SCHEMA,
                states=raw.states,
                actions=raw.actions,
                rewards=raw.rewards,
                costs_p=raw.costs_p,
                costs_v=raw.costs_v if config.kind == "run" else None,
            )
        )
        if log_callback and (i + 1) % 100 == 0:
            log_callback(f"generated {i + 1}/{n_trajectories} trajectories")
    dataset = OfflineDataset(
        trajectories=trajectories,
        schema=SCHEMA,
        env=config.kind,
        spec=builtin_spec_text(config.kind, config),
        config=config.to_dict(),
    )
    dataset = annotate_dataset(dataset)
    logger.info(
        "generated {} {} trajectories, satisfaction {:.3f}",
        n_trajectories,
        config.kind,
        dataset.stats.satisfaction if dataset.stats else float("nan"),
    )
    return dataset
