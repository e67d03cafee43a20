"""Conditioned rollouts, target-suffix schedules, evaluation metrics and sweeps."""

import csv
import itertools
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import IO, Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from scipy import stats as scipy_stats

from stl_sdt.config import dataclass_from_dict
from stl_sdt.data import DatasetStats, Trajectory, normalized_reward, relabel_costs
from stl_sdt.envs import SCHEMA, EnvConfig, PointMassEnv
from stl_sdt.errors import (
    MissingStatsError,
    NumericalError,
    SchemaMismatchError,
    StlSdtError,
    UsageError,
)
from stl_sdt.policy import GaussianPolicy, load_checkpoint, window_batch
from stl_sdt.stl.formula import Formula
from stl_sdt.stl.robustness import Signal, is_satisfied, robustness

SUFFIX_KINDS = ("fixed", "linear", "mean", "max")
ACTION_MODES = ("mean", "sample")
SWEEP_COLUMNS = (
    "target_reward",
    "target_suffix",
    "reward_mean",
    "reward_std",
    "suffix_mean",
    "suffix_std",
    "satisfaction_rate",
)


@dataclass
class EvalConfig:
    """Rollout targets and episode settings.

    ``suffix`` is either a schedule string (``fixed``, ``fixed:0.02``,
    ``linear:0.06``, ``mean``, ``max``) or an explicit per-step list.
    ``target_reward`` and bare ``fixed``/``linear`` targets default to the
    dataset statistics stored with the checkpoint.
    """

    target_reward: Optional[float] = None
    suffix: Union[str, List[float]] = "fixed"
    episodes: int = 20
    seed: int = 0
    seeds: Optional[List[int]] = None
    action_mode: str = "mean"

    def validate(self) -> "EvalConfig":
        if self.episodes < 1:
            raise UsageError("episodes must be at least 1")
        if self.action_mode not in ACTION_MODES:
            raise UsageError(f"unknown action mode '{self.action_mode}'; choose mean or sample")
        if isinstance(self.suffix, str):
            parse_suffix_spec(self.suffix)
        if self.seeds is not None and not self.seeds:
            raise UsageError("seeds must not be empty")
        return self

    @property
    def seed_list(self) -> List[int]:
        return list(self.seeds) if self.seeds else [self.seed]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvalConfig":
        return dataclass_from_dict(cls, data).validate()


def parse_suffix_spec(text: str) -> Tuple[str, Optional[float]]:
    """Split ``kind[:value]`` into the schedule kind and its optional target."""
    kind, _, value = text.partition(":")
    if kind not in SUFFIX_KINDS:
        raise UsageError(f"unknown suffix schedule '{kind}'; choose from {', '.join(SUFFIX_KINDS)}")
    if not value:
        return kind, None
    if kind in ("mean", "max"):
        raise UsageError(f"suffix schedule '{kind}' takes no value")
    try:
        return kind, float(value)
    except ValueError as e:
        raise UsageError(f"invalid suffix target '{value}'") from e


def _curve(values: Optional[List[float]], kind: str, horizon: int) -> np.ndarray:
    if not values:
        raise MissingStatsError(f"dataset statistics carry no {kind} suffix curve")
    curve = np.asarray(values[:horizon], dtype=np.float64)
    if len(curve) < horizon:
        curve = np.concatenate([curve, np.full(horizon - len(curve), curve[-1])])
    return curve


def suffix_schedule(
    kind: str, stats: Optional[DatasetStats], target: Optional[float], horizon: int
) -> np.ndarray:
    """Per-step target suffix values for ``t = 1..horizon``.

    ``fixed`` repeats the target, ``linear`` ramps from 0 at step 1 to the target
    at the final step, ``mean`` and ``max`` follow the safe-trajectory suffix
    curves (padded with their last value when the episode is longer).

    Raises:
        MissingStatsError: Statistics needed by the kind or the default target are missing.
    """
    if horizon < 1:
        raise UsageError("horizon must be at least 1")
    if kind in ("mean", "max"):
        if stats is None:
            raise MissingStatsError(f"suffix schedule '{kind}' requires dataset statistics")
        return _curve(stats.suffix_mean if kind == "mean" else stats.suffix_max, kind, horizon)
    if kind not in ("fixed", "linear"):
        raise UsageError(f"unknown suffix schedule '{kind}'")
    if target is None:
        if stats is None or stats.target_suffix_default is None:
            raise MissingStatsError("no target suffix given and no dataset default available")
        target = stats.target_suffix_default
    if kind == "fixed":
        return np.full(horizon, float(target))
    if horizon == 1:
        return np.array([float(target)])
    return np.array([target * (t - 1) / (horizon - 1) for t in range(1, horizon + 1)])


def resolve_schedule(config: EvalConfig, stats: Optional[DatasetStats], horizon: int) -> np.ndarray:
    if isinstance(config.suffix, str):
        kind, target = parse_suffix_spec(config.suffix)
        return suffix_schedule(kind, stats, target, horizon)
    schedule = np.asarray(config.suffix, dtype=np.float64)
    if schedule.shape != (horizon,):
        raise UsageError(f"suffix schedule has {schedule.size} values, the horizon is {horizon}")
    return schedule


def resolve_target_reward(config: EvalConfig, stats: Optional[DatasetStats]) -> float:
    if config.target_reward is not None:
        return float(config.target_reward)
    if stats is None or stats.target_reward_default is None:
        raise MissingStatsError("no target reward given and no dataset default available")
    return stats.target_reward_default


# Episodes


@dataclass
class EpisodeRecord:
    """Metrics of one rollout plus the traces conditioning it."""

    seed: int
    episode: int
    total_reward: float
    total_cost: float
    robustness: float
    satisfied: bool
    normalized_reward: Optional[float]
    trajectory: Trajectory = field(repr=False)
    prefix: np.ndarray = field(repr=False)
    returns: np.ndarray = field(repr=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "episode": self.episode,
            "total_reward": self.total_reward,
            "total_cost": self.total_cost,
            "robustness": self.robustness,
            "satisfied": self.satisfied,
            "normalized_reward": self.normalized_reward,
        }


def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    array = np.asarray(values, dtype=np.float64)
    return float(array.mean()), float(array.std())


@dataclass
class EvalReport:
    episodes: List[EpisodeRecord]
    target_reward: float
    schedule: np.ndarray = field(repr=False)
    config: Dict[str, Any] = field(default_factory=dict)

    @property
    def satisfaction_rate(self) -> float:
        return sum(ep.satisfied for ep in self.episodes) / len(self.episodes)

    def reward(self) -> Tuple[float, float]:
        return _mean_std([ep.total_reward for ep in self.episodes])

    def normalized(self) -> Tuple[Optional[float], Optional[float]]:
        values = [ep.normalized_reward for ep in self.episodes]
        if any(v is None for v in values):
            return None, None
        return _mean_std(values)  # type: ignore[arg-type]

    def cost(self) -> Tuple[float, float]:
        return _mean_std([ep.total_cost for ep in self.episodes])

    def suffix(self) -> Tuple[float, float]:
        return _mean_std([ep.robustness for ep in self.episodes])

    def to_dict(self) -> Dict[str, Any]:
        reward_mean, reward_std = self.reward()
        norm_mean, norm_std = self.normalized()
        cost_mean, cost_std = self.cost()
        suffix_mean, suffix_std = self.suffix()
        return {
            "config": self.config,
            "target_reward": self.target_reward,
            "target_suffix": self.schedule.tolist(),
            "n_episodes": len(self.episodes),
            "reward_mean": reward_mean,
            "reward_std": reward_std,
            "normalized_reward_mean": norm_mean,
            "normalized_reward_std": norm_std,
            "cost_mean": cost_mean,
            "cost_std": cost_std,
            "suffix_mean": suffix_mean,
            "suffix_std": suffix_std,
            "satisfaction_rate": self.satisfaction_rate,
            "episodes": [ep.to_dict() for ep in self.episodes],
        }


def check_compatible(policy: GaussianPolicy, env_config: EnvConfig, phi: Formula) -> None:
    """Raise ``SchemaMismatchError`` unless policy, environment and formula agree."""
    cfg = policy.config
    if cfg.state_dim != len(SCHEMA):
        raise SchemaMismatchError(
            f"policy expects {cfg.state_dim} state channels, {env_config.kind} provides {len(SCHEMA)}"
        )
    missing = [c for c in phi.channels() if c not in SCHEMA]
    if missing:
        raise SchemaMismatchError(f"formula uses channels absent from the environment: {', '.join(missing)}")


def rollout_episode(
    policy: GaussianPolicy,
    env_config: EnvConfig,
    phi: Formula,
    schedule: np.ndarray,
    target_reward: float,
    rng: np.random.Generator,
    action_mode: str = "mean",
) -> Tuple[Trajectory, np.ndarray, np.ndarray]:
    """Roll the policy for one episode, conditioning on targets autoregressively.

    At each step the prefix robustness of the states observed so far, the
    scheduled target suffix, the remaining target reward and the realized reward
    so far join the context; the policy acts on the last ``K`` steps.

    Returns:
        The realized trajectory, its online prefix trace and the return-to-go trace.
    """
    horizon = env_config.horizon
    env = PointMassEnv(env_config)
    state = env.reset(rng=rng)
    states = np.zeros((horizon, len(SCHEMA)))
    actions = np.zeros((horizon, policy.config.action_dim))
    rewards = np.zeros(horizon)
    costs_p = np.zeros(horizon)
    costs_v = np.zeros(horizon)
    prefix = np.zeros(horizon)
    returns = np.zeros(horizon)
    realized = np.zeros(horizon)
    remaining = float(target_reward)
    earned = 0.0
    bound = env_config.action_bound
    for t in range(1, horizon + 1):
        i = t - 1
        states[i] = state.channels()
        costs_p[i], costs_v[i] = env.costs()
        prefix[i] = robustness(Signal(SCHEMA, states[:t]), 1, phi)
        returns[i] = remaining
        realized[i] = earned
        batch = window_batch(
            policy.config, t, schedule, prefix, realized, returns, states, actions
        )
        action = policy.act(batch, action_mode, rng)
        if not np.all(np.isfinite(action)):
            raise NumericalError(f"non-finite action at step {t}")
        action = np.clip(action, -bound, bound)
        actions[i] = action
        state, rewards[i], _ = env.step(action)
        remaining = remaining - rewards[i]
        earned = earned + rewards[i]
    trajectory = Trajectory(
        schema=SCHEMA,
        states=states,
        actions=actions,
        rewards=rewards,
        costs_p=costs_p,
        costs_v=costs_v if env_config.kind == "run" else None,
    )
    return trajectory, prefix, returns


def _score(
    trajectory: Trajectory, phi: Formula, env_kind: str, stats: Optional[DatasetStats]
) -> Tuple[float, float, Optional[float]]:
    cost = float(relabel_costs(trajectory, env_kind).sum())
    rho = robustness(trajectory.signal(), 1, phi)
    try:
        norm: Optional[float] = normalized_reward(trajectory.total_reward, stats)
    except StlSdtError as e:
        logger.warning("normalized reward unavailable: {}", e)
        norm = None
    return cost, rho, norm


def rollout(
    policy: GaussianPolicy,
    env_config: EnvConfig,
    phi: Formula,
    config: EvalConfig,
    stats: Optional[DatasetStats] = None,
    log_callback: Optional[Callable[[str], None]] = None,
) -> EvalReport:
    """Evaluate ``policy`` over ``episodes`` episodes for every configured seed.

    Episode ``j`` of seed ``s`` draws its initial state (and, in sample mode,
    its actions) from child ``j`` of ``SeedSequence(s)``, so mean-mode reports
    are reproducible bit for bit.

    Raises:
        SchemaMismatchError: Policy, environment and formula disagree.
        NumericalError: The policy produced a non-finite action.
    """
    config.validate()
    env_config.validate()
    check_compatible(policy, env_config, phi)
    schedule = resolve_schedule(config, stats, env_config.horizon)
    target_reward = resolve_target_reward(config, stats)
    records = []
    for seed in config.seed_list:
        for j, child in enumerate(np.random.SeedSequence(seed).spawn(config.episodes)):
            rng = np.random.default_rng(child)
            trajectory, prefix, returns = rollout_episode(
                policy, env_config, phi, schedule, target_reward, rng, config.action_mode
            )
            cost, rho, norm = _score(trajectory, phi, env_config.kind, stats)
            records.append(
                EpisodeRecord(
                    seed=seed,
                    episode=j,
                    total_reward=trajectory.total_reward,
                    total_cost=cost,
                    robustness=rho,
                    satisfied=is_satisfied(rho),
                    normalized_reward=norm,
                    trajectory=trajectory,
                    prefix=prefix,
                    returns=returns,
                )
            )
            logger.debug("seed {} episode {}: reward {:.3f} rho {:.4f}", seed, j, trajectory.total_reward, rho)
        if log_callback:
            log_callback(f"evaluated seed {seed}")
    report = EvalReport(records, target_reward, schedule, config.to_dict())
    logger.info(
        "evaluated {} episodes: satisfaction {:.3f}, reward {:.3f}",
        len(records),
        report.satisfaction_rate,
        report.reward()[0],
    )
    return report


def load_policy(path: Union[str, Path]) -> Tuple[GaussianPolicy, Optional[DatasetStats], Dict[str, Any]]:
    """Load a checkpoint together with the dataset statistics stored beside it."""
    policy, meta = load_checkpoint(path)
    stats = DatasetStats.from_dict(meta["stats"]) if meta.get("stats") else None
    return policy, stats, meta


# Alignment sweep


def parse_grid(data: Any) -> List[Tuple[float, float]]:
    """Read a sweep grid.

    Accepts either ``{"target_reward": [...], "target_suffix": [...]}`` (the
    Cartesian product) or a list of ``[target_reward, target_suffix]`` pairs.
    Cells come back sorted.
    """
    if isinstance(data, dict):
        unknown = sorted(set(data) - {"target_reward", "target_suffix"})
        if unknown:
            raise UsageError(f"unknown grid keys: {', '.join(unknown)}")
        try:
            rewards = [float(v) for v in data["target_reward"]]
            suffixes = [float(v) for v in data["target_suffix"]]
        except (KeyError, TypeError, ValueError) as e:
            raise UsageError(f"grid needs numeric target_reward and target_suffix lists: {e}") from e
        cells = list(itertools.product(rewards, suffixes))
    elif isinstance(data, list):
        try:
            cells = [(float(r), float(s)) for r, s in data]
        except (TypeError, ValueError) as e:
            raise UsageError(f"grid entries must be [target_reward, target_suffix] pairs: {e}") from e
    else:
        raise UsageError("grid must be a JSON object or a list of pairs")
    if not cells:
        raise UsageError("grid must not be empty")
    return sorted(set(cells))


def alignment_sweep(
    policy: GaussianPolicy,
    env_config: EnvConfig,
    phi: Formula,
    grid: Sequence[Tuple[float, float]],
    config: EvalConfig,
    stats: Optional[DatasetStats] = None,
    log_callback: Optional[Callable[[str], None]] = None,
) -> List[Dict[str, float]]:
    """Run a fixed-suffix rollout for every grid cell; rows are sorted by target."""
    if not grid:
        raise UsageError("grid must not be empty")
    rows = []
    for target_reward, target_suffix in sorted(grid):
        cell = replace(config, target_reward=target_reward, suffix=f"fixed:{target_suffix!r}")
        report = rollout(policy, env_config, phi, cell, stats)
        reward_mean, reward_std = report.reward()
        suffix_mean, suffix_std = report.suffix()
        rows.append(
            {
                "target_reward": target_reward,
                "target_suffix": target_suffix,
                "reward_mean": reward_mean,
                "reward_std": reward_std,
                "suffix_mean": suffix_mean,
                "suffix_std": suffix_std,
                "satisfaction_rate": report.satisfaction_rate,
            }
        )
        if log_callback:
            log_callback(f"swept cell R={target_reward} suffix={target_suffix}")
    return rows


def suffix_alignment(rows: Sequence[Dict[str, float]]) -> float:
    """Spearman rank correlation between target and achieved suffix over a sweep."""
    if len(rows) < 2:
        raise UsageError("suffix alignment needs at least two sweep rows")
    targets = [row["target_suffix"] for row in rows]
    achieved = [row["suffix_mean"] for row in rows]
    result = scipy_stats.spearmanr(targets, achieved)
    return float(result[0])


def write_sweep_csv(rows: Sequence[Dict[str, float]], out: IO[str]) -> None:
    writer = csv.DictWriter(out, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
