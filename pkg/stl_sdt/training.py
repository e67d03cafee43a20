"""Batch sampling and the policy optimization loop."""

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from loguru import logger

from stl_sdt.autodiff import Tape
from stl_sdt.config import dataclass_from_dict
from stl_sdt.data import OfflineDataset, reward_prefix, safe_subset
from stl_sdt.errors import DataError, MissingStatsError, NumericalError, UsageError
from stl_sdt.optim import Adam, AdamHyper
from stl_sdt.policy import (
    ARCHITECTURES,
    SDT_TOKENS,
    GaussianPolicy,
    PolicyConfig,
    TokenBatch,
    empty_batch,
    save_checkpoint,
)

LOSS_COLUMNS = ("step", "loss", "nll", "entropy")


@dataclass
class TrainConfig:
    """Optimization, architecture and input-scaling settings of one training run."""

    steps: int = 20000
    batch_size: int = 64
    context: int = 8
    lr: float = 1e-4
    entropy_weight: float = 0.1
    seed: int = 0
    architecture: str = "transformer"
    tokens: Tuple[str, ...] = SDT_TOKENS
    safe_only: bool = False
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 1
    grad_clip: float = 0.25
    log_every: int = 100
    eval_every: int = 0
    reward_scale: Optional[float] = None
    robustness_scale: float = 0.2
    token_clip: float = 10.0
    init_log_std: float = -0.5

    def __post_init__(self) -> None:
        self.tokens = tuple(self.tokens)

    def validate(self) -> "TrainConfig":
        if self.steps < 1:
            raise UsageError("steps must be at least 1")
        if self.batch_size < 1 or self.context < 1:
            raise UsageError("batch_size and context must be at least 1")
        if self.lr <= 0:
            raise UsageError("lr must be positive")
        if self.entropy_weight < 0:
            raise UsageError("entropy_weight must be nonnegative")
        if self.architecture not in ARCHITECTURES:
            raise UsageError(f"unknown architecture '{self.architecture}'")
        if self.reward_scale is not None and self.reward_scale <= 0:
            raise UsageError("reward_scale must be positive")
        return self

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["tokens"] = list(self.tokens)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        return dataclass_from_dict(cls, data).validate()


@dataclass
class TrainResult:
    policy: GaussianPolicy
    losses: List[Dict[str, float]] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)


def _check_annotated(dataset: OfflineDataset) -> None:
    if not dataset.trajectories:
        raise DataError("cannot sample from an empty dataset")
    for i, traj in enumerate(dataset.trajectories):
        if traj.prefix is None or traj.suffix is None or traj.return_to_go is None:
            raise MissingStatsError(f"trajectory {i} lacks prefix/suffix/return-to-go annotations")


def sample_batch(
    dataset: OfflineDataset, batch_size: int, context: int, rng: np.random.Generator
) -> TokenBatch:
    """Sample ``(trajectory, end step)`` pairs uniformly and cut ``K``-step windows.

    Windows that would start before step 1 are front-padded and masked out.
    """
    _check_annotated(dataset)
    trajs = dataset.trajectories
    state_dim = trajs[0].states.shape[1]
    action_dim = trajs[0].actions.shape[1]
    shape_cfg = PolicyConfig(state_dim=state_dim, action_dim=action_dim, context=context)
    batch = empty_batch(shape_cfg, batch_size)
    for i in range(batch_size):
        traj = trajs[int(rng.integers(len(trajs)))]
        end = int(rng.integers(1, traj.length + 1))
        start = max(1, end - context + 1)
        offset = context - (end - start + 1)
        rows = slice(start - 1, end)
        batch.suffix[i, offset:] = traj.suffix[rows]
        batch.prefix[i, offset:] = traj.prefix[rows]
        batch.reward_prefix[i, offset:] = reward_prefix(traj.rewards, inclusive=False)[rows]
        batch.returns[i, offset:] = traj.return_to_go[rows]
        batch.states[i, offset:] = traj.states[rows]
        batch.actions[i, offset:] = traj.actions[rows]
        batch.timesteps[i, offset:] = np.arange(start - 1, end)
        batch.mask[i, offset:] = True
    return batch


def policy_config_for(dataset: OfflineDataset, config: TrainConfig) -> PolicyConfig:
    """Derive the policy config, taking input scales from dataset statistics."""
    stats = dataset.stats
    if stats is None:
        raise MissingStatsError("training requires dataset statistics")
    reward_scale = config.reward_scale
    if reward_scale is None:
        reward_scale = stats.r_max if stats.r_max else stats.max_total_reward
        reward_scale = abs(reward_scale) or 1.0
    traj = dataset.trajectories[0]
    action_bound = (dataset.config or {}).get("action_bound", 1.0)
    horizon = max(t.length for t in dataset.trajectories)
    return PolicyConfig(
        state_dim=traj.states.shape[1],
        action_dim=traj.actions.shape[1],
        architecture=config.architecture,
        tokens=config.tokens,
        context=config.context,
        embed_dim=config.embed_dim,
        n_layers=config.n_layers,
        n_heads=config.n_heads,
        max_timestep=horizon,
        entropy_weight=config.entropy_weight,
        init_log_std=config.init_log_std,
        action_bound=float(action_bound),
        reward_scale=float(reward_scale),
        robustness_scale=config.robustness_scale,
        token_clip=config.token_clip,
        state_mean=list(stats.state_mean),
        state_std=list(stats.state_std),
    ).validate()


def train(
    dataset: OfflineDataset,
    config: TrainConfig,
    checkpoint: Optional[Union[str, Path]] = None,
    loss_log: Optional[Union[str, Path]] = None,
    log_callback: Optional[Callable[[str], None]] = None,
    eval_callback: Optional[Callable[[int, GaussianPolicy], None]] = None,
) -> TrainResult:
    """Minimize the conditioned Gaussian objective with Adam.

    Parameter initialization and batch sampling draw from separate children of
    ``SeedSequence(config.seed)``, so a run is reproducible bit for bit.

    Args:
        dataset: Annotated dataset with statistics.
        config: Training configuration.
        checkpoint: Where to write the final checkpoint, if anywhere.
        loss_log: CSV file receiving ``step, loss, nll, entropy`` every step.
        log_callback: Receives a progress line every ``log_every`` steps.
        eval_callback: Called with ``(step, policy)`` every ``eval_every`` steps.

    Raises:
        NumericalError: The loss became non-finite; names the step.
    """
    config.validate()
    _check_annotated(dataset)
    policy_config = policy_config_for(dataset, config)
    data = safe_subset(dataset) if config.safe_only else dataset
    if not data.trajectories:
        raise DataError("the safe subset is empty; nothing to train on")
    init_seq, batch_seq = np.random.SeedSequence(config.seed).spawn(2)
    policy = GaussianPolicy.initialize(policy_config, np.random.default_rng(init_seq))
    batch_rng = np.random.default_rng(batch_seq)
    optimizer = Adam(policy.params, AdamHyper(lr=config.lr), grad_clip=config.grad_clip)
    losses: List[Dict[str, float]] = []
    log_file = open(loss_log, "w", newline="", encoding="utf-8") if loss_log else None
    try:
        writer = csv.writer(log_file) if log_file else None
        if writer:
            writer.writerow(LOSS_COLUMNS)
        for step in range(1, config.steps + 1):
            batch = sample_batch(data, config.batch_size, config.context, batch_rng)
            optimizer.zero_grad()
            try:
                with Tape() as tape:
                    result = policy.loss(batch)
                tape.backward(result.loss)
            except NumericalError as e:
                raise NumericalError(f"step {step}: {e}") from e
            optimizer.step()
            policy.clamp_log_std()
            policy.check_finite()
            row = {"step": step, "loss": result.loss.item(), "nll": result.nll, "entropy": result.entropy}
            losses.append(row)
            if writer:
                writer.writerow([row[c] for c in LOSS_COLUMNS])
            if config.log_every and step % config.log_every == 0:
                message = f"step {step}/{config.steps} loss {row['loss']:.4f} nll {row['nll']:.4f}"
                logger.info(message)
                if log_callback:
                    log_callback(message)
            if eval_callback and config.eval_every and step % config.eval_every == 0:
                eval_callback(step, policy)
    finally:
        if log_file:
            log_file.close()
    metadata = {
        "env": dataset.env,
        "spec": dataset.spec,
        "env_config": dataset.config,
        "train": config.to_dict(),
        "stats": dataset.stats.to_dict() if dataset.stats else None,
    }
    if checkpoint is not None:
        save_checkpoint(policy, checkpoint, metadata)
        logger.info("wrote checkpoint {}", checkpoint)
    return TrainResult(policy, losses, metadata)
