"""Specification-conditioned Gaussian sequence policies.

Each timestep contributes one token per enabled modality, always in the order
``suffix, prefix, reward_prefix, return, state, action``. The action
distribution for step ``t`` is read from the transformer output at the state
token of step ``t``, so it never sees ``a_t`` or anything later.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from stl_sdt import autodiff as ad
from stl_sdt.autodiff import Array
from stl_sdt.config import dataclass_from_dict
from stl_sdt.errors import CheckpointError, NumericalError, ShapeError, UsageError

TOKEN_ORDER = ("suffix", "prefix", "reward_prefix", "return", "state", "action")
SCALAR_TOKENS = ("suffix", "prefix", "reward_prefix", "return")
SDT_TOKENS = ("suffix", "prefix", "return", "state", "action")
ARCHITECTURES = ("transformer", "mlp")
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
MASK_VALUE = -1e9
_LOG_2PI = math.log(2.0 * math.pi)
_ENTROPY_CONST = 0.5 * math.log(2.0 * math.pi * math.e)


def ablation_tokens(mode: str) -> Tuple[str, ...]:
    """Token layout for a named ablation.

    ``no-prefix`` and ``no-suffix`` drop one robustness token, ``reward-prefix``
    adds the running reward token and ``bc`` keeps states and actions only.
    """
    if mode == "full":
        return SDT_TOKENS
    if mode == "no-prefix":
        return tuple(t for t in SDT_TOKENS if t != "prefix")
    if mode == "no-suffix":
        return tuple(t for t in SDT_TOKENS if t != "suffix")
    if mode == "reward-prefix":
        return ("suffix", "prefix", "reward_prefix", "return", "state", "action")
    if mode == "bc":
        return ("state", "action")
    raise UsageError(f"unknown ablation mode '{mode}'")


@dataclass
class PolicyConfig:
    """Architecture, token layout and input scaling of a policy."""

    state_dim: int
    action_dim: int = 2
    architecture: str = "transformer"
    tokens: Tuple[str, ...] = SDT_TOKENS
    context: int = 8
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 1
    max_timestep: int = 1000
    entropy_weight: float = 0.1
    init_log_std: float = -0.5
    action_bound: float = 1.0
    reward_scale: float = 1.0
    robustness_scale: float = 0.2
    token_clip: float = 10.0
    state_mean: Optional[List[float]] = None
    state_std: Optional[List[float]] = None

    def __post_init__(self) -> None:
        self.tokens = tuple(self.tokens)

    def validate(self) -> "PolicyConfig":
        if self.architecture not in ARCHITECTURES:
            raise UsageError(f"unknown architecture '{self.architecture}'")
        unknown = [t for t in self.tokens if t not in TOKEN_ORDER]
        if unknown:
            raise UsageError(f"unknown token(s) {', '.join(unknown)}")
        if "state" not in self.tokens or "action" not in self.tokens:
            raise UsageError("token layout must include state and action")
        if list(self.tokens) != [t for t in TOKEN_ORDER if t in self.tokens]:
            raise UsageError(f"tokens must follow the order {', '.join(TOKEN_ORDER)}")
        if self.context < 1:
            raise UsageError("context must be at least 1")
        if self.embed_dim < 1 or self.n_layers < 0 or self.n_heads < 1:
            raise UsageError("embed_dim and n_heads must be positive, n_layers nonnegative")
        if self.embed_dim % self.n_heads:
            raise UsageError("embed_dim must be divisible by n_heads")
        if self.reward_scale <= 0 or self.robustness_scale <= 0 or self.token_clip <= 0:
            raise UsageError("scales and token_clip must be positive")
        return self

    @property
    def conditions(self) -> Tuple[str, ...]:
        return tuple(t for t in self.tokens if t in SCALAR_TOKENS)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["tokens"] = list(self.tokens)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PolicyConfig":
        return dataclass_from_dict(cls, data).validate()


@dataclass
class TokenBatch:
    """Front-padded windows of ``K`` steps for ``B`` sequences.

    Scalar tokens have shape ``(B, K)``; ``states`` is ``(B, K, S)`` and
    ``actions`` ``(B, K, A)``. ``mask`` is true for real steps, ``timesteps``
    holds 0-based step indices.
    """

    suffix: np.ndarray
    prefix: np.ndarray
    reward_prefix: np.ndarray
    returns: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    timesteps: np.ndarray
    mask: np.ndarray

    @property
    def batch_size(self) -> int:
        return int(self.states.shape[0])

    @property
    def context(self) -> int:
        return int(self.states.shape[1])

    def scalar(self, token: str) -> np.ndarray:
        return {
            "suffix": self.suffix,
            "prefix": self.prefix,
            "reward_prefix": self.reward_prefix,
            "return": self.returns,
        }[token]


@dataclass
class GaussianOutput:
    mean: Array
    log_std: Array

    @property
    def std(self) -> np.ndarray:
        return np.exp(np.broadcast_to(self.log_std.data, self.mean.shape))


@dataclass
class LossResult:
    loss: Array
    nll: float
    entropy: float


def _linear(params: Dict[str, Array], name: str, x: Array) -> Array:
    return ad.add(ad.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def _layer_norm(params: Dict[str, Array], name: str, x: Array) -> Array:
    return ad.add(ad.mul(ad.layer_norm(x), params[f"{name}.g"]), params[f"{name}.b"])


@dataclass
class GaussianPolicy:
    """A conditioned Gaussian policy with a global learnable log-std."""

    config: PolicyConfig
    params: Dict[str, Array] = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: PolicyConfig, rng: np.random.Generator) -> "GaussianPolicy":
        """Random weights, zero biases, unit norm gains and a zero mean head."""
        config.validate()
        shapes = _param_shapes(config)
        params: Dict[str, Array] = {}
        for name in sorted(shapes):
            shape = shapes[name]
            if name == "log_std":
                data = np.full(shape, config.init_log_std)
            elif name.startswith("head.") or name.endswith(".b"):
                data = np.zeros(shape)
            elif name.endswith(".g"):
                data = np.ones(shape)
            else:
                fan_in = shape[0] if len(shape) > 1 else 1
                std = 0.02 if name == "timestep" else 1.0 / math.sqrt(fan_in)
                data = rng.normal(0.0, std, shape)
            params[name] = Array(data, requires_grad=True, name=name)
        return cls(config, params)

    # Inputs

    def encode(self, batch: TokenBatch) -> Dict[str, np.ndarray]:
        """Scale and clip raw batch values into network inputs."""
        cfg = self.config
        if batch.states.shape[-1] != cfg.state_dim or batch.actions.shape[-1] != cfg.action_dim:
            raise ShapeError(
                "policy input", batch.states.shape, batch.actions.shape, (cfg.state_dim, cfg.action_dim)
            )
        clip = cfg.token_clip
        inputs: Dict[str, np.ndarray] = {}
        for token in cfg.conditions:
            scale = cfg.robustness_scale if token in ("suffix", "prefix") else cfg.reward_scale
            inputs[token] = np.clip(batch.scalar(token) / scale, -clip, clip)[..., None]
        states = batch.states
        if cfg.state_mean is not None and cfg.state_std is not None:
            states = (states - np.asarray(cfg.state_mean)) / np.asarray(cfg.state_std)
        inputs["state"] = np.clip(states, -clip, clip)
        inputs["action"] = batch.actions / cfg.action_bound
        pad = ~batch.mask.astype(bool)
        for key in inputs:
            inputs[key] = np.where(pad[..., None], 0.0, inputs[key])
        return inputs

    # Forward passes

    def forward(self, batch: TokenBatch) -> GaussianOutput:
        """Per-step action distributions, shape ``(B, K, A)``."""
        if self.config.architecture == "mlp":
            return self.mlp_baseline_forward(batch)
        return self._transformer_forward(batch)

    def _head(self, h: Array) -> GaussianOutput:
        mean = ad.mul(ad.tanh(_linear(self.params, "head", h)), self.config.action_bound)
        return GaussianOutput(mean, self.params["log_std"])

    def _transformer_forward(self, batch: TokenBatch) -> GaussianOutput:
        cfg, p = self.config, self.params
        inputs = self.encode(batch)
        b, k, e = batch.batch_size, batch.context, cfg.embed_dim
        n = len(cfg.tokens)
        if np.any(batch.timesteps > cfg.max_timestep) or np.any(batch.timesteps < 0):
            raise ShapeError("timestep embedding", batch.timesteps.shape, (cfg.max_timestep + 1,))
        time = ad.gather(p["timestep"], batch.timesteps)
        tokens = [
            ad.reshape(ad.add(_linear(p, f"embed.{t}", Array(inputs[t])), time), (b, k, 1, e))
            for t in cfg.tokens
        ]
        # (B, K, n, E) -> (B, K*n, E): step t occupies positions t*n .. t*n+n-1
        # in layout order, so flattening interleaves the tokens step by step.
        x = ad.reshape(ad.concat(tokens, axis=2), (b, k * n, e))
        x = _layer_norm(p, "embed_ln", x)
        mask = self._attention_mask(batch.mask.astype(bool), n)
        for layer in range(cfg.n_layers):
            x = ad.add(x, self._attention(f"block{layer}", _layer_norm(p, f"block{layer}.ln1", x), mask))
            hidden = ad.gelu(_linear(p, f"block{layer}.ff1", _layer_norm(p, f"block{layer}.ln2", x)))
            x = ad.add(x, _linear(p, f"block{layer}.ff2", hidden))
        x = _layer_norm(p, "final_ln", x)
        # The action is read off each step's state token, which sees only
        # earlier steps and the conditions of its own step.
        state_index = cfg.tokens.index("state")
        return self._head(x[:, state_index::n, :])

    @staticmethod
    def _attention_mask(step_mask: np.ndarray, n_tokens: int) -> np.ndarray:
        """True where query ``i`` may not attend to key ``j``.

        Keys in the future are hidden, as are padded keys other than the
        query itself.
        """
        length = step_mask.shape[1] * n_tokens
        future = np.triu(np.ones((length, length), dtype=bool), k=1)
        # Step masks repeat n_tokens times to cover each step's interleaved tokens.
        padded_key = ~np.repeat(step_mask, n_tokens, axis=1)
        not_self = ~np.eye(length, dtype=bool)
        # (B, L, L), then a head axis for broadcasting against (B, H, L, L) scores.
        blocked = future[None, :, :] | (padded_key[:, None, :] & not_self[None, :, :])
        return blocked[:, None, :, :]

    def _attention(self, name: str, x: Array, mask: np.ndarray) -> Array:
        cfg, p = self.config, self.params
        b, length, e = x.shape
        h = cfg.n_heads
        d = e // h

        def heads(t: Array) -> Array:
            return ad.transpose(ad.reshape(t, (b, length, h, d)), (0, 2, 1, 3))

        q = heads(_linear(p, f"{name}.q", x))
        k = heads(_linear(p, f"{name}.k", x))
        v = heads(_linear(p, f"{name}.v", x))
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
        weights = ad.softmax(ad.masked_fill(scores, mask, MASK_VALUE))
        out = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (b, length, e))
        return _linear(p, f"{name}.proj", out)

    def mlp_baseline_forward(self, batch: TokenBatch) -> GaussianOutput:
        """Two hidden layers on the concatenated per-step condition and state."""
        cfg, p = self.config, self.params
        inputs = self.encode(batch)
        features = np.concatenate([inputs[t] for t in cfg.conditions] + [inputs["state"]], axis=-1)
        h = ad.gelu(_linear(p, "mlp.l1", Array(features)))
        h = ad.gelu(_linear(p, "mlp.l2", h))
        return self._head(h)

    # Objective

    def loss(self, batch: TokenBatch) -> LossResult:
        """Masked mean of ``-log N(a; mu, sigma) - lambda * H`` over real steps.

        Raises:
            NumericalError: The loss is not finite.
        """
        out = self.forward(batch)
        log_std = out.log_std
        mask = batch.mask.astype(np.float64)
        count = float(mask.sum())
        if count == 0:
            raise NumericalError("batch has no unmasked steps")
        z = ad.mul(ad.sub(Array(batch.actions), out.mean), ad.exp(ad.mul(log_std, -1.0)))
        nll = ad.add(ad.add(ad.mul(ad.square(z), 0.5), log_std), 0.5 * _LOG_2PI)
        nll_step = ad.sum_(nll, axis=-1)
        entropy = ad.add(ad.sum_(log_std), _ENTROPY_CONST * self.config.action_dim)
        per_step = ad.sub(nll_step, ad.mul(entropy, self.config.entropy_weight))
        total = ad.mul(ad.sum_(ad.mul(per_step, mask)), 1.0 / count)
        if not np.isfinite(total.data):
            raise NumericalError("non-finite loss")
        nll_mean = float((nll_step.data * mask).sum() / count)
        return LossResult(total, nll_mean, float(entropy.data))

    def clamp_log_std(self) -> None:
        log_std = self.params["log_std"]
        log_std.data = np.clip(log_std.data, LOG_STD_MIN, LOG_STD_MAX)

    def act(self, batch: TokenBatch, mode: str = "mean", rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Action for the last step of a single-sequence batch."""
        out = self.forward(batch)
        mean = out.mean.data[0, -1]
        if mode == "mean":
            return mean.copy()
        if mode != "sample":
            raise UsageError(f"unknown action mode '{mode}'")
        rng = rng if rng is not None else np.random.default_rng()
        return mean + out.std[0, -1] * rng.standard_normal(mean.shape)

    def check_finite(self) -> None:
        for name, p in self.params.items():
            if not np.all(np.isfinite(p.data)):
                raise NumericalError(f"parameter '{name}' became non-finite")


def _param_shapes(cfg: PolicyConfig) -> Dict[str, Tuple[int, ...]]:
    e, a = cfg.embed_dim, cfg.action_dim
    shapes: Dict[str, Tuple[int, ...]] = {"log_std": (a,), "head.w": (e, a), "head.b": (a,)}
    if cfg.architecture == "mlp":
        width = len(cfg.conditions) + cfg.state_dim
        shapes.update({"mlp.l1.w": (width, e), "mlp.l1.b": (e,), "mlp.l2.w": (e, e), "mlp.l2.b": (e,)})
        return shapes
    dims = {"state": cfg.state_dim, "action": a}
    for token in cfg.tokens:
        shapes[f"embed.{token}.w"] = (dims.get(token, 1), e)
        shapes[f"embed.{token}.b"] = (e,)
    shapes["timestep"] = (cfg.max_timestep + 1, e)
    for ln in ("embed_ln", "final_ln"):
        shapes[f"{ln}.g"], shapes[f"{ln}.b"] = (e,), (e,)
    for layer in range(cfg.n_layers):
        prefix = f"block{layer}"
        for ln in ("ln1", "ln2"):
            shapes[f"{prefix}.{ln}.g"], shapes[f"{prefix}.{ln}.b"] = (e,), (e,)
        for proj in ("q", "k", "v", "proj"):
            shapes[f"{prefix}.{proj}.w"], shapes[f"{prefix}.{proj}.b"] = (e, e), (e,)
        shapes[f"{prefix}.ff1.w"], shapes[f"{prefix}.ff1.b"] = (e, 4 * e), (4 * e,)
        shapes[f"{prefix}.ff2.w"], shapes[f"{prefix}.ff2.b"] = (4 * e, e), (e,)
    return shapes


# Checkpoints


def sidecar_path(path: Union[str, Path]) -> Path:
    return Path(f"{path}.meta.json")


def save_checkpoint(policy: GaussianPolicy, path: Union[str, Path], metadata: Optional[Dict[str, Any]] = None) -> None:
    """Write the parameter map to ``path`` and the policy config to its sidecar."""
    ad.save_parameters(policy.params, path)
    meta = {"policy": policy.config.to_dict(), **(metadata or {})}
    sidecar_path(path).write_text(json.dumps(meta, indent=2, allow_nan=False), encoding="utf-8")


def load_checkpoint(path: Union[str, Path]) -> Tuple[GaussianPolicy, Dict[str, Any]]:
    """Restore a policy and the sidecar metadata written by :func:`save_checkpoint`.

    Raises:
        CheckpointError: Files are missing, malformed or disagree on shapes.
    """
    try:
        meta = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint metadata for {path}: {e}") from e
    if "policy" not in meta:
        raise CheckpointError(f"checkpoint metadata for {path} lacks the policy config")
    config = PolicyConfig.from_dict(meta["policy"])
    values = ad.load_parameters(path)
    expected = _param_shapes(config)
    if set(values) != set(expected):
        raise CheckpointError(f"checkpoint {path} parameters do not match its config")
    params = {}
    for name, shape in expected.items():
        if values[name].shape != shape:
            raise CheckpointError(f"parameter '{name}' has shape {values[name].shape}, expected {shape}")
        params[name] = Array(values[name], requires_grad=True, name=name)
    return GaussianPolicy(config, params), meta


def check_shapes(policy: GaussianPolicy, state_dim: int, action_dim: int) -> None:
    cfg = policy.config
    if (cfg.state_dim, cfg.action_dim) != (state_dim, action_dim):
        raise ShapeError("policy", (cfg.state_dim, cfg.action_dim), (state_dim, action_dim))


def empty_batch(config: PolicyConfig, batch_size: int = 1) -> TokenBatch:
    """All-padding batch of the policy's context length."""
    b, k = batch_size, config.context
    zeros = np.zeros((b, k))
    return TokenBatch(
        suffix=zeros.copy(),
        prefix=zeros.copy(),
        reward_prefix=zeros.copy(),
        returns=zeros.copy(),
        states=np.zeros((b, k, config.state_dim)),
        actions=np.zeros((b, k, config.action_dim)),
        timesteps=np.zeros((b, k), dtype=np.int64),
        mask=np.zeros((b, k), dtype=bool),
    )


def window_batch(
    config: PolicyConfig,
    end: int,
    suffix: Sequence[float],
    prefix: Sequence[float],
    reward_prefix: Sequence[float],
    returns: Sequence[float],
    states: np.ndarray,
    actions: np.ndarray,
) -> TokenBatch:
    """Single-sequence batch of the ``K`` steps ending at 1-indexed step ``end``.

    Windows starting before step 1 are front-padded and masked.
    """
    batch = empty_batch(config, 1)
    k = config.context
    start = max(1, end - k + 1)
    steps = end - start + 1
    offset = k - steps
    rows = slice(start - 1, end)
    batch.suffix[0, offset:] = np.asarray(suffix)[rows]
    batch.prefix[0, offset:] = np.asarray(prefix)[rows]
    batch.reward_prefix[0, offset:] = np.asarray(reward_prefix)[rows]
    batch.returns[0, offset:] = np.asarray(returns)[rows]
    batch.states[0, offset:] = np.asarray(states)[rows]
    batch.actions[0, offset:] = np.asarray(actions)[rows]
    batch.timesteps[0, offset:] = np.arange(start - 1, end)
    batch.mask[0, offset:] = True
    return batch
