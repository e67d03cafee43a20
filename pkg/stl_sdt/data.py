"""Offline trajectory datasets: file I/O, relabeling, annotation and statistics."""

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from stl_sdt.errors import (
    DataError,
    DatasetSchemaError,
    MissingStatsError,
    NumericalError,
    SignalError,
)
from stl_sdt.stl.formula import Formula
from stl_sdt.stl.parser import parse_formula
from stl_sdt.stl.robustness import RHO_MAX, Signal, prefix_trace, robustness, suffix_trace

RELABEL_WINDOW = 5
RELABEL_RULES = ("monitor", "window")

_ARRAY_FIELDS = ("rewards", "costs_p", "costs_v", "relabeled_costs", "prefix", "suffix", "return_to_go")


@dataclass(frozen=True)
class Trajectory:
    """Aligned per-step records of one episode.

    Row ``t - 1`` of every array belongs to 1-indexed step ``t``. Annotation
    fields stay ``None`` until :func:`annotate_dataset` fills them.
    """

    schema: Tuple[str, ...]
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs_p: np.ndarray
    costs_v: Optional[np.ndarray] = None
    relabeled_costs: Optional[np.ndarray] = None
    prefix: Optional[np.ndarray] = None
    suffix: Optional[np.ndarray] = None
    return_to_go: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "schema", tuple(self.schema))
        object.__setattr__(self, "states", _matrix(self.states, "states"))
        object.__setattr__(self, "actions", _matrix(self.actions, "actions"))
        for name in _ARRAY_FIELDS:
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, _vector(value, name))
        horizon = self.states.shape[0]
        if horizon < 1:
            raise SignalError("states: trajectory must have at least one step")
        if self.states.shape[1] != len(self.schema):
            raise SignalError(
                f"states: rows have {self.states.shape[1]} values, schema has {len(self.schema)}"
            )
        for name in ("actions",) + _ARRAY_FIELDS:
            value = getattr(self, name)
            if value is not None and len(value) != horizon:
                raise SignalError(f"{name}: length {len(value)} differs from {horizon} states")
        if self.relabeled_costs is not None and not np.all(
            np.isin(self.relabeled_costs, (0.0, 1.0))
        ):
            raise SignalError("relabeled_costs: values must be 0 or 1")

    @property
    def length(self) -> int:
        return int(self.states.shape[0])

    @property
    def total_reward(self) -> float:
        return _sequential_sum(self.rewards)

    def signal(self) -> Signal:
        return Signal(self.schema, self.states)

    def with_annotations(self, **changes: Any) -> "Trajectory":
        return replace(self, **changes)

    def to_record(self) -> Dict[str, Any]:
        record: Dict[str, Any] = {
            "schema": list(self.schema),
            "states": self.states.tolist(),
            "actions": self.actions.tolist(),
        }
        for name in _ARRAY_FIELDS:
            value = getattr(self, name)
            if value is not None:
                record[name] = value.tolist()
        return record


def _matrix(value: Any, name: str) -> np.ndarray:
    array = np.array(value, dtype=np.float64)
    if array.ndim != 2:
        raise SignalError(f"{name}: expected a list of equally long rows")
    if not np.all(np.isfinite(array)):
        raise SignalError(f"{name}: values must be finite")
    array.setflags(write=False)
    return array


def _vector(value: Any, name: str) -> np.ndarray:
    array = np.array(value, dtype=np.float64)
    if array.ndim != 1:
        raise SignalError(f"{name}: expected a flat list of numbers")
    if not np.all(np.isfinite(array)):
        raise SignalError(f"{name}: values must be finite")
    array.setflags(write=False)
    return array


def _sequential_sum(values: Iterable[float]) -> float:
    total = 0.0
    for v in values:
        total += float(v)
    return total


# Per-trajectory transforms


def return_to_go(rewards: Sequence[float]) -> np.ndarray:
    """``R_t = sum of rewards[t:]``, built so that ``R_t == R_{t+1} + r_t`` exactly."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.zeros(len(rewards))
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        running = running + float(rewards[t])
        out[t] = running
    return out


def reward_prefix(rewards: Sequence[float], inclusive: bool = True) -> np.ndarray:
    """Running reward sum ``r_1 + ... + r_t``, or up to ``r_{t-1}`` when not inclusive.

    Policy tokens use the exclusive form: at step t only earlier rewards have
    been realized.
    """
    out = np.zeros(len(rewards))
    running = 0.0
    for t, r in enumerate(rewards):
        if inclusive:
            running = running + float(r)
            out[t] = running
        else:
            out[t] = running
            running = running + float(r)
    return out


def _strict_window(costs: np.ndarray) -> np.ndarray:
    out = np.zeros(len(costs))
    for t in range(RELABEL_WINDOW, len(costs)):
        if np.all(costs[t - RELABEL_WINDOW : t] == 1):
            out[t] = 1.0
    return out


def _monitor_window(costs: np.ndarray) -> np.ndarray:
    # A violation that starts at step t is forgiven only if it clears within
    # the next five steps, and only inside the trace.
    out = np.zeros(len(costs))
    streak = 0
    for t, c in enumerate(costs):
        streak = streak + 1 if c == 1 else 0
        if streak > RELABEL_WINDOW or (t == len(costs) - 1 and c == 1):
            out[t] = 1.0
    return out


def relabel_costs(trajectory: Trajectory, env_kind: str, rule: str = "monitor") -> np.ndarray:
    """Relabel per-step costs into a 0/1 signal summarizing specification violations.

    Args:
        trajectory: Trajectory carrying ``costs_p`` (and ``costs_v`` for Run).
        env_kind: ``run`` or ``circle``; ``reach`` uses the Circle rule.
        rule: ``monitor`` flags a step once a violation has persisted past the
            five-step recovery window or is still open at the final step, so the
            episode sum is zero exactly when the matching built-in formula holds.
            ``window`` flags step ``t`` when the five preceding costs are all 1.

    Raises:
        DataError: A required cost channel is missing or the kind is unknown.
    """
    if rule not in RELABEL_RULES:
        raise DataError(f"unknown relabel rule '{rule}'")
    window = _monitor_window if rule == "monitor" else _strict_window
    if env_kind in ("circle", "reach"):
        return window(trajectory.costs_p)
    if env_kind == "run":
        if trajectory.costs_v is None:
            raise DataError("Run relabeling requires the costs_v channel")
        return np.maximum((trajectory.costs_p == 1).astype(np.float64), window(trajectory.costs_v))
    raise DataError(f"cannot relabel costs for env kind '{env_kind}'")


def annotate_robustness(
    trajectory: Trajectory, phi: Formula, rho_max: float = RHO_MAX
) -> Tuple[np.ndarray, np.ndarray]:
    """Prefix and suffix robustness traces of ``phi`` along ``trajectory``."""
    signal = trajectory.signal()
    return prefix_trace(signal, phi, rho_max), suffix_trace(signal, phi, rho_max)


# Datasets


@dataclass
class DatasetStats:
    """Normalization and target statistics derived from a dataset.

    Reward extremes and suffix curves are taken over the safe subset, whose
    full-trace robustness is strictly positive. Fields are ``None`` when the
    dataset has no safe trajectory.
    """

    n_trajectories: int
    n_safe: int
    satisfaction: float
    state_mean: List[float]
    state_std: List[float]
    max_total_reward: float
    r_min: Optional[float] = None
    r_max: Optional[float] = None
    suffix_mean: Optional[List[float]] = None
    suffix_max: Optional[List[float]] = None
    target_reward_default: Optional[float] = None
    target_suffix_default: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetStats":
        return cls(**data)

    def require_safe(self) -> None:
        if self.r_min is None or self.r_max is None:
            raise MissingStatsError("dataset has no safe trajectory; safe-subset statistics are undefined")


@dataclass
class OfflineDataset:
    """Trajectories plus their channel schema, header and derived statistics."""

    trajectories: List[Trajectory]
    schema: Tuple[str, ...]
    env: Optional[str] = None
    spec: Optional[str] = None
    config: Optional[Dict[str, Any]] = None
    stats: Optional[DatasetStats] = None
    _formula: Optional[Formula] = field(default=None, init=False, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.trajectories)

    def formula(self) -> Formula:
        if self.spec is None:
            raise MissingStatsError("dataset declares no specification")
        if self._formula is None:
            self._formula = parse_formula(self.spec)
        return self._formula

    def header(self) -> Dict[str, Any]:
        header: Dict[str, Any] = {"env": self.env, "spec": self.spec}
        if self.config is not None:
            header["config"] = self.config
        return header


def full_robustness(trajectory: Trajectory, phi: Formula) -> float:
    """Robustness of the whole trajectory at step 1 under ``phi``."""
    return robustness(trajectory.signal(), 1, phi)


def compute_stats(trajectories: Sequence[Trajectory], phi: Formula) -> DatasetStats:
    """Deterministically derive dataset statistics."""
    if not trajectories:
        raise MissingStatsError("cannot compute statistics of an empty dataset")
    totals = np.array([traj.total_reward for traj in trajectories])
    rhos = np.array([full_robustness(traj, phi) for traj in trajectories])
    safe = [traj for traj, rho in zip(trajectories, rhos) if rho > 0.0]
    states = np.concatenate([traj.states for traj in trajectories])
    std = states.std(axis=0)
    std[std < 1e-8] = 1.0
    stats = DatasetStats(
        n_trajectories=len(trajectories),
        n_safe=len(safe),
        satisfaction=len(safe) / len(trajectories),
        state_mean=states.mean(axis=0).tolist(),
        state_std=std.tolist(),
        max_total_reward=float(totals.max()),
    )
    if not safe:
        logger.warning("dataset has no trajectory satisfying its specification")
        return stats
    safe_totals = totals[rhos > 0.0]
    stats.r_min = float(safe_totals.min())
    stats.r_max = float(safe_totals.max())
    stats.target_reward_default = float(np.percentile(safe_totals, 90))
    stats.target_suffix_default = float(np.median(rhos[rhos > 0.0]))
    suffixes = [
        traj.suffix if traj.suffix is not None else suffix_trace(traj.signal(), phi)
        for traj in safe
    ]
    longest = max(len(s) for s in suffixes)
    means, maxes = [], []
    for t in range(longest):
        column = np.array([s[t] for s in suffixes if len(s) > t])
        means.append(float(column.mean()))
        maxes.append(float(column.max()))
    stats.suffix_mean = means
    stats.suffix_max = maxes
    return stats


def annotate_dataset(
    dataset: OfflineDataset, phi: Optional[Formula] = None, rule: str = "monitor"
) -> OfflineDataset:
    """Attach prefix, suffix, return-to-go and relabeled costs, then recompute stats."""
    phi = phi if phi is not None else dataset.formula()
    annotated = []
    for traj in dataset.trajectories:
        prefix, suffix = annotate_robustness(traj, phi)
        changes: Dict[str, Any] = {
            "prefix": prefix,
            "suffix": suffix,
            "return_to_go": return_to_go(traj.rewards),
        }
        if dataset.env in ("run", "circle", "reach") and (
            dataset.env != "run" or traj.costs_v is not None
        ):
            changes["relabeled_costs"] = relabel_costs(traj, dataset.env, rule)
        annotated.append(traj.with_annotations(**changes))
    result = replace(dataset, trajectories=annotated, stats=None)
    if annotated:
        result.stats = compute_stats(annotated, phi)
    return result


def safe_subset(dataset: OfflineDataset, phi: Optional[Formula] = None) -> OfflineDataset:
    """Trajectories whose full-trace robustness is strictly positive."""
    phi = phi if phi is not None else dataset.formula()
    kept = [traj for traj in dataset.trajectories if full_robustness(traj, phi) > 0.0]
    return replace(dataset, trajectories=kept)


def normalized_reward(total_reward: float, stats: Optional[DatasetStats]) -> float:
    """``(R - r_min) / (r_max - r_min)`` over the safe subset; may leave [0, 1].

    Raises:
        MissingStatsError: No safe-subset statistics are available.
        NumericalError: ``r_max == r_min``.
    """
    if stats is None:
        raise MissingStatsError("dataset statistics are undefined")
    stats.require_safe()
    assert stats.r_min is not None and stats.r_max is not None
    if stats.r_max == stats.r_min:
        raise NumericalError(f"degenerate reward statistics: r_min == r_max == {stats.r_max}")
    return (total_reward - stats.r_min) / (stats.r_max - stats.r_min)


def summarize_dataset(dataset: OfflineDataset, phi: Optional[Formula] = None) -> List[Dict[str, Any]]:
    """One row per trajectory: reward, relabeled cost, full-trace suffix, satisfied."""
    phi = phi if phi is not None else dataset.formula()
    rows = []
    for i, traj in enumerate(dataset.trajectories):
        rho = full_robustness(traj, phi)
        cost = None
        if traj.relabeled_costs is not None:
            cost = _sequential_sum(traj.relabeled_costs)
        elif dataset.env in ("run", "circle", "reach") and (dataset.env != "run" or traj.costs_v is not None):
            cost = _sequential_sum(relabel_costs(traj, dataset.env))
        rows.append(
            {
                "trajectory": i,
                "length": traj.length,
                "total_reward": traj.total_reward,
                "total_cost": cost,
                "suffix": rho,
                "satisfied": rho > 0.0,
            }
        )
    return rows


# File I/O


def save_dataset(dataset: OfflineDataset, path: Union[str, Path]) -> None:
    """Write the header line followed by one JSON object per trajectory.

    Floats are written in their shortest round-trip form, so loading restores
    every value bit for bit.
    """
    with open(path, "w", encoding="utf-8") as f:
        if dataset.env is not None or dataset.spec is not None:
            f.write(json.dumps(dataset.header(), allow_nan=False) + "\n")
        for traj in dataset.trajectories:
            f.write(json.dumps(traj.to_record(), allow_nan=False) + "\n")


def _read_records(lines: Iterable[str]) -> Iterable[Tuple[int, Dict[str, Any]]]:
    for row, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetSchemaError(f"invalid JSON: {e.msg}", row) from e
        if not isinstance(record, dict):
            raise DatasetSchemaError("expected a JSON object", row)
        yield row, record


_REQUIRED = ("schema", "states", "actions", "rewards", "costs_p")


def trajectory_from_record(record: Dict[str, Any], row: int, index: int) -> Trajectory:
    for name in _REQUIRED:
        if name not in record:
            raise DatasetSchemaError("missing required field", row, name, index)
    unknown = sorted(set(record) - set(_REQUIRED) - set(_ARRAY_FIELDS))
    if unknown:
        raise DatasetSchemaError("unknown field", row, unknown[0], index)
    schema = record["schema"]
    if not isinstance(schema, list) or not all(isinstance(c, str) for c in schema):
        raise DatasetSchemaError("schema must be a list of channel names", row, "schema", index)
    for name in ("states", "actions") + _ARRAY_FIELDS:
        value = record.get(name)
        if value is None:
            continue
        try:
            (_matrix if name in ("states", "actions") else _vector)(value, name)
        except (SignalError, TypeError, ValueError) as e:
            raise DatasetSchemaError(str(e).split(": ", 1)[-1], row, name, index) from e
    try:
        return Trajectory(**{k: v for k, v in record.items()})
    except SignalError as e:
        name, _, message = str(e).partition(": ")
        raise DatasetSchemaError(message, row, name, index) from e


def load_dataset(path: Union[str, Path], compute: bool = True) -> OfflineDataset:
    """Load a trajectory JSONL file.

    Args:
        path: Dataset file.
        compute: Derive statistics when the header declares a specification.

    Raises:
        DatasetSchemaError: A row violates the schema; names the row and field.
    """
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise DataError(f"cannot read dataset {path}: {e}") from e
    header: Dict[str, Any] = {}
    trajectories: List[Trajectory] = []
    schema: Optional[Tuple[str, ...]] = None
    for row, record in _read_records(lines):
        if "states" not in record and not trajectories and not header:
            unknown = sorted(set(record) - {"env", "spec", "config"})
            if unknown:
                raise DatasetSchemaError("unknown header field", row, unknown[0])
            header = record
            continue
        traj = trajectory_from_record(record, row, len(trajectories))
        if schema is None:
            schema = traj.schema
        elif traj.schema != schema:
            raise DatasetSchemaError("schema differs from earlier trajectories", row, "schema", len(trajectories))
        trajectories.append(traj)
    dataset = OfflineDataset(
        trajectories=trajectories,
        schema=schema or (),
        env=header.get("env"),
        spec=header.get("spec"),
        config=header.get("config"),
    )
    if compute and trajectories and dataset.spec is not None:
        dataset.stats = compute_stats(trajectories, dataset.formula())
    logger.debug("loaded {} trajectories from {}", len(trajectories), path)
    return dataset
