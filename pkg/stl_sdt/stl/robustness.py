"""Discrete-time quantitative and Boolean STL semantics.

Time is 1-indexed. Temporal windows ``[t+lo, t+hi]`` are clamped to ``[1, T]``.
An empty window makes ``G`` evaluate to ``+rho_max`` and ``F``/``U`` to ``-rho_max``.
"""

from collections import deque
from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

from stl_sdt.errors import SignalError, StepIndexError
from stl_sdt.stl.formula import (
    And,
    Finally,
    Formula,
    Globally,
    Implies,
    Interval,
    Not,
    Or,
    Predicate,
    TrueF,
    Until,
    validate_formula,
)

RHO_MAX = 1e6


@dataclass(frozen=True)
class Signal:
    """A length-T sequence of real vectors, one entry per schema channel."""

    schema: Tuple[str, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.ndim == 1 and len(self.schema) == 1:
            values = values.reshape(-1, 1)
        if values.ndim != 2 or values.shape[1] != len(self.schema):
            raise SignalError(
                f"signal values of shape {values.shape} do not match "
                f"{len(self.schema)} channel(s)"
            )
        if values.shape[0] < 1:
            raise SignalError("signal must have at least one step")
        if not np.all(np.isfinite(values)):
            raise SignalError("signal values must be finite")
        if len(set(self.schema)) != len(self.schema):
            raise SignalError(f"duplicate channel names in schema {self.schema}")
        values.setflags(write=False)
        object.__setattr__(self, "schema", tuple(self.schema))
        object.__setattr__(self, "values", values)

    @classmethod
    def from_columns(cls, columns: Mapping[str, Sequence[float]]) -> "Signal":
        """Build a signal from equally long per-channel sequences."""
        schema = tuple(columns)
        lengths = {len(columns[name]) for name in schema}
        if len(lengths) > 1:
            raise SignalError(f"channels have different lengths {sorted(lengths)}")
        values = np.column_stack([np.asarray(columns[n], dtype=np.float64) for n in schema])
        return cls(schema, values)

    @property
    def length(self) -> int:
        return int(self.values.shape[0])

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.schema.index(name)]

    def columns(self) -> Dict[str, np.ndarray]:
        return {name: self.values[:, i] for i, name in enumerate(self.schema)}

    def row(self, t: int) -> Dict[str, float]:
        """Channel values at 1-indexed step ``t`` as Python floats."""
        return {name: float(self.values[t - 1, i]) for i, name in enumerate(self.schema)}

    def window(self, start: int, end: int) -> "Signal":
        """Return the sub-signal of 1-indexed steps ``start..end`` inclusive."""
        check_step(start, self.length)
        check_step(end, self.length)
        return Signal(self.schema, self.values[start - 1 : end])


@dataclass(frozen=True)
class RobustnessTrace:
    """Robustness of ``formula`` over ``signal`` at every step.

    ``values[t - 1]`` holds the robustness at 1-indexed step ``t``.
    """

    values: np.ndarray
    formula: Formula
    signal: Signal

    def at(self, t: int) -> float:
        check_step(t, len(self.values))
        return float(self.values[t - 1])


def check_step(t: int, horizon: int) -> None:
    if not 1 <= t <= horizon:
        raise StepIndexError(f"step {t} outside [1, {horizon}]")


# Vectorized evaluation


def _sliding_extremum(
    values: np.ndarray, interval: Interval, use_max: bool, empty: float
) -> np.ndarray:
    """Min or max of ``values`` over each clamped window, with a monotonic deque.

    Window starts and ends never move backwards as ``t`` grows, so every index
    enters and leaves the deque at most once.
    """
    horizon = len(values)
    out = np.empty(horizon)
    window: deque = deque()
    pushed = 0
    for i in range(horizon):
        start = i + interval.lo
        end = horizon - 1 if interval.hi is None else min(i + interval.hi, horizon - 1)
        while pushed <= end:
            v = values[pushed]
            if use_max:
                while window and values[window[-1]] <= v:
                    window.pop()
            else:
                while window and values[window[-1]] >= v:
                    window.pop()
            window.append(pushed)
            pushed += 1
        while window and window[0] < start:
            window.popleft()
        out[i] = values[window[0]] if start <= end else empty
    return out


def _until(
    left: np.ndarray, right: np.ndarray, interval: Interval, rho_max: float
) -> np.ndarray:
    horizon = len(left)
    out = np.empty(horizon)
    for i in range(horizon):
        start = i + interval.lo
        end = horizon - 1 if interval.hi is None else min(i + interval.hi, horizon - 1)
        best = -rho_max
        running = float("inf")
        for j in range(i, end + 1):
            running = min(running, left[j])
            if j >= start:
                best = max(best, min(right[j], running))
        out[i] = best
    return out


def _predicate_values(node: Predicate, signal: Signal) -> np.ndarray:
    mu = node.expr.evaluate(signal.columns())
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), (signal.length,))
    if node.op == "<":
        return node.bound - mu
    return mu - node.bound


def _trace(
    phi: Formula, signal: Signal, rho_max: float, memo: Dict[int, np.ndarray]
) -> np.ndarray:
    key = id(phi)
    if key in memo:
        return memo[key]
    if isinstance(phi, TrueF):
        out = np.full(signal.length, rho_max)
    elif isinstance(phi, Predicate):
        out = _predicate_values(phi, signal)
    elif isinstance(phi, Not):
        out = -_trace(phi.child, signal, rho_max, memo)
    elif isinstance(phi, And):
        out = np.minimum(
            _trace(phi.left, signal, rho_max, memo),
            _trace(phi.right, signal, rho_max, memo),
        )
    elif isinstance(phi, Or):
        out = np.maximum(
            _trace(phi.left, signal, rho_max, memo),
            _trace(phi.right, signal, rho_max, memo),
        )
    elif isinstance(phi, Implies):
        out = np.maximum(
            -_trace(phi.left, signal, rho_max, memo),
            _trace(phi.right, signal, rho_max, memo),
        )
    elif isinstance(phi, Globally):
        child = _trace(phi.child, signal, rho_max, memo)
        out = _sliding_extremum(child, phi.interval, use_max=False, empty=rho_max)
    elif isinstance(phi, Finally):
        child = _trace(phi.child, signal, rho_max, memo)
        out = _sliding_extremum(child, phi.interval, use_max=True, empty=-rho_max)
    elif isinstance(phi, Until):
        out = _until(
            _trace(phi.left, signal, rho_max, memo),
            _trace(phi.right, signal, rho_max, memo),
            phi.interval,
            rho_max,
        )
    else:
        raise TypeError(f"not a formula node: {phi!r}")
    memo[key] = out
    return out


def robustness_trace(
    signal: Signal, phi: Formula, rho_max: float = RHO_MAX
) -> RobustnessTrace:
    """Evaluate the robustness of ``phi`` at every step of ``signal``.

    Bounded and untimed ``G``/``F`` run in linear time per operator node;
    ``U`` runs in ``O(T * w)`` for window width ``w``.

    Raises:
        UnknownChannelError: ``phi`` references a channel missing from the signal.
    """
    validate_formula(phi, signal.schema)
    values = np.array(_trace(phi, signal, rho_max, {}), dtype=np.float64)
    values.setflags(write=False)
    return RobustnessTrace(values, phi, signal)


def robustness_at_all(signal: Signal, phi: Formula, rho_max: float = RHO_MAX) -> np.ndarray:
    return robustness_trace(signal, phi, rho_max).values


def robustness(signal: Signal, t: int, phi: Formula, rho_max: float = RHO_MAX) -> float:
    """Robustness ``rho(signal, t, phi)`` at 1-indexed step ``t``."""
    check_step(t, signal.length)
    return robustness_trace(signal, phi, rho_max).at(t)


# Reference evaluators


def robustness_bruteforce(
    signal: Signal, t: int, phi: Formula, rho_max: float = RHO_MAX
) -> float:
    """Literal recursive transcription of the quantitative semantics.

    No memoization and no windowing tricks; used as an independent oracle.
    """
    validate_formula(phi, signal.schema)
    check_step(t, signal.length)
    return _brute(signal, t, phi, rho_max)


def _brute(signal: Signal, t: int, phi: Formula, rho_max: float) -> float:
    horizon = signal.length
    if isinstance(phi, TrueF):
        return rho_max
    if isinstance(phi, Predicate):
        mu = float(phi.expr.evaluate(signal.row(t)))
        return phi.bound - mu if phi.op == "<" else mu - phi.bound
    if isinstance(phi, Not):
        return -_brute(signal, t, phi.child, rho_max)
    if isinstance(phi, And):
        return min(
            _brute(signal, t, phi.left, rho_max), _brute(signal, t, phi.right, rho_max)
        )
    if isinstance(phi, Or):
        return max(
            _brute(signal, t, phi.left, rho_max), _brute(signal, t, phi.right, rho_max)
        )
    if isinstance(phi, Implies):
        return max(
            -_brute(signal, t, phi.left, rho_max), _brute(signal, t, phi.right, rho_max)
        )
    if isinstance(phi, (Globally, Finally)):
        start, end = phi.interval.window(t, horizon)
        values = [_brute(signal, k, phi.child, rho_max) for k in range(start, end + 1)]
        if isinstance(phi, Globally):
            return min(values) if values else rho_max
        return max(values) if values else -rho_max
    if isinstance(phi, Until):
        start, end = phi.interval.window(t, horizon)
        best = -rho_max
        for k in range(start, end + 1):
            left = min(_brute(signal, j, phi.left, rho_max) for j in range(t, k + 1))
            best = max(best, min(_brute(signal, k, phi.right, rho_max), left))
        return best
    raise TypeError(f"not a formula node: {phi!r}")


def boolean_satisfaction(signal: Signal, t: int, phi: Formula) -> bool:
    """Classic Boolean semantics over the same clamped windows."""
    validate_formula(phi, signal.schema)
    check_step(t, signal.length)
    return _holds(signal, t, phi)


def _holds(signal: Signal, t: int, phi: Formula) -> bool:
    horizon = signal.length
    if isinstance(phi, TrueF):
        return True
    if isinstance(phi, Predicate):
        mu = float(phi.expr.evaluate(signal.row(t)))
        return mu < phi.bound if phi.op == "<" else mu > phi.bound
    if isinstance(phi, Not):
        return not _holds(signal, t, phi.child)
    if isinstance(phi, And):
        return _holds(signal, t, phi.left) and _holds(signal, t, phi.right)
    if isinstance(phi, Or):
        return _holds(signal, t, phi.left) or _holds(signal, t, phi.right)
    if isinstance(phi, Implies):
        return not _holds(signal, t, phi.left) or _holds(signal, t, phi.right)
    if isinstance(phi, Globally):
        start, end = phi.interval.window(t, horizon)
        return all(_holds(signal, k, phi.child) for k in range(start, end + 1))
    if isinstance(phi, Finally):
        start, end = phi.interval.window(t, horizon)
        return any(_holds(signal, k, phi.child) for k in range(start, end + 1))
    if isinstance(phi, Until):
        start, end = phi.interval.window(t, horizon)
        return any(
            _holds(signal, k, phi.right)
            and all(_holds(signal, j, phi.left) for j in range(t, k + 1))
            for k in range(start, end + 1)
        )
    raise TypeError(f"not a formula node: {phi!r}")


# Prefix and suffix robustness


def prefix_robustness(
    signal: Signal, t: int, phi: Formula, rho_max: float = RHO_MAX
) -> float:
    """Robustness of the truncated signal ``steps 1..t`` evaluated at its first step."""
    check_step(t, signal.length)
    return robustness(signal.window(1, t), 1, phi, rho_max)


def suffix_robustness(
    signal: Signal, t: int, phi: Formula, rho_max: float = RHO_MAX
) -> float:
    """Robustness of the remaining signal ``steps t..T`` evaluated at its first step."""
    check_step(t, signal.length)
    return robustness(signal.window(t, signal.length), 1, phi, rho_max)


def _window_values(
    signal: Signal, bounds: Iterable[Tuple[int, int]], phi: Formula, rho_max: float
) -> np.ndarray:
    # Each window clamps the formula's intervals at its own ends, so the
    # whole trace is re-evaluated per window: O(T) per step, O(T^2) overall.
    validate_formula(phi, signal.schema)
    out = [
        _trace(phi, Signal(signal.schema, signal.values[start - 1 : end]), rho_max, {})[0]
        for start, end in bounds
    ]
    return np.array(out, dtype=np.float64)


def prefix_trace(
    signal: Signal, phi: Formula, rho_max: float = RHO_MAX, end: Optional[int] = None
) -> np.ndarray:
    """Prefix robustness for ``t = 1..end`` (default ``T``)."""
    end = signal.length if end is None else end
    check_step(end, signal.length)
    return _window_values(signal, ((1, t) for t in range(1, end + 1)), phi, rho_max)


def suffix_trace(signal: Signal, phi: Formula, rho_max: float = RHO_MAX) -> np.ndarray:
    """Suffix robustness for ``t = 1..T``."""
    horizon = signal.length
    return _window_values(signal, ((t, horizon) for t in range(1, horizon + 1)), phi, rho_max)


def is_satisfied(rho: float) -> bool:
    """Zero robustness counts as a violation."""
    return rho > 0.0
