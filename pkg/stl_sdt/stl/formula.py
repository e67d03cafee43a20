"""Immutable STL abstract syntax tree over named signal channels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from stl_sdt.errors import IntervalError, UnknownChannelError

Number = Union[float, np.ndarray]


# Predicate expressions


class Expr:
    """Base class of real-valued expressions over channels."""

    def evaluate(self, channels: Mapping[str, Number]) -> Number:
        """Evaluate over scalars or equally shaped arrays keyed by channel name."""
        raise NotImplementedError

    def channels(self) -> Iterator[str]:
        """Yield every channel name referenced by the expression."""
        return iter(())


@dataclass(frozen=True)
class Channel(Expr):
    name: str

    def evaluate(self, channels: Mapping[str, Number]) -> Number:
        return channels[self.name]

    def channels(self) -> Iterator[str]:
        yield self.name


@dataclass(frozen=True)
class Const(Expr):
    value: float

    def evaluate(self, channels: Mapping[str, Number]) -> Number:
        return self.value


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr

    def evaluate(self, channels: Mapping[str, Number]) -> Number:
        return -self.arg.evaluate(channels)

    def channels(self) -> Iterator[str]:
        yield from self.arg.channels()


@dataclass(frozen=True)
class Abs(Expr):
    arg: Expr

    def evaluate(self, channels: Mapping[str, Number]) -> Number:
        return abs(self.arg.evaluate(channels))

    def channels(self) -> Iterator[str]:
        yield from self.arg.channels()


@dataclass(frozen=True)
class BinOp(Expr):
    op: str  # one of "+", "-", "*"
    left: Expr
    right: Expr

    def evaluate(self, channels: Mapping[str, Number]) -> Number:
        a = self.left.evaluate(channels)
        b = self.right.evaluate(channels)
        if self.op == "+":
            return a + b
        if self.op == "-":
            return a - b
        return a * b

    def channels(self) -> Iterator[str]:
        yield from self.left.channels()
        yield from self.right.channels()


# Formulas


@dataclass(frozen=True)
class Interval:
    """Closed step interval [lo, hi]; ``hi=None`` means unbounded."""

    lo: int = 0
    hi: Optional[int] = None

    def __post_init__(self) -> None:
        if self.lo < 0 or (self.hi is not None and self.hi < 0):
            raise IntervalError(f"interval bounds must be nonnegative, got {self}")
        if self.hi is not None and self.lo > self.hi:
            raise IntervalError(
                f"interval lower bound {self.lo} exceeds upper bound {self.hi}"
            )

    @property
    def bounded(self) -> bool:
        return self.hi is not None

    def window(self, t: int, horizon: int) -> Tuple[int, int]:
        """Return the 1-indexed window [t+lo, t+hi] clamped to [1, horizon].

        The returned window is empty when its start exceeds its end.
        """
        start = t + self.lo
        end = horizon if self.hi is None else min(t + self.hi, horizon)
        return start, end


UNTIMED = Interval()


class Formula:
    """Base class of STL formula nodes."""

    def children(self) -> Tuple[Formula, ...]:
        return ()

    def walk(self) -> Iterator[Formula]:
        """Yield every node, parents before children."""
        yield self
        for child in self.children():
            yield from child.walk()

    def channels(self) -> Tuple[str, ...]:
        """Return the sorted channel names referenced by predicate leaves."""
        names = set()
        for node in self.walk():
            if isinstance(node, Predicate):
                names.update(node.expr.channels())
        return tuple(sorted(names))

    def labels(self) -> Tuple[str, ...]:
        """Return the sorted labels of labeled predicate leaves."""
        return tuple(
            sorted(
                {
                    node.label
                    for node in self.walk()
                    if isinstance(node, Predicate) and node.label is not None
                }
            )
        )

    def __str__(self) -> str:
        return format_formula(self)


@dataclass(frozen=True, repr=False)
class TrueF(Formula):
    pass


@dataclass(frozen=True, repr=False)
class Predicate(Formula):
    """``expr < bound`` (robustness bound - expr) or ``expr > bound`` (expr - bound)."""

    expr: Expr
    op: str
    bound: float
    label: Optional[str] = None


@dataclass(frozen=True, repr=False)
class Not(Formula):
    child: Formula

    def children(self) -> Tuple[Formula, ...]:
        return (self.child,)


@dataclass(frozen=True, repr=False)
class And(Formula):
    left: Formula
    right: Formula

    def children(self) -> Tuple[Formula, ...]:
        return (self.left, self.right)


@dataclass(frozen=True, repr=False)
class Or(Formula):
    left: Formula
    right: Formula

    def children(self) -> Tuple[Formula, ...]:
        return (self.left, self.right)


@dataclass(frozen=True, repr=False)
class Implies(Formula):
    left: Formula
    right: Formula

    def children(self) -> Tuple[Formula, ...]:
        return (self.left, self.right)


@dataclass(frozen=True, repr=False)
class Globally(Formula):
    child: Formula
    interval: Interval = UNTIMED

    def children(self) -> Tuple[Formula, ...]:
        return (self.child,)


@dataclass(frozen=True, repr=False)
class Finally(Formula):
    child: Formula
    interval: Interval = UNTIMED

    def children(self) -> Tuple[Formula, ...]:
        return (self.child,)


@dataclass(frozen=True, repr=False)
class Until(Formula):
    left: Formula
    right: Formula
    interval: Interval = UNTIMED

    def children(self) -> Tuple[Formula, ...]:
        return (self.left, self.right)


def validate_formula(phi: Formula, schema: Sequence[str]) -> None:
    """Check that every channel referenced by ``phi`` exists in ``schema``.

    Raises:
        UnknownChannelError: Naming the first missing channel.
    """
    known = set(schema)
    missing = [name for name in phi.channels() if name not in known]
    if missing:
        raise UnknownChannelError(
            f"unknown channel(s) {', '.join(missing)}; schema has {', '.join(schema)}"
        )


# Printing

_EXPR_SUM, _EXPR_PRODUCT, _EXPR_UNARY, _EXPR_ATOM = 1, 2, 3, 4
_IMPLIES, _OR, _AND, _UNTIL, _UNARY, _ATOM = 1, 2, 3, 4, 5, 6


def _number(value: float) -> str:
    return repr(float(value))


def _expr_level(expr: Expr) -> int:
    if isinstance(expr, BinOp):
        return _EXPR_PRODUCT if expr.op == "*" else _EXPR_SUM
    if isinstance(expr, Neg):
        return _EXPR_UNARY
    return _EXPR_ATOM


def _format_expr(expr: Expr, min_level: int = _EXPR_SUM) -> str:
    if isinstance(expr, Channel):
        text = expr.name
    elif isinstance(expr, Const):
        text = _number(expr.value)
    elif isinstance(expr, Abs):
        text = f"abs({_format_expr(expr.arg)})"
    elif isinstance(expr, Neg):
        text = "-" + _format_expr(expr.arg, _EXPR_UNARY)
    elif isinstance(expr, BinOp):
        level = _expr_level(expr)
        text = (
            f"{_format_expr(expr.left, level)} {expr.op} "
            f"{_format_expr(expr.right, level + 1)}"
        )
    else:
        raise TypeError(f"not an expression node: {expr!r}")
    if _expr_level(expr) < min_level:
        return f"({text})"
    return text


def _format_interval(interval: Interval) -> str:
    if interval.hi is None and interval.lo == 0:
        return ""
    if interval.hi is None:
        raise IntervalError("half-bounded intervals cannot be printed")
    return f"[{interval.lo},{interval.hi}]"


def _level(phi: Formula) -> int:
    if isinstance(phi, Implies):
        return _IMPLIES
    if isinstance(phi, Or):
        return _OR
    if isinstance(phi, And):
        return _AND
    if isinstance(phi, Until):
        return _UNTIL
    if isinstance(phi, (Not, Globally, Finally)):
        return _UNARY
    return _ATOM


def _operand(phi: Formula, min_level: int) -> str:
    text = format_formula(phi)
    if _level(phi) < min_level or (min_level >= _UNARY and isinstance(phi, Predicate)):
        return f"({text})"
    return text


def format_formula(phi: Formula) -> str:
    """Return the canonical text of ``phi``; parsing it yields an equal tree."""
    if isinstance(phi, TrueF):
        return "T"
    if isinstance(phi, Predicate):
        label = f"@{phi.label}: " if phi.label is not None else ""
        return f"{label}{_format_expr(phi.expr)} {phi.op} {_number(phi.bound)}"
    if isinstance(phi, Not):
        return "!" + _operand(phi.child, _UNARY)
    if isinstance(phi, Globally):
        return f"G{_format_interval(phi.interval)} {_operand(phi.child, _UNARY)}"
    if isinstance(phi, Finally):
        return f"F{_format_interval(phi.interval)} {_operand(phi.child, _UNARY)}"
    if isinstance(phi, Until):
        return (
            f"{_operand(phi.left, _UNARY)} U{_format_interval(phi.interval)} "
            f"{_operand(phi.right, _UNTIL)}"
        )
    if isinstance(phi, And):
        return f"{_operand(phi.left, _AND)} && {_operand(phi.right, _UNTIL)}"
    if isinstance(phi, Or):
        return f"{_operand(phi.left, _OR)} || {_operand(phi.right, _AND)}"
    if isinstance(phi, Implies):
        return f"{_operand(phi.left, _OR)} -> {_operand(phi.right, _IMPLIES)}"
    raise TypeError(f"not a formula node: {phi!r}")


def _repr(self: Formula) -> str:
    return f"{type(self).__name__}({format_formula(self)!r})"


for _cls in (TrueF, Predicate, Not, And, Or, Implies, Globally, Finally, Until):
    _cls.__repr__ = _repr  # type: ignore[method-assign]
