"""Lark grammar for STL formulas over named channels.

Precedence, tightest first: ``!``/``G``/``F``, ``U``, ``&&``, ``||``, ``->``.
``&&`` and ``||`` associate to the left; ``U`` and ``->`` to the right.
"""

from functools import lru_cache
from typing import List, Optional

from lark import Lark, Token, Transformer, v_args
from lark.exceptions import UnexpectedEOF, UnexpectedInput, VisitError
from lark.lexer import PatternStr

from stl_sdt.errors import FormulaSyntaxError, IntervalError, StlSdtError
from stl_sdt.stl.formula import (
    Abs,
    And,
    BinOp,
    Channel,
    Const,
    Expr,
    Finally,
    Formula,
    Globally,
    Implies,
    Interval,
    Neg,
    Not,
    Or,
    Predicate,
    TrueF,
    UNTIMED,
    Until,
)

GRAMMAR = r"""
?start: implication

?implication: disjunction
    | disjunction "->" implication      -> implies

?disjunction: conjunction
    | disjunction "||" conjunction      -> or_

?conjunction: until
    | conjunction "&&" until            -> and_

?until: unary
    | unary "U" [interval] until        -> until

?unary: atom
    | "!" unary                         -> not_
    | "G" [interval] unary              -> globally
    | "F" [interval] unary              -> finally_

?atom: "T"                              -> true
    | predicate
    | "(" implication ")"

predicate: [label] expr COMP SIGNED_NUMBER
label: "@" IDENT ":"

?expr: term
    | expr "+" term                     -> add
    | expr "-" term                     -> sub

?term: factor
    | term "*" factor                   -> mul

?factor: IDENT                          -> channel
    | NUMBER                            -> const
    | "-" factor                        -> neg
    | "abs" "(" expr ")"                -> abs_
    | "(" expr ")"

interval: "[" INT "," INT "]"

COMP: "<" | ">"
IDENT: /[A-Za-z_][A-Za-z0-9_]*/

%import common.INT
%import common.NUMBER
%import common.SIGNED_NUMBER
%import common.WS
%ignore WS
"""


class _ToFormula(Transformer):
    """Turn the lark parse tree into formula nodes."""

    def implies(self, children: List[Formula]) -> Formula:
        return Implies(children[0], children[1])

    def or_(self, children: List[Formula]) -> Formula:
        return Or(children[0], children[1])

    def and_(self, children: List[Formula]) -> Formula:
        return And(children[0], children[1])

    def until(self, children: list) -> Formula:
        left, interval, right = children
        return Until(left, right, interval or UNTIMED)

    def not_(self, children: List[Formula]) -> Formula:
        return Not(children[0])

    def globally(self, children: list) -> Formula:
        interval, child = children
        return Globally(child, interval or UNTIMED)

    def finally_(self, children: list) -> Formula:
        interval, child = children
        return Finally(child, interval or UNTIMED)

    def true(self, children: list) -> Formula:
        return TrueF()

    def predicate(self, children: list) -> Formula:
        label, expr, comp, bound = children
        return Predicate(expr, str(comp), float(bound), label)

    def label(self, children: List[Token]) -> str:
        return str(children[0])

    def add(self, children: List[Expr]) -> Expr:
        return BinOp("+", children[0], children[1])

    def sub(self, children: List[Expr]) -> Expr:
        return BinOp("-", children[0], children[1])

    def mul(self, children: List[Expr]) -> Expr:
        return BinOp("*", children[0], children[1])

    def channel(self, children: List[Token]) -> Expr:
        return Channel(str(children[0]))

    def const(self, children: List[Token]) -> Expr:
        return Const(float(children[0]))

    def neg(self, children: List[Expr]) -> Expr:
        return Neg(children[0])

    def abs_(self, children: List[Expr]) -> Expr:
        return Abs(children[0])

    @v_args(meta=True)
    def interval(self, meta, children: List[Token]) -> Interval:
        lo, hi = int(children[0]), int(children[1])
        if lo > hi:
            raise IntervalError(
                f"interval [{lo},{hi}] has lower bound above upper bound "
                f"at line {meta.line}, column {meta.column}"
            )
        return Interval(lo, hi)


@lru_cache(maxsize=1)
def _parser() -> Lark:
    return Lark(
        GRAMMAR,
        parser="lalr",
        propagate_positions=True,
        maybe_placeholders=True,
    )


def _describe_terminal(parser: Lark, name: str) -> str:
    if name == "$END":
        return "end of input"
    try:
        pattern = parser.get_terminal(name).pattern
    except KeyError:
        return name
    if isinstance(pattern, PatternStr):
        return f"'{pattern.value}'"
    return name


def _end_position(text: str) -> tuple:
    lines = text.split("\n")
    return len(lines), len(lines[-1]) + 1


def parse_formula(text: str) -> Formula:
    """Parse STL formula text into an immutable formula tree.

    Args:
        text: Formula source, e.g. ``"G[1,5] (vel < 1.0)"``.

    Returns:
        The root formula node.

    Raises:
        FormulaSyntaxError: The text does not conform to the grammar.
        IntervalError: An interval has its lower bound above its upper bound.
    """
    parser = _parser()
    try:
        tree = parser.parse(text)
    except UnexpectedInput as e:
        expected = getattr(e, "expected", None) or getattr(e, "allowed", None) or ()
        names = [_describe_terminal(parser, name) for name in expected]
        token = getattr(e, "token", None)
        at_end = isinstance(e, UnexpectedEOF) or (token is not None and token.type == "$END")
        line, column = e.line, e.column
        if at_end or line is None or line < 0:
            line, column = _end_position(text)
        if token is not None and token.type != "$END":
            message = f"unexpected token '{token}'"
        elif at_end:
            message = "unexpected end of input"
        else:
            char: Optional[str] = getattr(e, "char", None)
            message = f"unexpected character '{char}'"
        raise FormulaSyntaxError(message, line, column, names) from None
    try:
        return _ToFormula().transform(tree)
    except VisitError as e:
        if isinstance(e.orig_exc, StlSdtError):
            raise e.orig_exc from None
        raise
