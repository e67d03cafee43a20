"""Tests for the STL formula grammar and printer."""

import unittest

from stl_sdt.errors import FormulaSyntaxError, IntervalError
from stl_sdt.stl.formula import (
    Abs,
    And,
    BinOp,
    Channel,
    Const,
    Finally,
    Globally,
    Implies,
    Interval,
    Neg,
    Not,
    Or,
    Predicate,
    TrueF,
    Until,
    format_formula,
)
from stl_sdt.stl.parser import parse_formula
from stl_sdt.stl.specs import builtin_spec_text


def _pred(name: str, op: str, bound: float) -> Predicate:
    return Predicate(Channel(name), op, bound)


class TestParseFormula(unittest.TestCase):
    """Parsing well-formed formulas."""

    def test_bounded_globally(self) -> None:
        """Test that a bounded G parses into its interval and predicate."""
        phi = parse_formula("G[1,5] (vel < 1.0)")
        self.assertEqual(phi, Globally(_pred("vel", "<", 1.0), Interval(1, 5)))

    def test_untimed_operators_default_to_whole_trace(self) -> None:
        """Test that G and F without interval are unbounded from the current step."""
        phi = parse_formula("F x > 2")
        self.assertEqual(phi, Finally(_pred("x", ">", 2.0)))
        self.assertFalse(phi.interval.bounded)

    def test_precedence(self) -> None:
        """Test that && binds tighter than ||, which binds tighter than ->."""
        phi = parse_formula("a < 1 && b < 2 || c < 3 -> d < 4")
        expected = Implies(
            Or(And(_pred("a", "<", 1.0), _pred("b", "<", 2.0)), _pred("c", "<", 3.0)),
            _pred("d", "<", 4.0),
        )
        self.assertEqual(phi, expected)

    def test_implication_is_right_associative(self) -> None:
        """Test a -> b -> c groups as a -> (b -> c)."""
        phi = parse_formula("a < 1 -> b < 1 -> c < 1")
        expected = Implies(
            _pred("a", "<", 1.0), Implies(_pred("b", "<", 1.0), _pred("c", "<", 1.0))
        )
        self.assertEqual(phi, expected)

    def test_conjunction_is_left_associative(self) -> None:
        """Test a && b && c groups as (a && b) && c."""
        phi = parse_formula("a < 1 && b < 1 && c < 1")
        expected = And(And(_pred("a", "<", 1.0), _pred("b", "<", 1.0)), _pred("c", "<", 1.0))
        self.assertEqual(phi, expected)

    def test_until_with_interval(self) -> None:
        """Test that U takes an optional interval between its operands."""
        phi = parse_formula("!(x > 0) U[0,3] (y > 2)")
        expected = Until(Not(_pred("x", ">", 0.0)), _pred("y", ">", 2.0), Interval(0, 3))
        self.assertEqual(phi, expected)

    def test_expression_grammar(self) -> None:
        """Test arithmetic, unary minus, abs and labels inside predicates."""
        phi = parse_formula("@goal: -x + 2 * abs(y - 1) < -0.5")
        expected = Predicate(
            BinOp(
                "+",
                Neg(Channel("x")),
                BinOp("*", Const(2.0), Abs(BinOp("-", Channel("y"), Const(1.0)))),
            ),
            "<",
            -0.5,
            "goal",
        )
        self.assertEqual(phi, expected)
        self.assertEqual(phi.labels(), ("goal",))
        self.assertEqual(phi.channels(), ("x", "y"))

    def test_true_and_whitespace(self) -> None:
        """Test the T literal and that whitespace is insignificant."""
        self.assertEqual(parse_formula("  T\n"), TrueF())
        self.assertEqual(parse_formula("G(x<1)"), parse_formula("G ( x < 1 )"))


class TestParseErrors(unittest.TestCase):
    """Malformed formulas raise with a position."""

    def test_unexpected_end(self) -> None:
        """Test that a truncated formula reports the end of the input."""
        with self.assertRaises(FormulaSyntaxError) as ctx:
            parse_formula("G(x <")
        self.assertEqual(ctx.exception.line, 1)
        self.assertEqual(ctx.exception.column, 6)
        self.assertIn("end of input", str(ctx.exception))

    def test_unexpected_character(self) -> None:
        """Test that an unknown character is located by column."""
        with self.assertRaises(FormulaSyntaxError) as ctx:
            parse_formula("x ? 1")
        self.assertEqual((ctx.exception.line, ctx.exception.column), (1, 3))

    def test_unexpected_token_lists_expected(self) -> None:
        """Test that a misplaced token names what the parser expected."""
        with self.assertRaises(FormulaSyntaxError) as ctx:
            parse_formula("x < 1 && && y < 2")
        self.assertIn("unexpected token", str(ctx.exception))
        self.assertTrue(ctx.exception.expected)

    def test_reversed_interval(self) -> None:
        """Test that [5,1] is rejected as an interval error."""
        with self.assertRaises(IntervalError):
            parse_formula("G[5,1] x < 1")

    def test_missing_bound(self) -> None:
        """Test that a predicate needs a numeric bound."""
        with self.assertRaises(FormulaSyntaxError):
            parse_formula("x < y")


class TestFormatFormula(unittest.TestCase):
    """Printing yields text that parses back into the same tree."""

    CASES = [
        "G[1,5] (vel < 1.0)",
        "a < 1 && (b < 2 || c < 3)",
        "(a < 1 -> b < 1) -> c < 1",
        "!(x > 0) U[0,3] (y > 2) U z < 1",
        "(x > 0 U y > 0) U z > 0",
        "F(G[0,2] (x - -y * 3 > 1e-3))",
        "@bndry: abs(x) < 1.5 && T",
        "!!x < 1",
        "(a + b) * c < 2",
        "a - (b - c) > 0",
    ]

    def test_round_trip(self) -> None:
        """Test parse(print(parse(text))) equals parse(text)."""
        for text in self.CASES:
            with self.subTest(text=text):
                phi = parse_formula(text)
                self.assertEqual(parse_formula(format_formula(phi)), phi)

    def test_builtin_specs_round_trip(self) -> None:
        """Test that the built-in specifications survive printing."""
        for kind in ("run", "circle", "reach"):
            with self.subTest(kind=kind):
                phi = parse_formula(builtin_spec_text(kind))
                self.assertEqual(parse_formula(str(phi)), phi)

    def test_repr_shows_formula_text(self) -> None:
        """Test that node reprs carry the canonical text."""
        phi = parse_formula("G x < 1")
        self.assertEqual(repr(phi), "Globally('G (x < 1.0)')")


if __name__ == "__main__":
    unittest.main()
