"""Signal temporal logic: formulas, parsing and robustness semantics."""

from stl_sdt.stl.formula import (
    Formula,
    Interval,
    Predicate,
    format_formula,
    validate_formula,
)
from stl_sdt.stl.parser import parse_formula
from stl_sdt.stl.robustness import (
    RHO_MAX,
    RobustnessTrace,
    Signal,
    boolean_satisfaction,
    is_satisfied,
    prefix_robustness,
    prefix_trace,
    robustness,
    robustness_at_all,
    robustness_bruteforce,
    robustness_trace,
    suffix_robustness,
    suffix_trace,
)
from stl_sdt.stl.specs import builtin_spec_text, builtin_specs, scale_predicate

__all__ = [
    "RHO_MAX",
    "Formula",
    "Interval",
    "Predicate",
    "RobustnessTrace",
    "Signal",
    "boolean_satisfaction",
    "builtin_spec_text",
    "builtin_specs",
    "format_formula",
    "is_satisfied",
    "parse_formula",
    "prefix_robustness",
    "prefix_trace",
    "robustness",
    "robustness_at_all",
    "robustness_bruteforce",
    "robustness_trace",
    "scale_predicate",
    "suffix_robustness",
    "suffix_trace",
    "validate_formula",
]
