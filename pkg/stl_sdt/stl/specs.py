"""Built-in task specifications and predicate rescaling."""

from dataclasses import replace
from typing import TYPE_CHECKING, Dict, Iterable, Optional, Union

from stl_sdt.errors import UnknownPredicateLabelError, UsageError
from stl_sdt.stl.formula import (
    And,
    BinOp,
    Const,
    Finally,
    Formula,
    Globally,
    Implies,
    Not,
    Or,
    Predicate,
    Until,
)
from stl_sdt.stl.parser import parse_formula

if TYPE_CHECKING:
    from stl_sdt.envs import EnvConfig

SPEC_KINDS = ("run", "circle", "reach")


def _num(value: float) -> str:
    return repr(float(value))


def _goal_text(label: str, center: tuple, half_width: float) -> str:
    gx, gy = center
    d = half_width
    return (
        f"(@{label}: -x < {_num(d - gx)}) && (@{label}: x < {_num(gx + d)}) && "
        f"(@{label}: -y < {_num(d - gy)}) && (@{label}: y < {_num(gy + d)})"
    )


def builtin_spec_text(kind: str, config: Optional["EnvConfig"] = None) -> str:
    """Formula text of the built-in specification for an environment kind.

    Args:
        kind: One of ``run``, ``circle`` or ``reach``.
        config: Environment configuration providing limits and goals; defaults to
            the environment's default configuration.
    """
    if kind not in SPEC_KINDS:
        raise UsageError(f"unknown spec kind '{kind}'; choose from {', '.join(SPEC_KINDS)}")
    if config is None:
        # envs imports this module for dataset headers.
        from stl_sdt.envs import default_env_config

        config = default_env_config(kind)
    if kind == "run":
        vel = f"(@vel: speed < {_num(config.v_lim)})"
        return (
            f"G((@bndry: abs(y) < {_num(config.y_lim)}) && "
            f"(!{vel} -> F[1,5] {vel}))"
        )
    bndry = f"(@bndry: abs(x) < {_num(config.x_lim)})"
    circle = f"G(!{bndry} -> F[1,5] {bndry})"
    if kind == "circle":
        return circle
    goal_a = _goal_text("goalA", config.goal_a, config.goal_half_width)
    goal_b = _goal_text("goalB", config.goal_b, config.goal_half_width)
    return f"{circle} && F(!({goal_b}) U ({goal_a}))"


def builtin_specs(
    configs: Optional[Dict[str, "EnvConfig"]] = None,
) -> Dict[str, Formula]:
    """Return the run, circle and reach specifications keyed by name."""
    configs = configs or {}
    return {kind: parse_formula(builtin_spec_text(kind, configs.get(kind))) for kind in SPEC_KINDS}


def scale_predicate(
    phi: Formula, labels: Union[str, Iterable[str]], alpha: float
) -> Formula:
    """Multiply both sides of every predicate carrying one of ``labels`` by ``alpha``.

    ``mu < c`` becomes ``alpha * mu < alpha * c``, so the leaf robustness is
    ``alpha`` times the original and its sign is unchanged.

    Raises:
        UsageError: ``alpha`` is not positive.
        UnknownPredicateLabelError: A label matches no predicate leaf.
    """
    if not alpha > 0:
        raise UsageError(f"scale factor must be positive, got {alpha}")
    selected = {labels} if isinstance(labels, str) else set(labels)
    missing = sorted(selected - set(phi.labels()))
    if missing:
        raise UnknownPredicateLabelError(
            f"no predicate labeled {', '.join(missing)}; "
            f"formula labels: {', '.join(phi.labels()) or 'none'}"
        )
    return _scale(phi, selected, float(alpha))


def _scale(phi: Formula, selected: set, alpha: float) -> Formula:
    if isinstance(phi, Predicate):
        if phi.label not in selected:
            return phi
        return replace(phi, expr=BinOp("*", Const(alpha), phi.expr), bound=alpha * phi.bound)
    if isinstance(phi, (Not, Globally, Finally)):
        return replace(phi, child=_scale(phi.child, selected, alpha))
    if isinstance(phi, (And, Or, Implies, Until)):
        return replace(
            phi,
            left=_scale(phi.left, selected, alpha),
            right=_scale(phi.right, selected, alpha),
        )
    return phi
