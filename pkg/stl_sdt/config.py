"""Helpers for loading dataclass configurations from JSON."""

import dataclasses
import json
from pathlib import Path
from typing import Any, Dict, Type, TypeVar, Union

from stl_sdt.errors import UsageError

T = TypeVar("T")


def load_json(source: Union[str, Path]) -> Any:
    """Load JSON from a file path or from inline JSON text.

    Args:
        source: Path to a JSON file, or a string holding JSON text.

    Returns:
        The decoded JSON value.

    Raises:
        UsageError: If the source is neither a readable file nor valid JSON.
    """
    text = str(source)
    path = Path(text)
    try:
        if not text.lstrip().startswith(("{", "[")) and path.is_file():
            text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise UsageError(f"cannot read configuration {source}: {e}") from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise UsageError(f"invalid JSON in {source}: {e.msg} at line {e.lineno}") from e


def dataclass_from_dict(cls: Type[T], data: Dict[str, Any]) -> T:
    """Build a dataclass instance, rejecting keys the dataclass does not declare."""
    if not isinstance(data, dict):
        raise UsageError(f"{cls.__name__} must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}  # type: ignore[arg-type]
    unknown = sorted(set(data) - known)
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as e:
        raise UsageError(f"invalid {cls.__name__}: {e}") from e
