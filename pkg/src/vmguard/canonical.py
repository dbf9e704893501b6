"""Deterministic text encoding used wherever bytes get hashed or signed."""

from __future__ import annotations

import json
from typing import Any


def canonical_json(obj: Any) -> bytes:
    """Encode ``obj`` as compact JSON with sorted keys.

    Only dicts, lists, strings, ints, bools and None are accepted; floats are
    rejected because their decimal form is not stable across producers.
    """
    _reject_floats(obj)
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False
    ).encode("ascii")


def _reject_floats(obj: Any) -> None:
    if isinstance(obj, float):
        raise TypeError("floats are not canonical; encode them as strings")
    if isinstance(obj, dict):
        for key, value in obj.items():
            if not isinstance(key, str):
                raise TypeError(f"map keys must be strings, got {type(key).__name__}")
            _reject_floats(value)
    elif isinstance(obj, (list, tuple)):
        for item in obj:
            _reject_floats(item)
