"""Deterministic JSON emission.

Stdlib ``json`` formats floats with ``repr`` (shortest round-trip), which
is stable but not a fixed precision. Output artifacts promise 17
significant digits, enough to round-trip any float64 exactly, so this
module hand-rolls the emitter: insertion-order keys, fixed float format,
no dependence on interpreter repr details. Parsing just delegates to
stdlib ``json``.
"""

from __future__ import annotations

import json
import math

import numpy as np

__all__ = ["dumps_stable", "loads"]


def _format_float(value: float) -> str:
    if math.isnan(value) or math.isinf(value):
        raise ValueError("non-finite floats are not representable in output documents")
    text = format(value, ".17g")
    if "." not in text and "e" not in text and "E" not in text:
        text += ".0"
    return text


def _emit(value, pieces: list[str], indent: str, level: int) -> None:
    pad = indent * (level + 1)
    closing_pad = indent * level
    if value is None:
        pieces.append("null")
    elif isinstance(value, (bool, np.bool_)):
        pieces.append("true" if value else "false")
    elif isinstance(value, (int, np.integer)):
        pieces.append(str(int(value)))
    elif isinstance(value, (float, np.floating)):
        pieces.append(_format_float(float(value)))
    elif isinstance(value, str):
        pieces.append(json.dumps(value, ensure_ascii=False))
    elif isinstance(value, dict):
        if not value:
            pieces.append("{}")
            return
        pieces.append("{\n")
        for i, (key, item) in enumerate(value.items()):
            if not isinstance(key, str):
                raise TypeError(f"object keys must be strings, got {type(key).__name__}")
            pieces.append(pad)
            pieces.append(json.dumps(key, ensure_ascii=False))
            pieces.append(": ")
            _emit(item, pieces, indent, level + 1)
            pieces.append(",\n" if i < len(value) - 1 else "\n")
        pieces.append(closing_pad + "}")
    elif isinstance(value, (list, tuple)):
        if len(value) == 0:
            pieces.append("[]")
            return
        pieces.append("[\n")
        for i, item in enumerate(value):
            pieces.append(pad)
            _emit(item, pieces, indent, level + 1)
            pieces.append(",\n" if i < len(value) - 1 else "\n")
        pieces.append(closing_pad + "]")
    else:
        raise TypeError(f"cannot serialize {type(value).__name__}")


def dumps_stable(document, indent: int = 2) -> str:
    """Serialize to JSON with insertion-order keys and .17g floats."""
    pieces: list[str] = []
    _emit(document, pieces, " " * indent, 0)
    return "".join(pieces)


def loads(text: str):
    return json.loads(text)
