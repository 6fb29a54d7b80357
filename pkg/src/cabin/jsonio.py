"""Deterministic JSON serialization for run reports.

Python's ``json.dumps`` is already deterministic for a fixed object
graph, but report files additionally need two guarantees: floats must
serialize via ``repr`` (shortest round-trip, platform independent) and
metric values must appear with fixed six-decimal formatting so reports
diff cleanly. Wrapping a float in :class:`Fixed6` opts it into the
latter.
"""

from __future__ import annotations

import json
import math


class Fixed6(float):
    """Float rendered with exactly six decimals in report JSON."""


def dumps(obj, indent: int = 2) -> str:
    out: list[str] = []
    _emit(obj, out, indent, 0)
    return "".join(out)


def _emit(obj, out: list[str], indent: int, level: int) -> None:
    pad = " " * (indent * level)
    inner = " " * (indent * (level + 1))
    if isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        for i, (key, value) in enumerate(obj.items()):
            if not isinstance(key, str):
                raise TypeError(f"report keys must be strings, got {type(key).__name__}")
            out.append(inner + json.dumps(key) + ": ")
            _emit(value, out, indent, level + 1)
            out.append(",\n" if i < len(obj) - 1 else "\n")
        out.append(pad + "}")
    elif isinstance(obj, (list, tuple)):
        if not obj:
            out.append("[]")
            return
        out.append("[\n")
        for i, value in enumerate(obj):
            out.append(inner)
            _emit(value, out, indent, level + 1)
            out.append(",\n" if i < len(obj) - 1 else "\n")
        out.append(pad + "]")
    elif isinstance(obj, bool) or obj is None:
        out.append(json.dumps(obj))
    elif isinstance(obj, Fixed6):
        if not math.isfinite(obj):
            raise ValueError("non-finite value in report")
        out.append(f"{float(obj):.6f}")
    elif isinstance(obj, float):
        if not math.isfinite(obj):
            raise ValueError("non-finite value in report")
        out.append(repr(obj))
    elif isinstance(obj, int):
        out.append(str(obj))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__} into a report")
