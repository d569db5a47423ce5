"""Deterministic JSON serialization with full-precision floats.

Floats are written with 17 significant digits so that every IEEE double
round-trips exactly and identical inputs produce byte-identical files.
The standard :mod:`json` module is used for reading; only writing is
custom (the stdlib does not expose the float format).
"""

import json
import math

import numpy as np


def _encode(obj, out):
    if isinstance(obj, dict):
        out.append("{")
        first = True
        for key, val in obj.items():
            if not isinstance(key, str):
                raise TypeError("JSON object keys must be strings")
            if not first:
                out.append(", ")
            out.append(json.dumps(key))
            out.append(": ")
            _encode(val, out)
            first = False
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for idx, val in enumerate(obj):
            if idx:
                out.append(", ")
            _encode(val, out)
        out.append("]")
    elif isinstance(obj, bool) or isinstance(obj, np.bool_):
        out.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ValueError("non-finite float in document")
        out.append(format(x, ".17g"))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif obj is None:
        out.append("null")
    elif isinstance(obj, np.ndarray):
        _encode(obj.tolist(), out)
    else:
        raise TypeError(f"cannot serialize {type(obj)!r}")


def dumps(obj):
    """Serialize ``obj`` to a JSON string with 17-significant-digit floats."""
    out = []
    _encode(obj, out)
    return "".join(out)


def dump(obj, path):
    """Write ``obj`` as JSON text to ``path`` (trailing newline included)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(obj))
        fh.write("\n")


def load(path):
    """Read a JSON document from ``path``."""
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
