"""JSON writing with 17-significant-digit floats and stable key order."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .numerics import ValidationError


def _enc(obj, indent, level):
    pad = "" if indent is None else "\n" + " " * (indent * (level + 1))
    end = "" if indent is None else "\n" + " " * (indent * level)
    sep = "," if indent is None else ","
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            raise ValidationError("refusing to serialize a non-finite float")
        s = format(v, ".17g")
        if "." not in s and "e" not in s and "n" not in s:
            s += ".0"
        return s
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return _enc(obj.tolist(), indent, level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [json.dumps(str(k)) + ": " + _enc(obj[k], indent, level + 1) for k in sorted(obj, key=str)]
        return "{" + pad + (sep + pad).join(items) + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        # numeric lists stay on one line
        if all(isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(_enc(v, None, 0) for v in obj) + "]"
        items = [_enc(v, indent, level + 1) for v in obj]
        return "[" + pad + (sep + pad).join(items) + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(doc, indent: int | None = 1) -> str:
    return _enc(doc, indent, 0) + "\n"


def write_json(doc, path) -> None:
    Path(path).write_text(dumps(doc), encoding="utf-8")


def read_json(path, version: int | None = None):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if version is not None and isinstance(doc, dict) and doc.get("format_version") != version:
        raise ValidationError(
            f"{path}: format_version {doc.get('format_version')!r} does not match {version}")
    return doc
