"""Utility helpers for metamesh."""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Any

import numpy as np


def canonical_json(data: Any) -> str:
    """Sorted-key, whitespace-free JSON used for digests."""
    return json.dumps(to_jsonable(data), sort_keys=True, separators=(",", ":"))


def digest(data: Any) -> str:
    """SHA-256 hex digest of the canonical JSON form of `data`."""
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()


def json_number(x: float) -> float | str:
    """Encode a float for JSON output; infinities and NaN become strings."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def to_jsonable(data: Any) -> Any:
    """Convert numpy values, tuples and non-finite floats into plain JSON types."""
    if isinstance(data, dict):
        return {str(k): to_jsonable(v) for k, v in data.items()}
    if isinstance(data, (list, tuple)):
        return [to_jsonable(v) for v in data]
    if isinstance(data, np.ndarray):
        return [to_jsonable(v) for v in data.tolist()]
    if isinstance(data, (bool, np.bool_)):
        return bool(data)
    if isinstance(data, (int, np.integer)):
        return int(data)
    if isinstance(data, (float, np.floating)):
        return json_number(data)
    if isinstance(data, Path):
        return str(data)
    return data


def dumps(data: Any) -> str:
    """Stable, human-readable JSON for output files."""
    return json.dumps(to_jsonable(data), indent=2, sort_keys=True) + "\n"


def format_float(x: float) -> str:
    """Round-trip float formatting for CSV cells."""
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    """Write `payload` to `path` atomically (temp file + rename)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_path, path)
    except Exception:
        try:
            os.unlink(tmp_path)
        except OSError:
            pass
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def parse_axes(axes_text: str | list[int], dim: int) -> list[int]:
    """Parse an axes selection like "0,3,5" (or a list) into coordinate indices.

    Two or three distinct indices within [0, dim) are required.
    """
    if isinstance(axes_text, str):
        parts = [p.strip() for p in axes_text.split(",") if p.strip()]
        try:
            axes = [int(p) for p in parts]
        except ValueError:
            raise ValueError(f"Invalid axes: {axes_text!r}. Use comma-separated integers, e.g. '0,1,2'.")
    else:
        axes = [int(a) for a in axes_text]
    if len(axes) not in (2, 3):
        raise ValueError(f"Axes need 2 or 3 coordinates, got {len(axes)}")
    if len(set(axes)) != len(axes):
        raise ValueError(f"Axes have repeated coordinates: {axes}")
    for a in axes:
        if not 0 <= a < dim:
            raise ValueError(f"Axis {a} out of range for {dim}-d states")
    return axes
