"""Mesh bundle persistence and CSV/JSON exports.

A bundle is a directory holding ``header.json``, ``states.f64`` (little-endian
float64, N x dim, row 0 zeros) and ``table.u32`` (little-endian uint32,
N x C x D, row 0 zeros). Every file is written atomically.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .errors import BundleError
from .geometry import Mesh
from .meshing import MeshBuild, TransitionTable
from .utils import atomic_write_bytes, atomic_write_text, dumps, format_float

BUNDLE_FORMAT = "metamesh-bundle"
BUNDLE_VERSION = 1
HEADER_FILE = "header.json"
STATES_FILE = "states.f64"
TABLE_FILE = "table.u32"
DIGEST_PREFIX = "# config_digest="


@dataclass(frozen=True, eq=False)
class Bundle:
    mesh: Mesh
    table: TransitionTable
    header: dict[str, Any]

    @property
    def disturbance_digest(self) -> str:
        return str(self.header.get("disturbance_digest", ""))


def save_bundle(build: MeshBuild, directory: Path, extra: dict[str, Any] | None = None) -> dict[str, Any]:
    """Write the mesh and table; returns the header that was written."""
    mesh, table = build.mesh, build.table
    states_bytes = np.ascontiguousarray(mesh.states, dtype="<f8").tobytes()
    table_bytes = np.ascontiguousarray(table.entries, dtype="<u4").tobytes()
    header: dict[str, Any] = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "n_states": mesh.n_states,
        "dim": mesh.dim,
        "n_controllers": table.n_controllers,
        "n_disturbances": table.n_disturbances,
        "d_tr": mesh.d_tr,
        "weights": None if mesh.weights is None else mesh.weights.tolist(),
        "truncated": build.truncated,
        "provenance": mesh.provenance,
        "disturbance_digest": mesh.provenance.get("disturbance_digest", ""),
        "states_sha256": hashlib.sha256(states_bytes).hexdigest(),
        "table_sha256": hashlib.sha256(table_bytes).hexdigest(),
    }
    header.update(extra or {})
    directory.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(directory / STATES_FILE, states_bytes)
    atomic_write_bytes(directory / TABLE_FILE, table_bytes)
    atomic_write_text(directory / HEADER_FILE, dumps(header))
    return header


def load_bundle(directory: Path) -> Bundle:
    """Read a bundle written by `save_bundle`; any inconsistency raises BundleError."""
    header_path = directory / HEADER_FILE
    if not header_path.exists():
        raise BundleError(f"No mesh bundle at {directory} (missing {HEADER_FILE}); run 'metamesh build' first")
    try:
        header = json.loads(header_path.read_text())
    except (json.JSONDecodeError, OSError) as e:
        raise BundleError(f"Unreadable bundle header {header_path}: {e}")
    if header.get("format") != BUNDLE_FORMAT or header.get("version") != BUNDLE_VERSION:
        raise BundleError(f"{header_path} is not a version {BUNDLE_VERSION} metamesh bundle")
    try:
        n, dim = int(header["n_states"]), int(header["dim"])
        c, d = int(header["n_controllers"]), int(header["n_disturbances"])
        states_bytes = (directory / STATES_FILE).read_bytes()
        table_bytes = (directory / TABLE_FILE).read_bytes()
    except (KeyError, TypeError, ValueError, OSError) as e:
        raise BundleError(f"Incomplete bundle at {directory}: {e}")
    if hashlib.sha256(states_bytes).hexdigest() != header.get("states_sha256"):
        raise BundleError(f"{STATES_FILE} does not match its header checksum")
    if hashlib.sha256(table_bytes).hexdigest() != header.get("table_sha256"):
        raise BundleError(f"{TABLE_FILE} does not match its header checksum")
    try:
        states = np.frombuffer(states_bytes, dtype="<f8").reshape(n, dim)
        entries = np.frombuffer(table_bytes, dtype="<u4").reshape(n, c, d)
        mesh = Mesh(states, header["d_tr"], weights=header.get("weights"), provenance=header.get("provenance", {}))
        table = TransitionTable(entries)
    except ValueError as e:
        raise BundleError(f"Corrupt bundle at {directory}: {e}")
    return Bundle(mesh, table, header)


# ---- exports ----

def _cell(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return format_float(value)
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    return str(value)


def write_csv(
    path: Path,
    columns: Sequence[str],
    rows: Iterable[Sequence[Any]],
    config_digest: str | None = None,
) -> None:
    """Header row then data rows; a `# config_digest=<hex>` line leads when a digest is given."""
    buf = io.StringIO()
    if config_digest is not None:
        buf.write(f"{DIGEST_PREFIX}{config_digest}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def write_json(path: Path, data: Any) -> None:
    atomic_write_text(path, dumps(data))


def export_states_csv(mesh: Mesh, path: Path, config_digest: str | None = None) -> None:
    columns = ["index"] + [f"x{j}" for j in range(mesh.dim)]
    write_csv(path, columns, ([i, *mesh.states[i].tolist()] for i in range(1, mesh.n_states)), config_digest)


def export_table_csv(table: TransitionTable, path: Path, config_digest: str | None = None) -> None:
    rows = (
        (i, c, g, int(table.entries[i, c, g]))
        for i in range(1, table.n_states)
        for c in range(table.n_controllers)
        for g in range(table.n_disturbances)
    )
    write_csv(path, ["state", "controller", "disturbance", "successor"], rows, config_digest)


def read_states_csv(path: Path) -> np.ndarray:
    """Read a state sequence: one row per state, an optional header line, and an
    optional leading integer ``index`` column when the header names it.
    Lines starting with ``#`` are skipped."""
    try:
        text = path.read_text()
    except OSError as e:
        raise BundleError(f"Cannot read states file {path}: {e}")
    lines = [line for line in text.splitlines() if not line.lstrip().startswith("#")]
    rows = [r for r in csv.reader(lines) if r and any(cell.strip() for cell in r)]
    if not rows:
        raise BundleError(f"States file {path} is empty")
    skip_index = False
    try:
        [float(v) for v in rows[0]]
    except ValueError:
        skip_index = rows[0][0].strip() == "index"
        rows = rows[1:]
    try:
        data = np.array([[float(v) for v in (r[1:] if skip_index else r)] for r in rows], dtype=np.float64)
    except ValueError as e:
        raise BundleError(f"States file {path} has a non-numeric entry: {e}")
    if data.ndim != 2 or data.shape[0] == 0:
        raise BundleError(f"States file {path} has ragged or missing rows")
    if not np.all(np.isfinite(data)):
        raise BundleError(f"States file {path} has non-finite entries")
    return data
