"""Poincaré-section geometry: distance metric, lumping index, dimension fit, PCA."""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

FAILURE_INDEX = 0


@dataclass(frozen=True, eq=False)
class PoincareState:
    """A post-impact state on the Poincaré section."""

    coords: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.coords, dtype=np.float64).reshape(-1)
        if arr.size == 0:
            raise ValueError("PoincareState needs at least one coordinate")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"PoincareState coordinates must be finite, got {arr.tolist()}")
        arr.setflags(write=False)
        object.__setattr__(self, "coords", arr)

    @property
    def dim(self) -> int:
        return int(self.coords.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PoincareState):
            return NotImplemented
        return self.dim == other.dim and bool(np.array_equal(self.coords, other.coords))

    def __hash__(self) -> int:
        return hash(self.coords.tobytes())


@dataclass(frozen=True, eq=False)
class Mesh:
    """Mesh states (row 0 is the absorbing failure sentinel) and the lumping threshold."""

    states: np.ndarray
    d_tr: float
    weights: np.ndarray | None = None
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        states = np.array(self.states, dtype=np.float64)
        if states.ndim != 2 or states.shape[0] < 2:
            raise ValueError("A mesh needs the failure state plus at least one state")
        if not np.all(np.isfinite(states)):
            raise ValueError("Mesh states must be finite")
        if not self.d_tr > 0:
            raise ValueError(f"d_tr must be positive, got {self.d_tr}")
        states.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "d_tr", float(self.d_tr))
        if self.weights is not None:
            object.__setattr__(self, "weights", _check_weights(self.weights, states.shape[1]))

    @property
    def n_states(self) -> int:
        return int(self.states.shape[0])

    @property
    def dim(self) -> int:
        return int(self.states.shape[1])

    def state(self, index: int) -> PoincareState:
        if index == FAILURE_INDEX:
            raise ValueError("State 0 is the failure sentinel and has no coordinates")
        return PoincareState(self.states[index])


def _check_weights(weights: Any, dim: int) -> np.ndarray:
    w = np.array(weights, dtype=np.float64).reshape(-1)
    if w.size != dim:
        raise ValueError(f"Metric weights have length {w.size}, states have dim {dim}")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("Metric weights must be positive and finite")
    w.setflags(write=False)
    return w


def _as_coords(s: PoincareState | Sequence[float] | np.ndarray) -> np.ndarray:
    if isinstance(s, PoincareState):
        return s.coords
    return PoincareState(s).coords


def row_distances(rows: np.ndarray, s: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Euclidean distance from `s` to every row; the one formula every lumping path uses."""
    diff = rows - s
    if weights is not None:
        diff = diff * weights
    return np.sqrt(np.sum(diff * diff, axis=1))


def distance_to_mesh(s: PoincareState | Sequence[float] | np.ndarray, mesh: Mesh) -> tuple[float, int]:
    """Minimum distance from `s` to the non-failure mesh states, and the index attaining it.

    Linear scan; ties go to the lowest index.
    """
    coords = _as_coords(s)
    if coords.size != mesh.dim:
        raise ValueError(f"State has dim {coords.size}, mesh has dim {mesh.dim}")
    if mesh.n_states < 2:
        raise ValueError("Mesh has no non-failure states")
    d = row_distances(mesh.states[1:], coords, mesh.weights)
    i = int(np.argmin(d))
    return float(d[i]), i + 1


class NearestIndex:
    """Incremental nearest-neighbour structure for lumping during mesh construction.

    A KD-tree covers a committed prefix of the states and a linear scan covers the
    tail added since the last rebuild. The tree only proposes candidates inside a
    padded radius; exact distances always come from `row_distances`, so decisions
    match the linear scan bit for bit.
    """

    def __init__(self, dim: int, weights: Any = None, min_tail: int = 256) -> None:
        self.dim = dim
        self.weights = None if weights is None else _check_weights(weights, dim)
        self._rows = np.empty((64, dim), dtype=np.float64)
        self._count = 0
        self._tree: cKDTree | None = None
        self._tree_size = 0
        self._min_tail = min_tail

    def __len__(self) -> int:
        return self._count

    @property
    def rows(self) -> np.ndarray:
        """Non-failure states in insertion order (mesh index = position + 1)."""
        return self._rows[: self._count]

    def add(self, coords: np.ndarray) -> int:
        """Append a state; returns its mesh index."""
        if self._count == self._rows.shape[0]:
            grown = np.empty((2 * self._rows.shape[0], self.dim), dtype=np.float64)
            grown[: self._count] = self._rows[: self._count]
            self._rows = grown
        self._rows[self._count] = coords
        self._count += 1
        tail = self._count - self._tree_size
        if tail > max(self._min_tail, self._tree_size // 4):
            self._rebuild()
        return self._count

    def _rebuild(self) -> None:
        data = self.rows if self.weights is None else self.rows * self.weights
        self._tree = cKDTree(data)
        self._tree_size = self._count
        logger.debug("nearest index rebuilt over %d states", self._count)

    def nearest(self, s: np.ndarray) -> tuple[float, int]:
        """Exact nearest state by linear scan (lowest index on ties)."""
        if self._count == 0:
            raise ValueError("Index is empty")
        d = row_distances(self.rows, s, self.weights)
        i = int(np.argmin(d))
        return float(d[i]), i + 1

    def within(self, s: np.ndarray, radius: float) -> tuple[float, int] | None:
        """Nearest state at distance <= radius, or None when every state is farther."""
        if self._count == 0:
            return None
        candidates: list[int] = []
        if self._tree is not None:
            query = s if self.weights is None else s * self.weights
            padded = radius * (1.0 + 1e-9) + 1e-12
            candidates = self._tree.query_ball_point(query, padded)
        tail = np.arange(self._tree_size, self._count)
        idx = np.union1d(np.asarray(candidates, dtype=np.int64), tail)
        if idx.size == 0:
            return None
        d = row_distances(np.ascontiguousarray(self.rows[idx]), s, self.weights)
        j = int(np.argmin(d))
        if d[j] > radius:
            return None
        return float(d[j]), int(idx[j]) + 1


@dataclass(frozen=True)
class DimensionFit:
    samples: tuple[tuple[float, int], ...]
    slope: float
    n_hat: float
    r_squared: float


def estimate_dimension(samples: Iterable[tuple[float, int]]) -> DimensionFit:
    """Fit log N against log d_tr; the manifold dimension estimate is minus the slope."""
    pairs = tuple((float(d), int(n)) for d, n in samples)
    if len(pairs) < 2:
        raise ValueError(f"Dimension fit needs at least 2 (d_tr, N) samples, got {len(pairs)}")
    for d, n in pairs:
        if not d > 0 or n < 1:
            raise ValueError(f"Invalid sample (d_tr={d}, N={n}): need d_tr > 0 and N >= 1")
    x = np.log([d for d, _ in pairs])
    y = np.log([float(n) for _, n in pairs])
    if np.ptp(x) == 0:
        raise ValueError("Dimension fit needs at least two distinct thresholds")
    slope, intercept = np.polyfit(x, y, 1)
    residual = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(residual**2))
    r_squared = 1.0 if ss_tot == 0 else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return DimensionFit(samples=pairs, slope=float(slope), n_hat=float(-slope), r_squared=r_squared)


@dataclass(frozen=True, eq=False)
class PcaProjection:
    components: np.ndarray
    variance_explained: np.ndarray
    projected: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    @property
    def k(self) -> int:
        return int(self.components.shape[0])


def _stack_states(states: Iterable[PoincareState | Sequence[float] | np.ndarray]) -> np.ndarray:
    if isinstance(states, np.ndarray):
        arr = np.array(states, dtype=np.float64)
    else:
        arr = np.array([_as_coords(s) for s in states], dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("States must form an (n, dim) array")
    if not np.all(np.isfinite(arr)):
        raise ValueError("States must be finite")
    return arr


def pca_project(states: Iterable[PoincareState | Sequence[float] | np.ndarray], k: int) -> PcaProjection:
    """Project z-scored states onto their top-k principal directions."""
    x = _stack_states(states)
    n, dim = x.shape
    if k < 1 or k > dim:
        raise ValueError(f"k must be in [1, {dim}], got {k}")
    if n < k + 1:
        raise ValueError(f"PCA with k={k} needs at least {k + 1} states, got {n}")

    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    z = (x - mean) / scale
    cov = z.T @ z / n

    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order]

    components = eigvecs[:, :k].T.copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    total = float(eigvals.sum())
    variance = eigvals[:k] / total if total > 0 else np.zeros(k)
    return PcaProjection(
        components=components,
        variance_explained=variance,
        projected=z @ components.T,
        mean=mean,
        scale=scale,
    )


def top_variance_axes(states: Iterable[PoincareState | Sequence[float] | np.ndarray], k: int) -> list[int]:
    """The k raw coordinates with the largest variance, largest first; ties go to the lower index."""
    x = _stack_states(states)
    dim = x.shape[1]
    if k < 1 or k > dim:
        raise ValueError(f"k must be in [1, {dim}], got {k}")
    variance = x.var(axis=0)
    order = np.lexsort((np.arange(dim), -variance))
    return [int(i) for i in order[:k]]


def min_pairwise_distance(states: np.ndarray, weights: Any = None) -> float:
    """Exhaustive minimum distance over all pairs of rows (inf for fewer than 2 rows)."""
    states = np.asarray(states, dtype=np.float64)
    w = None if weights is None else _check_weights(weights, states.shape[1])
    best = np.inf
    for i in range(states.shape[0] - 1):
        d = row_distances(states[i + 1 :], states[i], w)
        best = min(best, float(d.min()))
    return best
