"""Stochastic transition matrices and metastability metrics.

Vectors indexed by state (phi, m) have length N with entry 0 belonging to the
absorbing failure state; phi[0] and m[0] are always 0.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse import csgraph
from scipy.sparse import linalg as spla

from .disturbances import DisturbanceProfile
from .errors import ConvergenceError, MetameshError
from .meshing import TransitionTable
from .utils import json_number

logger = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-12
INFINITE_MFPT = 1e15
LAMBDA_ONE_TOL = 1e-12
EIGEN_TOL = 1e-12
VECTOR_TOL = 1e-10
MAX_ITERATIONS = 100_000
DENSE_LIMIT = 2000
SOLVE_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class StochasticMatrix:
    """Row-stochastic N x N matrix in CSR form; row 0 is the absorbing failure row."""

    matrix: sp.csr_matrix
    controller: int = 0
    profile_digest: str = ""

    def __post_init__(self) -> None:
        m = sp.csr_matrix(self.matrix, dtype=np.float64)
        n = m.shape[0]
        if m.shape != (n, n) or n < 2:
            raise ValueError(f"Stochastic matrix must be square with N >= 2, got {m.shape}")
        m.sum_duplicates()
        m.eliminate_zeros()
        m.sort_indices()
        if m.nnz and (m.data.min() < 0 or m.data.max() > 1):
            raise ValueError("Transition probabilities must lie in [0, 1]")
        sums = np.asarray(m.sum(axis=1)).ravel()
        bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_SUM_TOL)
        if bad.size:
            raise ValueError(f"Row {int(bad[0])} sums to {sums[bad[0]]!r}, not 1")
        row0 = m.getrow(0)
        if row0.nnz != 1 or row0.indices[0] != 0 or row0.data[0] != 1.0:
            raise ValueError("Row 0 must be the absorbing failure row e_0")
        object.__setattr__(self, "matrix", m)

    @property
    def n_states(self) -> int:
        return int(self.matrix.shape[0])

    def block(self) -> sp.csr_matrix:
        """Transitions among non-failure states."""
        return self.matrix[1:, 1:].tocsr()

    def failure_probabilities(self) -> np.ndarray:
        """Next-step failure probability, one entry per state (entry 0 is 1)."""
        return self.matrix[:, [0]].toarray().ravel()

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def coordinates(self) -> list[tuple[int, int, float]]:
        """(row, col, prob) triples in row-major order."""
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return [(int(coo.row[k]), int(coo.col[k]), float(coo.data[k])) for k in order]


def assemble_stochastic(table: TransitionTable, controller: int, profile: DisturbanceProfile) -> StochasticMatrix:
    """T(i, j) = sum of P(g) over disturbances g with T_det(i, controller, g) = j.

    Contributions are added one disturbance at a time in declared order, so
    the result equals a dense accumulation in the same order bit for bit.
    """
    if len(profile) != table.n_disturbances:
        raise ValueError(
            f"Profile has {len(profile)} disturbances, transition table has {table.n_disturbances}"
        )
    if not 0 <= controller < table.n_controllers:
        raise ValueError(f"Controller index {controller} out of range [0, {table.n_controllers})")
    n = table.n_states
    rows = np.arange(1, n)
    ones = np.ones(n - 1)
    total = sp.csr_matrix(([1.0], ([0], [0])), shape=(n, n))
    for g, p in enumerate(profile.probabilities):
        if p == 0.0:
            continue
        cols = table.entries[1:, controller, g].astype(np.int64)
        total = total + sp.csr_matrix((ones * p, (rows, cols)), shape=(n, n))
    total.eliminate_zeros()
    return StochasticMatrix(total, controller, profile.digest())


# ---- reachability and MFPT ----

def _certain_absorption(T: StochasticMatrix) -> np.ndarray:
    """Mask over non-failure states that are absorbed with probability 1."""
    block = T.block()
    n = block.shape[0]
    leak = T.failure_probabilities()[1:] > 0

    # reverse edges j <- i, plus a super-node n linked to every seed
    reverse = block.T.tocsr()
    reverse.data[:] = 1.0

    def reached_from(seeds: np.ndarray) -> np.ndarray:
        mask = np.zeros(n, dtype=bool)
        if not seeds.any():
            return mask
        idx = np.flatnonzero(seeds)
        link = sp.csr_matrix((np.ones(idx.size), (np.full(idx.size, n), idx)), shape=(n + 1, n + 1))
        graph = sp.bmat([[reverse, None], [None, sp.csr_matrix((1, 1))]], format="csr") + link
        order = csgraph.breadth_first_order(graph, n, directed=True, return_predecessors=False)
        mask[order[order < n]] = True
        return mask

    can_fail = reached_from(leak)
    doomed = reached_from(~can_fail)  # can reach a set that never fails
    return can_fail & ~doomed


def mfpt_vector(T: StochasticMatrix, *, dense_limit: int = DENSE_LIMIT, tol: float = SOLVE_TOL) -> np.ndarray:
    """Expected gait cycles to failure from each state, solving (I - T_hat) m_hat = 1.

    States that are not absorbed with certainty get +inf, as do values above 1e15.
    """
    n = T.n_states
    m = np.zeros(n)
    finite = _certain_absorption(T)
    m[1:][~finite] = math.inf
    idx = np.flatnonzero(finite)
    if idx.size == 0:
        return m
    sub = T.block()[idx][:, idx]
    a = sp.identity(idx.size, format="csr") - sub
    rhs = np.ones(idx.size)
    try:
        if idx.size <= dense_limit:
            sol = scipy.linalg.solve(a.toarray(), rhs)
            iterations = 1
        else:
            sol, iterations = _iterative_solve(a.tocsc(), rhs, tol)
    except (np.linalg.LinAlgError, RuntimeError) as e:
        raise ConvergenceError(f"MFPT solve failed: {e}", math.nan, 0)
    residual = _backward_error(a, sol, rhs)
    if not np.all(np.isfinite(sol)) or residual > tol:
        raise ConvergenceError("MFPT solve did not converge", residual, iterations)
    sol[sol > INFINITE_MFPT] = math.inf
    m[1:][idx] = sol
    return m


def _backward_error(a: sp.spmatrix, x: np.ndarray, b: np.ndarray) -> float:
    """Normwise relative residual |Ax - b| / (|A| |x| + |b|) in the max norm."""
    r = float(np.abs(a @ x - b).max())
    scale = float(spla.norm(a, np.inf)) * float(np.abs(x).max()) + float(np.abs(b).max())
    return r / scale if scale > 0 else r


def _iterative_solve(a: sp.csc_matrix, rhs: np.ndarray, tol: float) -> tuple[np.ndarray, int]:
    count = 0

    def tick(_: np.ndarray) -> None:
        nonlocal count
        count += 1

    try:
        ilu = spla.spilu(a)
        precond = spla.LinearOperator(a.shape, ilu.solve)
    except RuntimeError:
        precond = None
    sol, info = spla.bicgstab(a, rhs, rtol=tol, atol=0.0, maxiter=MAX_ITERATIONS, M=precond, callback=tick)
    residual = float(np.linalg.norm(a @ sol - rhs) / np.linalg.norm(rhs))
    if info == 0 and residual <= tol:
        return sol, count
    logger.debug("bicgstab stopped with info=%d residual=%.3e; trying a sparse direct solve", info, residual)
    return spla.spsolve(a, rhs), count


# ---- spectra ----

@dataclass(frozen=True, eq=False)
class _Eigen:
    value: float
    vector: np.ndarray
    iterations: int


def _power_iteration(op: sp.csr_matrix, start: np.ndarray, lazy: bool) -> _Eigen | None:
    """Dominant eigenpair of a non-negative matrix acting as x -> op @ x.

    Returns None when the iteration does not settle. A stalled vector with a
    settled eigenvalue (a periodic block) also ends the plain iteration early.
    """
    x = start / start.sum()
    lam_prev = math.nan
    stalled = 0
    for it in range(1, MAX_ITERATIONS + 1):
        y = op @ x
        if lazy:
            y = 0.5 * (y + x)
        lam = float(y.sum())
        if lam == 0.0:
            return _Eigen(0.0, x, it)
        y /= lam
        change = float(np.abs(y - x).sum())
        lam_settled = abs(lam - lam_prev) <= EIGEN_TOL
        x, lam_prev = y, lam
        if lam_settled and change <= VECTOR_TOL:
            return _Eigen(2.0 * lam - 1.0 if lazy else lam, x, it)
        if lam_settled:
            stalled += 1
            if not lazy and stalled > 1000:
                return None
    return None


def _dominant(op: sp.csr_matrix, start: np.ndarray, what: str) -> _Eigen:
    result = _power_iteration(op, start, lazy=False)
    if result is None:
        logger.debug("plain power iteration for %s did not settle; retrying with a lazy shift", what)
        result = _power_iteration(op, start, lazy=True)
    if result is None:
        raise ConvergenceError(f"Power iteration for the {what} did not converge", math.nan, MAX_ITERATIONS)
    return result


def _left_pair(block: sp.csr_matrix, start: np.ndarray | None = None) -> _Eigen:
    n = block.shape[0]
    return _dominant(block.T.tocsr(), np.ones(n) if start is None else start, "metastable distribution")


def _with_failure_slot(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.size + 1)
    out[1:] = v
    return out


def metastable_distribution(T: StochasticMatrix) -> np.ndarray:
    """Dominant left eigenvector of the non-failure block, normalised to sum 1."""
    return _with_failure_slot(_left_pair(T.block()).vector)


@dataclass(frozen=True, eq=False)
class Lambda2:
    lambda2: float
    lambda3_bound: float
    gap_ok: bool
    phi: np.ndarray
    non_unique: bool
    residual: float


def _lambda3_bound(block: sp.csr_matrix, lam: float, phi: np.ndarray, iterations: int = 300) -> float:
    """Norm-ratio estimate of the spectral radius after deflating the dominant pair."""
    n = block.shape[0]
    if n < 2 or lam == 0.0:
        return 0.0
    right = _dominant(block, np.ones(n), "right eigenvector").vector
    overlap = float(phi @ right)
    if overlap <= 0:
        return 1.0
    right = right / overlap

    def deflated(x: np.ndarray) -> np.ndarray:
        return block @ x - lam * right * float(phi @ x)

    x = deflated(np.linspace(1.0, 2.0, n))
    ratios: list[float] = []
    for _ in range(iterations):
        norm = float(np.abs(x).sum())
        if norm == 0.0:
            return 0.0
        x = deflated(x / norm)
        ratios.append(float(np.abs(x).sum()))
    return min(1.0, max(ratios[-20:]))


def lambda2(T: StochasticMatrix, gap_ratio: float = 0.1) -> Lambda2:
    """Second eigenvalue of T (the dominant one of the non-failure block) and the gap check."""
    block = T.block()
    n = block.shape[0]
    first = _left_pair(block)
    second = _left_pair(block, np.linspace(2.0, 1.0, n) ** 3)
    non_unique = float(np.abs(first.vector - second.vector).sum()) > 1e-6
    if non_unique:
        logger.warning("non-failure block has more than one dominant class; metastable distribution is not unique")
    lam = min(1.0, max(0.0, first.value))
    phi = first.vector
    residual = float(np.abs(block.T @ phi - lam * phi).sum())
    bound = _lambda3_bound(block, lam, phi)
    gap_ok = (1.0 - lam) <= gap_ratio * (1.0 - bound)
    return Lambda2(lam, bound, gap_ok, _with_failure_slot(phi), non_unique, residual)


def system_mfpt(phi: np.ndarray, m: np.ndarray) -> float:
    """M = sum of phi_i m_i; +inf when any weighted entry is infinite."""
    phi = np.asarray(phi, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if phi.shape != m.shape:
        raise ValueError(f"phi has {phi.size} entries, m has {m.size}")
    weighted = phi > 0
    if np.any(np.isinf(m[weighted])):
        return math.inf
    total = math.fsum((phi[weighted] * m[weighted]).tolist())
    return math.inf if total > INFINITE_MFPT else total


def eigen_mfpt(lambda2: float) -> float:
    """1 / (1 - lambda2), +inf at lambda2 = 1."""
    if lambda2 >= 1.0 - LAMBDA_ONE_TOL:
        return math.inf
    value = 1.0 / (1.0 - lambda2)
    return math.inf if value > INFINITE_MFPT else value


def n_step_failure_prob(lambda2: float, n: int) -> float:
    """Probability of failing on exactly the n-th step."""
    if not 0.0 <= lambda2 <= 1.0:
        raise ValueError(f"lambda2 must be in [0, 1], got {lambda2}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return lambda2 ** (n - 1) * (1.0 - lambda2)


def failure_step_distribution(lambda2: float, n_max: int) -> np.ndarray:
    """n_step_failure_prob for n = 1 .. n_max."""
    if n_max < 1:
        raise ValueError(f"n_max must be >= 1, got {n_max}")
    if not 0.0 <= lambda2 <= 1.0:
        raise ValueError(f"lambda2 must be in [0, 1], got {lambda2}")
    return lambda2 ** np.arange(n_max) * (1.0 - lambda2)


def dangerous_states(T: StochasticMatrix, threshold: float = 0.99) -> list[int]:
    """Non-failure states whose next-step failure probability exceeds `threshold`."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    fail = T.failure_probabilities()
    return [int(i) for i in np.flatnonzero(fail[1:] > threshold) + 1]


@dataclass(frozen=True, eq=False)
class SpectralSummary:
    lambda2: float
    lambda3_bound: float
    gap_ok: bool
    phi: np.ndarray
    m: np.ndarray
    M_exact: float
    M_eigen: float
    non_unique: bool = False
    dangerous: tuple[int, ...] = field(default_factory=tuple)
    residual: float = 0.0

    def as_dict(self, full: bool = False) -> dict:
        data = {
            "lambda2": self.lambda2,
            "lambda3_bound": self.lambda3_bound,
            "gap_ok": self.gap_ok,
            "M_exact": json_number(self.M_exact),
            "M_eigen": json_number(self.M_eigen),
            "non_unique": self.non_unique,
            "dangerous_count": len(self.dangerous),
            "eigen_residual": self.residual,
            "n_states": int(self.m.size),
        }
        if full:
            data["phi"] = self.phi
            data["m"] = self.m
            data["dangerous"] = list(self.dangerous)
        return data


def summarize(T: StochasticMatrix, gap_ratio: float = 0.1, danger_threshold: float = 0.99) -> SpectralSummary:
    spectral = lambda2(T, gap_ratio)
    m = mfpt_vector(T)
    lam = spectral.lambda2
    m_eigen = eigen_mfpt(lam)
    m_exact = math.inf if math.isinf(m_eigen) else system_mfpt(spectral.phi, m)
    return SpectralSummary(
        lambda2=lam,
        lambda3_bound=spectral.lambda3_bound,
        gap_ok=spectral.gap_ok,
        phi=spectral.phi,
        m=m,
        M_exact=m_exact,
        M_eigen=m_eigen,
        non_unique=spectral.non_unique,
        dangerous=tuple(dangerous_states(T, danger_threshold)),
        residual=spectral.residual,
    )


# ---- sweeps ----

@dataclass(frozen=True)
class SweepEntry:
    index: int
    magnitude: float
    start_time: float
    M: float
    error: str = ""


def sensitivity_sweep(
    table: TransitionTable,
    controller: int,
    base_profile: DisturbanceProfile,
    p_null: float = 0.4,
    p_interest: float = 0.5,
) -> list[SweepEntry]:
    """M_exact with each push in turn as the disturbance of interest."""
    if len(base_profile) != table.n_disturbances:
        raise ValueError(
            f"Profile has {len(base_profile)} disturbances, transition table has {table.n_disturbances}"
        )
    pushes = base_profile.disturbances
    entries: list[SweepEntry] = []
    for d in range(1, len(pushes)):
        push = pushes[d]
        try:
            profile = DisturbanceProfile.focused(pushes, d, p_null, p_interest)
            M = summarize(assemble_stochastic(table, controller, profile)).M_exact
            entries.append(SweepEntry(d, push.magnitude, push.start_time, M))
        except (MetameshError, ValueError) as e:
            logger.error("sweep entry for disturbance %d failed: %s", d, e)
            entries.append(SweepEntry(d, push.magnitude, push.start_time, math.nan, str(e)))
    return entries


@dataclass(frozen=True)
class MixingEntry:
    label: str
    indices: tuple[int, ...]
    M: float


def mixing_analysis(
    table: TransitionTable,
    controller: int,
    base_profile: DisturbanceProfile,
    groups: Sequence[Sequence[int]],
    p_null: float = 0.4,
) -> list[MixingEntry]:
    """M for each group of pushes acting alone and for all groups mixed.

    Each profile puts `p_null` on the null push and splits the rest evenly over
    the pushes in play.
    """
    if not groups:
        raise ValueError("At least one disturbance group is required")
    pushes = base_profile.disturbances

    def run(label: str, indices: Sequence[int]) -> MixingEntry:
        profile = DisturbanceProfile.push_chance(pushes, 1.0 - p_null, indices)
        M = summarize(assemble_stochastic(table, controller, profile)).M_exact
        return MixingEntry(label, tuple(sorted(set(indices))), M)

    results = [run("+".join(str(i) for i in g), g) for g in groups]
    combined = sorted({i for g in groups for i in g})
    results.append(run("mixed", combined))
    return results


def visit_weights(phi: np.ndarray, min_size: float = 4.0, max_size: float = 60.0) -> np.ndarray:
    """Marker sizes scaled linearly with visit frequency."""
    phi = np.asarray(phi, dtype=np.float64)
    top = float(phi.max()) if phi.size else 0.0
    if top <= 0:
        return np.full(phi.shape, min_size)
    return min_size + (max_size - min_size) * phi / top
