"""Worklist exploration of the reachable Poincaré section.

States are explored first-in first-out; each state's (controller x disturbance)
grid is simulated, possibly on a thread pool, and the outcomes are committed
strictly in grid order against the mesh as it stands at commit time. Mesh
indices therefore do not depend on the worker count.
"""

from __future__ import annotations

import logging
from collections import Counter
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .disturbances import Disturbance, DisturbanceProfile, disturbance_digest
from .dynamics import PolicySpec, SimulationConfig, SimulationOutcome, resolve_model, simulate_gait_cycle
from .errors import MetameshError
from .geometry import FAILURE_INDEX, Mesh, NearestIndex, PoincareState, min_pairwise_distance
from .models import DynamicsModel
from .policy import PolicyPool
from .utils import digest

logger = logging.getLogger(__name__)

DEFAULT_STATE_CAP = 10**6
PROGRESS_EVERY = 1000


@dataclass(frozen=True, eq=False)
class TransitionTable:
    """Successor index for every (state, controller, disturbance); row 0 is unused."""

    entries: np.ndarray

    def __post_init__(self) -> None:
        entries = np.array(self.entries, dtype=np.uint32)
        if entries.ndim != 3 or min(entries.shape) < 1 or entries.shape[0] < 2:
            raise ValueError(f"Transition table must be (N >= 2, C, D), got shape {entries.shape}")
        if entries.max() >= entries.shape[0]:
            raise ValueError(f"Transition table has successor {int(entries.max())} >= N = {entries.shape[0]}")
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @property
    def n_states(self) -> int:
        return int(self.entries.shape[0])

    @property
    def n_controllers(self) -> int:
        return int(self.entries.shape[1])

    @property
    def n_disturbances(self) -> int:
        return int(self.entries.shape[2])

    def successor(self, state: int, controller: int, disturbance: int) -> int:
        if state == FAILURE_INDEX:
            return FAILURE_INDEX
        return int(self.entries[state, controller, disturbance])

    def failure_count(self) -> int:
        return int(np.count_nonzero(self.entries[1:] == FAILURE_INDEX))


@dataclass(frozen=True, eq=False)
class MeshBuild:
    mesh: Mesh
    table: TransitionTable
    truncated: bool = False
    failure_causes: dict[str, int] = field(default_factory=dict)
    simulations: int = 0
    forced_lumps: int = 0
    max_lump_distance: float = 0.0  # over ordinary (non-forced) lumps

    def summary(self) -> dict[str, Any]:
        return {
            "n_states": self.mesh.n_states,
            "d_tr": self.mesh.d_tr,
            "n_controllers": self.table.n_controllers,
            "n_disturbances": self.table.n_disturbances,
            "failure_transitions": self.table.failure_count(),
            "failure_causes": dict(sorted(self.failure_causes.items())),
            "simulations": self.simulations,
            "truncated": self.truncated,
            "forced_lumps": self.forced_lumps,
            "max_lump_distance": self.max_lump_distance,
        }


def _disturbances(profile: DisturbanceProfile | Sequence[Disturbance]) -> tuple[Disturbance, ...]:
    pushes = tuple(profile.disturbances) if isinstance(profile, DisturbanceProfile) else tuple(profile)
    if not pushes:
        raise ValueError("Disturbance list must not be empty")
    return pushes


def _ordered_map(executor: ThreadPoolExecutor | None, func: Callable, items: list) -> list:
    """Map in order; results come back in submission order regardless of completion."""
    if executor is None:
        return [func(item) for item in items]
    return list(executor.map(func, items))


def build_mesh(
    initial: PoincareState | Sequence[float] | np.ndarray,
    controllers: Sequence[PolicySpec],
    profile: DisturbanceProfile | Sequence[Disturbance],
    d_tr: float,
    model: DynamicsModel | str,
    config: SimulationConfig | None = None,
    *,
    state_cap: int = DEFAULT_STATE_CAP,
    threads: int = 1,
    weights: Any = None,
    pools: Mapping[str, PolicyPool] | None = None,
    simulate: Callable[..., SimulationOutcome] = simulate_gait_cycle,
) -> MeshBuild:
    """Explore the reachable section states and record every transition.

    A successor farther than `d_tr` from every mesh state becomes a new state;
    otherwise it is lumped onto its nearest state. Once the mesh holds
    `state_cap` states (failure included) new successors are forced onto their
    nearest state and the build is flagged truncated.
    """
    if not d_tr > 0:
        raise ValueError(f"d_tr must be positive, got {d_tr}")
    if not controllers:
        raise ValueError("At least one controller is required")
    if state_cap < 2:
        raise ValueError(f"state_cap must be >= 2, got {state_cap}")
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    config = config or SimulationConfig()
    model = resolve_model(model)
    pushes = _disturbances(profile)
    start = initial if isinstance(initial, PoincareState) else PoincareState(initial)
    if start.dim != model.section_dim:
        raise ValueError(f"Initial state has dim {start.dim}, model {model.model_id} expects {model.section_dim}")

    index = NearestIndex(start.dim, weights)
    index.add(start.coords)
    grid = [(c, g) for c in range(len(controllers)) for g in range(len(pushes))]
    rows: list[np.ndarray] = []
    causes: Counter[str] = Counter()
    forced = 0
    max_lump = 0.0
    truncated = False

    def run(task: tuple[int, int], coords: np.ndarray) -> SimulationOutcome:
        c, g = task
        return simulate(coords, controllers[c], pushes[g], model, config, pools=pools)

    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        current = 0
        while current < len(index):
            coords = index.rows[current].copy()
            outcomes = _ordered_map(executor, lambda task: run(task, coords), grid)
            row = np.zeros((len(controllers), len(pushes)), dtype=np.uint32)
            for (c, g), outcome in zip(grid, outcomes):
                if outcome.failed:
                    causes[str(outcome.cause)] += 1
                    continue
                assert outcome.next_state is not None
                s = outcome.next_state.coords
                hit = index.within(s, d_tr)
                if hit is not None:
                    row[c, g] = hit[1]
                    max_lump = max(max_lump, hit[0])
                elif len(index) + 1 >= state_cap:
                    if not truncated:
                        logger.warning("State cap %d reached; further new states are lumped onto their nearest state", state_cap)
                    truncated = True
                    row[c, g] = index.nearest(s)[1]
                    forced += 1
                else:
                    row[c, g] = index.add(s)
            rows.append(row)
            current += 1
            if current % PROGRESS_EVERY == 0:
                logger.info("explored %d states, mesh has %d", current, len(index) + 1)
    finally:
        if executor is not None:
            executor.shutdown(wait=True)

    n_states = len(index) + 1
    entries = np.zeros((n_states, len(controllers), len(pushes)), dtype=np.uint32)
    entries[1:] = np.stack(rows)
    states = np.zeros((n_states, start.dim))
    states[1:] = index.rows
    if causes:
        logger.info("failure causes: %s", ", ".join(f"{k}={v}" for k, v in sorted(causes.items())))
    provenance = {
        "model": model.model_id,
        "model_digest": digest(model.params()),
        "policies": [p.id for p in controllers],
        "policy_digest": digest([p.as_dict() for p in controllers]),
        "disturbance_digest": disturbance_digest(pushes),
        "simulation_digest": digest(config.as_dict()),
    }
    mesh = Mesh(states, d_tr, weights=index.weights, provenance=provenance)
    return MeshBuild(
        mesh=mesh,
        table=TransitionTable(entries),
        truncated=truncated,
        failure_causes=dict(causes),
        simulations=len(rows) * len(grid),
        forced_lumps=forced,
        max_lump_distance=max_lump,
    )


def mesh_growth_sweep(
    initial: PoincareState | Sequence[float] | np.ndarray,
    controllers: Sequence[PolicySpec],
    profile: DisturbanceProfile | Sequence[Disturbance],
    d_tr_list: Iterable[float],
    model: DynamicsModel | str,
    config: SimulationConfig | None = None,
    **build_options: Any,
) -> list[tuple[float, int]]:
    """Mesh size for each threshold; a failing threshold is logged and skipped."""
    thresholds = [float(d) for d in d_tr_list]
    if any(not d > 0 for d in thresholds):
        raise ValueError(f"Thresholds must be positive, got {thresholds}")
    if len(set(thresholds)) != len(thresholds):
        raise ValueError(f"Thresholds must be distinct, got {thresholds}")
    samples: list[tuple[float, int]] = []
    for d in thresholds:
        try:
            build = build_mesh(initial, controllers, profile, d, model, config, **build_options)
        except (MetameshError, ValueError) as e:
            logger.error("mesh build at d_tr=%g failed: %s", d, e)
            continue
        if build.truncated:
            logger.warning("mesh at d_tr=%g is truncated; its size is a lower bound", d)
        logger.info("d_tr=%g -> N=%d", d, build.mesh.n_states)
        samples.append((d, build.mesh.n_states))
    return samples


@dataclass(frozen=True, eq=False)
class LumpedTrajectory:
    """A state sequence lumped with the insertion rule, without exploring."""

    mesh: Mesh
    assignment: np.ndarray  # mesh index per sample
    counts: np.ndarray  # visits per mesh index, failure row 0
    transitions: np.ndarray  # (k, 3) rows of (from, to, count), sorted


def lump_trajectory(states: np.ndarray | Sequence[Sequence[float]], d_tr: float, weights: Any = None) -> LumpedTrajectory:
    samples = np.asarray(states, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < 1:
        raise ValueError("Trajectory must be a non-empty (n, dim) array")
    if not np.all(np.isfinite(samples)):
        raise ValueError("Trajectory states must be finite")
    if not d_tr > 0:
        raise ValueError(f"d_tr must be positive, got {d_tr}")
    index = NearestIndex(samples.shape[1], weights)
    assignment = np.zeros(samples.shape[0], dtype=np.int64)
    for k, s in enumerate(samples):
        hit = index.within(s, d_tr)
        assignment[k] = hit[1] if hit is not None else index.add(s)
    n_states = len(index) + 1
    counts = np.bincount(assignment, minlength=n_states)
    pairs = Counter(zip(assignment[:-1].tolist(), assignment[1:].tolist()))
    transitions = np.array(sorted((a, b, n) for (a, b), n in pairs.items()), dtype=np.int64).reshape(-1, 3)
    mesh_states = np.zeros((n_states, samples.shape[1]))
    mesh_states[1:] = index.rows
    mesh = Mesh(mesh_states, d_tr, weights=index.weights, provenance={"source": "trajectory"})
    return LumpedTrajectory(mesh, assignment, counts, transitions)


@dataclass(frozen=True)
class MeshCheck:
    min_separation: float | None  # None when the mesh is too large for the exhaustive check
    separation_ok: bool | None
    complete: bool
    unreachable: tuple[int, ...]

    @property
    def ok(self) -> bool:
        return self.separation_ok is not False and self.complete and not self.unreachable


def check_mesh_invariants(build: MeshBuild, exhaustive_limit: int = 10_000) -> MeshCheck:
    """Separation, completeness and reachability closure of a finished build."""
    mesh, table = build.mesh, build.table
    separation: float | None = None
    separation_ok: bool | None = None
    if mesh.n_states - 1 <= exhaustive_limit:
        separation = min_pairwise_distance(mesh.states[1:], mesh.weights)
        separation_ok = separation > mesh.d_tr
    complete = table.n_states == mesh.n_states and bool(np.all(table.entries[1:] < table.n_states))
    reached = np.zeros(table.n_states, dtype=bool)
    reached[table.entries[1:].reshape(-1)] = True
    unreachable = tuple(int(i) for i in np.flatnonzero(~reached[2:]) + 2)
    return MeshCheck(separation, separation_ok, complete, unreachable)
