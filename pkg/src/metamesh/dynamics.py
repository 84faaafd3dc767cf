"""Hybrid-system simulation: one Poincaré return (a full gait cycle) per call.

Continuous dynamics are integrated with fixed-step RK4. Steps are split at the
push boundaries so the force switches at exact times, the control torque is a
zero-order hold refreshed every `hold_steps` grid steps, and guard crossings
(impacts and falls) are located by bisection on the sub-step length.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from collections.abc import Callable, Mapping, Sequence
from contextlib import ExitStack
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .disturbances import Disturbance, DisturbanceProfile
from .geometry import PoincareState
from .models import DynamicsModel, MapModel, WalkerModel, make_model
from .policy import PolicyPool, external_policy_query

logger = logging.getLogger(__name__)

POLICY_KINDS = ("passive", "pd_tracking", "external")
FAILURE_CAUSES = ("fell", "timeout", "integration_error")
MONTE_CARLO_CYCLE_CAP = 1_000_000


@dataclass(frozen=True)
class PolicySpec:
    """A controller: `passive` (zero torque), `pd_tracking` (model PD law) or `external`."""

    kind: str = "passive"
    parameters: Mapping[str, Any] = field(default_factory=dict)
    id: str = ""

    def __post_init__(self) -> None:
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"Unknown policy kind {self.kind!r}. Use one of {', '.join(POLICY_KINDS)}.")
        params = dict(self.parameters)
        if self.kind == "pd_tracking":
            for gain in ("kp", "kd"):
                value = float(params.get(gain, 0.0))
                if not math.isfinite(value) or value < 0:
                    raise ValueError(f"PD gain {gain} must be finite and >= 0, got {value}")
        if self.kind == "external" and not params.get("endpoint"):
            raise ValueError("An external policy needs an 'endpoint' parameter")
        object.__setattr__(self, "parameters", params)
        if not self.id:
            object.__setattr__(self, "id", self.kind)

    def as_dict(self) -> dict:
        return {"kind": self.kind, "parameters": dict(self.parameters), "id": self.id}


PASSIVE = PolicySpec()


@dataclass(frozen=True)
class SimulationConfig:
    dt: float = 0.002
    hold_steps: int = 4
    min_cycle_time: float = 0.3
    timeout: float = 8.0
    height_fraction: float = 0.5
    event_tol: float = 1e-10
    torque_limit: float = 100.0
    record_trajectory: bool = False

    def __post_init__(self) -> None:
        for name in ("dt", "timeout", "event_tol", "torque_limit"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.hold_steps < 1:
            raise ValueError(f"hold_steps must be >= 1, got {self.hold_steps}")
        if self.min_cycle_time < 0:
            raise ValueError(f"min_cycle_time must be >= 0, got {self.min_cycle_time}")
        if not 0 <= self.height_fraction < 1:
            raise ValueError(f"height_fraction must be in [0, 1), got {self.height_fraction}")

    def as_dict(self) -> dict:
        return {
            "dt": self.dt,
            "hold_steps": self.hold_steps,
            "min_cycle_time": self.min_cycle_time,
            "timeout": self.timeout,
            "height_fraction": self.height_fraction,
            "event_tol": self.event_tol,
            "torque_limit": self.torque_limit,
        }


@dataclass(frozen=True, eq=False)
class Impact:
    time: float
    pre: np.ndarray
    post: np.ndarray


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    impacts: tuple[Impact, ...]


@dataclass(frozen=True, eq=False)
class SimulationOutcome:
    """Either a Step to `next_state` or a Failure with `cause`."""

    next_state: PoincareState | None
    cause: str | None
    cycle_time: float
    detail: str = ""
    trajectory: Trajectory | None = None

    @property
    def failed(self) -> bool:
        return self.cause is not None

    def same_result(self, other: SimulationOutcome) -> bool:
        """Bit-exact comparison of the result and cycle time (trajectory ignored)."""
        if self.cause != other.cause or self.cycle_time != other.cycle_time:
            return False
        if self.next_state is None or other.next_state is None:
            return self.next_state is other.next_state
        return self.next_state == other.next_state


def detect_failure(model: WalkerModel, x: np.ndarray, config: SimulationConfig, elapsed: float) -> str | None:
    """Failure cause for a continuous-time state, or None while the walker is fine."""
    if elapsed > config.timeout:
        return "timeout"
    if model.body_height(x) < config.height_fraction * model.standing_height:
        return "fell"
    if model.contact_lost(x):
        return "fell"
    return None


# ---- integration ----

def rk4_step(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float) -> np.ndarray:
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _impact_crossed(model: WalkerModel, x: np.ndarray, x_new: np.ndarray) -> bool:
    """Guard goes from >= 0 to < 0 and impacts are enabled at the end of the step."""
    return model.impact_function(x) >= 0 > model.impact_function(x_new) and model.impact_enabled(x_new)


def _locate(
    f: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    h: float,
    guard: Callable[[np.ndarray], float],
    tol: float,
) -> float:
    """Smallest sub-step (within `tol`) after which `guard` is negative."""
    lo, hi = 0.0, h
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if guard(rk4_step(f, x, mid)) < 0:
            hi = mid
        else:
            lo = mid
    return hi


class _Controller:
    """Torque source for one simulation; external policies hold a pool lease."""

    def __init__(
        self,
        policy: PolicySpec,
        model: WalkerModel,
        config: SimulationConfig,
        pools: Mapping[str, PolicyPool] | None,
        stack: ExitStack,
    ) -> None:
        self.policy = policy
        self.model = model
        self.limit = config.torque_limit
        self._client = None
        if policy.kind == "external":
            pool = (pools or {}).get(policy.id)
            if pool is None:
                raise ValueError(f"No connection pool for external policy {policy.id!r}")
            self._client = stack.enter_context(pool.lease())

    def torque(self, x: np.ndarray) -> np.ndarray:
        n = self.model.n_actuators
        if self._client is not None:
            return external_policy_query(self._client, self.model.observation(x), n)
        if self.policy.kind == "passive":
            return np.zeros(n)
        return np.clip(self.model.pd_torque(x, self.policy.parameters), -self.limit, self.limit)


def resolve_model(model: DynamicsModel | str) -> DynamicsModel:
    return make_model(model) if isinstance(model, str) else model


def _section_coords(x0: PoincareState | Sequence[float] | np.ndarray, model: DynamicsModel) -> np.ndarray:
    coords = x0.coords if isinstance(x0, PoincareState) else PoincareState(x0).coords
    if coords.size != model.section_dim:
        raise ValueError(f"State has dim {coords.size}, model {model.model_id} expects {model.section_dim}")
    return coords


def simulate_gait_cycle(
    x0: PoincareState | Sequence[float] | np.ndarray,
    policy: PolicySpec,
    gamma: Disturbance,
    model: DynamicsModel | str,
    config: SimulationConfig | None = None,
    *,
    pools: Mapping[str, PolicyPool] | None = None,
) -> SimulationOutcome:
    """Simulate one gait cycle (two impacts) from a post-impact section state.

    The cycle ends at the first even-numbered impact at or after
    `config.min_cycle_time`. Map models return their map value directly with
    a nominal cycle time of `min_cycle_time`.
    """
    config = config or SimulationConfig()
    model = resolve_model(model)
    coords = _section_coords(x0, model)

    if isinstance(model, MapModel):
        nxt = model.return_map(coords, gamma)
        if nxt is None:
            return SimulationOutcome(None, "fell", config.min_cycle_time, detail="map")
        return SimulationOutcome(PoincareState(nxt), None, config.min_cycle_time)
    if not isinstance(model, WalkerModel):
        raise ValueError(f"Model {model.model_id!r} cannot be simulated")

    with ExitStack() as stack:
        controller = _Controller(policy, model, config, pools, stack)
        return _run_cycle(model.to_state(coords), controller, gamma, model, config)


def _run_cycle(
    x: np.ndarray,
    controller: _Controller,
    gamma: Disturbance,
    model: WalkerModel,
    config: SimulationConfig,
) -> SimulationOutcome:
    dt = config.dt
    boundaries = [] if gamma.is_null or gamma.duration == 0 else [gamma.start_time, gamma.end_time]
    record = config.record_trajectory
    times: list[float] = [0.0]
    states: list[np.ndarray] = [x.copy()]
    impacts: list[Impact] = []

    def finish(next_state: PoincareState | None, cause: str | None, t: float, detail: str = "") -> SimulationOutcome:
        trajectory = None
        if record:
            trajectory = Trajectory(np.array(times), np.array(states), tuple(impacts))
        return SimulationOutcome(next_state, cause, t, detail=detail, trajectory=trajectory)

    t = 0.0
    step = 0
    torque = np.zeros(model.n_actuators)
    while True:
        cause = detect_failure(model, x, config, t)
        if cause is not None:
            return finish(None, cause, t)
        if step % config.hold_steps == 0:
            torque = controller.torque(x)
        grid_end = (step + 1) * dt
        cuts = [b for b in boundaries if t < b < grid_end] + [grid_end]
        for seg_end in cuts:
            while t < seg_end:
                push = gamma.force_at(t)
                f = _field(model, torque, push)
                h = seg_end - t
                x_new = rk4_step(f, x, h)
                if not np.all(np.isfinite(x_new)):
                    return finish(None, "integration_error", t, detail="non-finite state")

                crossings: list[tuple[float, int]] = []
                if _impact_crossed(model, x, x_new):
                    crossings.append((_locate(f, x, h, model.impact_function, config.event_tol), 0))
                if model.fall_function(x) >= 0 > model.fall_function(x_new):
                    crossings.append((_locate(f, x, h, model.fall_function, config.event_tol), 1))
                if not crossings:
                    x, t = x_new, seg_end
                    break

                tau, kind = min(crossings)
                x_event = rk4_step(f, x, tau)
                t = t + tau
                if record:
                    times.append(t)
                    states.append(x_event.copy())
                if kind == 1:
                    return finish(None, "fell", t, detail="fall_guard")
                x = model.impact_map(x_event)
                impacts.append(Impact(t, x_event, x.copy()))
                if not np.all(np.isfinite(x)):
                    return finish(None, "integration_error", t, detail="non-finite impact")
                if len(impacts) % 2 == 0 and t >= config.min_cycle_time:
                    section = model.to_section(x)
                    return finish(PoincareState(section), None, t)
        step += 1
        t = grid_end
        if record:
            times.append(t)
            states.append(x.copy())


def _field(model: WalkerModel, torque: np.ndarray, push: float) -> Callable[[np.ndarray], np.ndarray]:
    return lambda s: model.derivatives(s, torque, push)


# ---- repeated returns ----

@dataclass(frozen=True, eq=False)
class ReturnMapRun:
    """Consecutive section states; `cause` is set when the run ended in a failure."""

    states: np.ndarray
    cause: str | None
    cycle_times: np.ndarray


def iterate_return_map(
    x0: PoincareState | Sequence[float] | np.ndarray,
    policy: PolicySpec,
    gamma: Disturbance,
    model: DynamicsModel | str,
    config: SimulationConfig | None = None,
    cycles: int = 1,
    *,
    pools: Mapping[str, PolicyPool] | None = None,
) -> ReturnMapRun:
    """Apply the return map `cycles` times under one fixed disturbance."""
    if cycles < 1:
        raise ValueError(f"cycles must be >= 1, got {cycles}")
    model = resolve_model(model)
    current = PoincareState(_section_coords(x0, model))
    states = [current.coords]
    cycle_times: list[float] = []
    cause = None
    for _ in range(cycles):
        outcome = simulate_gait_cycle(current, policy, gamma, model, config, pools=pools)
        if outcome.failed:
            cause = outcome.cause
            break
        assert outcome.next_state is not None
        current = outcome.next_state
        states.append(current.coords)
        cycle_times.append(outcome.cycle_time)
    return ReturnMapRun(np.array(states), cause, np.array(cycle_times))


@dataclass(frozen=True)
class MonteCarloResult:
    mean: float
    stderr: float
    episodes: int
    censored: int
    causes: dict[str, int]


def monte_carlo_mfpt(
    starts: np.ndarray,
    start_weights: np.ndarray | None,
    policy: PolicySpec,
    profile: DisturbanceProfile,
    model: DynamicsModel | str,
    config: SimulationConfig | None = None,
    *,
    episodes: int = 1000,
    seed: int = 0,
    max_cycles: int = MONTE_CARLO_CYCLE_CAP,
    pools: Mapping[str, PolicyPool] | None = None,
) -> MonteCarloResult:
    """Direct simulation of gait cycles to failure, pushes drawn from `profile` each cycle.

    Episodes start from a row of `starts` drawn with `start_weights`; the
    failing cycle counts as a step. Episodes reaching `max_cycles` are
    censored and counted at `max_cycles`.
    """
    model = resolve_model(model)
    starts = np.atleast_2d(np.asarray(starts, dtype=np.float64))
    rng = np.random.default_rng(seed)
    probs = np.asarray(profile.probabilities)
    weights = None if start_weights is None else np.asarray(start_weights, dtype=np.float64)
    if weights is not None:
        weights = weights / weights.sum()

    steps = np.zeros(episodes)
    censored = 0
    causes: Counter[str] = Counter()
    for e in range(episodes):
        current = PoincareState(starts[rng.choice(len(starts), p=weights)])
        n = 0
        while True:
            n += 1
            gamma = profile.disturbances[rng.choice(len(probs), p=probs)]
            outcome = simulate_gait_cycle(current, policy, gamma, model, config, pools=pools)
            if outcome.failed:
                causes[str(outcome.cause)] += 1
                break
            if n >= max_cycles:
                censored += 1
                break
            assert outcome.next_state is not None
            current = outcome.next_state
        steps[e] = n
    if censored:
        logger.warning("%d of %d Monte Carlo episodes hit the %d-cycle cap", censored, episodes, max_cycles)
    stderr = float(steps.std(ddof=1) / math.sqrt(episodes)) if episodes > 1 else math.inf
    return MonteCarloResult(float(steps.mean()), stderr, episodes, censored, dict(causes))
