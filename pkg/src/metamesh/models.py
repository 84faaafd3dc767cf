"""Built-in walker models and a synthetic return map.

Angles are measured from the gravity vertical, positive forward (downhill).
Walker states are continuous-time vectors; `to_section` / `to_state` convert
to and from Poincaré-section coordinates.
"""

from __future__ import annotations

import hashlib
import math
import struct
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from typing import Any, ClassVar

import numpy as np

from .disturbances import Disturbance


class DynamicsModel(ABC):
    model_id: ClassVar[str]
    n_actuators: ClassVar[int] = 0

    @property
    @abstractmethod
    def section_dim(self) -> int: ...

    @abstractmethod
    def default_section_state(self) -> np.ndarray:
        """A reasonable post-impact starting state for exploration."""

    def params(self) -> dict[str, Any]:
        return asdict(self)  # type: ignore[call-overload]


class WalkerModel(DynamicsModel):
    """Hybrid walker: continuous dynamics between impacts plus an impact map."""

    @property
    @abstractmethod
    def standing_height(self) -> float: ...

    @abstractmethod
    def to_state(self, coords: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def to_section(self, x: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def derivatives(self, x: np.ndarray, torque: np.ndarray, push: float) -> np.ndarray: ...

    @abstractmethod
    def impact_function(self, x: np.ndarray) -> float:
        """Positive while the next foot is off the ground; an impact is a crossing below zero."""

    def impact_enabled(self, x: np.ndarray) -> bool:
        return True

    @abstractmethod
    def impact_map(self, x: np.ndarray) -> np.ndarray: ...

    def fall_function(self, x: np.ndarray) -> float:
        """Crossing below zero means the walker fell; inf when the model has no such event."""
        return math.inf

    @abstractmethod
    def body_height(self, x: np.ndarray) -> float: ...

    def contact_lost(self, x: np.ndarray) -> bool:
        return False

    @abstractmethod
    def energy(self, x: np.ndarray) -> float:
        """Total mechanical energy with the potential measured from the stance foot."""

    @abstractmethod
    def kinetic_energy(self, x: np.ndarray) -> float: ...

    def observation(self, x: np.ndarray) -> np.ndarray:
        return np.array(x, dtype=np.float64)

    def pd_torque(self, x: np.ndarray, parameters: dict[str, float]) -> np.ndarray:
        return np.zeros(self.n_actuators)


@dataclass(frozen=True)
class RimlessWheel(WalkerModel):
    """Point-mass hub on n massless spokes rolling down a constant slope.

    Section coordinates are (stance angle, angular rate) right after impact.
    """

    model_id: ClassVar[str] = "rimless_wheel"
    n_actuators: ClassVar[int] = 0

    mass: float = 10.0
    leg_length: float = 1.0
    n_spokes: int = 8
    slope: float = 0.15
    gravity: float = 9.81

    def __post_init__(self) -> None:
        if self.n_spokes < 3:
            raise ValueError(f"A rimless wheel needs at least 3 spokes, got {self.n_spokes}")
        if self.mass <= 0 or self.leg_length <= 0 or self.gravity <= 0:
            raise ValueError("mass, leg_length and gravity must be positive")

    @property
    def alpha(self) -> float:
        """Half the angle between adjacent spokes."""
        return math.pi / self.n_spokes

    @property
    def section_dim(self) -> int:
        return 2

    @property
    def standing_height(self) -> float:
        return self.leg_length

    def to_state(self, coords: np.ndarray) -> np.ndarray:
        return np.array(coords, dtype=np.float64)

    def to_section(self, x: np.ndarray) -> np.ndarray:
        return np.array(x, dtype=np.float64)

    def derivatives(self, x: np.ndarray, torque: np.ndarray, push: float) -> np.ndarray:
        theta, omega = x
        l = self.leg_length
        accel = self.gravity / l * math.sin(theta) + push * math.cos(theta) / (self.mass * l)
        return np.array([omega, accel])

    def impact_function(self, x: np.ndarray) -> float:
        return self.slope + self.alpha - x[0]

    def impact_map(self, x: np.ndarray) -> np.ndarray:
        return np.array([self.slope - self.alpha, x[1] * math.cos(2 * self.alpha)])

    def fall_function(self, x: np.ndarray) -> float:
        # rolling back onto the rear spoke
        return x[0] - (self.slope - self.alpha)

    def body_height(self, x: np.ndarray) -> float:
        return self.leg_length * math.cos(x[0] - self.slope)

    def contact_lost(self, x: np.ndarray) -> bool:
        theta, omega = x
        return self.leg_length * omega * omega > self.gravity * math.cos(theta)

    def kinetic_energy(self, x: np.ndarray) -> float:
        return 0.5 * self.mass * (self.leg_length * x[1]) ** 2

    def energy(self, x: np.ndarray) -> float:
        return self.kinetic_energy(x) + self.mass * self.gravity * self.leg_length * math.cos(x[0])

    # ---- closed-form return map ----

    def _step_gain(self) -> float:
        g_l = self.gravity / self.leg_length
        return 2.0 * g_l * (math.cos(self.slope - self.alpha) - math.cos(self.slope + self.alpha))

    def pass_speed(self) -> float:
        """Smallest post-impact rate that carries the hub over the vertical."""
        if self.slope >= self.alpha:
            return 0.0
        return math.sqrt(2.0 * self.gravity / self.leg_length * (1.0 - math.cos(self.slope - self.alpha)))

    def step_map(self, omega: float) -> float | None:
        """Post-impact rate after one unperturbed step, or None if the wheel rolls back."""
        if omega <= self.pass_speed():
            return None
        return math.cos(2 * self.alpha) * math.sqrt(omega * omega + self._step_gain())

    def fixed_point_speed(self) -> float:
        c2 = math.cos(2 * self.alpha) ** 2
        return math.sqrt(c2 * self._step_gain() / (1.0 - c2))

    def default_section_state(self) -> np.ndarray:
        return np.array([self.slope - self.alpha, self.fixed_point_speed()])


@dataclass(frozen=True)
class CompassGait(WalkerModel):
    """Two-legged walker with point masses at the hip and on each leg and a hip actuator.

    State is (stance angle, swing angle, stance rate, swing rate). The stance angle
    is the foot-to-hip direction, the swing angle the hip-to-foot direction. The hip
    torque acts to spread the legs.
    """

    model_id: ClassVar[str] = "compass_gait"
    n_actuators: ClassVar[int] = 1

    hip_mass: float = 10.0
    leg_mass: float = 5.0
    a: float = 0.5  # foot to leg mass
    b: float = 0.5  # leg mass to hip
    slope: float = 0.0524
    gravity: float = 9.81
    clearance: float = 0.1  # rad of leg spread before heel strike counts

    def __post_init__(self) -> None:
        if min(self.hip_mass, self.leg_mass, self.a, self.b, self.gravity) <= 0:
            raise ValueError("Masses, lengths and gravity must be positive")

    @property
    def leg_length(self) -> float:
        return self.a + self.b

    @property
    def section_dim(self) -> int:
        return 4

    @property
    def standing_height(self) -> float:
        return self.leg_length

    def to_state(self, coords: np.ndarray) -> np.ndarray:
        return np.array(coords, dtype=np.float64)

    def to_section(self, x: np.ndarray) -> np.ndarray:
        return np.array(x, dtype=np.float64)

    def _mass_matrix(self, q1: float, q2: float) -> tuple[float, float, float]:
        m, mh, a, b, l = self.leg_mass, self.hip_mass, self.a, self.b, self.leg_length
        return (mh + m) * l * l + m * a * a, m * l * b * math.cos(q1 + q2), m * b * b

    def derivatives(self, x: np.ndarray, torque: np.ndarray, push: float) -> np.ndarray:
        q1, q2, w1, w2 = x
        m, mh, a, b, l, g = self.leg_mass, self.hip_mass, self.a, self.b, self.leg_length, self.gravity
        u = float(torque[0]) if len(torque) else 0.0
        m11, m12, m22 = self._mass_matrix(q1, q2)
        s = math.sin(q1 + q2)
        r1 = u + push * l * math.cos(q1) + m * l * b * s * w2 * w2 + g * (m * a + mh * l + m * l) * math.sin(q1)
        r2 = u + m * l * b * s * w1 * w1 - g * m * b * math.sin(q2)
        det = m11 * m22 - m12 * m12
        return np.array([w1, w2, (r1 * m22 - m12 * r2) / det, (m11 * r2 - m12 * r1) / det])

    def impact_function(self, x: np.ndarray) -> float:
        """Swing-foot height above the slope."""
        return self.leg_length * (math.cos(x[0] - self.slope) - math.cos(x[1] + self.slope))

    def impact_enabled(self, x: np.ndarray) -> bool:
        return x[0] + x[1] > self.clearance

    def _points(self, q: np.ndarray, qd: np.ndarray) -> dict[str, np.ndarray]:
        q1, q2 = q
        w1, w2 = qd
        u1 = np.array([math.sin(q1), math.cos(q1)])
        du1 = np.array([math.cos(q1), -math.sin(q1)])
        u2 = np.array([math.sin(q2), -math.cos(q2)])
        du2 = np.array([math.cos(q2), math.sin(q2)])
        hip = self.leg_length * u1
        hip_v = self.leg_length * w1 * du1
        return {
            "stance": self.a * u1,
            "stance_v": self.a * w1 * du1,
            "hip": hip,
            "hip_v": hip_v,
            "swing": hip + self.b * u2,
            "swing_v": hip_v + self.b * w2 * du2,
            "foot": hip + self.leg_length * u2,
        }

    def _momenta(self, q: np.ndarray, qd: np.ndarray, pivot: np.ndarray, trailing: str) -> np.ndarray:
        """Total angular momentum about `pivot` and the trailing leg's about the hip."""
        p = self._points(q, qd)
        m, mh = self.leg_mass, self.hip_mass
        total = (
            m * _cross(p["stance"] - pivot, p["stance_v"])
            + mh * _cross(p["hip"] - pivot, p["hip_v"])
            + m * _cross(p["swing"] - pivot, p["swing_v"])
        )
        trail = m * _cross(p[trailing] - p["hip"], p[trailing + "_v"])
        return np.array([total, trail])

    def impact_map(self, x: np.ndarray) -> np.ndarray:
        q_minus, qd_minus = x[:2], x[2:]
        contact = self._points(q_minus, qd_minus)["foot"]
        before = self._momenta(q_minus, qd_minus, contact, "stance")
        q_plus = np.array([-q_minus[1], -q_minus[0]])
        origin = np.zeros(2)
        cols = [self._momenta(q_plus, e, origin, "swing") for e in np.eye(2)]
        qd_plus = np.linalg.solve(np.column_stack(cols), before)
        return np.concatenate([q_plus, qd_plus])

    def body_height(self, x: np.ndarray) -> float:
        return self.leg_length * math.cos(x[0] - self.slope)

    def kinetic_energy(self, x: np.ndarray) -> float:
        m11, m12, m22 = self._mass_matrix(x[0], x[1])
        w1, w2 = x[2], x[3]
        return 0.5 * m11 * w1 * w1 + m12 * w1 * w2 + 0.5 * m22 * w2 * w2

    def energy(self, x: np.ndarray) -> float:
        m, mh, a, b, l, g = self.leg_mass, self.hip_mass, self.a, self.b, self.leg_length, self.gravity
        potential = g * ((m * a + mh * l + m * l) * math.cos(x[0]) - m * b * math.cos(x[1]))
        return self.kinetic_energy(x) + potential

    def pd_torque(self, x: np.ndarray, parameters: dict[str, float]) -> np.ndarray:
        """Swing leg servoed to mirror the stance leg, plus a stride offset."""
        kp = parameters.get("kp", 0.0)
        kd = parameters.get("kd", 0.0)
        offset = parameters.get("offset", 0.0)
        error = x[0] + offset - x[1]
        error_rate = x[2] - x[3]
        return np.array([kp * error + kd * error_rate])

    def default_section_state(self) -> np.ndarray:
        return np.array([-0.15, -0.25, 1.1, 1.6])


def _cross(u: np.ndarray, v: np.ndarray) -> float:
    return float(u[0] * v[1] - u[1] * v[0])


class MapModel(DynamicsModel):
    """A model given directly by its discrete return map."""

    @abstractmethod
    def return_map(self, coords: np.ndarray, disturbance: Disturbance) -> np.ndarray | None: ...


_WORD_SCALE = 2.0**-53


@dataclass(frozen=True)
class ScatterMap(MapModel):
    """Synthetic return map scattering successors over a k-dim manifold.

    Successors are a deterministic hash of (state, push), uniform over a flat
    torus (k circles of circumference `extent`, each in its own coordinate pair)
    or an axis-aligned cube, embedded in `ambient_dim` coordinates.
    """

    model_id: ClassVar[str] = "scatter"

    manifold_dim: int = 3
    ambient_dim: int = 13
    extent: float = 10.0
    shape: str = "torus"
    failure_probability: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.manifold_dim <= 7:
            raise ValueError(f"manifold_dim must be in [1, 7], got {self.manifold_dim}")
        if self.shape not in ("torus", "cube"):
            raise ValueError(f"shape must be 'torus' or 'cube', got {self.shape!r}")
        needed = 2 * self.manifold_dim if self.shape == "torus" else self.manifold_dim
        if self.ambient_dim < needed:
            raise ValueError(f"ambient_dim {self.ambient_dim} too small for a {self.manifold_dim}-d {self.shape}")
        if not 0 <= self.failure_probability <= 1:
            raise ValueError("failure_probability must be in [0, 1]")

    @property
    def section_dim(self) -> int:
        return self.ambient_dim

    def default_section_state(self) -> np.ndarray:
        return np.zeros(self.ambient_dim)

    def return_map(self, coords: np.ndarray, disturbance: Disturbance) -> np.ndarray | None:
        """Successor coordinates, or None for a failure."""
        key = np.ascontiguousarray(coords, dtype="<f8").tobytes() + struct.pack(
            "<dddq", disturbance.magnitude, disturbance.start_time, disturbance.duration, self.seed
        )
        words = np.frombuffer(hashlib.blake2b(key, digest_size=64).digest(), dtype="<u8")
        u = (words >> np.uint64(11)).astype(np.float64) * _WORD_SCALE
        if u[7] < self.failure_probability:
            return None
        k = self.manifold_dim
        out = np.zeros(self.ambient_dim)
        if self.shape == "torus":
            radius = self.extent / (2 * math.pi)
            angles = 2 * math.pi * u[:k]
            out[0 : 2 * k : 2] = radius * np.cos(angles)
            out[1 : 2 * k : 2] = radius * np.sin(angles)
        else:
            out[:k] = self.extent * u[:k]
        return out


MODELS: dict[str, type[DynamicsModel]] = {
    RimlessWheel.model_id: RimlessWheel,
    CompassGait.model_id: CompassGait,
    ScatterMap.model_id: ScatterMap,
}


def make_model(model_id: str, params: dict[str, Any] | None = None) -> DynamicsModel:
    """Instantiate a registered model; unknown ids or parameters raise ValueError."""
    cls = MODELS.get(model_id)
    if cls is None:
        raise ValueError(f"Unknown model id {model_id!r}. Available: {', '.join(sorted(MODELS))}")
    try:
        return cls(**(params or {}))
    except TypeError as e:
        raise ValueError(f"Invalid parameters for model {model_id!r}: {e}")
