"""Push disturbances and the probability profiles defined over them."""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

from .utils import digest

PROBABILITY_TOL = 1e-12


@dataclass(frozen=True)
class Disturbance:
    """A horizontal push on the target body, applied on [start_time, start_time + duration)."""

    magnitude: float = 0.0  # N, positive = forward
    start_time: float = 0.0  # s into the gait cycle
    duration: float = 0.0  # s
    target: str = "body"

    def __post_init__(self) -> None:
        for name in ("magnitude", "start_time", "duration"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"Disturbance {name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        if self.duration < 0:
            raise ValueError(f"Disturbance duration must be >= 0, got {self.duration}")
        if self.start_time < 0:
            raise ValueError(f"Disturbance start_time must be >= 0, got {self.start_time}")

    @property
    def is_null(self) -> bool:
        return self.magnitude == 0.0

    @property
    def end_time(self) -> float:
        return self.start_time + self.duration

    def force_at(self, t: float) -> float:
        if self.start_time <= t < self.end_time:
            return self.magnitude
        return 0.0

    def as_dict(self) -> dict:
        return {
            "magnitude": self.magnitude,
            "start_time": self.start_time,
            "duration": self.duration,
            "target": self.target,
        }


NULL_PUSH = Disturbance()


def disturbance_digest(disturbances: Iterable[Disturbance]) -> str:
    """Digest of the disturbance axis (pushes only, no probabilities)."""
    return digest([d.as_dict() for d in disturbances])


@dataclass(frozen=True)
class DisturbanceProfile:
    """Finite push set with a probability distribution; index 0 is the null push."""

    disturbances: tuple[Disturbance, ...]
    probabilities: tuple[float, ...]

    def __post_init__(self) -> None:
        pushes = tuple(self.disturbances)
        probs = tuple(float(p) for p in self.probabilities)
        if not pushes:
            raise ValueError("A disturbance profile needs at least one disturbance")
        if len(pushes) != len(probs):
            raise ValueError(
                f"Profile has {len(pushes)} disturbances but {len(probs)} probabilities"
            )
        if not pushes[0].is_null:
            raise ValueError("Disturbance 0 must be the null push (magnitude 0)")
        if any(not math.isfinite(p) or p < 0 for p in probs):
            raise ValueError(f"Probabilities must be finite and >= 0, got {list(probs)}")
        total = math.fsum(probs)
        if abs(total - 1.0) > PROBABILITY_TOL:
            raise ValueError(f"Probabilities must sum to 1, got {total!r}")
        object.__setattr__(self, "disturbances", pushes)
        object.__setattr__(self, "probabilities", probs)

    def __len__(self) -> int:
        return len(self.disturbances)

    @property
    def axis_digest(self) -> str:
        return disturbance_digest(self.disturbances)

    def digest(self) -> str:
        return digest(
            {"disturbances": [d.as_dict() for d in self.disturbances], "probabilities": list(self.probabilities)}
        )

    def with_probabilities(self, probabilities: Sequence[float]) -> DisturbanceProfile:
        return DisturbanceProfile(self.disturbances, tuple(probabilities))

    @classmethod
    def null_only(cls) -> DisturbanceProfile:
        return cls((NULL_PUSH,), (1.0,))

    @classmethod
    def null_weighted(cls, disturbances: Sequence[Disturbance], p_null: float) -> DisturbanceProfile:
        """`p_null` on the null push, the rest split evenly over the pushes."""
        k = len(disturbances) - 1
        if k == 0:
            return cls(tuple(disturbances), (1.0,))
        rest = (1.0 - p_null) / k
        return cls(tuple(disturbances), (p_null,) + (rest,) * k)

    @classmethod
    def focused(
        cls,
        disturbances: Sequence[Disturbance],
        index: int,
        p_null: float = 0.4,
        p_interest: float = 0.5,
    ) -> DisturbanceProfile:
        """One disturbance of interest; the remainder is split evenly over the other pushes.

        With a single push the remainder goes to the disturbance of interest.
        """
        n = len(disturbances)
        if not 1 <= index < n:
            raise ValueError(f"Disturbance of interest must be in [1, {n - 1}], got {index}")
        if p_null < 0 or p_interest < 0 or p_null + p_interest > 1.0 + PROBABILITY_TOL:
            raise ValueError(f"Invalid weights p_null={p_null}, p_interest={p_interest}")
        others = n - 2
        remainder = max(0.0, 1.0 - p_null - p_interest)
        probs = [0.0] * n
        probs[0] = p_null
        if others == 0:
            probs[index] = 1.0 - p_null
        else:
            probs[index] = p_interest
            share = remainder / others
            for j in range(1, n):
                if j != index:
                    probs[j] = share
        return cls(tuple(disturbances), tuple(probs))

    @classmethod
    def push_chance(
        cls,
        disturbances: Sequence[Disturbance],
        p_push: float,
        allowed: Iterable[int] | None = None,
    ) -> DisturbanceProfile:
        """A per-cycle push chance, the push type drawn uniformly from `allowed`."""
        n = len(disturbances)
        allowed_set = set(range(1, n)) if allowed is None else set(allowed)
        if not allowed_set or any(not 1 <= j < n for j in allowed_set):
            raise ValueError(f"Allowed pushes must be a non-empty subset of [1, {n - 1}]")
        if not 0 <= p_push <= 1:
            raise ValueError(f"p_push must be in [0, 1], got {p_push}")
        share = p_push / len(allowed_set)
        probs = [share if j in allowed_set else 0.0 for j in range(n)]
        probs[0] = 1.0 - p_push
        return cls(tuple(disturbances), tuple(probs))
