"""Tests for metamesh.disturbances."""

import math

import pytest

from metamesh.disturbances import NULL_PUSH, Disturbance, DisturbanceProfile, disturbance_digest

PUSHES = (
    NULL_PUSH,
    Disturbance(30.0, 0.1, 0.1),
    Disturbance(-30.0, 0.1, 0.1),
    Disturbance(-60.0, 0.2, 0.1),
)


class TestDisturbance:
    def test_force_window_is_half_open(self):
        d = Disturbance(10.0, 0.1, 0.2)
        assert d.force_at(0.05) == 0.0
        assert d.force_at(0.1) == 10.0
        assert d.force_at(0.29) == 10.0
        assert d.force_at(d.end_time) == 0.0

    def test_null(self):
        assert NULL_PUSH.is_null
        assert not Disturbance(1.0).is_null

    def test_rejects_negative_duration(self):
        with pytest.raises(ValueError, match="duration"):
            Disturbance(1.0, 0.0, -0.1)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="finite"):
            Disturbance(math.inf)

    def test_digest_ignores_probabilities(self):
        a = DisturbanceProfile(PUSHES, (0.4, 0.2, 0.2, 0.2))
        b = DisturbanceProfile(PUSHES, (0.8, 0.1, 0.05, 0.05))
        assert a.axis_digest == b.axis_digest == disturbance_digest(PUSHES)
        assert a.digest() != b.digest()


class TestDisturbanceProfile:
    def test_probabilities_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum to 1"):
            DisturbanceProfile(PUSHES, (0.3, 0.2, 0.2, 0.2))

    def test_first_push_must_be_null(self):
        with pytest.raises(ValueError, match="null push"):
            DisturbanceProfile((Disturbance(1.0),), (1.0,))

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="probabilities"):
            DisturbanceProfile(PUSHES, (1.0,))

    def test_negative_probability(self):
        with pytest.raises(ValueError, match=">= 0"):
            DisturbanceProfile(PUSHES[:2], (1.5, -0.5))

    def test_null_only(self):
        p = DisturbanceProfile.null_only()
        assert len(p) == 1
        assert p.probabilities == (1.0,)

    def test_null_weighted(self):
        p = DisturbanceProfile.null_weighted(PUSHES, 0.4)
        assert p.probabilities[0] == 0.4
        assert p.probabilities[1] == pytest.approx(0.2)

    def test_focused_weights(self):
        p = DisturbanceProfile.focused(PUSHES, 2, 0.4, 0.5)
        assert p.probabilities[0] == 0.4
        assert p.probabilities[2] == 0.5
        assert p.probabilities[1] == pytest.approx(0.05)
        assert p.probabilities[3] == pytest.approx(0.05)

    def test_focused_single_push_takes_remainder(self):
        p = DisturbanceProfile.focused(PUSHES[:2], 1, 0.8, 0.1)
        assert p.probabilities == (0.8, pytest.approx(0.2))

    def test_focused_index_range(self):
        with pytest.raises(ValueError, match="interest"):
            DisturbanceProfile.focused(PUSHES, 0)

    def test_push_chance(self):
        p = DisturbanceProfile.push_chance(PUSHES, 0.6, [1, 3])
        assert p.probabilities == (pytest.approx(0.4), 0.3, 0.0, 0.3)

    def test_push_chance_rejects_null_index(self):
        with pytest.raises(ValueError, match="subset"):
            DisturbanceProfile.push_chance(PUSHES, 0.5, [0])
