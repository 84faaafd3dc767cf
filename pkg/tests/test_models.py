"""Tests for metamesh.models."""

import math

import numpy as np
import pytest

from metamesh.disturbances import NULL_PUSH, Disturbance
from metamesh.dynamics import rk4_step
from metamesh.models import CompassGait, RimlessWheel, ScatterMap, make_model


def _energy_drift(model, x, steps=200, dt=0.001):
    e0 = model.energy(x)
    f = lambda s: model.derivatives(s, np.zeros(model.n_actuators), 0.0)  # noqa: E731
    for _ in range(steps):
        x = rk4_step(f, x, dt)
    return abs(model.energy(x) - e0)


class TestMakeModel:
    def test_known_ids(self):
        assert isinstance(make_model("rimless_wheel"), RimlessWheel)
        assert isinstance(make_model("compass_gait", {"slope": 0.05}), CompassGait)
        assert isinstance(make_model("scatter"), ScatterMap)

    def test_unknown_id(self):
        with pytest.raises(ValueError, match="Unknown model id"):
            make_model("biped13")

    def test_unknown_param(self):
        with pytest.raises(ValueError, match="Invalid parameters"):
            make_model("rimless_wheel", {"spokes": 8})

    def test_params_round_trip(self):
        model = make_model("rimless_wheel", {"slope": 0.1})
        assert make_model("rimless_wheel", model.params()) == model


class TestRimlessWheel:
    def test_defaults(self):
        w = RimlessWheel()
        assert (w.mass, w.leg_length, w.n_spokes, w.slope) == (10.0, 1.0, 8, 0.15)
        assert w.alpha == pytest.approx(math.pi / 8)

    def test_needs_three_spokes(self):
        with pytest.raises(ValueError, match="3 spokes"):
            RimlessWheel(n_spokes=2)

    def test_fixed_point_is_fixed(self):
        w = RimlessWheel()
        omega = w.fixed_point_speed()
        assert w.step_map(omega) == pytest.approx(omega, rel=1e-12)

    def test_step_map_rolls_back_below_pass_speed(self):
        w = RimlessWheel()
        assert w.step_map(0.9 * w.pass_speed()) is None
        assert w.step_map(1.1 * w.pass_speed()) is not None

    def test_impact_map(self):
        w = RimlessWheel()
        post = w.impact_map(np.array([w.slope + w.alpha, 2.0]))
        assert post[0] == pytest.approx(w.slope - w.alpha)
        assert post[1] == pytest.approx(2.0 * math.cos(2 * w.alpha))

    def test_energy_conserved_between_impacts(self):
        w = RimlessWheel()
        assert _energy_drift(w, w.default_section_state()) < 1e-8

    def test_push_accelerates_hub(self):
        w = RimlessWheel()
        x = np.array([0.0, 1.0])
        assert w.derivatives(x, np.zeros(0), 10.0)[1] == pytest.approx(1.0)

    def test_contact_lost_at_high_speed(self):
        w = RimlessWheel()
        assert w.contact_lost(np.array([0.0, 3.5]))
        assert not w.contact_lost(np.array([0.0, 1.0]))


class TestCompassGait:
    def test_energy_conserved_between_impacts(self):
        cg = CompassGait()
        x = cg.default_section_state()
        assert _energy_drift(cg, x) < 1e-6 * abs(cg.energy(x))

    def test_impact_swaps_legs_and_loses_energy(self):
        cg = CompassGait()
        q1 = 0.25
        x = np.array([q1, q1 - 2 * cg.slope, 1.2, 0.3])
        assert cg.impact_function(x) == pytest.approx(0.0, abs=1e-12)
        post = cg.impact_map(x)
        assert post[:2].tolist() == [-x[1], -x[0]]
        assert cg.kinetic_energy(post) <= cg.kinetic_energy(x) + 1e-12

    def test_impact_disabled_while_legs_together(self):
        cg = CompassGait()
        assert not cg.impact_enabled(np.array([0.02, 0.02, 0.0, 0.0]))
        assert cg.impact_enabled(np.array([0.2, 0.1, 0.0, 0.0]))

    def test_pd_torque(self):
        cg = CompassGait()
        x = np.array([0.1, -0.1, 1.0, 0.5])
        u = cg.pd_torque(x, {"kp": 10.0, "kd": 2.0, "offset": 0.05})
        assert u[0] == pytest.approx(10.0 * 0.25 + 2.0 * 0.5)

    def test_rejects_non_positive_mass(self):
        with pytest.raises(ValueError):
            CompassGait(hip_mass=0.0)


class TestScatterMap:
    def test_deterministic(self):
        m = ScatterMap()
        x = np.arange(13, dtype=float)
        push = Disturbance(1.0)
        np.testing.assert_array_equal(m.return_map(x, push), m.return_map(x.copy(), push))

    def test_push_changes_successor(self):
        m = ScatterMap()
        x = np.zeros(13)
        assert not np.array_equal(m.return_map(x, NULL_PUSH), m.return_map(x, Disturbance(1.0)))

    def test_successors_on_torus(self):
        m = ScatterMap(manifold_dim=3, ambient_dim=13, extent=10.0)
        radius = 10.0 / (2 * math.pi)
        y = m.return_map(np.zeros(13), NULL_PUSH)
        for j in range(3):
            assert math.hypot(y[2 * j], y[2 * j + 1]) == pytest.approx(radius)
        assert np.all(y[6:] == 0.0)

    def test_cube(self):
        m = ScatterMap(manifold_dim=2, ambient_dim=4, shape="cube", extent=2.0)
        y = m.return_map(np.ones(4), NULL_PUSH)
        assert np.all((0 <= y[:2]) & (y[:2] < 2.0))
        assert np.all(y[2:] == 0.0)

    def test_certain_failure(self):
        m = ScatterMap(failure_probability=1.0)
        assert m.return_map(np.zeros(13), NULL_PUSH) is None

    def test_ambient_too_small(self):
        with pytest.raises(ValueError, match="too small"):
            ScatterMap(manifold_dim=4, ambient_dim=7)

    def test_manifold_dim_range(self):
        with pytest.raises(ValueError, match="manifold_dim"):
            ScatterMap(manifold_dim=0)
