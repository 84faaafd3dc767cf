"""Tests for metamesh.geometry."""

import numpy as np
import pytest

from metamesh.geometry import (
    Mesh,
    NearestIndex,
    PoincareState,
    distance_to_mesh,
    estimate_dimension,
    min_pairwise_distance,
    pca_project,
    top_variance_axes,
)


def _mesh(rows, d_tr=0.1, weights=None):
    states = np.vstack([np.zeros((1, len(rows[0]))), np.asarray(rows, dtype=float)])
    return Mesh(states, d_tr, weights=weights)


class TestPoincareState:
    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="finite"):
            PoincareState([1.0, np.nan])

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            PoincareState([])

    def test_equality_is_bitwise(self):
        assert PoincareState([0.1, 0.2]) == PoincareState(np.array([0.1, 0.2]))
        assert PoincareState([0.1, 0.2]) != PoincareState([0.1, 0.2 + 1e-16 * 2])

    def test_coords_read_only(self):
        s = PoincareState([1.0, 2.0])
        with pytest.raises(ValueError):
            s.coords[0] = 5.0


class TestMesh:
    def test_needs_a_walking_state(self):
        with pytest.raises(ValueError, match="failure state"):
            Mesh(np.zeros((1, 2)), 0.1)

    def test_failure_state_has_no_coords(self):
        mesh = _mesh([[1.0, 2.0]])
        with pytest.raises(ValueError, match="failure"):
            mesh.state(0)
        assert mesh.state(1) == PoincareState([1.0, 2.0])

    def test_weights_length_checked(self):
        with pytest.raises(ValueError, match="length"):
            _mesh([[1.0, 2.0]], weights=[1.0])


class TestDistanceToMesh:
    def test_identity(self):
        mesh = _mesh([[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]])
        assert distance_to_mesh([1.0, 1.0], mesh) == (0.0, 2)

    def test_three_four_five(self):
        mesh = _mesh([np.zeros(13)])
        s = np.zeros(13)
        s[:2] = [3.0, 4.0]
        assert distance_to_mesh(s, mesh) == (5.0, 1)

    def test_ties_go_to_lowest_index(self):
        mesh = _mesh([[1.0, 0.0], [-1.0, 0.0]])
        assert distance_to_mesh([0.0, 0.0], mesh) == (1.0, 1)

    def test_dimension_mismatch(self):
        mesh = _mesh([[1.0, 0.0]])
        with pytest.raises(ValueError, match="dim"):
            distance_to_mesh([1.0, 0.0, 0.0], mesh)

    def test_matches_linear_scan(self):
        rng = np.random.default_rng(7)
        rows = rng.normal(size=(500, 13))
        mesh = _mesh(rows)
        for s in rng.normal(size=(100, 13)):
            d = np.sqrt(((rows - s) ** 2).sum(axis=1))
            i = int(np.argmin(d))
            assert distance_to_mesh(s, mesh) == (float(d[i]), i + 1)

    def test_weighted_metric(self):
        mesh = _mesh([[0.0, 0.0]], weights=[1.0, 2.0])
        d, _ = distance_to_mesh([0.0, 1.5], mesh)
        assert d == pytest.approx(3.0)


class TestNearestIndex:
    def test_within_matches_linear_scan_across_rebuilds(self):
        rng = np.random.default_rng(3)
        index = NearestIndex(4, min_tail=16)
        rows = rng.uniform(size=(400, 4))
        for r in rows:
            index.add(r)
        for s in rng.uniform(size=(200, 4)):
            d = np.sqrt(((rows - s) ** 2).sum(axis=1))
            i = int(np.argmin(d))
            hit = index.within(s, 0.2)
            if d[i] > 0.2:
                assert hit is None
            else:
                assert hit == (float(d[i]), i + 1)

    def test_empty(self):
        index = NearestIndex(2)
        assert index.within(np.zeros(2), 1.0) is None
        with pytest.raises(ValueError):
            index.nearest(np.zeros(2))

    def test_indices_start_at_one(self):
        index = NearestIndex(2)
        assert index.add(np.array([1.0, 1.0])) == 1
        assert index.add(np.array([2.0, 2.0])) == 2
        assert len(index) == 2


class TestEstimateDimension:
    def test_large_mesh_table(self):
        fit = estimate_dimension([(0.6, 28757), (0.7, 14891), (0.8, 8517)])
        assert 4.1 <= fit.n_hat <= 4.35
        assert fit.slope == pytest.approx(-fit.n_hat)

    def test_small_mesh_table(self):
        fit = estimate_dimension([(0.5, 1705), (0.6, 857), (0.7, 574)])
        assert 3.1 <= fit.n_hat <= 3.4

    def test_exact_power_law(self):
        fit = estimate_dimension([(0.1, 100000), (0.2, 25000), (0.4, 6250)])
        assert fit.n_hat == pytest.approx(2.0)
        assert fit.r_squared == pytest.approx(1.0)

    def test_two_point_cube_law(self):
        fit = estimate_dimension([(1.0, 1000), (2.0, 125)])
        assert abs(fit.n_hat - 3.0) <= 1e-12

    def test_needs_two_samples(self):
        with pytest.raises(ValueError, match="at least 2"):
            estimate_dimension([(0.5, 10)])

    def test_needs_distinct_thresholds(self):
        with pytest.raises(ValueError, match="distinct"):
            estimate_dimension([(0.5, 10), (0.5, 20)])

    def test_rejects_bad_sample(self):
        with pytest.raises(ValueError, match="Invalid sample"):
            estimate_dimension([(0.5, 10), (-1.0, 20)])


class TestPcaProject:
    def test_rank_two_cloud(self):
        rng = np.random.default_rng(11)
        basis = rng.normal(size=(2, 5))
        states = rng.normal(size=(200, 2)) @ basis
        pca = pca_project(states, 3)
        assert pca.k == 3
        assert pca.variance_explained[2] == pytest.approx(0.0, abs=1e-9)
        assert pca.variance_explained[:2].sum() == pytest.approx(1.0, abs=1e-9)
        assert pca.projected.shape == (200, 3)

    def test_deterministic_sign(self):
        rng = np.random.default_rng(5)
        states = rng.normal(size=(50, 4))
        a = pca_project(states, 2)
        b = pca_project(states.copy(), 2)
        np.testing.assert_array_equal(a.components, b.components)
        for row in a.components:
            assert row[np.argmax(np.abs(row))] > 0

    def test_matches_brute_force_decomposition(self):
        rng = np.random.default_rng(17)
        states = rng.normal(size=(120, 6)) @ rng.normal(size=(6, 6)) + rng.normal(size=6) * 5
        pca = pca_project(states, 4)
        z = (states - states.mean(axis=0)) / states.std(axis=0)
        _, singular, vt = np.linalg.svd(z, full_matrices=False)
        share = singular**2 / (singular**2).sum()
        np.testing.assert_allclose(pca.variance_explained, share[:4], atol=1e-9)
        for row, ref in zip(pca.components, vt[:4]):
            assert abs(float(row @ ref)) == pytest.approx(1.0, abs=1e-9)
        np.testing.assert_allclose(pca.projected, z @ pca.components.T, atol=1e-9)
        np.testing.assert_allclose(pca.components @ pca.components.T, np.eye(4), atol=1e-9)

    def test_single_outlier(self):
        base = np.array([1.0, -2.0, 0.5, 3.0, 7.0])
        offset = np.array([1.0, 2.0, 0.0, 3.0, 0.5])
        states = np.tile(base, (30, 1))
        states[-1] += offset
        pca = pca_project(states, 1)
        expected = offset / pca.scale
        expected /= np.linalg.norm(expected)
        if expected[np.argmax(np.abs(expected))] < 0:
            expected = -expected
        np.testing.assert_allclose(pca.components[0], expected, atol=1e-9)
        assert pca.variance_explained[0] == pytest.approx(1.0, abs=1e-9)

    def test_k_out_of_range(self):
        with pytest.raises(ValueError, match="k must be"):
            pca_project(np.zeros((10, 3)), 4)

    def test_too_few_states(self):
        with pytest.raises(ValueError, match="at least"):
            pca_project(np.ones((2, 3)), 2)


class TestMinPairwiseDistance:
    def test_small_set(self):
        states = np.array([[0.0, 0.0], [3.0, 4.0], [0.0, 1.0]])
        assert min_pairwise_distance(states) == 1.0

    def test_single_row(self):
        assert min_pairwise_distance(np.zeros((1, 2))) == np.inf


class TestTopVarianceAxes:
    def test_orders_by_variance(self):
        rng = np.random.default_rng(2)
        states = rng.normal(size=(200, 4)) * np.array([0.1, 3.0, 1.0, 0.5])
        assert top_variance_axes(states, 2) == [1, 2]
        assert top_variance_axes(states, 3) == [1, 2, 3]

    def test_ties_go_to_lowest_index(self):
        states = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 1.0]])
        assert top_variance_axes(states, 2) == [0, 2]

    def test_k_out_of_range(self):
        with pytest.raises(ValueError, match="k must be"):
            top_variance_axes(np.zeros((3, 2)), 3)
