"""Capacity-constrained clustering backends."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atlaskv.clustering import (
    balanced_kmeans,
    capacity_assign,
    gmm_balanced,
    kmeans_pp,
    match_capacities,
    random_projection,
    sq_dists,
)


def _cost(centers):
    return lambda y: sq_dists(y, centers)


class TestCapacityAssign:
    def test_exact_sizes(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((100, 3))
        centers = rng.standard_normal((4, 3))
        caps = np.array([10, 40, 25, 25])
        labels = capacity_assign(x, _cost(centers), caps, t=2)
        assert np.bincount(labels, minlength=4).tolist() == caps.tolist()

    def test_unconstrained_is_nearest(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((50, 2))
        centers = rng.standard_normal((3, 2))
        nearest = sq_dists(x, centers).argmin(axis=1)
        caps = np.bincount(nearest, minlength=3)
        assert np.array_equal(capacity_assign(x, _cost(centers), caps), nearest)

    def test_bad_capacity_sum(self):
        with pytest.raises(ValueError):
            capacity_assign(np.zeros((3, 1)), _cost(np.zeros((2, 1))), np.array([1, 1]))

    @settings(max_examples=40, deadline=None)
    @given(
        caps=st.lists(st.integers(1, 12), min_size=1, max_size=8),
        seed=st.integers(0, 10_000),
        t=st.integers(1, 4),
    )
    def test_sizes_property(self, caps, seed, t):
        caps = np.array(caps)
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((caps.sum(), 3))
        labels = capacity_assign(x, _cost(rng.standard_normal((len(caps), 3))), caps, t=t)
        assert np.bincount(labels, minlength=len(caps)).tolist() == caps.tolist()


class TestMatchCapacities:
    def test_largest_to_largest(self):
        perm = match_capacities(np.array([5, 50, 20]), np.array([30, 10, 35]))
        assert np.array([30, 10, 35])[perm].tolist() == [10, 35, 30]

    def test_ties_by_index(self):
        assert match_capacities(np.array([3, 3]), np.array([2, 2])).tolist() == [0, 1]


class TestBackends:
    def test_balanced_kmeans_sizes_and_determinism(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((300, 4)).astype(np.float32)
        caps = np.array([60, 60, 90, 90])
        a, perm = balanced_kmeans(x, caps, np.random.default_rng(7))
        b, _ = balanced_kmeans(x, caps, np.random.default_rng(7))
        assert np.array_equal(a, b)
        assert np.bincount(a, minlength=4).tolist() == caps[perm].tolist()

    def test_separated_groups_recovered(self):
        rng = np.random.default_rng(3)
        centers = np.array([[0, 0], [50, 0], [0, 50]], dtype=np.float32)
        x = np.concatenate([c + rng.standard_normal((20, 2)) for c in centers]).astype(np.float32)
        for fn in (balanced_kmeans, gmm_balanced):
            labels, _ = fn(x, np.array([20, 20, 20]), np.random.default_rng(0))
            for g in range(3):
                assert len(set(labels[g * 20 : (g + 1) * 20].tolist())) == 1

    def test_single_cluster(self):
        x = np.zeros((5, 2), dtype=np.float32)
        assert balanced_kmeans(x, [5], np.random.default_rng(0))[0].tolist() == [0] * 5
        assert gmm_balanced(x, [5], np.random.default_rng(0))[0].tolist() == [0] * 5

    def test_kmeans_pp_distinct_rows(self):
        x = np.concatenate([np.zeros((5, 2)), np.ones((5, 2))]).astype(np.float32)
        c = kmeans_pp(x, 4, np.random.default_rng(0))
        assert c.shape == (4, 2)


class TestProjection:
    def test_narrow_passthrough(self):
        x = np.arange(6, dtype=np.float64).reshape(2, 3)
        assert np.array_equal(random_projection(x, 32, 0), x.astype(np.float32))

    def test_wide_projects(self):
        x = np.random.default_rng(0).standard_normal((10, 100))
        a, b = random_projection(x, 32, 1), random_projection(x, 32, 1)
        assert a.shape == (10, 32) and a.dtype == np.float32
        assert np.array_equal(a, b)
