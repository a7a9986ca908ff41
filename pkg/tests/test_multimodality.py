import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridpf import multimodality as M
from hybridpf.core import ParticleSet

A = [1, 1, 1, 1, 2, 3]
B = [1, 1, 2, 2, 3, 3]


def blobs(k=4, per=50, sep=10.0, seed=0):
    rng = np.random.default_rng(seed)
    means = sep * np.eye(k, max(k, 2))[:, :2] if k <= 2 else \
        sep * np.stack([np.cos(2 * np.pi * np.arange(k) / k), np.sin(2 * np.pi * np.arange(k) / k)], 1)
    X = np.concatenate([m + 0.3 * rng.standard_normal((per, 2)) for m in means])
    return X, means


# -- k-means -------------------------------------------------------------------------


def test_kmeans_recovers_blobs():
    X, means = blobs(4, sep=10.0)
    sep = min(np.linalg.norm(a - b) for a, b in itertools.combinations(means, 2))
    C = M.kmeans_fit(X, 4, seed=0).centers
    for m in means:
        assert np.min(np.linalg.norm(C - m, axis=1)) < 0.1 * sep


def test_kmeans_single_cluster_is_mean():
    X, _ = blobs()
    assert np.allclose(M.kmeans_fit(X, 1).centers[0], X.mean(axis=0))


def test_kmeans_k_equals_n_zero_inertia():
    X = np.random.default_rng(1).normal(size=(12, 3))
    assert M.kmeans_fit(X, 12).inertia_history[-1] == 0.0


def test_kmeans_inertia_nonincreasing_and_deterministic():
    X = np.random.default_rng(2).normal(size=(500, 3))
    a, b = M.kmeans_fit(X, 20, seed=3), M.kmeans_fit(X, 20, seed=3)
    assert np.all(np.diff(a.inertia_history) <= 1e-9)
    assert np.array_equal(a.centers, b.centers)
    assert len({tuple(c) for c in a.centers}) == 20


def test_kmeans_too_few_distinct_points():
    with pytest.raises(ValueError, match="distinct"):
        M.kmeans_fit(np.zeros((10, 2)), 2)


def test_assign_ties_lowest_index():
    cm = M.ClusterModel(np.array([[-1.0], [1.0]]))
    assert cm.assign([[0.0]])[0] == 0


# -- associations and weights -----------------------------------------------------------


def test_paper_index_lists():
    ta, tb = M.table_from_indices(A), M.table_from_indices(B)
    assert ta.total == 6 and ta.n == 3 and sorted(ta.assoc.values()) == [1, 1, 4]
    assert sorted(tb.assoc.values()) == [2, 2, 2]


def test_weight_examples():
    ta = M.table_from_indices(A)
    H = -(4 / 6 * math.log(4 / 6) + 2 / 6 * math.log(1 / 6))
    assert H == pytest.approx(0.8676, abs=1e-4)
    assert M.association_weight(ta) == pytest.approx(4.762, abs=1e-3)
    assert M.association_weight(M.table_from_indices(B)) == pytest.approx(6.0, abs=1e-3)
    assert M.association_weight(M.table_from_indices([7] * 9)) == pytest.approx(9.0)


def test_single_input_single_output():
    X = np.zeros((5, 1)) + np.arange(5)[:, None] * 1e-3
    cm = M.ClusterModel(np.array([[0.0]]))
    tables = M.build_associations(X, X, cm, cm)
    assert len(tables) == 1 and tables[0].n == 1


def test_build_associations_mismatch():
    cm = M.ClusterModel(np.array([[0.0]]))
    with pytest.raises(ValueError, match="mismatch"):
        M.build_associations(np.zeros((3, 1)), np.zeros((2, 1)), cm, cm)


def test_build_associations_counts():
    inm = M.ClusterModel(np.array([[0.0], [10.0]]))
    outm = M.ClusterModel(np.array([[0.0], [1.0], [2.0]]))
    x = np.array([0, 0, 0, 0, 0, 0, 10, 10.0])[:, None]
    y = np.array([0, 0, 0, 0, 1, 2, 2, 2.0])[:, None]
    t0, t1 = M.build_associations(x, y, inm, outm)
    assert t0.assoc == {0: 4, 1: 1, 2: 1} and t1.assoc == {2: 2}


def _compositions(total, parts):
    for cuts in itertools.combinations(range(1, total), parts - 1):
        b = (0,) + cuts + (total,)
        yield [b[i + 1] - b[i] for i in range(parts)]


def test_uniform_maximises_weight_by_enumeration():
    for N in range(2, 9):
        for n in range(2, N + 1):
            ws = {tuple(c): M.association_weight(M.table_from_indices(
                np.repeat(np.arange(n), c))) for c in _compositions(N, n)}
            best = max(ws.values())
            for c, w in ws.items():
                assert 0 < w <= N + 1e-12
                if len(set(c)) == 1:
                    assert w == pytest.approx(N) and w == pytest.approx(best)
                else:
                    assert w < N


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 20), min_size=1, max_size=8))
def test_weight_range(counts):
    t = M.AssociationTable(0, {i: c for i, c in enumerate(counts)})
    h = M.association_weight(t)
    assert 0 < h <= sum(counts) + 1e-9


# -- histogram ----------------------------------------------------------------------------


def test_histogram_examples():
    h = M.histogram([M.table_from_indices(A)])
    assert list(h.bins) == [3]
    # uniform two-way tables with N=3 and N=5 carry h=3 and h=5
    two = [M.AssociationTable(0, {0: 1, 1: 2}), M.AssociationTable(1, {0: 2, 1: 3})]
    hs = [t.h for t in two]
    assert M.histogram(two).bins[2] == pytest.approx(sum(hs))
    uni = [M.AssociationTable(0, {0: 1.5, 1: 1.5}), M.AssociationTable(1, {0: 2.5, 1: 2.5})]
    assert [t.h for t in uni] == pytest.approx([3, 5])
    assert M.histogram(uni).bins == pytest.approx({2: 8.0})
    with pytest.raises(ValueError):
        M.histogram([])


def test_histogram_bins_sum_to_weights_and_csv():
    rng = np.random.default_rng(4)
    tables = [M.table_from_indices(rng.integers(0, 4, rng.integers(1, 9)), i) for i in range(30)]
    h = M.histogram(tables)
    assert h.total == pytest.approx(sum(t.h for t in tables))
    assert all(v >= 0 for v in h.bins.values())
    lines = h.to_csv().splitlines()
    assert lines[0] == "bin,n,weight" and len(lines) == len(h.bins) + 1


# -- coverage ----------------------------------------------------------------------------------


@pytest.fixture
def a_case():
    out = M.ClusterModel(np.array([[0.0], [10.0], [20.0], [30.0]]))
    table = M.AssociationTable(0, {0: 4, 1: 1, 2: 1})
    return [table], out


def test_coverage_examples(a_case):
    tables, out = a_case
    assert M.coverage_ratio(tables, 0, np.array([[0.0], [10.0], [20.0]]), out) == 1.0
    assert M.coverage_ratio(tables, 0, np.array([[0.1], [-0.2]]), out) == pytest.approx(4 / 6)
    assert M.coverage_ratio(tables, 0, np.array([[30.0]]), out) == 0.0


def test_coverage_empty_table_flag(a_case):
    tables, out = a_case
    assert M.coverage_ratio(tables, 5, np.array([[0.0]]), out, return_flag=True) == (1.0, True)


def test_coverage_input_vector_and_particle_set(a_case):
    tables, out = a_case
    inm = M.ClusterModel(np.array([[0.0], [5.0]]))
    ps = ParticleSet.uniform(np.array([[0.0], [10.0]]))
    assert M.coverage_ratio(tables, [0.3], ps, out, in_model=inm) == pytest.approx(5 / 6)
    with pytest.raises(ValueError):
        M.coverage_ratio(tables, [0.3], ps, out)


def test_coverage_monotone_in_particles(a_case):
    tables, out = a_case
    rng = np.random.default_rng(5)
    pts = rng.uniform(-5, 35, (40, 1))
    r = [M.coverage_ratio(tables, 0, pts[:i], out) for i in range(1, 41)]
    assert np.all(np.diff(r) >= 0)


def test_coverage_csv():
    assert M.coverage_csv([1.0, 0.5]).splitlines() == ["step,ratio", "0,1.0", "1,0.5"]
