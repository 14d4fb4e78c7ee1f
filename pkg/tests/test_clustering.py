import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from snpvit.clustering import (
    ClusterAnalysis,
    aggregate,
    analyze,
    appearance_counts,
    diag_sets,
    find_clusters,
    label_histograms,
    matrix_stats,
)
from snpvit.snp import SnpSet

bool_matrices = st.integers(1, 9).flatmap(lambda n: arrays(bool, (n, n)))


def fig3a_matrix():
    n = 20
    b = np.zeros((n, n), bool)
    for block in (range(0, 6), range(6, 14), range(14, 16)):
        b[np.ix_(block, block)] = True
    # one-directional strays, including one between two clusters
    b[0, 7] = b[3, 17] = b[18, 19] = True
    perm = np.random.default_rng(0).permutation(n)
    return b[np.ix_(perm, perm)], perm


def test_fig3a_three_blocks():
    b, perm = fig3a_matrix()
    cs = find_clusters(b)
    st_ = matrix_stats(b, cs)
    assert st_.n_clusters == 3
    assert st_.diag == 16
    assert st_.mean_size == pytest.approx(16 / 3)
    assert st_.n_stray == 3
    sizes = sorted(len(c) for c in cs.clusters)
    assert sizes == [2, 6, 8]


def test_trivial_matrices():
    z = find_clusters(np.zeros((5, 5), bool))
    assert (z.clusters, z.n_stray) == ([], 0)
    eye = find_clusters(np.eye(5, dtype=bool))
    assert eye.clusters == [[i] for i in range(5)] and eye.n_stray == 0
    full = find_clusters(np.ones((5, 5), bool))
    assert full.clusters == [list(range(5))] and full.n_stray == 0


def test_all_stray_when_no_cluster():
    b = np.zeros((4, 4), bool)
    for i, j in [(0, 1), (0, 2), (1, 3), (2, 3), (3, 0)]:
        b[i, j] = True
    cs = find_clusters(b)
    assert cs.clusters == []
    assert matrix_stats(b, cs).n_stray == 5


def test_unknown_rule():
    with pytest.raises(ValueError):
        find_clusters(np.eye(2, dtype=bool), "nearest")


@settings(max_examples=300, deadline=None)
@given(bool_matrices)
def test_stray_conservation(b):
    for rule in ("mutual", "or", "mutual+density"):
        cs = find_clusters(b, rule)
        inside = sum(int(b[np.ix_(c, c)].sum()) for c in cs.clusters)
        assert int(b.sum()) == inside + cs.n_stray


@settings(max_examples=300, deadline=None)
@given(bool_matrices)
def test_clusters_partition_labels(b):
    for rule in ("mutual", "or", "mutual+density"):
        cs = find_clusters(b, rule)
        members = [i for c in cs.clusters for i in c]
        assert len(members) == len(set(members))


@settings(max_examples=300, deadline=None)
@given(bool_matrices)
def test_rule_nesting(b):
    """Every mutual cluster sits inside an 'or' cluster; density keeps a subset."""
    mutual = find_clusters(b, "mutual")
    owner = find_clusters(b, "or").membership(len(b))
    for c in mutual.clusters:
        assert len(set(owner[c])) == 1 and owner[c[0]] >= 0
    dense = find_clusters(b, "mutual+density")
    multi = {tuple(c) for c in mutual.clusters if len(c) > 1}
    assert {tuple(c) for c in dense.clusters if len(c) > 1} <= multi
    assert find_clusters(b, "or").n_stray <= mutual.n_stray


def test_density_rule_drops_sparse_chain():
    b = np.eye(4, dtype=bool)
    for i in range(3):
        b[i, i + 1] = b[i + 1, i] = True
    b[np.diag_indices(4)] = False
    assert find_clusters(b, "mutual").clusters == [[0, 1, 2, 3]]
    assert find_clusters(b, "mutual+density").clusters == []


def test_aggregate_identical_matrices():
    b, _ = fig3a_matrix()
    s = matrix_stats(b, find_clusters(b))
    ls = aggregate([s] * 7, 20, 0.3)
    assert (ls.n_clusters, ls.diag, ls.n, ls.num_matrices) == (3, 16, 3, 7)
    assert ls.cluster_size == pytest.approx(16 / 3)


def test_aggregate_needs_matrices():
    with pytest.raises(ValueError):
        aggregate([], 5, 0.3)


def test_histograms():
    rng = np.random.default_rng(0)
    f = rng.random((6, 5, 5)) + 2 * np.eye(5)[None]
    an = analyze(SnpSet(f, 0.5))
    app, field = label_histograms(an)
    assert app.sum() == sum(s.diag for s in an.stats)
    assert np.array_equal(app, appearance_counts(an.cluster_sets, 5))
    assert len(diag_sets(an)) == 6
    empty = analyze(SnpSet(-np.ones((3, 4, 4)), 0.5))
    app, field = label_histograms(empty)
    assert not app.any() and not field.any()
    assert isinstance(empty, ClusterAnalysis)
