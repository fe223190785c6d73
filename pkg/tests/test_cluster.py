import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import best_two_partition
from strata import parallel
from strata.cluster import (
    GmmModel,
    LabelMap,
    cluster_levels,
    extract_layer,
    gmm_assign,
    gmm_fit,
    gmm_log_likelihood,
    kmeans_fit,
    kmeans_plusplus,
    render_label_map,
)
from strata.cube_io import SpectralCube
from strata.dimred import ScoreCube
from strata.errors import (
    DimensionMismatch,
    EmptyClusterResolved,
    InvalidClusterId,
    SingularCovariance,
    TooFewPoints,
    TooManyClusters,
)


def blobs(seed=0, n=500):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, 2))
    b = rng.normal(size=(n, 2)) + [20.0, 0.0]
    return np.vstack([a, b]), np.repeat([0, 1], n)


# -- K-means -----------------------------------------------------------------


def test_separated_duplicates():
    x = np.vstack([np.zeros((10, 2)), np.full((10, 2), 10.0)])
    model, labels = kmeans_fit(x, 2, seed=0)
    assert sorted(map(tuple, model.centroids)) == [(0.0, 0.0), (10.0, 10.0)]
    assert model.inertia == 0.0
    assert labels.labels.shape == (1, 20)


def test_single_cluster_closed_form():
    x = np.random.default_rng(1).normal(size=(50, 3))
    model, labels = kmeans_fit(x, 1)
    np.testing.assert_allclose(model.centroids[0], x.mean(axis=0), atol=1e-12)
    assert model.inertia == pytest.approx(((x - x.mean(axis=0)) ** 2).sum(), rel=1e-12)
    assert not labels.labels.any()


def test_six_points_hit_partition_optimum():
    pts = np.random.default_rng(7).normal(size=(6, 2))
    best, checked = best_two_partition(pts)
    assert checked == 31
    model, _ = kmeans_fit(pts, 2, seed=0, restarts=10)
    assert model.inertia == pytest.approx(best, rel=1e-12)


def test_too_many_clusters():
    x = np.vstack([np.zeros((5, 2)), np.ones((5, 2))])
    with pytest.raises(TooManyClusters):
        kmeans_fit(x, 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 6))
def test_lloyd_inertia_never_increases(seed, k):
    x = np.random.default_rng(seed).normal(size=(120, 3))
    model, _ = kmeans_fit(x, k, seed=seed, restarts=2)
    hist = np.array(model.inertia_history)
    assert np.all(hist[1:] <= hist[:-1] * (1 + 1e-12))


def test_ties_go_to_lowest_index():
    from strata.cluster import assign_nearest

    labels, d2 = assign_nearest(np.array([[1.0], [0.0]]), np.array([[2.0], [0.0], [0.0]]))
    # 1.0 is equidistant from all three; 0.0 matches centroids 1 and 2 exactly
    assert labels.tolist() == [0, 1]
    assert d2.tolist() == [1.0, 0.0]


def test_empty_cluster_is_reseeded():
    # two coincident seeds force an empty cluster on the first update
    from strata.cluster import _lloyd

    x = np.array([[0.0], [0.1], [5.0], [5.1], [10.0]])
    init = np.array([[0.0], [0.0], [10.0]])
    with pytest.warns(EmptyClusterResolved):
        cent, labels, _, _ = _lloyd(x, init, 50, 1e-4)
    assert len(np.unique(labels)) == 3


def test_scale_covariance():
    x = np.random.default_rng(9).normal(size=(200, 2))
    m1, l1 = kmeans_fit(x, 3, seed=4)
    m2, l2 = kmeans_fit(x * 3.0, 3, seed=4)
    np.testing.assert_array_equal(l1.labels, l2.labels)
    assert m2.inertia == pytest.approx(9.0 * m1.inertia, rel=1e-10)


def test_kmeans_plusplus_returns_distinct_rows():
    x = np.vstack([np.zeros((20, 2)), np.ones((1, 2))])
    seeds = kmeans_plusplus(x, 2, np.random.default_rng(0))
    assert len({tuple(r) for r in seeds}) == 2


def test_kmeans_is_deterministic_across_threads():
    x = np.random.default_rng(2).normal(size=(40000, 3))
    with parallel.workers(1):
        a, la = kmeans_fit(x, 4, seed=5)
    with parallel.workers(3):
        b, lb = kmeans_fit(x, 4, seed=5)
    assert a.centroids.tobytes() == b.centroids.tobytes()
    np.testing.assert_array_equal(la.labels, lb.labels)


# -- Gaussian mixtures -------------------------------------------------------


def test_gmm_single_component_closed_form():
    x = np.random.default_rng(3).normal(size=(300, 3)) @ [[2, 0, 0], [1, 1, 0], [0, 0, 0.5]]
    g = gmm_fit(x, 1, reg=1e-6)
    np.testing.assert_allclose(g.means[0], x.mean(axis=0), atol=1e-12)
    biased = np.cov(x.T, bias=True) + 1e-6 * np.eye(3)
    np.testing.assert_allclose(g.covariances[0], biased, rtol=1e-10, atol=1e-14)
    assert g.weights[0] == 1.0


def test_gmm_duplicates_give_floor_covariance():
    g = gmm_fit(np.full((10, 2), 3.0), 1, reg=1e-6)
    np.testing.assert_array_equal(g.covariances[0], 1e-6 * np.eye(2))


def test_gmm_two_blobs():
    x, truth = blobs()
    g = gmm_fit(x, 2, seed=0)
    order = np.argsort(g.means[:, 0])
    for j, comp in enumerate(order):
        sample_mean = x[truth == j].mean(axis=0)
        assert np.abs(g.means[comp] - sample_mean).max() < 0.3
        assert abs(g.weights[comp] - 0.5) < 0.05
    labels = gmm_assign(x, g).labels.ravel()
    mapped = np.where(labels == order[0], 0, 1)
    assert (mapped == truth).mean() >= 0.99


def test_gmm_diag_two_blobs():
    x, truth = blobs(seed=1)
    g = gmm_fit(x, 2, covariance="diag", seed=0)
    assert g.covariances.shape == (2, 2)
    assert np.all(np.abs(np.sort(g.means[:, 0]) - [0, 20]) < 0.3)


def test_gmm_invariants():
    x, _ = blobs(seed=2)
    g = gmm_fit(x, 3, seed=1)
    assert abs(g.weights.sum() - 1) < 1e-12
    assert np.all(g.weights > 0)
    for cov in g.covariances:
        np.testing.assert_allclose(cov, cov.T)
        assert np.linalg.eigvalsh(cov).min() >= g.reg * (1 - 1e-9)
    assert g.log_likelihood == pytest.approx(gmm_log_likelihood(x, g), rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([2, 3, 5]),
       st.sampled_from(["full", "diag"]))
def test_em_log_likelihood_never_decreases(seed, k, cov):
    rng = np.random.default_rng(seed)
    x = np.vstack([rng.normal(size=(60, 2)) * rng.random(2) + rng.normal(size=2) * 4
                   for _ in range(3)])
    g = gmm_fit(x, k, covariance=cov, seed=seed)
    assert np.all(np.diff(g.history) >= -1e-9)


def test_too_few_points():
    with pytest.raises(TooFewPoints):
        gmm_fit(np.random.default_rng(0).normal(size=(3, 2)), 3)


def test_singular_without_regularization():
    x = np.vstack([np.zeros((10, 2)), np.ones((10, 2))])
    with pytest.raises(SingularCovariance):
        gmm_fit(x, 2, reg=0.0)


def test_assign_at_component_mean():
    g = GmmModel(np.array([0.5, 0.5]), np.array([[0.0, 0.0], [100.0, 0.0]]),
                 np.stack([np.eye(2)] * 2), "full", 0.0, 0)
    assert gmm_assign(np.array([[100.0, 0.0], [0.0, 0.0]]), g).labels.tolist() == [[1, 0]]


def test_assign_tie_goes_to_lower_index():
    g = GmmModel(np.array([0.5, 0.5]), np.array([[-1.0, 0.0], [1.0, 0.0]]),
                 np.stack([np.eye(2)] * 2), "full", 0.0, 0)
    assert gmm_assign(np.array([[0.0, 0.0]]), g).labels[0, 0] == 0


def test_assign_dimension_mismatch():
    g = gmm_fit(blobs()[0], 2)
    with pytest.raises(DimensionMismatch):
        gmm_assign(np.zeros((4, 3)), g)


def test_gmm_deterministic_for_seed():
    x, _ = blobs(seed=4)
    a = gmm_fit(x, 3, seed=11, restarts=3)
    b = gmm_fit(x, 3, seed=11, restarts=3)
    assert a.means.tobytes() == b.means.tobytes()
    assert a.covariances.tobytes() == b.covariances.tobytes()


def test_score_cube_labels_keep_geometry():
    rng = np.random.default_rng(0)
    scores = ScoreCube(rng.normal(size=(4, 5, 2)))
    _, labels = kmeans_fit(scores, 2)
    assert labels.labels.shape == (4, 5)
    assert gmm_assign(scores, gmm_fit(scores, 2)).labels.shape == (4, 5)


# -- rendering ---------------------------------------------------------------


def test_levels():
    assert cluster_levels(2).tolist() == [0, 255]
    assert cluster_levels(4).tolist() == [0, 85, 170, 255]
    assert cluster_levels(1).tolist() == [0]


def test_render_label_map():
    lm = LabelMap(np.array([[0, 1], [2, 3]]), 4)
    assert render_label_map(lm).pixels.tolist() == [[0, 85], [170, 255]]
    assert not render_label_map(LabelMap(np.zeros((2, 2), int), 1)).pixels.any()


def test_extract_layer_modes():
    lm = LabelMap(np.zeros((3, 3), int), 1)
    assert (extract_layer(None, lm, {0}, "mask").pixels == 255).all()
    assert (extract_layer(None, lm, {0}, "inverse").pixels == 0).all()


def test_extract_checkerboard_complements():
    board = np.indices((4, 4)).sum(axis=0) % 2
    lm = LabelMap(board, 2)
    one = extract_layer(None, lm, {1}).pixels
    zero = extract_layer(None, lm, {0}).pixels
    np.testing.assert_array_equal(one, 255 - zero)


def test_extract_layer_errors():
    lm = LabelMap(np.zeros((2, 2), int), 2)
    with pytest.raises(InvalidClusterId):
        extract_layer(None, lm, {2})
    cube = SpectralCube.from_array(np.ones((1, 3, 3)))
    with pytest.raises(DimensionMismatch):
        extract_layer(cube, lm, {0})


def test_label_map_validation():
    with pytest.raises(ValueError):
        LabelMap(np.array([[0, 2]]), 2)


def test_no_warnings_on_clean_fit():
    x, _ = blobs()
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        kmeans_fit(x, 2, restarts=3)
