import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import special_ortho_group

from vraead.autograd import ContractError
from vraead.baselines import HbosDetector, baseline_detect, knn_fit, pca_fit


def test_knn_duplicate_point_scores_zero():
    pts = np.vstack([np.tile([1.0, 2.0], (5, 1)), np.random.default_rng(0).normal(size=(20, 2))])
    assert knn_fit(pts, k=5).score(np.array([1.0, 2.0])) == 0.0


def test_knn_hand_distance():
    assert knn_fit(np.array([0.0, 10.0]), k=1).score(np.array([[4.0]]))[0] == 4.0


def test_knn_k_must_be_below_n():
    with pytest.raises(ContractError):
        knn_fit(np.zeros((5, 2)), k=5)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 8))
def test_knn_matches_brute_force(seed, k):
    rng = np.random.default_rng(seed)
    train, query = rng.normal(size=(40, 3)), rng.normal(size=(15, 3))
    dists = np.linalg.norm(query[:, None, :] - train[None, :, :], axis=2)
    oracle = np.sort(dists, axis=1)[:, k - 1]
    np.testing.assert_allclose(knn_fit(train, k).score(query), oracle, rtol=1e-12, atol=1e-12)


def test_knn_rigid_motion_invariance():
    rng = np.random.default_rng(1)
    train, query = rng.normal(size=(100, 4)), rng.normal(size=(30, 4))
    R = special_ortho_group.rvs(4, random_state=2)
    shift = rng.normal(size=4) * 10
    a = knn_fit(train, 5).score(query)
    b = knn_fit(train @ R.T + shift, 5).score(query @ R.T + shift)
    np.testing.assert_allclose(a, b, rtol=1e-9)


def test_pca_line_and_orthogonal_offset():
    t = np.linspace(-5, 5, 50)
    direction = np.array([3.0, 4.0]) / 5
    pts = t[:, None] * direction + np.array([1.0, -2.0])
    model = pca_fit(pts, m=1)
    assert np.max(model.score(pts)) < 1e-12
    normal = np.array([-4.0, 3.0]) / 5
    off = pts[10] + 2.0 * normal
    assert model.score(off[None])[0] == pytest.approx(2.0, abs=1e-12)


def test_pca_matches_dense_eigensolver_oracle():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(300, 4)) @ rng.normal(size=(4, 4))
    model = pca_fit(X, m=2)
    np.testing.assert_allclose(model.axes.T @ model.axes, np.eye(2), atol=1e-10)
    cov = (X - X.mean(0)).T @ (X - X.mean(0)) / (len(X) - 1)
    w, v = np.linalg.eig(cov)
    top = v[:, np.argsort(-w.real)[:2]].real
    P = top @ np.linalg.inv(top.T @ top) @ top.T
    Q = rng.normal(size=(20, 4)) * 3
    c = Q - X.mean(0)
    oracle = np.linalg.norm(c - c @ P, axis=1)
    np.testing.assert_allclose(model.score(Q), oracle, rtol=1e-9)


def test_pca_full_rank_residual_zero():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(50, 3)) @ np.array([[1.0, 0, 0], [0, 2, 0], [0, 0, 0]])   # rank 2
    assert np.max(pca_fit(X, m=2).score(X)) < 1e-12


def test_pca_zero_variance_dim_gets_no_loading():
    rng = np.random.default_rng(5)
    X = np.c_[rng.normal(size=100), np.full(100, 3.0), rng.normal(size=100)]
    model = pca_fit(X, m=2)
    assert np.all(model.axes[1] == 0)
    np.testing.assert_allclose(model.axes.T @ model.axes, np.eye(2), atol=1e-10)


def test_pca_default_components_leave_residual():
    X = np.random.default_rng(6).normal(size=(500, 5))
    model = pca_fit(X)
    assert 1 <= model.m <= 4


def test_pca_preconditions():
    with pytest.raises(ContractError):
        pca_fit(np.zeros((10, 2)), m=3)


def test_baseline_detect_counts_and_ties():
    s = np.random.default_rng(0).normal(size=4000)
    assert baseline_detect(s, 0.2).sum() == 800
    flags = baseline_detect(np.zeros(10), 0.3)
    assert np.flatnonzero(flags).tolist() == [0, 1, 2]
    with pytest.raises(ValueError):
        baseline_detect(s, 1.0)


@settings(max_examples=40, deadline=None)
@given(scores=st.lists(st.integers(-5, 5), min_size=1, max_size=60), c=st.floats(0.01, 0.99))
def test_baseline_detect_matches_sort_oracle(scores, c):
    flags = baseline_detect(np.array(scores, dtype=float), c)
    n = int(np.ceil(c * len(scores) - 1e-9))
    oracle = sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:n]
    assert np.flatnonzero(flags).tolist() == sorted(oracle)


def test_scorers_are_deterministic():
    rng = np.random.default_rng(7)
    X, Q = rng.normal(size=(200, 3)), rng.normal(size=(50, 3))
    for make in (lambda: knn_fit(X, 5).score(Q), lambda: pca_fit(X, 2).score(Q),
                 lambda: HbosDetector(10).fit(X).score(Q)):
        np.testing.assert_array_equal(make(), make())
