import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import spearmanr

from taskfisher.numerics import (
    EPS,
    KMeansDegenerate,
    NumericalError,
    Optimizer,
    OptimizerConfig,
    ValidationError,
    child_rng,
    cross_entropy,
    finite_diff_hessian_diag,
    kmeans,
    log_softmax,
    make_rng,
    minimize,
    parallel_map,
    pca_project,
    sigmoid,
    softmax,
    spearman,
)

finite = st.floats(min_value=-700, max_value=700, allow_nan=False)


@given(finite)
def test_sigmoid_matches_high_precision(x):
    exact = float(1 / (1 + mpmath.exp(-mpmath.mpf(x))))
    expected = min(max(exact, EPS), 1 - EPS)
    assert sigmoid(x) == pytest.approx(expected, rel=1e-14, abs=1e-300)


@given(finite)
def test_sigmoid_is_symmetric(x):
    assert sigmoid(-x) == pytest.approx(1.0 - sigmoid(x), abs=1e-15)


def test_sigmoid_keeps_shape():
    out = sigmoid(np.zeros((2, 3)))
    assert out.shape == (2, 3)
    assert np.all(out == 0.5)


@given(st.floats(1e-6, 1 - 1e-6), st.integers(0, 1))
def test_cross_entropy_matches_high_precision(p, y):
    mp = mpmath.mpf(p)
    exact = -(y * mpmath.log(mp) + (1 - y) * mpmath.log(1 - mp))
    assert cross_entropy(p, y) == pytest.approx(float(exact), rel=1e-12)


def test_cross_entropy_is_finite_at_the_edges():
    assert math.isfinite(cross_entropy(0.0, 1))
    assert math.isfinite(cross_entropy(1.0, 0))


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-100, 100))
def test_softmax_sums_to_one_and_ignores_shifts(logits, shift):
    p = softmax(logits)
    assert p.sum() == pytest.approx(1.0)
    assert np.allclose(p, softmax(np.asarray(logits) + shift), atol=1e-12)
    assert np.allclose(np.exp(log_softmax(logits)), p, atol=1e-12)


def test_hessian_diag_of_a_quadratic_is_exact():
    a = np.array([[3.0, 1.0, 0.0], [1.0, 2.0, 0.5], [0.0, 0.5, 5.0]])

    def f(w):
        return 0.5 * w @ a @ w + 7.0

    res = finite_diff_hessian_diag(f, np.array([0.3, -0.2, 1.0]), h=1e-3)
    assert np.allclose(res.values, np.diag(a), rtol=1e-6)
    assert not res.rounding_dominated.any()


def test_hessian_diag_flags_tiny_entries():
    # cancellation floor here is about 100 * 4 eps 1e6 / h^2 ~ 9
    res = finite_diff_hessian_diag(lambda w: 1e6 + 1e-12 * w[0] ** 2 + 1e3 * w[1] ** 2, np.zeros(2), h=1e-4)
    assert res.rounding_dominated[0]
    assert not res.rounding_dominated[1]


def test_hessian_diag_rejects_bad_steps_and_nan():
    with pytest.raises(ValidationError):
        finite_diff_hessian_diag(lambda w: 0.0, np.zeros(1), h=0.1)
    with pytest.raises(NumericalError):
        finite_diff_hessian_diag(lambda w: float("nan"), np.zeros(1))


@given(st.integers(0, 10_000), st.integers(2, 6))
def test_kmeans_assigns_every_point_to_its_nearest_center(seed, k):
    rng = make_rng(seed)
    pts = rng.random((60, 2))
    res = kmeans(pts, k, make_rng(seed + 1))
    d = ((pts[:, None, :] - res.centers[None]) ** 2).sum(-1)
    assert res.converged
    assert np.array_equal(res.labels, np.argmin(d, axis=1))
    assert set(res.labels) == set(range(k))
    # Lloyd iterations never increase the inertia
    assert all(b <= a + 1e-12 for a, b in zip(res.inertia_history, res.inertia_history[1:]))


def test_kmeans_validates_k():
    with pytest.raises(ValidationError):
        kmeans(np.zeros((3, 2)), 4, make_rng(0))


def test_kmeans_reports_empty_clusters():
    # duplicate points: farthest-point seeding picks the same location twice
    pts = np.array([[0.0, 0.0]] * 5 + [[1.0, 1.0]])
    with pytest.raises(KMeansDegenerate):
        kmeans(pts, 3, make_rng(0))


@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=30, unique=True),
       st.integers(0, 1000))
def test_spearman_matches_scipy(a, seed):
    b = make_rng(seed).permutation(len(a)).astype(float)
    assert spearman(a, b) == pytest.approx(spearmanr(a, b).statistic, abs=1e-12)


def test_spearman_handles_ties_and_monotone_maps():
    a = np.array([1.0, 2.0, 2.0, 3.0, 5.0])
    b = np.array([0.5, 1.0, 1.0, 4.0, 9.0])
    assert spearman(a, b) == pytest.approx(1.0)
    assert spearman(a, np.exp(b)) == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        spearman([1, 1, 1], [1, 2, 3])


def test_pca_matches_eigendecomposition():
    x = make_rng(3).normal(size=(20, 4)) @ np.diag([5.0, 2.0, 1.0, 0.1])
    proj = pca_project(x, 2)
    xc = x - x.mean(0)
    vals, vecs = np.linalg.eigh(xc.T @ xc)
    top = vecs[:, ::-1][:, :2]
    for i in range(2):
        v = top[:, i] * np.sign(top[np.argmax(np.abs(top[:, i])), i])
        assert np.allclose(proj[:, i], xc @ v, atol=1e-9)


def test_pca_zeroes_degenerate_axes():
    x = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])  # rank one
    proj = pca_project(x, 2)
    assert np.all(proj[:, 1] == 0.0)
    with pytest.raises(ValidationError):
        pca_project(x, 3)


def test_adam_single_step_by_hand():
    cfg = OptimizerConfig("adam", lr=0.1)
    opt = Optimizer(cfg, (2,))
    out = opt.step(np.array([1.0, -1.0]), np.array([0.5, -2.0]))
    # first bias-corrected Adam step moves every coordinate by lr * sign(g)
    assert np.allclose(out, [1.0 - 0.1, -1.0 + 0.1], atol=1e-7)


def test_sgd_momentum_by_hand():
    opt = Optimizer(OptimizerConfig("sgd", lr=0.5, momentum=0.5, weight_decay=0.1), (1,))
    x = opt.step(np.array([2.0]), np.array([1.0]))  # g = 1 + 0.2, m = 1.2
    assert x[0] == pytest.approx(2.0 - 0.6)
    x = opt.step(x, np.array([1.0]))  # g = 1 + 0.14, m = 0.6 + 1.14
    assert x[0] == pytest.approx(1.4 - 0.5 * 1.74)


def test_minimize_finds_quadratic_minimum():
    target = np.array([1.0, -2.0, 0.5])
    x, gnorm, _ = minimize(lambda x: 2 * (x - target), np.zeros(3), OptimizerConfig("adam", lr=0.05),
                           max_iter=20_000, gtol=1e-7)
    assert gnorm < 1e-7
    assert np.allclose(x, target, atol=1e-7)


def test_optimizer_validates():
    with pytest.raises(ValidationError):
        Optimizer(OptimizerConfig("lbfgs"), (1,))
    with pytest.raises(ValidationError):
        Optimizer(OptimizerConfig(), (2,)).step(np.zeros(2), np.zeros(3))


def test_rng_streams_are_reproducible_and_independent():
    assert np.array_equal(make_rng(5).random(4), make_rng(5).random(4))
    assert np.array_equal(make_rng((5, 1)).random(4), make_rng((5, 1)).random(4))
    assert not np.array_equal(make_rng((5, 1)).random(4), make_rng((5, 2)).random(4))
    a, b = child_rng(make_rng(0), 2)
    assert not np.array_equal(a.random(4), b.random(4))


def _square(x):
    return x * x


def test_parallel_map_keeps_input_order():
    items = list(range(10))
    assert parallel_map(_square, items, jobs=3) == [i * i for i in items]
    assert parallel_map(_square, items, jobs=1) == parallel_map(_square, items, jobs=2)
