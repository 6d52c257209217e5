import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from taskfisher.distances import (
    DistanceMatrix,
    d_asym,
    d_cos,
    d_sym,
    distance_matrix,
    transfer_distance,
)
from taskfisher.fisher import Embedding
from taskfisher.numerics import ValidationError, make_rng
from taskfisher.probes import FinetuneOptions, make_probe
from taskfisher.tasks import make_partition_task

vectors = st.lists(st.floats(0.0, 1e3, allow_subnormal=False), min_size=1, max_size=12)


def _pairs():
    return st.integers(1, 12).flatmap(
        lambda n: st.tuples(*[st.lists(st.floats(0.0, 1e3, allow_subnormal=False), min_size=n, max_size=n)] * 2))


def _loop_d_sym(u, v):
    num = nu = nv = 0.0
    any_u = any_v = False
    for a, b in zip(u, v):
        if a + b == 0:
            continue
        any_u, any_v = any_u or a > 0, any_v or b > 0
        x, y = a / (a + b), b / (a + b)
        num += x * y
        nu += x * x
        nv += y * y
    if not (any_u and any_v):
        return 1.0
    return 1.0 - num / math.sqrt(nu * nv)


@given(_pairs())
def test_d_sym_is_symmetric_bounded_and_matches_a_loop(pair):
    u, v = map(np.array, pair)
    assume(np.any(u + v > 0))
    d = d_sym(u, v)
    assert d == d_sym(v, u)
    assert -1e-12 <= d <= 1.0 + 1e-12
    if not np.array_equal(u, v):
        assert d == pytest.approx(_loop_d_sym(u, v), abs=1e-12)


@given(_pairs(), st.floats(1e-3, 1e3))
def test_d_sym_ignores_a_common_scale(pair, c):
    u, v = map(np.array, pair)
    assume(np.any(u + v > 0))
    assert d_sym(c * u, c * v) == pytest.approx(d_sym(u, v), abs=1e-12)


@given(vectors)
def test_d_sym_of_a_vector_with_itself_is_zero(u):
    u = np.array(u)
    assume(np.any(u > 0))
    assert d_sym(u, u) == 0.0


def test_d_sym_of_disjoint_supports_is_one():
    assert d_sym([1.0, 0.0], [0.0, 2.0]) == pytest.approx(1.0)
    assert d_sym([0.0, 0.0], [0.5, 2.0]) == 1.0


def test_d_sym_errors():
    with pytest.raises(ValidationError):
        d_sym([0.0, 0.0], [0.0, 0.0])
    with pytest.raises(ValidationError):
        d_sym([1.0, 2.0], [1.0])
    a = Embedding(np.ones(2), "probe-a", "analytic")
    b = Embedding(np.ones(2), "probe-b", "analytic")
    with pytest.raises(ValidationError):
        d_sym(a, b)


def test_d_cos_by_hand_and_zero_vector():
    assert d_cos([1.0, 0.0], [1.0, 1.0]) == pytest.approx(1 - 1 / math.sqrt(2))
    with pytest.raises(ValidationError):
        d_cos([0.0, 0.0], [1.0, 1.0])


@given(_pairs(), vectors, st.floats(0.0, 1.0))
def test_d_asym_is_d_sym_minus_complexity(pair, t0, alpha):
    u, v = map(np.array, pair)
    t0 = np.resize(np.array(t0), u.size) + 1.0
    assume(np.any(u + v > 0))
    expected = d_sym(u, v) - alpha * d_sym(u, t0)
    assert d_asym(u, v, t0, alpha) == pytest.approx(expected, abs=1e-15)


def test_d_asym_prefers_complex_sources():
    t0 = np.ones(3)
    target = np.array([1.0, 2.0, 3.0])
    simple = np.array([1.0, 1.0, 1.2])
    complex_ = np.array([1.0, 4.0, 9.0])
    assert d_asym(complex_, target, t0) - d_asym(simple, target, t0) < (
        d_sym(complex_, target) - d_sym(simple, target))


def _embs(n=4, seed=0):
    rng = make_rng(seed)
    return [Embedding(rng.random(5), "p", "analytic", task_id=f"t{i}") for i in range(n)]


def test_distance_matrix_entries_and_flags():
    embs = _embs()
    sym = distance_matrix(embs)
    assert sym.symmetric and sym.ids == ["t0", "t1", "t2", "t3"]
    assert sym["t1", "t3"] == d_sym(embs[1], embs[3])
    assert np.all(np.diag(sym.values) == 0)
    t0 = np.full(5, 0.5)
    asym = distance_matrix(embs, "d_asym", t0=t0, alpha=0.2)
    assert not asym.symmetric
    assert asym["t2", "t0"] == pytest.approx(d_asym(embs[2], embs[0], t0, 0.2))
    assert asym.params["alpha"] == 0.2
    cos = distance_matrix(embs, "d_cos", ids=list("abcd"))
    assert cos["a", "b"] == pytest.approx(d_cos(embs[0].values, embs[1].values))


def test_distance_matrix_validates():
    with pytest.raises(ValidationError):
        distance_matrix(_embs(), "euclid")
    with pytest.raises(ValidationError):
        distance_matrix(_embs(), "d_asym")
    with pytest.raises(ValidationError):
        DistanceMatrix(np.array([[0.0, 1.0], [2.0, 0.0]]), ["a", "b"], "d_sym", True)
    with pytest.raises(ValidationError):
        DistanceMatrix(np.zeros((2, 3)), ["a", "b"], "d_sym", True)
    with pytest.raises(ValidationError):
        DistanceMatrix(np.array([[0.0, np.nan], [np.nan, 0.0]]), ["a", "b"], "d_sym", True)


def test_distance_matrix_round_trip(tmp_path):
    m = distance_matrix(_embs(), "d_asym", t0=np.ones(5))
    m.save(tmp_path / "m.csv")
    back = DistanceMatrix.load(tmp_path / "m.csv")
    assert np.array_equal(back.values, m.values)
    assert back.ids == m.ids and back.metric == "d_asym" and not back.symmetric
    assert back.params == m.params


def test_transfer_distance_shapes_and_validation():
    a = make_partition_task(8, 3, seed=0)
    b = make_partition_task(8, 4, seed=1)
    probe = make_probe("two_layer", h=4, input_bias=True)
    opts = FinetuneOptions(epochs=2, epoch_size=64, lr_decay_epoch=1)
    res = transfer_distance(probe, a, b, opts, n_trials=2)
    assert len(res.errors_direct) == len(res.errors_transfer) == 2
    floor = max(res.mean_direct, 1.0 / 32)
    assert res.value == pytest.approx((res.mean_transfer - res.mean_direct) / floor)
    again = transfer_distance(probe, a, b, opts, n_trials=2)
    assert again.value == res.value
    with pytest.raises(ValidationError):
        transfer_distance(probe, a, b, opts, n_trials=1)
    with pytest.raises(ValidationError):
        transfer_distance(make_probe("random_relu", h=3), a, b, opts)
