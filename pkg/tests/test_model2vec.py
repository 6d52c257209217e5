import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from taskfisher.distances import d_asym, d_sym
from taskfisher.model2vec import (
    ErrorMatrix,
    Model2VecHyper,
    ModelEmbedding,
    _dsym_batch,
    _loss_and_grad,
    leave_one_out,
    load_registry,
    model_distances,
    predict_distribution,
    registry_from_dict,
    registry_to_dict,
    save_registry,
    select_expert,
    soft_labels,
    train_model2vec,
)
from taskfisher.numerics import ValidationError, make_rng


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=10), st.floats(0.1, 50.0))
def test_soft_labels_are_a_distribution_favouring_low_error(errors, alpha_s):
    q = soft_labels(errors, alpha_s)
    assert q.sum() == pytest.approx(1.0)
    assert np.all(q >= 0)
    e = np.asarray(errors)
    order = np.argsort(e, kind="stable")
    assert np.all(np.diff(q[order]) <= 1e-12 + 1e-9 * q[order][:-1])


def test_soft_labels_of_a_constant_row_are_uniform():
    assert np.allclose(soft_labels([0.2, 0.2, 0.2]), 1 / 3)
    with pytest.raises(ValidationError):
        soft_labels([])


def test_batched_d_sym_matches_the_scalar_version():
    rng = make_rng(0)
    a = rng.random((4, 6))
    b = rng.random((4, 6))
    a[0, 2] = b[0, 2] = 0.0  # a dropped entry
    d, _ = _dsym_batch(a, b)
    assert np.allclose(d, [d_sym(x, y) for x, y in zip(a, b)], atol=1e-14)


def test_batched_d_sym_gradient_matches_finite_differences():
    rng = make_rng(1)
    a = rng.random(6) + 0.1
    b = rng.random(6)
    b[3] = 0.0
    _, g = _dsym_batch(a, b)
    eps = 1e-7
    num = np.zeros_like(a)
    for k in range(a.size):
        up, down = a.copy(), a.copy()
        up[k] += eps
        down[k] -= eps
        num[k] = (d_sym(up, b) - d_sym(down, b)) / (2 * eps)
    assert np.allclose(g, num, atol=1e-7)


def test_batched_d_sym_of_a_dead_row_is_one_with_zero_gradient():
    d, g = _dsym_batch(np.zeros(3), np.array([0.2, 0.5, 1.0]))
    assert d == 1.0 and np.all(g == 0)


def _problem(seed=0, n_t=5, n_e=3, g=4):
    rng = make_rng(seed)
    tasks = rng.random((n_t, g)) + 0.05
    base = rng.random((n_e, g)) + 0.5
    t0 = np.full(g, 0.3)
    errors = rng.random((n_t, n_e)) * 0.5
    return tasks, base, t0, errors


def _loss_oracle(bias, gamma, base, tasks, t0, errors, alpha, alpha_s):
    m = np.maximum(base + bias, 0.0)
    total = 0.0
    for r in range(tasks.shape[0]):
        d = np.array([d_asym(m[j], tasks[r], t0, alpha) for j in range(m.shape[0])])
        logits = -gamma * d
        logp = logits - np.log(np.sum(np.exp(logits)))
        total -= soft_labels(errors[r], alpha_s) @ logp
    return total / tasks.shape[0]


def test_selector_loss_and_gradient_match_independent_routes():
    tasks, base, t0, errors = _problem()
    rng = make_rng(5)
    bias = 0.1 * rng.normal(size=base.shape)
    log_gamma = math.log(3.0)
    idx = [np.arange(base.shape[0])] * tasks.shape[0]
    targets = [soft_labels(row, 20.0) for row in errors]
    loss, g_b, g_lg = _loss_and_grad(bias, log_gamma, base, tasks, t0, targets, idx, 0.15)
    assert loss == pytest.approx(_loss_oracle(bias, 3.0, base, tasks, t0, errors, 0.15, 20.0), abs=1e-12)
    eps = 1e-6
    num = np.zeros_like(bias)
    for k in np.ndindex(bias.shape):
        up, down = bias.copy(), bias.copy()
        up[k] += eps
        down[k] -= eps
        num[k] = (_loss_oracle(up, 3.0, base, tasks, t0, errors, 0.15, 20.0)
                  - _loss_oracle(down, 3.0, base, tasks, t0, errors, 0.15, 20.0)) / (2 * eps)
    assert np.allclose(g_b, num, atol=1e-7)
    num_lg = (_loss_oracle(bias, 3.0 * math.exp(eps), base, tasks, t0, errors, 0.15, 20.0)
              - _loss_oracle(bias, 3.0 * math.exp(-eps), base, tasks, t0, errors, 0.15, 20.0)) / (2 * eps)
    assert g_lg == pytest.approx(num_lg, abs=1e-7)


def test_untrained_selector_is_plain_asymmetric_selection():
    tasks, base, t0, errors = _problem(seed=2, n_t=6, n_e=4)
    em = ErrorMatrix(errors, [f"t{i}" for i in range(6)], [f"e{j}" for j in range(4)])
    fit = train_model2vec(tasks, base, em, Model2VecHyper(epochs=0), t0=t0)
    for t in tasks:
        direct = int(np.argmin([d_asym(b, t, t0) for b in base]))
        assert fit.select(t) == direct
    assert fit.best_epoch == 0 and len(fit.loss_history) == 1


def test_training_never_returns_a_worse_epoch():
    tasks, base, t0, errors = _problem(seed=3, n_t=8, n_e=4)
    em = ErrorMatrix(errors, [f"t{i}" for i in range(8)], [f"e{j}" for j in range(4)])
    fit = train_model2vec(tasks, base, em, Model2VecHyper(epochs=40), t0=t0)
    assert fit.loss_history[fit.best_epoch] == min(fit.loss_history)
    assert fit.loss_history[fit.best_epoch] <= fit.loss_history[0]
    assert fit.scale == pytest.approx(np.mean(tasks))
    p = fit.predict(tasks[0])
    assert p.sum() == pytest.approx(1.0)


def test_selector_validates_inputs():
    tasks, base, t0, errors = _problem()
    em = ErrorMatrix(errors, [f"t{i}" for i in range(5)], ["a", "b", "c"])
    with pytest.raises(ValidationError):
        train_model2vec(tasks, base[:1], ErrorMatrix(errors[:, :1], em.task_ids, ["a"]))
    with pytest.raises(ValidationError):
        train_model2vec(tasks[:4], base, em)
    with pytest.raises(ValidationError):
        Model2VecHyper(alpha_s=0.0)


def test_dead_model_is_maximally_far():
    dead = ModelEmbedding("dead", np.array([0.1, 0.2]), np.array([-1.0, -1.0]))
    live = ModelEmbedding("live", np.array([0.1, 0.2]), np.zeros(2))
    d = model_distances(np.array([0.3, 0.4]), [dead, live], np.ones(2), alpha=0.15)
    assert d[0] == pytest.approx(1.0 - 0.15)
    assert d[1] == pytest.approx(d_asym([0.1, 0.2], [0.3, 0.4], np.ones(2), 0.15))
    assert select_expert(np.array([0.3, 0.4]), [dead, live], np.ones(2)) == 1
    p = predict_distribution(np.array([0.3, 0.4]), [dead, live], 5.0, np.ones(2))
    assert p[1] > p[0]


def test_selection_ties_go_to_the_lowest_index():
    m = [ModelEmbedding(f"m{i}", np.ones(2), np.zeros(2)) for i in range(3)]
    assert select_expert(np.ones(2), m, np.ones(2)) == 0
    assert select_expert(np.ones(2), m, np.ones(2), allowed=[2, 1]) == 2
    with pytest.raises(ValidationError):
        select_expert(np.ones(2), m, np.ones(2), allowed=[])
    with pytest.raises(ValidationError):
        select_expert(np.ones(2), [], np.ones(2))


def test_error_matrix_round_trip_with_mask(tmp_path):
    mask = np.array([[True, False], [True, True]])
    em = ErrorMatrix(np.array([[0.1, 0.0], [0.25, 0.5]]), ["a", "b"], ["x", "y"], mask, {"seed": 3})
    em.save(tmp_path / "e.csv")
    back = ErrorMatrix.load(tmp_path / "e.csv")
    assert np.array_equal(back.mask, mask)
    assert np.array_equal(back.values[mask], em.values[mask])
    assert back.meta == {"seed": 3}


def test_error_matrix_validates():
    with pytest.raises(ValidationError):
        ErrorMatrix(np.array([[1.5]]), ["a"], ["x"])
    with pytest.raises(ValidationError):
        ErrorMatrix(np.zeros((1, 2)), ["a"], ["x"])
    with pytest.raises(ValidationError):
        ErrorMatrix(np.zeros((1, 1)), ["a"], ["x"], np.array([[False]]))


def test_registry_round_trip(tmp_path):
    tasks, base, t0, errors = _problem(seed=4)
    em = ErrorMatrix(errors, [f"t{i}" for i in range(5)], ["a", "b", "c"])
    fit = train_model2vec(tasks, base, em, Model2VecHyper(epochs=5), t0=t0, trained_on=["t0", None, "t2"])
    save_registry(fit, tmp_path / "r.json")
    back = load_registry(tmp_path / "r.json")
    assert back.gamma == fit.gamma and back.scale == fit.scale
    assert [m.trained_on for m in back.models] == ["t0", None, "t2"]
    for t in tasks:
        assert np.allclose(back.distances(t), fit.distances(t))
    doc = registry_to_dict(fit)
    doc["format_version"] = 7
    with pytest.raises(ValidationError):
        registry_from_dict(doc)


def test_leave_one_out_never_picks_the_own_expert():
    tasks, base, t0, errors = _problem(seed=6, n_t=4, n_e=4)
    errors[np.arange(4), np.arange(4)] = 0.0  # every own expert is the best one
    em = ErrorMatrix(errors, [f"t{i}" for i in range(4)], [f"e{j}" for j in range(4)])
    choices = leave_one_out(tasks, base, em, [0, 1, 2, 3], Model2VecHyper(epochs=5), t0)
    assert all(c != i for i, c in enumerate(choices))
