import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taskfisher.distances import DistanceMatrix, d_asym, distance_matrix
from taskfisher.fisher import Embedding
from taskfisher.meta import (
    MetaConfig,
    MetaTask,
    SweepRow,
    build_error_matrix,
    build_meta_task,
    choice_stability,
    embed_meta,
    evaluate,
    hierarchical_cluster,
    run_selection,
    select,
    trivial_vector,
)
from taskfisher.model2vec import ErrorMatrix
from taskfisher.numerics import ValidationError, make_rng


def test_evaluate_by_hand():
    em = ErrorMatrix(np.array([[0.1, 0.2], [0.4, 0.2]]), ["a", "b"], ["x", "y"])
    rep = evaluate(em, {"first": [0, 0], "chance": [None, None]})
    assert rep.optimal_errors == [0.1, 0.2]
    assert rep.mean_error["first"] == pytest.approx(0.25)
    # (0 / 0.1 + 0.2 / 0.2) / 2
    assert rep.relative_increase["first"] == pytest.approx(0.5)
    assert rep.task_errors["chance"] == pytest.approx([0.15, 0.3])
    assert rep.chosen["first"] == ["x", "x"]
    assert "first" in rep.to_text() and rep.to_dict()["format_version"] == 1


def test_evaluate_floors_a_zero_optimum():
    em = ErrorMatrix(np.array([[0.0, 0.1]]), ["a"], ["x", "y"], meta={"n_test": [20]})
    rep = evaluate(em, {"s": [1]})
    assert rep.relative_increase["s"] == pytest.approx(0.1 / (1 / 20))


def test_evaluate_respects_allowed_and_validates():
    em = ErrorMatrix(np.array([[0.0, 0.1, 0.3]]), ["a"], ["x", "y", "z"])
    rep = evaluate(em, {"s": [2]}, allowed=np.array([[False, True, True]]))
    assert rep.optimal_errors == [0.1]
    with pytest.raises(ValidationError):
        evaluate(em, {"s": [0, 1]})
    with pytest.raises(ValidationError):
        evaluate(em, {"s": [0]}, allowed=np.zeros((1, 3), bool))


def _brute_average_linkage(d):
    clusters = {i: [i] for i in range(len(d))}
    heights = []
    nxt = len(d)
    while len(clusters) > 1:
        best = None
        for a, b in itertools.combinations(sorted(clusters), 2):
            h = np.mean([d[i, j] for i in clusters[a] for j in clusters[b]])
            if best is None or h < best[0]:
                best = (h, a, b)
        h, a, b = best
        clusters[nxt] = clusters.pop(a) + clusters.pop(b)
        heights.append((h, frozenset(clusters[nxt])))
        nxt += 1
    return heights


@settings(max_examples=30)
@given(st.integers(2, 6), st.integers(0, 10_000))
def test_average_linkage_matches_brute_force(n, seed):
    x = make_rng(seed).random((n, n))
    d = np.triu(x, 1)
    d = d + d.T
    dend = hierarchical_cluster(DistanceMatrix(d, [f"t{i}" for i in range(n)], "d_sym", True))
    oracle = _brute_average_linkage(d)
    assert np.allclose([m[2] for m in dend.merges], [h for h, _ in oracle], atol=1e-12)
    sizes = [m[3] for m in dend.merges]
    assert sizes == [len(c) for _, c in oracle]
    assert sorted(dend.order) == list(range(n))
    assert dend.to_text().count("\n") == n


def test_clustering_validates_and_handles_one_leaf():
    with pytest.raises(ValidationError):
        hierarchical_cluster(DistanceMatrix(np.array([[0.0, 1.0], [2.0, 0.0]]), ["a", "b"], "d_asym", False))
    one = hierarchical_cluster(DistanceMatrix(np.zeros((1, 1)), ["a"], "d_sym", True))
    assert one.merges == [] and one.order == [0]


def _fake_meta(n_tasks=6, own=(0, 2, 4), leave_one_out=True, alpha=0.15):
    cfg = MetaConfig(leave_one_out=leave_one_out, alpha=alpha)
    tasks = [None] * n_tasks
    experts = [None] * (len(own) + 1)
    return MetaTask(cfg, tasks, [], [0] * n_tasks, experts, [f"x{i}" for i in own] + ["generic"],
                    list(own) + [None], None)


def test_asymmetric_selection_is_the_argmin_of_the_distance_matrix():
    rng = make_rng(3)
    embs = [Embedding(rng.random(5) + 0.01, "p", "analytic", task_id=f"t{i}") for i in range(6)]
    meta = _fake_meta()
    t0 = trivial_vector(embs)
    picks = select("task2vec_asym", meta, embs)
    dm = distance_matrix(embs, "d_asym", t0=t0, alpha=0.15)
    for i, j in enumerate(picks):
        cands = [c for c, ti in enumerate(meta.expert_task[:-1]) if ti != i]
        scores = [dm.values[meta.expert_task[c], i] for c in cands]
        assert j == cands[int(np.argmin(scores))]
    assert select("generic", meta, embs) == [3] * 6
    assert select("chance", meta, embs) == [None] * 6


def test_selection_falls_back_to_generic_without_candidates():
    embs = [Embedding(np.ones(3) * (i + 1), "p", "analytic") for i in range(2)]
    meta = _fake_meta(n_tasks=2, own=(0,))
    assert select("task2vec_sym", meta, embs) == [1, 0]


def test_selection_validates():
    meta = _fake_meta()
    embs = [Embedding(np.ones(3), "p", "analytic")] * 6
    with pytest.raises(ValidationError):
        select("oracle", meta, embs)
    with pytest.raises(ValidationError):
        select("task2vec_asym", meta, embs[:3])
    with pytest.raises(ValidationError):
        select("model2vec", meta, embs)


def test_trivial_vector_levels():
    a = Embedding(np.array([1.0, 3.0]), "p", "analytic")
    b = Embedding(np.array([2.0, 10.0]), "p", "analytic")
    assert np.array_equal(trivial_vector([a, b]), [2.5, 2.5])
    assert np.array_equal(trivial_vector([a, b], 0.5), [0.5, 0.5])
    r = Embedding(np.array([1.0, 2.0]), "p", "robust", n_samples=10, prior_scale=4.0, beta=1.0)
    assert np.allclose(trivial_vector([r]), 0.2)
    with pytest.raises(ValidationError):
        trivial_vector([a], 0.0)


def test_choice_stability():
    rows = [SweepRow(None, "task2vec_asym", 0.1, ["a", "b", "c", "d"]),
            SweepRow(10, "task2vec_asym", 0.2, ["a", "x", "c", "d"]),
            SweepRow(10, "generic", 0.3, ["g"] * 4)]
    assert choice_stability(rows) == {None: 1.0, 10: 0.75}
    with pytest.raises(ValidationError):
        choice_stability(rows[1:])


def test_meta_config_validates():
    with pytest.raises(ValidationError):
        MetaConfig(family_k=())
    with pytest.raises(ValidationError):
        MetaConfig(variants=1, experts_per_family=3)
    with pytest.raises(ValidationError):
        MetaConfig(estimator="fancy")
    assert MetaConfig(family_k=[3, 4]).family_k == (3, 4)


TINY = dict(grid_n=8, family_k=(4, 5), variants=1, experts_per_family=1, h=4, generic_k=(3,),
            finetune_epochs=2, lr_decay_epoch=1)


@pytest.fixture(scope="module")
def tiny_meta():
    return build_meta_task(MetaConfig(**TINY))


def test_tiny_meta_task_structure(tiny_meta):
    m = tiny_meta
    assert len(m.tasks) == 4 and m.family == [0, 0, 1, 1]
    assert m.expert_task == [0, 2, None] and m.generic_index == 2
    assert m.own_expert() == [0, None, 1, None]
    assert not m.allowed()[0, 0] and m.allowed()[1, 0]


def test_tiny_meta_task_is_independent_of_job_count(tiny_meta):
    again = build_meta_task(MetaConfig(**TINY), jobs=2)
    for a, b in zip(tiny_meta.experts, again.experts):
        assert np.array_equal(a.params, b.params)
    e1 = build_error_matrix(tiny_meta, jobs=1)
    e2 = build_error_matrix(again, jobs=2)
    assert np.array_equal(e1.values, e2.values)
    v1 = [e.values for e in embed_meta(tiny_meta, jobs=1)]
    v2 = [e.values for e in embed_meta(again, jobs=2)]
    assert all(np.array_equal(a, b) for a, b in zip(v1, v2))


def test_tiny_selection_report(tiny_meta):
    embs = embed_meta(tiny_meta)
    em = build_error_matrix(tiny_meta)
    rep = run_selection(tiny_meta, embs, em, ("chance", "generic", "task2vec_asym"))
    assert set(rep.mean_error) == {"chance", "generic", "task2vec_asym"}
    assert all(v >= 0 for v in rep.relative_increase.values())
    assert rep.optimal_mean <= min(rep.mean_error.values())
