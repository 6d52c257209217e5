"""Distances between task embeddings, and the fine-tuning transfer distance."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import serial
from .fisher import Embedding
from .numerics import ValidationError, make_rng
from .probes import FinetuneOptions, ProbeNetwork, error_rate, finetune_expert
from .tasks import SplitSpec, Task, split

ALPHA_DEFAULT = 0.15
METRICS = ("d_sym", "d_asym", "d_cos")
FORMAT_VERSION = 1

EmbLike = Union[Embedding, np.ndarray, Sequence[float]]


def _values(e: EmbLike) -> np.ndarray:
    return e.values if isinstance(e, Embedding) else np.asarray(e, dtype=float)


def _check_pair(a: EmbLike, b: EmbLike) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(a, Embedding) and isinstance(b, Embedding) and a.probe_id != b.probe_id:
        raise ValidationError(f"embeddings come from different probes ({a.probe_id} vs {b.probe_id})")
    u, v = _values(a), _values(b)
    if u.shape != v.shape or u.ndim != 1:
        raise ValidationError(f"embedding shapes differ: {u.shape} vs {v.shape}")
    return u, v


def d_cos(u, v) -> float:
    """Cosine distance 1 - u.v / (|u| |v|)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValidationError("cosine distance is undefined for a zero vector")
    return float(1.0 - (u @ v) / (nu * nv))


def d_sym(a: EmbLike, b: EmbLike) -> float:
    """Cosine distance after dividing both embeddings element-wise by their sum.

    Entries where the sum is zero carry no information and are dropped.  If
    one side is zero on every remaining entry the supports are disjoint and
    the distance is 1.
    """
    u, v = _check_pair(a, b)
    s = u + v
    keep = s > 0
    if not np.any(keep):
        raise ValidationError("d_sym: every entry of F_a + F_b is zero")
    if np.array_equal(u, v):
        return 0.0
    if not np.any(u[keep]) or not np.any(v[keep]):
        return 1.0
    return d_cos(u[keep] / s[keep], v[keep] / s[keep])


def d_asym(source: EmbLike, target: EmbLike, t0: EmbLike, alpha: float = ALPHA_DEFAULT) -> float:
    """Asymmetric score for transferring from ``source`` to ``target``.

    d_sym(source, target) - alpha * d_sym(source, t0): sources far from the
    trivial embedding t0 (more complex ones) are pulled closer.  May be negative.
    """
    _check_pair(source, target)
    _check_pair(source, t0)
    return d_sym(source, target) - alpha * d_sym(source, t0)


# ---------------------------------------------------------------- transfer


@dataclass
class TransferResult:
    value: float
    errors_direct: list  # per trial, trained on task_b from the fixed init
    errors_transfer: list  # per trial, fine-tuned on task_b from an expert for task_a

    @property
    def mean_direct(self) -> float:
        return float(np.mean(self.errors_direct))

    @property
    def mean_transfer(self) -> float:
        return float(np.mean(self.errors_transfer))


def transfer_distance(probe: ProbeNetwork, task_a: Task, task_b: Task,
                      opts: Optional[FinetuneOptions] = None, n_trials: int = 5,
                      split_spec: Optional[SplitSpec] = None,
                      rng: Optional[np.random.Generator] = None) -> TransferResult:
    """(E[err_{a->b}] - E[err_b]) / E[err_b] over ``n_trials`` seeds.

    err_b trains ``probe`` (the fixed initialization) on task_b; err_{a->b}
    first trains an expert on task_a from the same initialization, then
    fine-tunes it on task_b.  Both are measured on task_b's held-out split.
    A zero direct error makes the ratio undefined; it is floored at 1/n_test.
    """
    if n_trials < 2:
        raise ValidationError("transfer_distance needs n_trials >= 2")
    if probe.kind != "two_layer":
        raise ValidationError("transfer distance needs a trainable (two_layer) probe")
    opts = opts or FinetuneOptions()
    rng = rng if rng is not None else make_rng(0)
    spec = split_spec or SplitSpec()
    direct, transfer = [], []
    for trial in range(n_trials):
        seed = int(rng.integers(2**31))
        tr_b, te_b = split(task_b, replace(spec, seed=seed))
        tr_a, _ = split(task_a, replace(spec, seed=seed))
        base = finetune_expert(probe, tr_b, opts, make_rng((seed, 0)))
        direct.append(error_rate(base, te_b))
        expert = finetune_expert(probe, tr_a, opts, make_rng((seed, 1)))
        tuned = finetune_expert(expert.zero_head(task_b.num_classes), tr_b, opts, make_rng((seed, 2)))
        transfer.append(error_rate(tuned, te_b))
    n_test = te_b.n
    denom = max(float(np.mean(direct)), 1.0 / n_test)
    value = (float(np.mean(transfer)) - float(np.mean(direct))) / denom
    return TransferResult(value, direct, transfer)


# ---------------------------------------------------------------- matrices


@dataclass
class DistanceMatrix:
    values: np.ndarray
    ids: list
    metric: str
    symmetric: bool
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        n = len(self.ids)
        if self.values.shape != (n, n):
            raise ValidationError(f"distance matrix shape {self.values.shape} does not match {n} ids")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("distance matrix has non-finite entries")
        if self.symmetric and not np.array_equal(self.values, self.values.T):
            raise ValidationError("matrix flagged symmetric but is not")

    def __getitem__(self, pair):
        i, j = pair
        return float(self.values[self.ids.index(i), self.ids.index(j)])

    def save(self, path) -> None:
        """CSV with task ids on both axes; metric and params in ``<path>.json``."""
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([""] + list(self.ids))
            for tid, row in zip(self.ids, self.values):
                w.writerow([tid] + [format(float(v), ".17g") for v in row])
        serial.write_json({"format_version": FORMAT_VERSION, "metric": self.metric,
                           "symmetric": self.symmetric, "params": self.params,
                           "ids": list(self.ids)}, str(path) + ".json")

    @classmethod
    def load(cls, path) -> "DistanceMatrix":
        path = Path(path)
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        ids = rows[0][1:]
        values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        meta = serial.read_json(str(path) + ".json", FORMAT_VERSION)
        return cls(values, ids, meta["metric"], meta["symmetric"], meta.get("params", {}))


def distance_matrix(embeddings: Sequence[Embedding], metric: str = "d_sym",
                    t0: Optional[EmbLike] = None, alpha: float = ALPHA_DEFAULT,
                    ids: Optional[Sequence[str]] = None) -> DistanceMatrix:
    """All pairwise distances.  For ``d_asym`` entry (i, j) is d_asym(i -> j)."""
    if metric not in METRICS:
        raise ValidationError(f"unknown metric {metric!r}; expected one of {METRICS}")
    n = len(embeddings)
    ids = list(ids) if ids is not None else [e.task_id or f"t{i}" for i, e in enumerate(embeddings)]
    out = np.zeros((n, n))
    params: dict = {}
    if metric == "d_asym":
        if t0 is None:
            raise ValidationError("d_asym needs a trivial embedding t0")
        params = {"alpha": alpha, "t0": _values(t0).tolist()}
        for i in range(n):
            for j in range(n):
                out[i, j] = d_asym(embeddings[i], embeddings[j], t0, alpha)
        return DistanceMatrix(out, ids, metric, False, params)
    fn = d_sym if metric == "d_sym" else (lambda a, b: d_cos(_values(a), _values(b)))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = fn(embeddings[i], embeddings[j])
    return DistanceMatrix(out, ids, metric, True, params)
