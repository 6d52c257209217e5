"""Joint task/model embeddings: m_i = F_i + b_i plus a learned temperature.

The selector scores expert i for a query task t by p(i | t) = softmax(-gamma d_i)
with d_i = d_asym(m_i -> t), and is trained against soft labels derived from
a ground-truth error matrix.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import serial
from .distances import ALPHA_DEFAULT, d_asym
from .fisher import Embedding
from .numerics import Optimizer, OptimizerConfig, ValidationError, make_rng, softmax

FORMAT_VERSION = 1


# ---------------------------------------------------------------- data types


@dataclass
class ModelEmbedding:
    model_id: str
    base: np.ndarray  # embedding of the training task, zeros if unknown
    bias: np.ndarray
    trained_on: Optional[str] = None

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.base.shape != self.bias.shape:
            raise ValidationError("model base and bias must have the same length")

    @property
    def vector(self) -> np.ndarray:
        return self.base + self.bias

    @property
    def clamped(self) -> np.ndarray:
        """Nonnegative part of m, the form that enters the distance."""
        return np.maximum(self.vector, 0.0)


@dataclass
class ErrorMatrix:
    """Test error of every (task, expert) pair; ``mask`` is True where tested."""

    values: np.ndarray
    task_ids: list
    expert_ids: list
    mask: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        t, e = len(self.task_ids), len(self.expert_ids)
        if self.values.shape != (t, e):
            raise ValidationError(f"error matrix shape {self.values.shape} != ({t}, {e})")
        self.mask = np.ones((t, e), bool) if self.mask is None else np.asarray(self.mask, bool)
        v = self.values[self.mask]
        if not np.all(np.isfinite(v)) or np.any(v < 0) or np.any(v > 1):
            raise ValidationError("error-matrix entries must lie in [0, 1]")
        if np.any(~self.mask.any(axis=1)):
            raise ValidationError("error matrix has a fully masked row")

    def save(self, path) -> None:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["task"] + list(self.expert_ids))
            for tid, row, m in zip(self.task_ids, self.values, self.mask):
                w.writerow([tid] + [format(float(v), ".17g") if ok else "" for v, ok in zip(row, m)])
        serial.write_json(dict(self.meta, format_version=FORMAT_VERSION,
                               task_ids=list(self.task_ids), expert_ids=list(self.expert_ids)),
                          str(path) + ".json")

    @classmethod
    def load(cls, path) -> "ErrorMatrix":
        path = Path(path)
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        experts = rows[0][1:]
        tasks = [r[0] for r in rows[1:]]
        mask = np.array([[c != "" for c in r[1:]] for r in rows[1:]], dtype=bool).reshape(len(tasks), len(experts))
        vals = np.array([[float(c) if c != "" else 0.0 for c in r[1:]] for r in rows[1:]]).reshape(mask.shape)
        meta = {}
        side = Path(str(path) + ".json")
        if side.exists():
            meta = serial.read_json(side, FORMAT_VERSION)
            meta = {k: v for k, v in meta.items() if k not in ("format_version", "task_ids", "expert_ids")}
        return cls(vals, tasks, experts, mask, meta)


@dataclass
class Model2VecHyper:
    alpha_s: float = 20.0  # soft-label sharpness
    lr: float = 0.05
    weight_decay: float = 5e-4
    epochs: int = 81
    gamma_init: float = 10.0
    alpha: float = ALPHA_DEFAULT  # d_asym complexity weight

    def __post_init__(self):
        if self.alpha_s <= 0:
            raise ValidationError("alpha_s must be positive")
        if self.gamma_init <= 0:
            raise ValidationError("gamma_init must be positive")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")


@dataclass
class Model2Vec:
    models: list  # ModelEmbedding
    gamma: float
    t0: np.ndarray
    hyper: Model2VecHyper
    loss_history: list = field(default_factory=list)
    best_epoch: int = 0
    scale: float = 1.0  # task embeddings are divided by this before use

    def distances(self, task_emb) -> np.ndarray:
        return model_distances(_vals(task_emb) / self.scale, self.models, self.t0, self.hyper.alpha)

    def select(self, task_emb, allowed: Optional[Sequence[int]] = None) -> int:
        return select_expert(_vals(task_emb) / self.scale, self.models, self.t0, self.hyper.alpha, allowed)

    def predict(self, task_emb) -> np.ndarray:
        return softmax(-self.gamma * self.distances(task_emb))


# ---------------------------------------------------------------- pieces


def soft_labels(error_row, alpha_s: float = 20.0) -> np.ndarray:
    """softmax(-alpha_s * standardized error); a constant row gives a uniform vector."""
    e = np.asarray(error_row, dtype=float)
    if e.size < 1:
        raise ValidationError("soft labels need at least one entry")
    sd = float(np.std(e))
    if sd == 0.0:
        return np.full(e.size, 1.0 / e.size)
    return softmax(-alpha_s * (e - e.mean()) / sd)


def _vals(x) -> np.ndarray:
    return x.values if isinstance(x, Embedding) else np.asarray(x, dtype=float)


def _model_distance(m: ModelEmbedding, t: np.ndarray, t0: np.ndarray, alpha: float) -> float:
    mp = m.clamped
    if not np.any(mp > 0):
        # a model pushed entirely below zero is treated as maximally far from everything
        return 1.0 - alpha
    return d_asym(mp, t, t0, alpha)


def model_distances(task_emb, models: Sequence[ModelEmbedding], t0, alpha: float = ALPHA_DEFAULT) -> np.ndarray:
    t = _vals(task_emb)
    t0v = _vals(t0)
    return np.array([_model_distance(m, t, t0v, alpha) for m in models])


def predict_distribution(task_emb, models: Sequence[ModelEmbedding], gamma: float, t0,
                         alpha: float = ALPHA_DEFAULT) -> np.ndarray:
    return softmax(-gamma * model_distances(task_emb, models, t0, alpha))


def select_expert(task_emb, models: Sequence[ModelEmbedding], t0, alpha: float = ALPHA_DEFAULT,
                  allowed: Optional[Sequence[int]] = None) -> int:
    """Index of the closest model; ties go to the lowest index."""
    if not models:
        raise ValidationError("no models to select from")
    d = model_distances(task_emb, models, t0, alpha)
    idx = np.arange(len(models)) if allowed is None else np.asarray(allowed, dtype=int)
    if idx.size == 0:
        raise ValidationError("no allowed models")
    return int(idx[np.argmin(d[idx])])


def _dsym_batch(a: np.ndarray, b: np.ndarray):
    """d_sym over broadcast rows and its gradient with respect to ``a``."""
    s = a + b
    keep = s > 0
    safe = np.where(keep, s, 1.0)
    u = np.where(keep, a / safe, 0.0)
    v = np.where(keep, b / safe, 0.0)
    nu = np.linalg.norm(u, axis=-1, keepdims=True)
    nv = np.linalg.norm(v, axis=-1, keepdims=True)
    dead = (nu == 0) | (nv == 0)
    nu = np.where(dead, 1.0, nu)
    nv = np.where(dead, 1.0, nv)
    cos = np.where(dead, 0.0, np.sum(u * v, axis=-1, keepdims=True) / (nu * nv))
    dcos_du = v / (nu * nv) - cos * u / nu ** 2
    dcos_dv = u / (nu * nv) - cos * v / nv ** 2
    # du/da = b/s^2, dv/da = -b/s^2
    grad = -np.where(keep & ~dead, b / safe ** 2, 0.0) * (dcos_du - dcos_dv)
    return 1.0 - cos[..., 0], grad


def _loss_and_grad(bias, log_gamma, base, tasks, t0, targets, allowed, alpha):
    """Mean soft-label cross entropy over the rows in ``targets``."""
    m = base + bias
    mp = np.maximum(m, 0.0)
    active = (m > 0).astype(float)
    d_mt, g_mt = _dsym_batch(mp[None, :, :], tasks[:, None, :])  # (T, E)
    d_m0, g_m0 = _dsym_batch(mp, np.broadcast_to(t0, mp.shape))  # (E,)
    d = d_mt - alpha * d_m0[None, :]
    gamma = math.exp(log_gamma)
    loss = 0.0
    g_d = np.zeros_like(d)
    for r, (q, idx) in enumerate(zip(targets, allowed)):
        logits = -gamma * d[r, idx]
        lp = logits - logits.max()
        lp = lp - math.log(np.exp(lp).sum())
        p = np.exp(lp)
        loss -= float(q @ lp)
        g_d[r, idx] = -gamma * (p - q)
    n = len(targets)
    loss /= n
    g_d /= n
    g_loggamma = float(np.sum(g_d * d))  # dL/dgamma * gamma, since dlogit/dgamma = -d
    g_m = np.einsum("te,teg->eg", g_d, g_mt) - alpha * g_d.sum(axis=0)[:, None] * g_m0
    return loss, g_m * active, g_loggamma


def train_model2vec(task_embs: Sequence, bases: Sequence, errors: ErrorMatrix,
                    hyper: Optional[Model2VecHyper] = None, t0=None,
                    train_rows: Optional[Sequence[int]] = None,
                    allowed: Optional[np.ndarray] = None,
                    model_ids: Optional[Sequence[str]] = None,
                    trained_on: Optional[Sequence[Optional[str]]] = None,
                    rng: Optional[np.random.Generator] = None) -> Model2Vec:
    """Fit the model biases and gamma by full-batch Adam on the soft-label loss.

    ``task_embs[i]`` embeds error-matrix row i, ``bases[j]`` is expert j's
    training-task embedding (zeros when unknown).  ``allowed`` (tasks x
    experts, bool) narrows the candidate set per row; it defaults to the
    error-matrix mask.  The parameters of the epoch with the lowest training
    loss are returned.
    """
    hyper = hyper or Model2VecHyper()
    rng = rng if rng is not None else make_rng(0)  # training is deterministic; kept for the interface
    tasks = np.array([_vals(t) for t in task_embs], dtype=float)
    base = np.array([_vals(b) for b in bases], dtype=float)
    n_e = base.shape[0]
    if n_e < 2:
        raise ValidationError("model2vec needs at least two experts")
    if errors.values.shape != (tasks.shape[0], n_e):
        raise ValidationError("error matrix does not match the task/expert embeddings")
    t0v = np.full(base.shape[1], 1.0) if t0 is None else _vals(t0)
    # one common rescaling of every vector leaves d_sym unchanged and puts the
    # bias step size on the scale of a typical embedding entry
    scale = float(np.mean(tasks)) if np.mean(tasks) > 0 else 1.0
    tasks, base, t0v = tasks / scale, base / scale, t0v / scale
    allow = errors.mask if allowed is None else np.asarray(allowed, bool) & errors.mask
    rows = list(range(tasks.shape[0])) if train_rows is None else list(train_rows)
    rows = [r for r in rows if allow[r].sum() >= 1]
    idx = [np.flatnonzero(allow[r]) for r in rows]
    targets = [soft_labels(errors.values[r, i], hyper.alpha_s) for r, i in zip(rows, idx)]
    tr = tasks[rows]

    theta = np.concatenate([np.zeros(base.size), [math.log(hyper.gamma_init)]])
    opt = Optimizer(OptimizerConfig("adam", lr=hyper.lr), theta.shape)
    wd_mask = np.concatenate([np.ones(base.size), [0.0]])
    best = (math.inf, theta.copy(), 0)
    history = []
    for epoch in range(hyper.epochs + 1):
        bias = theta[:-1].reshape(base.shape)
        loss, g_b, g_lg = _loss_and_grad(bias, theta[-1], base, tr, t0v, targets, idx, hyper.alpha)
        history.append(loss)
        if loss < best[0]:
            best = (loss, theta.copy(), epoch)
        if epoch == hyper.epochs:
            break
        grad = np.concatenate([g_b.ravel(), [g_lg]]) + hyper.weight_decay * wd_mask * theta
        theta = opt.step(theta, grad)
    _, theta, best_epoch = best
    bias = theta[:-1].reshape(base.shape)
    ids = list(model_ids) if model_ids is not None else list(errors.expert_ids)
    origin = list(trained_on) if trained_on is not None else [None] * n_e
    models = [ModelEmbedding(ids[j], base[j], bias[j], origin[j]) for j in range(n_e)]
    return Model2Vec(models, float(math.exp(theta[-1])), t0v, hyper, history, best_epoch, scale)


def leave_one_out(task_embs, bases, errors: ErrorMatrix, own_expert: Sequence[Optional[int]],
                  hyper: Optional[Model2VecHyper] = None, t0=None) -> list:
    """Expert chosen for each row by a selector trained on all other rows.

    ``own_expert[i]`` is the column of the expert trained on task i (or None);
    it is removed from the candidates of row i, both when row i is a training
    row and when it is the query.
    """
    n_t, n_e = errors.values.shape
    allow = errors.mask.copy()
    for i, j in enumerate(own_expert):
        if j is not None:
            allow[i, j] = False
    choices = []
    for i in range(n_t):
        rows = [r for r in range(n_t) if r != i]
        fit = train_model2vec(task_embs, bases, errors, hyper, t0, rows, allow)
        choices.append(fit.select(task_embs[i], np.flatnonzero(allow[i])))
    return choices


# ---------------------------------------------------------------- registry


def registry_to_dict(fit: Model2Vec, base_refs: Optional[Sequence[str]] = None) -> dict:
    refs = list(base_refs) if base_refs is not None else [None] * len(fit.models)
    return {
        "format_version": FORMAT_VERSION,
        "gamma": fit.gamma,
        "t0": fit.t0,
        "hyper": asdict(fit.hyper),
        "best_epoch": fit.best_epoch,
        "scale": fit.scale,
        "models": [
            {"model_id": m.model_id, "base_embedding_ref": ref, "base": m.base, "bias": m.bias,
             "trained_on_task_id": m.trained_on}
            for m, ref in zip(fit.models, refs)
        ],
    }


def registry_from_dict(doc: dict) -> Model2Vec:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"registry format_version {doc.get('format_version')!r} != {FORMAT_VERSION}")
    models = [ModelEmbedding(m["model_id"], m["base"], m["bias"], m.get("trained_on_task_id"))
              for m in doc["models"]]
    return Model2Vec(models, float(doc["gamma"]), np.asarray(doc["t0"], float),
                     Model2VecHyper(**doc["hyper"]), best_epoch=int(doc.get("best_epoch", 0)),
                     scale=float(doc.get("scale", 1.0)))


def save_registry(fit: Model2Vec, path, base_refs=None) -> None:
    serial.write_json(registry_to_dict(fit, base_refs), path)


def load_registry(path) -> Model2Vec:
    return registry_from_dict(serial.read_json(path, FORMAT_VERSION))
