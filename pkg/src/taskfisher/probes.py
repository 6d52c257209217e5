"""Toy probe networks: a feature extractor plus a linear/softmax head.

Three kinds of feature extractor are supported:

* ``two_layer``   z_k = sigmoid(U_k . x)            (U trainable, one filter per row)
* ``random_relu`` z_k = max(0, a_k . x + c_k)       (frozen)
* ``polynomial``  all monomials up to ``degree``    (frozen, graded-lex order)

The head always carries a bias column: logits = W[:, :h] @ z + W[:, h].  Binary
tasks use a single sigmoid output, multiclass tasks a softmax over C outputs.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from itertools import combinations_with_replacement
from pathlib import Path
from typing import Optional

import numpy as np

from .numerics import (
    NumericalError,
    Optimizer,
    OptimizerConfig,
    ValidationError,
    check_finite,
    log_softmax,
    sigmoid,
    softmax,
)
from .tasks import Task, balanced_epoch

KINDS = ("two_layer", "random_relu", "polynomial")
FORMAT_VERSION = 1


def monomial_exponents(d: int, degree: int) -> np.ndarray:
    """Exponent rows for all monomials of total degree <= ``degree``.

    Within a degree the order is lexicographic with the first variable's power
    descending, e.g. d=2, degree=2 -> 1, x, y, x^2, xy, y^2.
    """
    rows = []
    for t in range(degree + 1):
        for combo in combinations_with_replacement(range(d), t):
            e = [0] * d
            for v in combo:
                e[v] += 1
            rows.append(e)
    return np.array(rows, dtype=np.int64).reshape(-1, d)


@dataclass(frozen=True, eq=False)
class ProbeNetwork:
    kind: str
    d: int
    h: int
    params: np.ndarray  # U (two_layer), [a | c] rows (random_relu), exponents (polynomial)
    head: np.ndarray  # (C', h + 1)
    num_classes: int = 2
    degree: int = 0
    input_bias: bool = False
    provenance: dict = field(default_factory=dict)

    @property
    def n_outputs(self) -> int:
        return 1 if self.num_classes == 2 else self.num_classes

    @property
    def feature_id(self) -> str:
        """Stable id of the feature extractor (ignores the head)."""
        blob = json.dumps(
            [self.kind, self.d, self.h, self.degree, self.input_bias, self.params.tolist()]
        ).encode()
        return f"{self.kind}-{hashlib.sha256(blob).hexdigest()[:12]}"

    @property
    def trainable_features(self) -> bool:
        return self.kind == "two_layer"

    def filter_groups(self) -> list[np.ndarray]:
        """Index groups into :func:`embedding_params` order (one per filter)."""
        if self.kind == "two_layer":
            width = self.params.shape[1]
            return [np.arange(k * width, (k + 1) * width) for k in range(self.h)]
        c = self.n_outputs
        return [np.arange(k, c * self.h, self.h) for k in range(self.h)]

    def with_head(self, head: np.ndarray, num_classes: Optional[int] = None) -> "ProbeNetwork":
        return replace(self, head=np.asarray(head, dtype=float),
                       num_classes=self.num_classes if num_classes is None else num_classes)

    def zero_head(self, num_classes: int) -> "ProbeNetwork":
        c = 1 if num_classes == 2 else num_classes
        return replace(self, num_classes=num_classes, head=np.zeros((c, self.h + 1)))


def make_probe(kind: str, h: int = 10, d: int = 2, degree: int = 3, seed: int = 0,
               num_classes: int = 2, input_bias: bool = False, scale: float = 1.0) -> ProbeNetwork:
    """Draw a probe's feature parameters; the head starts at zero.

    ``two_layer``: U ~ U[-1, 1] * scale / sqrt(d').  ``random_relu``: a ~ U[-1/2, 1/2],
    c ~ U[-1, 1].  ``polynomial``: ``h`` is ignored (it is C(d + degree, degree)).
    """
    from .numerics import make_rng

    if kind not in KINDS:
        raise ValidationError(f"unknown probe kind {kind!r}; expected one of {KINDS}")
    if d < 1:
        raise ValidationError("d must be >= 1")
    rng = make_rng((seed, 31))
    if kind == "two_layer":
        if h < 1:
            raise ValidationError("h must be >= 1")
        width = d + 1 if input_bias else d
        params = rng.uniform(-1.0, 1.0, size=(h, width)) * scale / math.sqrt(width)
    elif kind == "random_relu":
        if h < 1:
            raise ValidationError("h must be >= 1")
        a = rng.uniform(-0.5, 0.5, size=(h, d))
        c = rng.uniform(-1.0, 1.0, size=(h, 1))
        params = np.hstack([a, c])
        input_bias = False
    else:
        if degree < 1:
            raise ValidationError("degree must be >= 1")
        params = monomial_exponents(d, degree).astype(float)
        h = params.shape[0]
        input_bias = False
    c_out = 1 if num_classes == 2 else num_classes
    return ProbeNetwork(kind, d, h, params, np.zeros((c_out, h + 1)), num_classes,
                        degree if kind == "polynomial" else 0, input_bias,
                        {"seed": seed, "scale": scale})


def augment(probe: ProbeNetwork, x: np.ndarray) -> np.ndarray:
    if probe.input_bias:
        return np.hstack([x, np.ones((x.shape[0], 1))])
    return x


def features(probe: ProbeNetwork, x) -> np.ndarray:
    """Feature activations for one input (1-D) or a batch (N x d)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.shape[1] != probe.d:
        raise ValidationError(f"input dimension {xb.shape[1]} != probe d={probe.d}")
    if probe.kind == "two_layer":
        z = sigmoid(augment(probe, xb) @ probe.params.T)
    elif probe.kind == "random_relu":
        z = np.maximum(0.0, xb @ probe.params[:, :-1].T + probe.params[:, -1])
    else:
        e = probe.params.astype(np.int64)
        z = np.prod(xb[:, None, :] ** e[None, :, :], axis=2)
    z = np.atleast_2d(z)
    return z[0] if single else z


def _with_one(z: np.ndarray) -> np.ndarray:
    return np.hstack([z, np.ones((z.shape[0], 1))])


def head_logits(probe: ProbeNetwork, z: np.ndarray) -> np.ndarray:
    return _with_one(z) @ probe.head.T


def probs_from_logits(logits: np.ndarray) -> np.ndarray:
    """Class-probability matrix (N x C); the binary case is expanded to 2 columns."""
    if logits.shape[1] == 1:
        p = sigmoid(logits[:, 0])
        return np.column_stack([1.0 - p, p])
    return softmax(logits, axis=1)


def predict(probe: ProbeNetwork, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    z = features(probe, x[None, :] if single else x)
    p = probs_from_logits(head_logits(probe, z))
    return p[0] if single else p


def error_rate(probe: ProbeNetwork, task: Task) -> float:
    p = predict(probe, task.inputs)
    return float(np.mean(np.argmax(p, axis=1) != task.labels))


def mean_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    if logits.shape[1] == 1:
        p = sigmoid(logits[:, 0])
        y = labels.astype(float)
        return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))
    lp = log_softmax(logits, axis=1)
    return float(-np.mean(lp[np.arange(labels.size), labels]))


def logit_residual(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(-log p(y|x)) / d logits, one row per sample."""
    if logits.shape[1] == 1:
        return (sigmoid(logits[:, 0]) - labels)[:, None]
    r = softmax(logits, axis=1)
    r[np.arange(labels.size), labels] -= 1.0
    return r


# ---------------------------------------------------------------- head fitting


@dataclass
class HeadFitOptions:
    tol: float = 1e-6
    max_iter: int = 5000
    method: str = "newton"  # "newton" or "adam"
    lr: float = 0.05  # adam only
    weight_decay: float = 0.0


@dataclass
class HeadFitReport:
    train_loss: float
    grad_norm: float
    iterations: int
    converged: bool
    test_error: Optional[float] = None


def _head_objective(theta, zt, labels, c_out, wd):
    w = theta.reshape(c_out, -1)
    logits = zt @ w.T
    loss = mean_cross_entropy(logits, labels)
    r = logit_residual(logits, labels)
    grad = (r.T @ zt) / labels.size
    if wd:
        loss += 0.5 * wd * float(np.sum(w[:, :-1] ** 2))
        grad[:, :-1] += wd * w[:, :-1]
    return loss, grad.ravel(), logits


def _head_hessian(zt, logits, c_out, wd):
    n, m = zt.shape
    if c_out == 1:
        p = sigmoid(logits[:, 0])
        hess = (zt * (p * (1 - p))[:, None]).T @ zt / n
    else:
        p = softmax(logits, axis=1)
        hess = np.zeros((c_out * m, c_out * m))
        for a in range(c_out):
            for b in range(c_out):
                wab = p[:, a] * ((a == b) - p[:, b])
                hess[a * m:(a + 1) * m, b * m:(b + 1) * m] = (zt * wab[:, None]).T @ zt / n
    if wd:
        for a in range(c_out):
            idx = np.arange(a * m, a * m + m - 1)
            hess[idx, idx] += wd
    return hess


def fit_head(probe: ProbeNetwork, train: Task, opts: Optional[HeadFitOptions] = None,
             test: Optional[Task] = None, init: Optional[np.ndarray] = None):
    """Fit the head on frozen features by full-batch descent.

    Returns ``(fitted_probe, report)``.  The problem is convex; ``newton`` uses
    damped Newton steps with backtracking, ``adam`` the adaptive optimizer.
    Non-convergence is reported, not raised.
    """
    opts = opts or HeadFitOptions()
    z = features(probe, train.inputs)
    zt = _with_one(z)
    c_out = 1 if train.num_classes == 2 else train.num_classes
    theta = np.zeros(c_out * zt.shape[1]) if init is None else np.asarray(init, float).ravel().copy()
    labels = train.labels
    loss, grad, logits = _head_objective(theta, zt, labels, c_out, opts.weight_decay)
    gnorm = float(np.linalg.norm(grad))
    it = 0
    if opts.method == "newton":
        while gnorm >= opts.tol and it < opts.max_iter:
            it += 1
            hess = _head_hessian(zt, logits, c_out, opts.weight_decay)
            step = np.linalg.lstsq(hess + 1e-12 * np.eye(hess.shape[0]), grad, rcond=None)[0]
            t = 1.0
            while True:
                cand = theta - t * step
                closs, cgrad, clog = _head_objective(cand, zt, labels, c_out, opts.weight_decay)
                if closs <= loss - 1e-4 * t * float(grad @ step) or t < 1e-10:
                    break
                t *= 0.5
            if t < 1e-10 and closs > loss:
                # Newton direction failed (numerically flat); fall back to gradient step
                cand = theta - grad
                closs, cgrad, clog = _head_objective(cand, zt, labels, c_out, opts.weight_decay)
            theta, loss, grad, logits = cand, closs, cgrad, clog
            gnorm = float(np.linalg.norm(grad))
    elif opts.method == "adam":
        opt = Optimizer(OptimizerConfig("adam", lr=opts.lr), theta.shape)
        while gnorm >= opts.tol and it < opts.max_iter:
            it += 1
            theta = opt.step(theta, grad)
            loss, grad, logits = _head_objective(theta, zt, labels, c_out, opts.weight_decay)
            gnorm = float(np.linalg.norm(grad))
    else:
        raise ValidationError(f"unknown head-fit method {opts.method!r}")
    check_finite(theta, "head weights")
    fitted = replace(probe, head=theta.reshape(c_out, -1), num_classes=train.num_classes)
    report = HeadFitReport(loss, gnorm, it, gnorm < opts.tol)
    if test is not None:
        report.test_error = error_rate(fitted, test)
    return fitted, report


# ---------------------------------------------------------------- fine-tuning


@dataclass
class FinetuneOptions:
    epochs: int = 60
    epoch_size: int = 1024
    batch_size: int = 64
    optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig("adam", lr=0.02, weight_decay=5e-4))
    lr_decay_epoch: int = 40
    lr_decay: float = 0.1
    # a bounded head keeps the joint phase stable on near-separable tasks
    head: HeadFitOptions = field(default_factory=lambda: HeadFitOptions(weight_decay=5e-4))


def _joint_grads(probe: ProbeNetwork, x: np.ndarray, labels: np.ndarray):
    xa = augment(probe, x)
    z = sigmoid(xa @ probe.params.T)
    zt = _with_one(z)
    logits = zt @ probe.head.T
    loss = mean_cross_entropy(logits, labels)
    r = logit_residual(logits, labels)
    n = labels.size
    g_head = r.T @ zt / n
    da = (r @ probe.head[:, :-1]) * z * (1 - z)
    g_u = da.T @ xa / n
    return loss, g_u, g_head


def finetune_expert(probe: ProbeNetwork, train: Task, opts: Optional[FinetuneOptions] = None,
                    rng: Optional[np.random.Generator] = None) -> ProbeNetwork:
    """Head-only fit followed by joint (U, head) training on balanced epochs.

    Only ``two_layer`` probes have trainable features.  The input probe is not
    modified; a new probe is returned.
    """
    from .numerics import make_rng

    if probe.kind != "two_layer":
        raise ValidationError("only two_layer probes can be fine-tuned")
    opts = opts or FinetuneOptions()
    rng = rng if rng is not None else make_rng(0)
    current, _ = fit_head(probe.zero_head(train.num_classes), train, opts.head)
    if opts.epochs <= 0:
        return current
    u, w = current.params.copy(), current.head.copy()
    opt_u = Optimizer(opts.optimizer, u.shape)
    opt_w = Optimizer(opts.optimizer, w.shape)
    for epoch in range(opts.epochs):
        lr = opts.optimizer.lr * (opts.lr_decay if epoch >= opts.lr_decay_epoch else 1.0)
        order = balanced_epoch(train, opts.epoch_size, rng)
        for start in range(0, order.size, opts.batch_size):
            b = order[start:start + opts.batch_size]
            cur = replace(current, params=u, head=w)
            loss, gu, gw = _joint_grads(cur, train.inputs[b], train.labels[b])
            if not np.isfinite(loss):
                raise NumericalError(
                    f"fine-tuning diverged at epoch {epoch}; reduce the learning rate (lr={lr})")
            u = opt_u.step(u, gu, lr)
            w = opt_w.step(w, gw, lr)
    check_finite(u, "fine-tuned features")
    prov = dict(probe.provenance, finetuned_on=train.id)
    return replace(current, params=u, head=w, provenance=prov)


def train_generic_expert(probe: ProbeNetwork, tasks: list[Task], opts: Optional[FinetuneOptions] = None,
                         rng: Optional[np.random.Generator] = None) -> ProbeNetwork:
    """Multi-task training: shared features, one private head per task.

    Each step draws a balanced minibatch from every task and sums the losses.
    The returned probe keeps the trained features and a zero head.
    """
    from .numerics import make_rng

    if probe.kind != "two_layer":
        raise ValidationError("only two_layer probes can be trained")
    opts = opts or FinetuneOptions()
    rng = rng if rng is not None else make_rng(0)
    u = probe.params.copy()
    heads = [fit_head(probe.zero_head(t.num_classes), t, opts.head)[0].head.copy() for t in tasks]
    opt_u = Optimizer(opts.optimizer, u.shape)
    opt_w = [Optimizer(opts.optimizer, w.shape) for w in heads]
    for epoch in range(opts.epochs):
        lr = opts.optimizer.lr * (opts.lr_decay if epoch >= opts.lr_decay_epoch else 1.0)
        orders = [balanced_epoch(t, opts.epoch_size, rng) for t in tasks]
        for start in range(0, opts.epoch_size, opts.batch_size):
            gu_total = np.zeros_like(u)
            for ti, t in enumerate(tasks):
                b = orders[ti][start:start + opts.batch_size]
                cur = replace(probe, params=u, head=heads[ti], num_classes=t.num_classes)
                loss, gu, gw = _joint_grads(cur, t.inputs[b], t.labels[b])
                if not np.isfinite(loss):
                    raise NumericalError(f"generic training diverged; reduce the learning rate (lr={lr})")
                gu_total += gu
                heads[ti] = opt_w[ti].step(heads[ti], gw, lr)
            u = opt_u.step(u, gu_total / len(tasks), lr)
    prov = dict(probe.provenance, generic_on=[t.id for t in tasks])
    return replace(probe, params=u, provenance=prov).zero_head(2)


# ---------------------------------------------------------------- serialization


def probe_to_dict(probe: ProbeNetwork) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": probe.kind,
        "d": probe.d,
        "h": probe.h,
        "degree": probe.degree,
        "input_bias": probe.input_bias,
        "num_classes": probe.num_classes,
        "parameters": probe.params.tolist(),
        "head": probe.head.tolist(),
        "filter_groups": [g.tolist() for g in probe.filter_groups()],
        "feature_id": probe.feature_id,
        "provenance": probe.provenance,
    }


def probe_from_dict(doc: dict) -> ProbeNetwork:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"probe format_version {doc.get('format_version')} != {FORMAT_VERSION}")
    p = ProbeNetwork(doc["kind"], int(doc["d"]), int(doc["h"]), np.array(doc["parameters"], dtype=float),
                     np.array(doc["head"], dtype=float).reshape(-1, int(doc["h"]) + 1),
                     int(doc["num_classes"]), int(doc["degree"]), bool(doc["input_bias"]),
                     doc.get("provenance", {}))
    if p.kind not in KINDS:
        raise ValidationError(f"unknown probe kind {p.kind!r}")
    return p


def save_probe(probe: ProbeNetwork, path) -> None:
    Path(path).write_text(json.dumps(probe_to_dict(probe), sort_keys=True) + "\n")


def load_probe(path) -> ProbeNetwork:
    return probe_from_dict(json.loads(Path(path).read_text()))
