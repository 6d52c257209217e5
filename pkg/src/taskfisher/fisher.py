"""Fisher-information estimators and the fixed-size task embedding.

All estimators work on the probe's *feature* parameters: the first-layer
weights U for ``two_layer`` probes, and the head weights W[:, :h] for the
frozen ``random_relu``/``polynomial`` probes (the only parameters such a probe
has that are tied to a feature).  Per-parameter values are averaged within
each filter group to give one number per filter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import serial
from .numerics import (
    NumericalError,
    Optimizer,
    OptimizerConfig,
    ValidationError,
    check_finite,
    make_rng,
    sigmoid,
    softmax,
)
from .probes import (
    HeadFitOptions,
    ProbeNetwork,
    augment,
    features,
    fit_head,
    logit_residual,
    mean_cross_entropy,
    probs_from_logits,
)
from .tasks import Task

ESTIMATORS = ("analytic", "empirical", "robust", "trivial")
FORMAT_VERSION = 1


@dataclass
class Embedding:
    """One nonnegative value per filter group, plus how it was obtained."""

    values: np.ndarray
    probe_id: str
    estimator: str
    n_samples: int = 0
    prior_scale: Optional[float] = None  # lambda^2, prior precision (robust/trivial)
    beta: Optional[float] = None
    converged: bool = True
    task_id: Optional[str] = None
    precision: Optional[np.ndarray] = None  # per-group Lambda (robust only)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1:
            raise ValidationError("embedding values must be a vector")
        check_finite(self.values, "embedding values")
        if np.any(self.values < 0):
            raise ValidationError("embedding values must be nonnegative")
        if self.precision is not None:
            self.precision = np.asarray(self.precision, dtype=float)

    def __len__(self):
        return self.values.size

    @property
    def trivial_level(self) -> Optional[float]:
        """The prior expressed on the same scale as ``values`` (robust only)."""
        if self.estimator != "robust" or self.prior_scale is None:
            return None
        return self.beta * self.prior_scale / (2.0 * self.n_samples)

    @property
    def raw_values(self) -> Optional[np.ndarray]:
        """``(beta / 2N) * Lambda`` before the prior is subtracted (robust only)."""
        if self.precision is None:
            return None
        return self.beta * self.precision / (2.0 * self.n_samples)

    def to_dict(self) -> dict:
        doc = {
            "format_version": FORMAT_VERSION,
            "probe_id": self.probe_id,
            "estimator": self.estimator,
            "values": self.values,
            "prior_scale": self.prior_scale,
            "beta": self.beta,
            "n_samples": int(self.n_samples),
            "converged": bool(self.converged),
            "task_id": self.task_id,
        }
        if self.precision is not None:
            doc["precision"] = self.precision
            doc["raw_values"] = self.raw_values
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "Embedding":
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValidationError(f"embedding format_version {doc.get('format_version')!r} != {FORMAT_VERSION}")
        if doc["estimator"] not in ESTIMATORS:
            raise ValidationError(f"unknown estimator {doc['estimator']!r}")
        return cls(
            values=np.array(doc["values"], dtype=float),
            probe_id=doc["probe_id"],
            estimator=doc["estimator"],
            n_samples=int(doc["n_samples"]),
            prior_scale=doc.get("prior_scale"),
            beta=doc.get("beta"),
            converged=bool(doc["converged"]),
            task_id=doc.get("task_id"),
            precision=None if doc.get("precision") is None else np.array(doc["precision"], dtype=float),
        )


def save_embedding(emb: Embedding, path) -> None:
    serial.write_json(emb.to_dict(), path)


def load_embedding(path) -> Embedding:
    return Embedding.from_dict(serial.read_json(path, FORMAT_VERSION))


def aggregate(diag, filter_groups) -> np.ndarray:
    """Mean of ``diag`` within each filter group."""
    diag = np.asarray(diag, dtype=float)
    covered = np.concatenate([np.asarray(g) for g in filter_groups]) if filter_groups else np.array([])
    if covered.size != diag.size or np.unique(covered).size != diag.size:
        raise ValidationError("filter groups must partition the parameter vector")
    return np.array([diag[np.asarray(g)].mean() for g in filter_groups])


def trivial_embedding(probe: ProbeNetwork, lam2: float) -> Embedding:
    if lam2 <= 0:
        raise ValidationError("prior scale must be positive")
    g = len(probe.filter_groups())
    return Embedding(np.full(g, float(lam2)), probe.feature_id, "trivial", prior_scale=float(lam2))


def domain_embedding(probe: ProbeNetwork, task: Task) -> np.ndarray:
    """Per-feature mean and variance of the activations (ignores labels).

    Moments are accumulated in one streaming pass (Welford).
    """
    z = features(probe, task.inputs)
    mean = np.zeros(z.shape[1])
    m2 = np.zeros(z.shape[1])
    for i, row in enumerate(z, start=1):
        delta = row - mean
        mean += delta / i
        m2 += delta * (row - mean)
    return np.concatenate([mean, m2 / max(z.shape[0], 1)])


# ---------------------------------------------------------------- scores


def _label_residuals(probe: ProbeNetwork, logits: np.ndarray) -> np.ndarray:
    """Residual d(-log p(y|x))/d logits for every possible label: (N, L, C')."""
    n = logits.shape[0]
    if probe.n_outputs == 1:
        p = sigmoid(logits[:, 0])
        return np.stack([p, p - 1.0], axis=1)[:, :, None]
    p = softmax(logits, axis=1)
    c = p.shape[1]
    return p[:, None, :] - np.eye(c)[None, :, :] * np.ones((n, 1, 1))


def score_table(probe: ProbeNetwork, task: Task):
    """Per-sample, per-label scores of the feature parameters.

    Returns ``(scores, probs)`` with ``scores`` of shape (N, L, P) and the
    model's label distribution ``probs`` of shape (N, L).
    """
    if task.d != probe.d:
        raise ValidationError(f"task dimension {task.d} != probe d={probe.d}")
    if probe.n_outputs != (1 if task.num_classes == 2 else task.num_classes):
        raise ValidationError("probe head does not match the task's number of classes")
    x = task.inputs
    z = features(probe, x)
    logits = np.hstack([z, np.ones((z.shape[0], 1))]) @ probe.head.T
    res = _label_residuals(probe, logits)  # (N, L, C')
    probs = probs_from_logits(logits)
    if probe.kind == "two_layer":
        xa = augment(probe, x)
        delta = np.einsum("nlc,ck->nlk", res, probe.head[:, :-1]) * (z * (1 - z))[:, None, :]
        scores = np.einsum("nlk,nj->nlkj", delta, xa).reshape(z.shape[0], res.shape[1], -1)
    else:
        scores = np.einsum("nlc,nk->nlck", res, z).reshape(z.shape[0], res.shape[1], -1)
    return scores, probs


def _sampled_label_weights(probs: np.ndarray, mc_labels: int, rng: np.random.Generator) -> np.ndarray:
    """Empirical label frequencies from ``mc_labels`` draws per sample.

    The per-sample label counts of ``mc_labels`` independent draws are
    multinomial, so they are drawn directly.
    """
    p = np.clip(probs, 0.0, None)
    p = p / p.sum(axis=1, keepdims=True)
    counts = rng.multinomial(mc_labels, p)
    return counts / mc_labels


def score_moments(probe: ProbeNetwork, task: Task, mc_labels=math.inf, rng=None):
    """Mean score, score second moment, and the number of draws behind them.

    With ``mc_labels=inf`` the expectation over labels is exact; otherwise
    ``mc_labels`` labels per sample are drawn from the model's own predictive
    distribution (never the ground truth).
    """
    scores, probs = score_table(probe, task)
    if mc_labels is None or (isinstance(mc_labels, float) and math.isinf(mc_labels)):
        q = probs
        draws = math.inf
    else:
        mc_labels = int(mc_labels)
        if mc_labels < 1:
            raise ValidationError("mc_labels must be >= 1")
        q = _sampled_label_weights(probs, mc_labels, rng if rng is not None else make_rng(0))
        draws = mc_labels * task.n
    n = task.n
    mean = np.einsum("nl,nlp->p", q, scores) / n
    second = np.einsum("nl,nlp->p", q, scores * scores) / n
    return mean, second, draws


def fim_empirical_diag(probe: ProbeNetwork, task: Task, mc_labels=math.inf, rng=None) -> np.ndarray:
    """Diagonal of the score covariance over feature parameters (pre-aggregation)."""
    _, second, _ = score_moments(probe, task, mc_labels, rng)
    return second


def fim_analytic_twolayer(probe: ProbeNetwork, task: Task) -> np.ndarray:
    """Exact FIM of U for a binary two-layer probe.

    F = 1/N sum_e p_e (1 - p_e) S_e (x) x_e x_e^T with
    S_e = w w^T * z_e z_e^T * (1 - z_e)(1 - z_e)^T  (element-wise products).
    Parameters are ordered row-major, U[k, j] -> k * d' + j.
    """
    if probe.kind != "two_layer":
        raise ValidationError("analytic FIM requires a two_layer probe")
    if task.num_classes != 2 or probe.n_outputs != 1:
        raise ValidationError("analytic FIM requires a binary task and head")
    xa = augment(probe, task.inputs)
    z = features(probe, task.inputs)
    w = probe.head[0, :-1]
    p = sigmoid(z @ w + probe.head[0, -1])
    a = w[None, :] * z * (1 - z)  # rows: w * z * (1 - z)
    s = a[:, :, None] * a[:, None, :]
    c = p * (1 - p)
    h, dd = probe.h, xa.shape[1]
    f = np.einsum("e,ekl,ej,ei->kjli", c, s, xa, xa).reshape(h * dd, h * dd) / task.n
    return f


# ---------------------------------------------------------------- robust (variational) estimator


@dataclass
class RobustFisherConfig:
    """Settings for the variational Fisher estimator.

    ``lam2_init=None`` sets the prior precision to the layer mean of the
    Fisher diagonal (falling back to K / ||w||^2 when that mean is zero).
    ``warm_start`` starts every group at the layer-average stationary
    precision instead of at the prior; groups still separate by training.
    """

    beta: float = 1.0
    lam2_init: Optional[float] = None
    train_prior: bool = True
    lr_precision: float = 1e-2
    lr_head: float = 1e-4
    steps: int = 2000
    mc_samples: int = 4  # antithetic pairs per step
    average_fraction: float = 0.25
    plateau_rtol: float = 1e-4
    plateau_window: int = 20
    warm_start: bool = True

    def __post_init__(self):
        if self.beta <= 0:
            raise ValidationError("beta must be positive")
        if self.lam2_init is not None and self.lam2_init <= 0:
            raise ValidationError("lam2_init must be positive")


@dataclass
class PrecisionFit:
    precision: np.ndarray  # per group
    lam2: float
    loss_history: list = field(default_factory=list)
    converged: bool = False
    steps: int = 0


def optimize_precision(
    data_grad: Callable[[np.ndarray, np.random.Generator], tuple],
    group_sizes,
    w_hat_sq: float,
    n: int,
    cfg: RobustFisherConfig,
    rng: np.random.Generator,
    init_log_precision: Optional[float] = None,
) -> PrecisionFit:
    """Minimize E_w[loss] + beta/(2n) * KL(N(w_hat, Sigma) || N(0, lam2^-1 I)) over
    per-group log-precisions L (Lambda = exp(L)) and, optionally, lam2.

    L follows Adam; lam2 is set to its exact minimizer K / (sum var + ||w_hat||^2)
    before every step when ``cfg.train_prior`` is on.

    ``data_grad(sigma, rng)`` must return an unbiased estimate of the expected
    mean loss and of its gradient w.r.t. the per-group noise std ``sigma``.
    The stationary point satisfies Lambda = lam2 + (2n/beta) * H_group, i.e.
    (beta/2n) Lambda = H + beta lam2 / 2n.
    """
    sizes = np.asarray(group_sizes, dtype=float)
    k_total = sizes.sum()
    lam2 = cfg.lam2_init if cfg.lam2_init is not None else k_total / max(w_hat_sq, 1e-300)
    start = math.log(lam2) if init_log_precision is None else float(init_log_precision)
    theta = np.concatenate([np.full(sizes.size, start), [math.log(lam2)]])
    opt = Optimizer(OptimizerConfig("adam", lr=cfg.lr_precision), theta.shape)
    coef = cfg.beta / (2.0 * n)
    history = []
    tail_start = int(cfg.steps * (1.0 - cfg.average_fraction))
    acc = np.zeros_like(theta)
    n_acc = 0
    converged = False
    for step in range(cfg.steps):
        log_prec = theta[:-1]
        var = np.exp(-log_prec)
        if cfg.train_prior:
            # the KL term is minimized in closed form over the prior precision
            theta[-1] = math.log(k_total / max(float(sizes @ var) + w_hat_sq, 1e-300))
        ell = theta[-1]
        lam2 = math.exp(ell)
        sigma = np.sqrt(var)
        loss, g_sigma = data_grad(sigma, rng)
        kl = 0.5 * (lam2 * (float(sizes @ var) + w_hat_sq) - k_total - k_total * ell + float(sizes @ log_prec))
        total = loss + coef * kl
        if not (math.isfinite(total) and np.all(np.isfinite(g_sigma))):
            raise NumericalError(
                f"robust Fisher loss became non-finite at step {step} "
                f"(loss={loss}, lam2={lam2}, min log-precision={log_prec.min():.3g}, "
                f"max={log_prec.max():.3g})")
        history.append(total)
        grad = np.empty_like(theta)
        grad[:-1] = -0.5 * sigma * g_sigma + 0.5 * coef * sizes * (1.0 - lam2 * var)
        grad[-1] = 0.0
        theta = opt.step(theta, grad)
        if step >= tail_start:
            acc += theta
            n_acc += 1
        w = cfg.plateau_window
        if len(history) >= 2 * w and (len(history) % w == 0):
            prev = np.mean(history[-2 * w:-w])
            cur = np.mean(history[-w:])
            if abs(cur - prev) <= cfg.plateau_rtol * max(abs(prev), 1e-300):
                converged = True
    if n_acc:
        theta = acc / n_acc
    return PrecisionFit(np.exp(theta[:-1]), float(math.exp(theta[-1])), history, converged, cfg.steps)


def _twolayer_data_grad(probe: ProbeNetwork, task: Task, cfg: RobustFisherConfig):
    """Local-reparametrization gradient for noise on U (one std per row)."""
    xa = augment(probe, task.inputs)
    a_mean = xa @ probe.params.T
    xnorm = np.sqrt(np.sum(xa * xa, axis=1))
    labels = task.labels
    n = task.n
    state = {"head": probe.head.copy()}
    head_opt = Optimizer(OptimizerConfig("adam", lr=cfg.lr_head), probe.head.shape) if cfg.lr_head else None

    def data_grad(sigma, rng):
        head = state["head"]
        g_sigma = np.zeros(sigma.size)
        g_head = np.zeros_like(head)
        loss = 0.0
        for _ in range(cfg.mc_samples):
            xi = rng.standard_normal(a_mean.shape)
            noise = xnorm[:, None] * xi
            for sign in (1.0, -1.0):
                z = sigmoid(a_mean + sign * sigma[None, :] * noise)
                zt = np.hstack([z, np.ones((n, 1))])
                logits = zt @ head.T
                loss += mean_cross_entropy(logits, labels)
                r = logit_residual(logits, labels)
                da = (r @ head[:, :-1]) * z * (1 - z)
                g_sigma += np.sum(da * sign * noise, axis=0) / n
                g_head += r.T @ zt / n
        m = 2 * cfg.mc_samples
        if head_opt is not None:
            state["head"] = head_opt.step(head, g_head / m)
        return loss / m, g_sigma / m

    return data_grad, float(np.sum(probe.params ** 2)), state


def _frozen_data_grad(probe: ProbeNetwork, task: Task, cfg: RobustFisherConfig):
    """Local-reparametrization gradient for noise on head column k (one std per feature)."""
    z = features(probe, task.inputs)
    zt = np.hstack([z, np.ones((z.shape[0], 1))])
    z2 = z * z
    labels = task.labels
    n = task.n
    state = {"head": probe.head.copy()}
    head_opt = Optimizer(OptimizerConfig("adam", lr=cfg.lr_head), probe.head.shape) if cfg.lr_head else None

    def data_grad(sigma, rng):
        head = state["head"]
        mean_logits = zt @ head.T
        tau = np.sqrt(np.maximum(z2 @ (sigma ** 2), 1e-300))  # (N,)
        g_sigma = np.zeros(sigma.size)
        g_head = np.zeros_like(head)
        loss = 0.0
        for _ in range(cfg.mc_samples):
            xi = rng.standard_normal(mean_logits.shape)
            for sign in (1.0, -1.0):
                logits = mean_logits + sign * tau[:, None] * xi
                loss += mean_cross_entropy(logits, labels)
                r = logit_residual(logits, labels)
                # d logits_c / d sigma_k = sign * xi_c * sigma_k z_k^2 / tau
                coeff = np.sum(r * sign * xi, axis=1) / tau
                g_sigma += (coeff @ z2) * sigma / n
                g_head += r.T @ zt / n
        m = 2 * cfg.mc_samples
        if head_opt is not None:
            state["head"] = head_opt.step(head, g_head / m)
        return loss / m, g_sigma / m

    return data_grad, float(np.sum(probe.head[:, :-1] ** 2)), state


def fim_robust(probe: ProbeNetwork, task: Task, cfg: Optional[RobustFisherConfig] = None,
               rng: Optional[np.random.Generator] = None) -> Embedding:
    """Variational Fisher estimate with one learned precision per filter.

    The head must already be fitted.  Returned ``values`` are
    ``max(0, (beta/2N) (Lambda - lam2))`` per group; the precisions themselves
    are kept in ``precision`` and the learned prior in ``prior_scale``.
    """
    cfg = cfg or RobustFisherConfig()
    rng = rng if rng is not None else make_rng(0)
    groups = probe.filter_groups()
    if probe.kind == "two_layer":
        data_grad, w_sq, _ = _twolayer_data_grad(probe, task, cfg)
    else:
        data_grad, w_sq, _ = _frozen_data_grad(probe, task, cfg)
    sizes = [len(g) for g in groups]
    mean_diag = float(np.mean(fim_empirical_diag(probe, task, math.inf)))
    if cfg.lam2_init is None:
        lam2 = mean_diag if mean_diag > 0 else sum(sizes) / max(w_sq, 1e-300)
        cfg = replace(cfg, lam2_init=lam2)
    init = None
    if cfg.warm_start:
        init = math.log(cfg.lam2_init + 2.0 * task.n / cfg.beta * mean_diag)
    fit = optimize_precision(data_grad, sizes, w_sq, task.n, cfg, rng, init)
    values = np.maximum(0.0, cfg.beta / (2.0 * task.n) * (fit.precision - fit.lam2))
    return Embedding(values, probe.feature_id, "robust", task.n, fit.lam2, cfg.beta, fit.converged,
                     task.id, fit.precision)


# ---------------------------------------------------------------- convenience


def embed_task(probe: ProbeNetwork, task: Task, estimator: str = "analytic",
               head_opts: Optional[HeadFitOptions] = None, robust: Optional[RobustFisherConfig] = None,
               mc_labels=math.inf, rng: Optional[np.random.Generator] = None) -> Embedding:
    """Fit the probe's head on ``task`` and return its Fisher embedding."""
    if estimator not in ("analytic", "empirical", "robust"):
        raise ValidationError(f"unknown estimator {estimator!r}")
    fitted, report = fit_head(probe.zero_head(task.num_classes), task, head_opts)
    groups = fitted.filter_groups()
    if estimator == "robust":
        emb = fim_robust(fitted, task, robust, rng)
        emb.converged = emb.converged and report.converged
        return emb
    mc = math.inf if estimator == "analytic" else mc_labels
    diag = fim_empirical_diag(fitted, task, mc, rng)
    return Embedding(aggregate(diag, groups), fitted.feature_id, estimator, task.n,
                     converged=report.converged, task_id=task.id)
