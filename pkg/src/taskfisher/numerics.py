"""Dense numerical helpers shared by every other module.

Everything works on float64 numpy arrays.  Randomness always flows through an
explicit ``numpy.random.Generator`` built on the counter-based Philox bit
generator, so a given seed reproduces the same stream on every platform.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

#: Probability clamp used everywhere a log is taken.
EPS = 1e-12


class ValidationError(ValueError):
    """Bad input: wrong shapes, out-of-range parameters, malformed files."""


class NumericalError(ArithmeticError):
    """A computation produced NaN/Inf or failed to make progress."""


def make_rng(seed: int | Sequence[int]) -> np.random.Generator:
    """Philox-backed generator; ``seed`` may be a tuple to derive sub-streams."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def child_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Split ``rng`` into ``n`` independent generators (for parallel callers)."""
    return [np.random.Generator(bg) for bg in rng.bit_generator.spawn(n)]


def check_finite(x, what: str = "value"):
    a = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"{what} contains NaN or Inf")
    return x


def sigmoid(x):
    """Logistic function, clamped to ``[EPS, 1 - EPS]`` so logs stay finite.

    The clamp is symmetric, so ``sigmoid(-x) == 1 - sigmoid(x)`` holds up to
    rounding for every input.
    """
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    out = np.clip(out, EPS, 1.0 - EPS)
    return out if out.ndim else float(out)


def softmax(logits, axis: int = -1):
    logits = np.asarray(logits, dtype=float)
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1):
    logits = np.asarray(logits, dtype=float)
    m = logits.max(axis=axis, keepdims=True)
    return logits - m - np.log(np.exp(logits - m).sum(axis=axis, keepdims=True))


def cross_entropy(p, y):
    """Binary cross entropy ``-y log p - (1-y) log(1-p)`` with ``p`` clamped."""
    p = np.clip(np.asarray(p, dtype=float), EPS, 1.0 - EPS)
    y = np.asarray(y, dtype=float)
    out = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return out if out.ndim else float(out)


@dataclass
class HessianDiag:
    values: np.ndarray
    #: entries whose magnitude is not clearly above the rounding floor
    rounding_dominated: np.ndarray


def finite_diff_hessian_diag(
    f: Callable[[np.ndarray], float], w0, h: float = 1e-4, safety: float = 100.0
) -> HessianDiag:
    """Central second differences ``(f(w+h e_i) - 2 f(w) + f(w-h e_i)) / h**2``.

    An entry is flagged as rounding-dominated when its magnitude is below
    ``safety`` times the cancellation error ``4 eps |f(w0)| / h**2``.
    """
    if not 1e-5 <= h <= 1e-3:
        raise ValidationError(f"step h={h} outside [1e-5, 1e-3]")
    w0 = np.asarray(w0, dtype=float).ravel()
    f0 = float(f(w0))
    check_finite(f0, "f(w0)")
    out = np.empty(w0.size)
    for i in range(w0.size):
        wp = w0.copy()
        wm = w0.copy()
        wp[i] += h
        wm[i] -= h
        out[i] = (float(f(wp)) - 2.0 * f0 + float(f(wm))) / (h * h)
    check_finite(out, "hessian diagonal")
    floor = 4.0 * np.finfo(float).eps * max(abs(f0), np.finfo(float).tiny) / (h * h)
    return HessianDiag(out, np.abs(out) < safety * floor)


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia_history: list[float]
    n_iter: int
    converged: bool


class KMeansDegenerate(NumericalError):
    pass


def _sq_dists(points, centers):
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def kmeans(points, k: int, rng: np.random.Generator, max_iter: int = 100) -> KMeansResult:
    """Lloyd's algorithm with greedy farthest-point seeding.

    The first center is a uniformly drawn point; each further center is the
    point farthest from the centers chosen so far (lowest index on ties).
    Raises ``KMeansDegenerate`` if a cluster empties.
    """
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    if k < 1 or k > n:
        raise ValidationError(f"k={k} must be in [1, {n}]")
    idx = [int(rng.integers(n))]
    mind = _sq_dists(points, points[idx])[:, 0]
    for _ in range(1, k):
        j = int(np.argmax(mind))
        idx.append(j)
        mind = np.minimum(mind, _sq_dists(points, points[j : j + 1])[:, 0])
    centers = points[idx].copy()

    history: list[float] = []
    labels = np.full(n, -1)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(points, centers)
        new = np.argmin(d, axis=1)
        history.append(float(d[np.arange(n), new].sum()))
        if np.array_equal(new, labels):
            converged = True
            break
        labels = new
        counts = np.bincount(labels, minlength=k)
        if np.any(counts == 0):
            raise KMeansDegenerate(f"empty cluster after {it} iterations")
        for c in range(k):
            centers[c] = points[labels == c].mean(axis=0)
    return KMeansResult(labels, centers, history, it, converged)


def spearman(a, b) -> float:
    """Rank correlation with average ranks for ties."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError("spearman needs two 1-D vectors of equal length")
    if a.size < 3:
        raise ValidationError("spearman needs at least 3 points")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise ValidationError("spearman is undefined for a constant vector")
    ra = rankdata(a) - (a.size + 1) / 2.0
    rb = rankdata(b) - (a.size + 1) / 2.0
    return float(ra @ rb / np.sqrt((ra @ ra) * (rb @ rb)))


def pca_project(rows, dims: int, rtol: float = 1e-12):
    """Project centered ``rows`` onto their top ``dims`` principal axes.

    Each axis is signed so that its largest-magnitude loading is positive.
    Axes with (relatively) zero variance give all-zero columns.
    """
    x = np.asarray(rows, dtype=float)
    if x.ndim != 2:
        raise ValidationError("pca_project needs a 2-D array")
    if dims < 1 or dims > min(x.shape):
        raise ValidationError(f"dims={dims} exceeds min(rows, cols)={min(x.shape)}")
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    vt = vt[:dims].copy()
    for i, v in enumerate(vt):
        if v[np.argmax(np.abs(v))] < 0:
            vt[i] = -v
    out = xc @ vt.T
    smax = s[0] if s.size else 0.0
    for i in range(dims):
        if i >= s.size or s[i] <= rtol * max(smax, 1.0):
            out[:, i] = 0.0
    return out


@dataclass
class OptimizerConfig:
    """Hyperparameters for :class:`Optimizer`.

    ``kind`` is ``"sgd"`` (heavy-ball momentum) or ``"adam"``.  Weight decay is
    added to the gradient (L2 penalty), as in the usual deep-learning recipes.
    """

    kind: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class Optimizer:
    config: OptimizerConfig
    shape: tuple
    step_count: int = 0
    m: np.ndarray = field(init=False)
    v: Optional[np.ndarray] = field(init=False, default=None)

    def __post_init__(self):
        if self.config.kind not in ("sgd", "adam"):
            raise ValidationError(f"unknown optimizer kind {self.config.kind!r}")
        self.m = np.zeros(self.shape)
        if self.config.kind == "adam":
            self.v = np.zeros(self.shape)

    def step(self, params: np.ndarray, grad: np.ndarray, lr: Optional[float] = None) -> np.ndarray:
        """Return updated parameters; internal buffers advance by one step."""
        cfg = self.config
        lr = cfg.lr if lr is None else lr
        if grad.shape != self.m.shape:
            raise ValidationError(f"gradient shape {grad.shape} != {self.m.shape}")
        g = grad + cfg.weight_decay * params if cfg.weight_decay else grad
        self.step_count += 1
        if cfg.kind == "sgd":
            self.m = cfg.momentum * self.m + g
            return params - lr * self.m
        self.m = cfg.beta1 * self.m + (1 - cfg.beta1) * g
        self.v = cfg.beta2 * self.v + (1 - cfg.beta2) * g * g
        mhat = self.m / (1 - cfg.beta1**self.step_count)
        vhat = self.v / (1 - cfg.beta2**self.step_count)
        return params - lr * mhat / (np.sqrt(vhat) + cfg.eps)


def minimize(grad_fn, x0, config: OptimizerConfig, max_iter: int = 10_000, gtol: float = 1e-8):
    """Plain first-order loop; returns ``(x, grad_norm, iterations)``."""
    x = np.asarray(x0, dtype=float).copy()
    opt = Optimizer(config, x.shape)
    gnorm = np.inf
    for it in range(1, max_iter + 1):
        g = grad_fn(x)
        gnorm = float(np.linalg.norm(g))
        if gnorm < gtol:
            return x, gnorm, it
        x = opt.step(x, g)
        check_finite(x, "optimizer iterate")
    return x, gnorm, max_iter


def parallel_map(fn, items, jobs: int = 1) -> list:
    """``[fn(x) for x in items]``, optionally over a process pool.

    Results come back in input order regardless of completion order, so the
    output does not depend on ``jobs``.  ``fn`` must be picklable.
    """
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))
