"""Model-selection meta-tasks: expert libraries, error matrices and scoring."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import serial
from .distances import DistanceMatrix, d_asym, d_sym
from .fisher import Embedding, RobustFisherConfig, embed_task
from .model2vec import ErrorMatrix, Model2VecHyper, leave_one_out
from .numerics import OptimizerConfig, ValidationError, make_rng, parallel_map, spearman
from .probes import (
    FinetuneOptions,
    HeadFitOptions,
    ProbeNetwork,
    error_rate,
    finetune_expert,
    fit_head,
    make_probe,
    train_generic_expert,
)
from .tasks import SplitSpec, Task, balanced_subsample, make_flip_family, make_partition_task, split

STRATEGIES = ("chance", "generic", "task2vec_sym", "task2vec_asym", "model2vec")
FORMAT_VERSION = 1


@dataclass
class MetaConfig:
    """Composition of the toy model-selection meta-task.

    Tasks come in families: a k-means partition task plus variants that flip
    one cluster's class.  The first ``experts_per_family`` members of each
    family get an expert, fine-tuned from the generic expert.
    """

    grid_n: int = 32
    family_k: tuple = (10, 11, 12, 13, 14, 15)
    variants: int = 3
    experts_per_family: int = 2
    h: int = 16
    input_bias: bool = True
    probe_scale: float = 1.0
    generic_k: tuple = (3, 4, 5, 6, 7, 8, 10, 12)
    train_fraction: float = 0.5
    finetune_epochs: int = 100
    finetune_lr: float = 0.02
    lr_decay_epoch: int = 70
    head_weight_decay: float = 5e-4  # heads on frozen expert features
    estimator: str = "analytic"
    embed_weight_decay: float = 1e-3  # head fitted before computing a task embedding
    robust_steps: int = 2000
    alpha: float = 0.15
    t0_level: Optional[float] = None  # None: derived from the embeddings
    leave_one_out: bool = True
    seed: int = 0

    def __post_init__(self):
        self.family_k = tuple(int(k) for k in self.family_k)
        self.generic_k = tuple(int(k) for k in self.generic_k)
        if not self.family_k:
            raise ValidationError("meta-task needs at least one family")
        if not 1 <= self.experts_per_family <= self.variants + 1:
            raise ValidationError("experts_per_family must be between 1 and variants + 1")
        if self.estimator not in ("analytic", "empirical", "robust"):
            raise ValidationError(f"unknown estimator {self.estimator!r}")

    def finetune_options(self) -> FinetuneOptions:
        return FinetuneOptions(
            epochs=self.finetune_epochs,
            lr_decay_epoch=self.lr_decay_epoch,
            optimizer=OptimizerConfig("adam", lr=self.finetune_lr, weight_decay=5e-4),
            head=self.head_options(),
        )

    def head_options(self) -> HeadFitOptions:
        return HeadFitOptions(weight_decay=self.head_weight_decay)


@dataclass
class MetaTask:
    config: MetaConfig
    tasks: list
    splits: list  # (train, test) per task
    family: list  # family index per task
    experts: list  # ProbeNetwork; the generic expert is last
    expert_ids: list
    expert_task: list  # task index each expert was trained on, None for the generic one
    probe: ProbeNetwork  # embedding probe (the generic expert)

    @property
    def generic_index(self) -> int:
        return self.expert_task.index(None)

    @property
    def task_ids(self) -> list:
        return [t.id for t in self.tasks]

    def own_expert(self) -> list:
        """Column of the expert trained on each task, or None."""
        own: list = [None] * len(self.tasks)
        for j, ti in enumerate(self.expert_task):
            if ti is not None:
                own[ti] = j
        return own

    def allowed(self) -> np.ndarray:
        """Candidate mask (tasks x experts) after leave-one-out exclusion."""
        allow = np.ones((len(self.tasks), len(self.experts)), bool)
        if self.config.leave_one_out:
            for i, j in enumerate(self.own_expert()):
                if j is not None:
                    allow[i, j] = False
        return allow

    def specialists(self) -> list:
        return [j for j, ti in enumerate(self.expert_task) if ti is not None]


def _finetune_job(args):
    probe, train, opts, seed = args
    return finetune_expert(probe, train, opts, make_rng(seed))


def build_meta_task(cfg: Optional[MetaConfig] = None, jobs: int = 1) -> MetaTask:
    cfg = cfg or MetaConfig()
    tasks, family = [], []
    for f, k in enumerate(cfg.family_k):
        members = make_flip_family(cfg.grid_n, k, cfg.variants, seed=10_000 * cfg.seed + f,
                                   prefix=f"f{f}k{k}")
        tasks += members
        family += [f] * len(members)
    spec = SplitSpec(cfg.train_fraction, cfg.seed)
    splits = [split(t, spec) for t in tasks]
    generic_pool = [make_partition_task(cfg.grid_n, k, seed=10_000 * cfg.seed + 5_000 + i)
                    for i, k in enumerate(cfg.generic_k)]
    probe0 = make_probe("two_layer", h=cfg.h, seed=cfg.seed, input_bias=cfg.input_bias,
                        scale=cfg.probe_scale)
    opts = cfg.finetune_options()
    generic = train_generic_expert(probe0, [split(t, spec)[0] for t in generic_pool], opts,
                                   make_rng((cfg.seed, 1)))
    per = cfg.variants + 1
    trained = [i for i in range(len(tasks)) if i % per < cfg.experts_per_family]
    experts = parallel_map(_finetune_job, [(generic, splits[i][0], opts, (cfg.seed, 2, i)) for i in trained], jobs)
    expert_ids = [f"x:{tasks[i].id}" for i in trained] + ["generic"]
    return MetaTask(cfg, tasks, splits, family, experts + [generic], expert_ids, trained + [None], generic)


# ---------------------------------------------------------------- embeddings and errors


def _embed_job(args):
    probe, task, estimator, robust, head_opts, seed = args
    return embed_task(probe, task, estimator, head_opts, robust=robust, rng=make_rng(seed))


def embed_tasks(probe: ProbeNetwork, tasks: Sequence[Task], estimator: str = "analytic",
                robust: Optional[RobustFisherConfig] = None, seed: int = 0, jobs: int = 1,
                head_opts: Optional[HeadFitOptions] = None) -> list:
    jobs_in = [(probe, t, estimator, robust, head_opts, (seed, 3, i)) for i, t in enumerate(tasks)]
    return parallel_map(_embed_job, jobs_in, jobs)


def embed_meta(meta: MetaTask, jobs: int = 1, train: Optional[Sequence[Task]] = None) -> list:
    cfg = meta.config
    robust = RobustFisherConfig(steps=cfg.robust_steps) if cfg.estimator == "robust" else None
    data = list(train) if train is not None else [tr for tr, _ in meta.splits]
    return embed_tasks(meta.probe, data, cfg.estimator, robust, cfg.seed, jobs,
                       HeadFitOptions(weight_decay=cfg.embed_weight_decay))


def trivial_vector(embeddings: Sequence[Embedding], level: Optional[float] = None) -> np.ndarray:
    """The trivial embedding t0 on the embeddings' scale.

    Robust embeddings carry their own prior level; for the other estimators,
    which have no prior, the median entry over all embeddings stands in.
    """
    n = len(embeddings[0])
    if level is None:
        levels = [e.trivial_level for e in embeddings]
        if all(v is not None for v in levels):
            level = float(np.mean(levels))
        else:
            level = float(np.median(np.concatenate([e.values for e in embeddings])))
    if level <= 0:
        raise ValidationError("trivial level must be positive")
    return np.full(n, level)


def _error_job(args):
    expert, train, test, opts = args
    fitted, rep = fit_head(expert.zero_head(train.num_classes), train, opts, test=test)
    return rep.test_error, rep.converged


def build_error_matrix(meta: MetaTask, jobs: int = 1, train: Optional[Sequence[Task]] = None) -> ErrorMatrix:
    """Test error of a head fitted on every (task, frozen expert) pair."""
    opts = meta.config.head_options()
    trains = list(train) if train is not None else [tr for tr, _ in meta.splits]
    pairs = [(e, trains[i], meta.splits[i][1], opts)
             for i in range(len(meta.tasks)) for e in meta.experts]
    out = parallel_map(_error_job, pairs, jobs)
    n_e = len(meta.experts)
    vals = np.array([o[0] for o in out]).reshape(len(meta.tasks), n_e)
    flagged = [[i // n_e, i % n_e] for i, o in enumerate(out) if not o[1]]
    info = {"seed": meta.config.seed, "head_weight_decay": opts.weight_decay,
            "n_test": [te.n for _, te in meta.splits], "unconverged": flagged}
    return ErrorMatrix(vals, meta.task_ids, list(meta.expert_ids), meta=info)


# ---------------------------------------------------------------- selection


def select(strategy: str, meta: MetaTask, embeddings: Sequence[Embedding],
           error_matrix: Optional[ErrorMatrix] = None, t0: Optional[np.ndarray] = None,
           hyper: Optional[Model2VecHyper] = None, alpha: Optional[float] = None) -> list:
    """Chosen expert column per task; ``None`` entries mean "expected over candidates" (chance).

    Only ``model2vec`` reads the error matrix (it is trained on it, leave-one-out).
    """
    if strategy not in STRATEGIES:
        raise ValidationError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    n = len(meta.tasks)
    if len(embeddings) != n:
        raise ValidationError("need one embedding per task")
    alpha = meta.config.alpha if alpha is None else alpha
    allow = meta.allowed()
    if strategy == "chance":
        return [None] * n
    if strategy == "generic":
        return [meta.generic_index] * n
    spec = meta.specialists()
    if not spec:
        return [meta.generic_index] * n
    t0 = trivial_vector(embeddings, meta.config.t0_level) if t0 is None else t0
    if strategy == "model2vec":
        if error_matrix is None:
            raise ValidationError("model2vec selection needs the error matrix")
        sub = ErrorMatrix(error_matrix.values[:, spec], error_matrix.task_ids,
                          [error_matrix.expert_ids[j] for j in spec], error_matrix.mask[:, spec])
        own = [None if j is None else spec.index(j) for j in meta.own_expert()] \
            if meta.config.leave_one_out else [None] * n
        bases = [embeddings[meta.expert_task[j]] for j in spec]
        hyper = hyper or Model2VecHyper(alpha=alpha)
        picks = leave_one_out(embeddings, bases, sub, own, hyper, t0)
        return [spec[p] for p in picks]
    out = []
    for i in range(n):
        cands = [j for j in spec if allow[i, j]]
        if not cands:
            out.append(meta.generic_index)
            continue
        if strategy == "task2vec_sym":
            d = [d_sym(embeddings[meta.expert_task[j]], embeddings[i]) for j in cands]
        else:
            d = [d_asym(embeddings[meta.expert_task[j]], embeddings[i], t0, alpha) for j in cands]
        out.append(cands[int(np.argmin(d))])
    return out


@dataclass
class SelectionReport:
    strategies: list
    task_ids: list
    expert_ids: list
    chosen: dict  # strategy -> list of expert ids (None = expectation)
    task_errors: dict  # strategy -> per-task error
    optimal_errors: list
    mean_error: dict
    optimal_mean: float
    relative_increase: dict  # strategy -> mean per-task relative increase (fraction)

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, **asdict(self)}

    def to_text(self) -> str:
        rows = [("optimal", self.optimal_mean, 0.0)] + [
            (s, self.mean_error[s], self.relative_increase[s]) for s in self.strategies]
        w = max(len(r[0]) for r in rows)
        lines = [f"{'strategy':<{w}}  {'mean err':>9}  {'rel. increase':>13}"]
        for name, err, inc in rows:
            lines.append(f"{name:<{w}}  {err:>9.4f}  {100 * inc:>+12.2f}%")
        return "\n".join(lines) + "\n"


def evaluate(error_matrix: ErrorMatrix, selections: dict, allowed: Optional[np.ndarray] = None,
             floor: Optional[Sequence[float]] = None) -> SelectionReport:
    """Mean over tasks of (err_selected - err_optimal) / err_optimal.

    The optimum is the row minimum over ``allowed`` candidates.  A ``None``
    choice scores the mean error over the allowed candidates (chance).  A
    zero optimum would make the ratio undefined, so the denominator is floored
    (by default at 1 / n_test when the matrix records test sizes, else 1e-12).
    """
    e = error_matrix.values
    n_t, n_e = e.shape
    allow = error_matrix.mask if allowed is None else (np.asarray(allowed, bool) & error_matrix.mask)
    if np.any(~allow.any(axis=1)):
        raise ValidationError("a task has no allowed expert")
    opt = np.array([e[i, allow[i]].min() for i in range(n_t)])
    if floor is None:
        n_test = error_matrix.meta.get("n_test")
        floor = [1.0 / n for n in n_test] if n_test else [1e-12] * n_t
    denom = np.maximum(opt, np.asarray(floor, dtype=float))
    chosen, errs, means, rel = {}, {}, {}, {}
    for name, picks in selections.items():
        if len(picks) != n_t:
            raise ValidationError(f"strategy {name}: {len(picks)} choices for {n_t} tasks")
        row = []
        for i, j in enumerate(picks):
            row.append(float(e[i, allow[i]].mean()) if j is None else float(e[i, j]))
        row = np.array(row)
        chosen[name] = [None if j is None else error_matrix.expert_ids[j] for j in picks]
        errs[name] = row.tolist()
        means[name] = float(row.mean())
        rel[name] = float(np.mean((row - opt) / denom))
    return SelectionReport(list(selections), list(error_matrix.task_ids), list(error_matrix.expert_ids),
                           chosen, errs, opt.tolist(), means, float(opt.mean()), rel)


def run_selection(meta: MetaTask, embeddings, error_matrix: ErrorMatrix,
                  strategies: Sequence[str] = STRATEGIES, hyper: Optional[Model2VecHyper] = None) -> SelectionReport:
    t0 = trivial_vector(embeddings, meta.config.t0_level)
    sels = {s: select(s, meta, embeddings, error_matrix, t0, hyper) for s in strategies}
    return evaluate(error_matrix, sels, meta.allowed())


# ---------------------------------------------------------------- clustering


@dataclass
class Dendrogram:
    merges: list  # [left, right, height, size]; ids >= n are earlier merges
    order: list  # leaf order for display
    ids: list

    def to_text(self) -> str:
        names = list(self.ids)
        lines = []
        for step, (a, b, h, size) in enumerate(self.merges):
            lines.append(f"{step:3d}  {h:.6f}  {names[int(a)]} + {names[int(b)]}  ({int(size)})")
            names.append(f"#{step}")
        lines.append("order: " + " ".join(self.ids[i] for i in self.order))
        return "\n".join(lines) + "\n"


def hierarchical_cluster(dm: DistanceMatrix) -> Dendrogram:
    """Average-linkage agglomeration of a symmetric distance matrix."""
    from scipy.cluster.hierarchy import leaves_list, linkage
    from scipy.spatial.distance import squareform

    if not dm.symmetric:
        raise ValidationError("hierarchical clustering needs a symmetric distance matrix")
    n = len(dm.ids)
    if n == 1:
        return Dendrogram([], [0], list(dm.ids))
    z = linkage(squareform(dm.values, checks=False), method="average")
    merges = [[int(a), int(b), float(h), int(s)] for a, b, h, s in z]
    return Dendrogram(merges, [int(i) for i in leaves_list(z)], list(dm.ids))


# ---------------------------------------------------------------- studies


@dataclass
class NormErrorResult:
    task_ids: list
    norms: np.ndarray
    errors: np.ndarray
    rho: float


def norm_error_study(tasks: Sequence[Task], probe: ProbeNetwork, estimator: str = "analytic",
                     split_spec: Optional[SplitSpec] = None, head_opts: Optional[HeadFitOptions] = None,
                     robust: Optional[RobustFisherConfig] = None, seed: int = 0,
                     jobs: int = 1) -> NormErrorResult:
    """L1 norm of each task's embedding against the held-out error of the probe's head."""
    spec = split_spec or SplitSpec()
    splits = [split(t, spec) for t in tasks]
    embs = embed_tasks(probe, [tr for tr, _ in splits], estimator, robust, seed, jobs, head_opts)
    errors = []
    for tr, te in splits:
        _, rep = fit_head(probe.zero_head(tr.num_classes), tr, head_opts, test=te)
        errors.append(rep.test_error)
    norms = np.array([float(np.sum(np.abs(e.values))) for e in embs])
    errors = np.array(errors)
    return NormErrorResult([t.id for t in tasks], norms, errors, spearman(norms, errors))


@dataclass
class SweepRow:
    size: Optional[int]  # None = full train split
    strategy: str
    mean_error: float
    chosen: list


def data_efficiency_sweep(meta: MetaTask, sample_sizes: Sequence[Optional[int]],
                          strategies: Sequence[str] = ("generic", "task2vec_asym"),
                          finetune: bool = False, hyper: Optional[Model2VecHyper] = None,
                          rng: Optional[np.random.Generator] = None, jobs: int = 1) -> list:
    """Mean test error per (train size, strategy), plus the optimal row-min.

    Each task's train split is subsampled (class-balanced) to each size; the
    embeddings and the error matrix are recomputed on the subsample and the
    test split is kept.  With ``finetune`` the selected expert is fine-tuned on
    the subsample instead of only receiving a fitted head.
    """
    rng = rng if rng is not None else make_rng((meta.config.seed, 11))
    rows = []
    seeds = [int(s) for s in rng.integers(2**31, size=len(meta.tasks))]
    for size in sample_sizes:
        trains = [tr if size is None else balanced_subsample(tr, int(size), make_rng((seeds[i], int(size))))
                  for i, (tr, _) in enumerate(meta.splits)]
        embs = embed_meta(meta, jobs, trains)
        em = build_error_matrix(meta, jobs, trains)
        allow = meta.allowed()
        t0 = trivial_vector(embs, meta.config.t0_level)
        opt = [float(em.values[i, allow[i]].min()) for i in range(len(meta.tasks))]
        rows.append(SweepRow(size, "optimal", float(np.mean(opt)), []))
        for s in strategies:
            picks = select(s, meta, embs, em, t0, hyper)
            if finetune and s != "chance":
                errs = []
                opts = meta.config.finetune_options()
                for i, j in enumerate(picks):
                    tuned = finetune_expert(meta.experts[j].zero_head(2), trains[i], opts,
                                            make_rng((seeds[i], 5)))
                    errs.append(error_rate(tuned, meta.splits[i][1]))
            else:
                errs = [float(em.values[i, allow[i]].mean()) if j is None else float(em.values[i, j])
                        for i, j in enumerate(picks)]
            rows.append(SweepRow(size, s, float(np.mean(errs)),
                                 [None if j is None else meta.expert_ids[j] for j in picks]))
    return rows


def choice_stability(rows: Sequence[SweepRow], strategy: str = "task2vec_asym") -> dict:
    """Per train size, the fraction of tasks whose chosen expert matches the full-size choice."""
    mine = [r for r in rows if r.strategy == strategy]
    ref = [r for r in mine if r.size is None]
    if not ref:
        raise ValidationError("stability needs a full-size (size=None) row")
    full = ref[0].chosen
    return {r.size: float(np.mean([a == b for a, b in zip(r.chosen, full)])) for r in mine}


def sweep_to_dict(rows: Sequence[SweepRow]) -> dict:
    return {"format_version": FORMAT_VERSION,
            "rows": [{"size": r.size, "strategy": r.strategy, "mean_error": r.mean_error, "chosen": r.chosen}
                     for r in rows]}
