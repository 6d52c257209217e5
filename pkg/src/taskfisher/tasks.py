"""Labeled tasks: toy partition generator, CSV interchange, splits, taxonomy."""

from __future__ import annotations

import csv
import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .numerics import KMeansDegenerate, NumericalError, ValidationError, kmeans, make_rng


@dataclass(frozen=True, eq=False)
class Task:
    id: str
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    taxonomy_node: Optional[str] = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.ascontiguousarray(self.inputs, dtype=float)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ValidationError(f"task {self.id}: inputs {x.shape} / labels {y.shape} mismatch")
        if not np.all(np.isfinite(x)):
            raise ValidationError(f"task {self.id}: non-finite inputs")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValidationError(f"task {self.id}: label outside [0, {self.num_classes})")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, idx, suffix: str = "") -> "Task":
        idx = np.asarray(idx)
        return replace(self, id=self.id + suffix, inputs=self.inputs[idx], labels=self.labels[idx])

    def flipped(self) -> "Task":
        """Binary task with labels swapped (y -> 1 - y)."""
        if self.num_classes != 2:
            raise ValidationError("flipped() only applies to binary tasks")
        return replace(self, id=self.id + "-flip", labels=1 - self.labels)

    def __eq__(self, other):
        if not isinstance(other, Task):
            return NotImplemented
        return (
            self.id == other.id
            and self.num_classes == other.num_classes
            and self.taxonomy_node == other.taxonomy_node
            and self.provenance == other.provenance
            and np.array_equal(self.inputs, other.inputs)
            and np.array_equal(self.labels, other.labels)
        )


def unit_grid(grid_n: int) -> np.ndarray:
    """``grid_n**2`` cell-center points of the unit square, row-major in (x, y)."""
    g = (np.arange(grid_n) + 0.5) / grid_n
    xx, yy = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def _assign_halves(k: int, rng: np.random.Generator) -> np.ndarray:
    return np.sort(rng.choice(k, size=math.ceil(k / 2), replace=False))


def make_partition_task(
    grid_n: int = 32, k: int = 3, seed: int = 0, task_id: Optional[str] = None, max_retries: int = 5
) -> Task:
    """Binary task from a k-means partition of the unit grid.

    ``ceil(k/2)`` randomly chosen clusters form class 1, the rest class 0.
    A degenerate clustering is regenerated from the next sub-seed.
    """
    if grid_n < 8:
        raise ValidationError("grid_n must be >= 8")
    if not 3 <= k <= 16:
        raise ValidationError("k must be in [3, 16]")
    points = unit_grid(grid_n)
    for attempt in range(max_retries + 1):
        rng = make_rng((seed, attempt))
        try:
            km = kmeans(points, k, rng)
        except KMeansDegenerate:
            continue
        positive = _assign_halves(k, rng)
        labels = np.isin(km.labels, positive).astype(np.int64)
        return Task(
            id=task_id or f"part-g{grid_n}-k{k}-s{seed}",
            inputs=points,
            labels=labels,
            num_classes=2,
            provenance={
                "generator": "partition",
                "grid_n": grid_n,
                "k": k,
                "seed": seed,
                "attempt": attempt,
                "clusters": km.labels.tolist(),
                "positive_clusters": positive.tolist(),
            },
        )
    raise NumericalError(f"k-means degenerate after {max_retries} retries (seed={seed}, k={k})")


def make_flip_family(grid_n: int = 32, k: int = 6, n_variants: int = 3, seed: int = 0,
                     prefix: Optional[str] = None) -> list[Task]:
    """A partition task followed by variants that each flip one cluster's class.

    Members share the clustering and differ in a single cluster, so most of
    their decision boundary is common.
    """
    if not 0 <= n_variants <= k:
        raise ValidationError("n_variants must be between 0 and k")
    base = make_partition_task(grid_n, k, seed)
    prefix = prefix or f"fam-g{grid_n}-k{k}-s{seed}"
    clusters = np.asarray(base.provenance["clusters"])
    flips = make_rng((seed, 7)).choice(k, size=n_variants, replace=False)
    out = [replace(base, id=f"{prefix}-v0", provenance=dict(base.provenance, family=prefix, flipped=None))]
    for v, c in enumerate(flips, start=1):
        labels = base.labels.copy()
        labels[clusters == c] ^= 1
        out.append(Task(f"{prefix}-v{v}", base.inputs, labels, 2,
                        provenance=dict(base.provenance, family=prefix, flipped=int(c))))
    return out


def make_random_label_task(grid_n: int = 32, seed: int = 0, task_id: Optional[str] = None,
                           mode: str = "paired") -> Task:
    """Unit grid whose labels carry no information about the inputs.

    ``paired`` lists every grid point once with each label, so the empirical
    joint factorizes exactly and a refit head is exactly zero.  ``sampled``
    shuffles a balanced label vector over the grid; a finite sample then still
    has spurious structure a head can fit.
    """
    points = unit_grid(grid_n)
    n = points.shape[0]
    if mode == "paired":
        inputs = np.vstack([points, points])
        labels = np.concatenate([np.zeros(n, dtype=np.int64), np.ones(n, dtype=np.int64)])
    elif mode == "sampled":
        rng = make_rng((seed, 1_000_003))
        inputs = points
        labels = np.zeros(n, dtype=np.int64)
        labels[: n // 2] = 1
        rng.shuffle(labels)
    else:
        raise ValidationError(f"unknown random-label mode {mode!r}")
    return Task(
        id=task_id or f"rand-g{grid_n}-s{seed}",
        inputs=inputs,
        labels=labels,
        num_classes=2,
        provenance={"generator": "random_labels", "grid_n": grid_n, "seed": seed, "mode": mode},
    )


# ---------------------------------------------------------------- CSV


def save_task_csv(task: Task, path) -> None:
    """Write ``x1..xd,label`` rows; metadata goes to ``<path>.json`` next to it."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i + 1}" for i in range(task.d)] + ["label"])
        for row, lab in zip(task.inputs, task.labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])
    meta = {
        "format_version": 1,
        "id": task.id,
        "num_classes": task.num_classes,
        "taxonomy_node": task.taxonomy_node,
        "provenance": task.provenance,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def load_task_csv(path) -> Task:
    """Read a ``x1..xd,label`` CSV.

    A ``<path>.json`` sidecar, if present, restores id and metadata, and
    integer labels below its class count are kept as they are.  Otherwise
    labels are remapped to ``0..C-1`` in order of first appearance and the
    mapping is kept in ``provenance['label_map']``.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValidationError(f"{path}: no data rows")
    header = rows[0]
    ncol = len(header)
    if ncol < 2 or header[-1].strip() != "label":
        raise ValidationError(f"{path}: header must be x1,...,xd,label")
    feats, raw = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != ncol:
            raise ValidationError(f"{path}:{lineno}: expected {ncol} columns, got {len(row)}")
        try:
            feats.append([float(v) for v in row[:-1]])
        except ValueError as exc:
            raise ValidationError(f"{path}:{lineno}: non-numeric feature ({exc})") from None
        raw.append(row[-1].strip())
    if len(set(raw)) < 2:
        raise ValidationError(f"{path}: need at least two classes")
    meta_path = path.with_suffix(path.suffix + ".json")
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        if meta.get("format_version") != 1:
            raise ValidationError(f"{meta_path}: unsupported format_version")
        prov = dict(meta.get("provenance") or {})
        c = int(meta["num_classes"])
        if all(lab.isdigit() and int(lab) < c for lab in raw):
            # labels written by save_task_csv are class indices already
            labels = np.array([int(lab) for lab in raw], dtype=np.int64)
        else:
            mapping: dict[str, int] = {}
            for lab in raw:
                mapping.setdefault(lab, len(mapping))
            labels = np.array([mapping[lab] for lab in raw], dtype=np.int64)
            prov["label_map"] = mapping
            c = max(c, len(mapping))
        return Task(meta["id"], np.array(feats), labels, c, meta.get("taxonomy_node"), prov)
    mapping = {}
    for lab in raw:
        mapping.setdefault(lab, len(mapping))
    labels = np.array([mapping[lab] for lab in raw], dtype=np.int64)
    prov = {"source": str(path)}
    if not all(k == str(v) for k, v in mapping.items()):
        prov["label_map"] = mapping
    return Task(path.stem, np.array(feats), labels, len(mapping), None, prov)


# ---------------------------------------------------------------- splits & sampling


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.5
    seed: int = 0
    stratified: bool = True


def split(task: Task, spec: SplitSpec) -> tuple[Task, Task]:
    if not 0.0 < spec.train_fraction < 1.0:
        raise ValidationError(f"train_fraction={spec.train_fraction} leaves an empty split")
    rng = make_rng((spec.seed, 17))
    train_idx = []
    if spec.stratified:
        for c in range(task.num_classes):
            idx = np.flatnonzero(task.labels == c)
            if idx.size == 0:
                continue
            if idx.size < 2:
                raise ValidationError(f"class {c} has fewer than 2 samples; cannot stratify")
            idx = rng.permutation(idx)
            ntr = int(round(spec.train_fraction * idx.size))
            ntr = min(max(ntr, 1), idx.size - 1)
            train_idx.append(idx[:ntr])
        train_idx = np.sort(np.concatenate(train_idx))
    else:
        perm = rng.permutation(task.n)
        ntr = min(max(int(round(spec.train_fraction * task.n)), 1), task.n - 1)
        train_idx = np.sort(perm[:ntr])
    mask = np.zeros(task.n, dtype=bool)
    mask[train_idx] = True
    return task.subset(np.flatnonzero(mask), "/train"), task.subset(np.flatnonzero(~mask), "/test")


def balanced_epoch(task: Task, epoch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Indices drawn with replacement, class chosen uniformly per draw."""
    classes = [np.flatnonzero(task.labels == c) for c in range(task.num_classes)]
    classes = [c for c in classes if c.size]
    if not classes:
        raise ValidationError("task has no samples")
    which = rng.integers(len(classes), size=epoch_size)
    out = np.empty(epoch_size, dtype=np.int64)
    for ci, members in enumerate(classes):
        sel = which == ci
        out[sel] = members[rng.integers(members.size, size=int(sel.sum()))]
    return out


def balanced_subsample(task: Task, size: int, rng: np.random.Generator) -> Task:
    """Without-replacement subsample with (as far as possible) equal class counts."""
    if size >= task.n:
        return task
    counts = task.class_counts()
    present = np.flatnonzero(counts)
    want = np.full(present.size, size // present.size)
    want[: size - want.sum()] += 1
    # classes smaller than their share give the remainder to the others
    take = np.minimum(want, counts[present])
    short = size - take.sum()
    while short > 0:
        room = counts[present] - take
        open_ = np.flatnonzero(room > 0)
        add = np.zeros_like(take)
        add[open_[: short]] = 1
        take += add
        short = size - take.sum()
    idx = []
    for c, t in zip(present, take):
        members = np.flatnonzero(task.labels == c)
        idx.append(rng.choice(members, size=int(t), replace=False))
    return task.subset(np.sort(np.concatenate(idx)), f"/n{size}")


# ---------------------------------------------------------------- taxonomy


class TaxonomyTree:
    """Rooted tree given by parent links; optional edge weights (default 1)."""

    def __init__(self, parents: dict[str, Optional[str]], weights: Optional[dict[str, float]] = None):
        roots = [n for n, p in parents.items() if p is None]
        if len(roots) != 1:
            raise ValidationError(f"taxonomy needs exactly one root, found {len(roots)}")
        for n, p in parents.items():
            if p is not None and p not in parents:
                raise ValidationError(f"node {n!r} has unknown parent {p!r}")
        self.parents = dict(parents)
        self.weights = {n: 1.0 for n in parents}
        if weights:
            self.weights.update(weights)
        self.root = roots[0]
        self.children: dict[str, list[str]] = {n: [] for n in parents}
        for n, p in parents.items():
            if p is not None:
                self.children[p].append(n)
        self.depth: dict[str, float] = {}
        self.hops: dict[str, int] = {}
        queue = deque([self.root])
        self.depth[self.root] = 0.0
        self.hops[self.root] = 0
        while queue:
            n = queue.popleft()
            for c in self.children[n]:
                self.depth[c] = self.depth[n] + self.weights[c]
                self.hops[c] = self.hops[n] + 1
                queue.append(c)
        if len(self.depth) != len(parents):
            raise ValidationError("taxonomy contains a cycle or disconnected nodes")

    def __contains__(self, node):
        return node in self.parents

    def leaves_under(self, node: str) -> list[str]:
        if node not in self.parents:
            raise ValidationError(f"unknown taxonomy node {node!r}")
        out, stack = [], [node]
        while stack:
            n = stack.pop()
            if self.children[n]:
                stack.extend(reversed(self.children[n]))
            else:
                out.append(n)
        return out

    def ancestors(self, node: str) -> list[str]:
        path = [node]
        while self.parents[path[-1]] is not None:
            path.append(self.parents[path[-1]])
        return path

    def lca(self, a: str, b: str) -> str:
        anc = set(self.ancestors(a))
        for n in self.ancestors(b):
            if n in anc:
                return n
        raise AssertionError("tree has a single root")

    def node_distance(self, a: str, b: str, weighted: bool = False) -> float:
        c = self.lca(a, b)
        if weighted:
            return self.depth[a] + self.depth[b] - 2 * self.depth[c]
        return float(self.hops[a] + self.hops[b] - 2 * self.hops[c])

    def to_lines(self) -> list[str]:
        lines = []
        for n in sorted(self.parents, key=lambda n: (self.hops[n], n)):
            p = self.parents[n]
            w = self.weights[n]
            if p is None:
                lines.append(f"{n} -")
            elif w != 1.0:
                lines.append(f"{n} {p} {w!r}")
            else:
                lines.append(f"{n} {p}")
        return lines


def save_taxonomy(tree: TaxonomyTree, path) -> None:
    Path(path).write_text("\n".join(tree.to_lines()) + "\n", encoding="utf-8")


def load_taxonomy(path) -> TaxonomyTree:
    """``child parent [weight]`` per line; the root is written ``root -``."""
    parents: dict[str, Optional[str]] = {}
    weights: dict[str, float] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise ValidationError(f"{path}:{lineno}: expected 'child parent [weight]'")
        child, parent = parts[0], parts[1]
        if child in parents:
            raise ValidationError(f"{path}:{lineno}: duplicate node {child!r}")
        parents[child] = None if parent == "-" else parent
        if len(parts) == 3:
            weights[child] = float(parts[2])
    return TaxonomyTree(parents, weights)


def taxonomic_distance(tree: TaxonomyTree, task_a: Task, task_b: Task, weighted: bool = False) -> float:
    """Minimum tree distance between the category sets (leaves) of two tasks."""
    for t in (task_a, task_b):
        if t.taxonomy_node is None or t.taxonomy_node not in tree:
            raise ValidationError(f"task {t.id} has no node in the taxonomy")
    sa = tree.leaves_under(task_a.taxonomy_node)
    sb = tree.leaves_under(task_b.taxonomy_node)
    if set(sa) & set(sb):
        return 0.0
    return min(tree.node_distance(i, j, weighted) for i in sa for j in sb)


# ---------------------------------------------------------------- hierarchical toy suite


def make_taxonomy_suite(
    grid_n: int = 64, branching=(2, 2, 4), k_leaf: int = 4, seed: int = 0
) -> tuple[list[Task], TaxonomyTree]:
    """Tasks from recursive k-means refinement of the unit grid.

    Each level splits every region into ``branching[i]`` k-means sub-regions;
    the last level's regions become tasks.  A task's region is clustered once
    more into ``k_leaf`` categories (the taxonomy leaves) and ``ceil(k_leaf/2)``
    of them form class 1.
    """
    points = unit_grid(grid_n)
    parents: dict[str, Optional[str]] = {"root": None}
    regions = [("root", np.arange(points.shape[0]))]
    for level, b in enumerate(branching, start=1):
        nxt = []
        for ri, (name, idx) in enumerate(regions):
            rng = make_rng((seed, level, ri))
            km = kmeans(points[idx], b, rng)
            for c in range(b):
                child = f"{name}.{c}" if name != "root" else f"n{c}"
                parents[child] = name
                nxt.append((child, idx[km.labels == c]))
        regions = nxt
    tasks = []
    for ti, (name, idx) in enumerate(regions):
        rng = make_rng((seed, 99, ti))
        km = kmeans(points[idx], k_leaf, rng)
        for c in range(k_leaf):
            parents[f"{name}:c{c}"] = name
        positive = _assign_halves(k_leaf, rng)
        labels = np.isin(km.labels, positive).astype(np.int64)
        tasks.append(
            Task(
                id=f"tax-{name}",
                inputs=points[idx],
                labels=labels,
                num_classes=2,
                taxonomy_node=name,
                provenance={"generator": "taxonomy", "grid_n": grid_n, "seed": seed,
                            "branching": list(branching), "k_leaf": k_leaf},
            )
        )
    return tasks, TaxonomyTree(parents)
