"""Command-line entry point.

Every subcommand reads an optional INI file (``--config``, section ``[run]``),
lets flags override it, and writes the fully resolved configuration to
``<out>/config.ini``.  Rerunning with that file reproduces the outputs byte
for byte.  Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import meta as M
from .distances import METRICS, distance_matrix
from .fisher import Embedding, RobustFisherConfig, embed_task, load_embedding, save_embedding
from .model2vec import ErrorMatrix, Model2VecHyper, save_registry, train_model2vec
from .numerics import NumericalError, ValidationError, make_rng, pca_project
from .probes import KINDS, HeadFitOptions, load_probe, make_probe, save_probe
from .tasks import (
    load_task_csv,
    make_partition_task,
    make_random_label_task,
    make_taxonomy_suite,
    save_task_csv,
    save_taxonomy,
)

SECTION = "run"


class UsageError(ValidationError):
    pass


# ---------------------------------------------------------------- config keys


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"not a boolean: {text!r}")


def _opt(conv: Callable) -> Callable:
    def parse(text):
        if text is None or str(text).strip().lower() in ("", "none"):
            return None
        return conv(text)
    return parse


def _ints(text) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _words(text) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(str(v) for v in text)
    return tuple(v for v in str(text).replace(",", " ").split() if v)


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class Key:
    name: str
    conv: Callable
    default: object
    help: str


def _k(name, conv, default, help_text):
    return Key(name, conv, default, help_text)


OUT = [_k("out", str, None, "output directory"), _k("jobs", int, 1, "worker processes")]

PROBE = [
    _k("probe", str, "two_layer", f"probe kind: {', '.join(KINDS)}"),
    _k("h", int, 10, "hidden width (two_layer, random_relu)"),
    _k("degree", int, 3, "monomial degree (polynomial)"),
    _k("probe_seed", int, 0, "seed for the probe's feature parameters"),
    _k("probe_scale", float, 1.0, "first-layer scale (two_layer)"),
    _k("input_bias", _bool, False, "append a constant input (two_layer)"),
]

ESTIMATOR = [
    _k("estimator", str, "analytic", "analytic, empirical or robust"),
    _k("beta", float, 1.0, "robust estimator: KL weight beta"),
    _k("lam2", _opt(float), None, "robust estimator: prior precision (none = data-driven)"),
    _k("robust_steps", int, 2000, "robust estimator: optimizer steps"),
    _k("mc_labels", _opt(int), None, "empirical estimator: sampled labels per input (none = exact expectation)"),
    _k("head_weight_decay", float, 0.0, "L2 penalty of the head fitted before embedding"),
    _k("seed", int, 0, "seed for stochastic estimators"),
]


def _meta_keys() -> list:
    out = []
    defaults = M.MetaConfig()
    for f in fields(M.MetaConfig):
        value = getattr(defaults, f.name)
        if isinstance(value, bool):
            conv = _bool
        elif isinstance(value, tuple):
            conv = _ints
        elif f.name == "t0_level":
            conv = _opt(float)
        elif isinstance(value, int):
            conv = int
        elif isinstance(value, float):
            conv = float
        else:
            conv = str
        out.append(_k(f.name, conv, value, f"meta-task: {f.name.replace('_', ' ')}"))
    return out


HYPER = [
    _k("alpha_s", float, 20.0, "model2vec: soft-label sharpness"),
    _k("m2v_lr", float, 0.05, "model2vec: Adam learning rate"),
    _k("m2v_weight_decay", float, 5e-4, "model2vec: weight decay on the biases"),
    _k("m2v_epochs", int, 81, "model2vec: epochs"),
    _k("gamma_init", float, 10.0, "model2vec: initial temperature"),
]

COMMANDS: dict[str, tuple[str, list]] = {
    "gen-tasks": ("generate toy tasks", OUT + [
        _k("kind", str, "partition", "partition, taxonomy or random"),
        _k("grid", int, 32, "grid side length"),
        _k("k", str, "3..16", "cluster count or range lo..hi (partition)"),
        _k("count", int, 16, "number of tasks (partition, random)"),
        _k("branching", _ints, (2, 2, 4), "taxonomy: clusters per refinement level"),
        _k("k_leaf", int, 4, "taxonomy: categories per leaf task"),
        _k("seed", int, 0, "generator seed"),
    ]),
    "embed": ("compute task embeddings", OUT + [_k("inputs", _words, (), "task CSV files or directories")]
              + PROBE + ESTIMATOR),
    "dist": ("distance matrix of embeddings", OUT + [
        _k("inputs", _words, (), "embedding files or directories"),
        _k("metric", str, "d_sym", f"one of {', '.join(METRICS)}"),
        _k("alpha", float, 0.15, "d_asym complexity weight"),
        _k("t0_level", _opt(float), None, "trivial-embedding level (none = derived)"),
    ]),
    "error-matrix": ("ground-truth error matrix of the meta-task", OUT + _meta_keys()),
    "select": ("expert selection report", OUT + _meta_keys() + HYPER + [
        _k("strategy", _words, ("all",), f"'all' or a list of {', '.join(M.STRATEGIES)}"),
    ]),
    "model2vec": ("train the joint task/model embedding", OUT + _meta_keys() + HYPER),
    "report": ("plot-ready exports from earlier outputs", OUT + [
        _k("embed_dir", str, None, "directory written by 'embed'"),
        _k("tasks_dir", _opt(str), None, "task directory for the norm-vs-error table"),
        _k("selection", _opt(str), None, "selection.json written by 'select'"),
        _k("metric", str, "d_sym", "distance for the dendrogram"),
        _k("train_fraction", float, 0.5, "norm-vs-error: train split fraction"),
        _k("head_weight_decay", float, 0.0, "norm-vs-error: head L2 penalty"),
        _k("seed", int, 0, "norm-vs-error: split seed"),
    ]),
    "sweep": ("data-efficiency sweep", OUT + _meta_keys() + HYPER + [
        _k("sizes", _words, ("64", "128", "256", "full"), "train sizes, 'full' for the whole split"),
        _k("strategies", _words, ("generic", "task2vec_asym"), "strategies to compare"),
        _k("finetune", _bool, False, "fine-tune the chosen expert instead of fitting a head"),
    ]),
}


# ---------------------------------------------------------------- parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="taskfisher", description="Fisher task embeddings and expert selection")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (help_text, keys) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="INI file with a [run] section; flags override it")
        for key in keys:
            flag = "--" + key.name.replace("_", "-")
            if key.name == "inputs":
                p.add_argument("inputs", nargs="*", default=None, help=key.help)
            else:
                p.add_argument(flag, dest=key.name, default=None, metavar=key.name.upper(),
                               help=f"{key.help} (default: {_fmt(key.default)})")
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    keys = {k.name: k for k in COMMANDS[command][1]}
    raw: dict = {}
    if args.config:
        cp = configparser.ConfigParser(interpolation=None)
        if not cp.read(args.config, encoding="utf-8"):
            raise ValidationError(f"cannot read config file {args.config}")
        if not cp.has_section(SECTION):
            raise ValidationError(f"{args.config}: missing [{SECTION}] section")
        for name, value in cp.items(SECTION):
            if name == "command":
                if value != command:
                    raise ValidationError(f"{args.config} was written for '{value}', not '{command}'")
                continue
            if name not in keys:
                raise ValidationError(f"{args.config}: unknown key {name!r} for '{command}'")
            raw[name] = value
    for name in keys:
        value = getattr(args, name, None)
        if value is not None and not (name == "inputs" and value == []):
            raw[name] = value
    out = {}
    for name, key in keys.items():
        try:
            out[name] = key.conv(raw[name]) if name in raw else key.default
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"bad value for {name}: {exc}") from None
    if not out.get("out"):
        raise ValidationError("--out is required")
    if out["jobs"] < 1:
        raise ValidationError("--jobs must be >= 1")
    return out


def write_config(command: str, cfg: dict, out: Path) -> None:
    cp = configparser.ConfigParser(interpolation=None)
    cp[SECTION] = {"command": command, **{k: _fmt(v) for k, v in cfg.items()}}
    with open(out / "config.ini", "w", encoding="utf-8") as fh:
        cp.write(fh)


# ---------------------------------------------------------------- helpers


def _k_range(text: str) -> tuple[int, int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        return int(lo), int(hi)
    return int(text), int(text)


def _files(inputs: Sequence[str], pattern: str) -> list[Path]:
    out: list[Path] = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            out.extend(sorted(p.glob(pattern)))
        elif p.exists():
            out.append(p)
        else:
            raise ValidationError(f"no such file or directory: {item}")
    if not out:
        raise ValidationError("no input files")
    return out


def _meta_config(cfg: dict) -> M.MetaConfig:
    return M.MetaConfig(**{f.name: cfg[f.name] for f in fields(M.MetaConfig)})


def _hyper(cfg: dict) -> Model2VecHyper:
    return Model2VecHyper(alpha_s=cfg["alpha_s"], lr=cfg["m2v_lr"], weight_decay=cfg["m2v_weight_decay"],
                          epochs=cfg["m2v_epochs"], gamma_init=cfg["gamma_init"], alpha=cfg["alpha"])


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format(v, ".17g") if isinstance(v, float) else v for v in row])


def _meta_setup(cfg: dict):
    meta = M.build_meta_task(_meta_config(cfg), cfg["jobs"])
    embs = M.embed_meta(meta, cfg["jobs"])
    em = M.build_error_matrix(meta, cfg["jobs"])
    return meta, embs, em


def _save_meta_description(meta: M.MetaTask, out: Path) -> None:
    from . import serial

    serial.write_json({
        "format_version": M.FORMAT_VERSION,
        "task_ids": meta.task_ids,
        "family": meta.family,
        "expert_ids": list(meta.expert_ids),
        "expert_task": [None if t is None else meta.task_ids[t] for t in meta.expert_task],
    }, out / "meta_task.json")


# ---------------------------------------------------------------- commands


def cmd_gen_tasks(cfg: dict, out: Path) -> str:
    kind = cfg["kind"]
    if kind == "partition":
        lo, hi = _k_range(cfg["k"])
        if lo > hi:
            raise ValidationError(f"empty k range {cfg['k']}")
        n = cfg["count"]
        if n < 1:
            raise ValidationError("--count must be >= 1")
        ks = [lo + (i * (hi - lo + 1)) // n for i in range(n)]
        tasks = [make_partition_task(cfg["grid"], k, seed=cfg["seed"] * 100_000 + i,
                                     task_id=f"part-{i:03d}-k{k}") for i, k in enumerate(ks)]
    elif kind == "random":
        tasks = [make_random_label_task(cfg["grid"], seed=cfg["seed"] * 100_000 + i,
                                        task_id=f"random-{i:03d}") for i in range(cfg["count"])]
    elif kind == "taxonomy":
        tasks, tree = make_taxonomy_suite(cfg["grid"], cfg["branching"], cfg["k_leaf"], cfg["seed"])
        save_taxonomy(tree, out / "taxonomy.txt")
    else:
        raise ValidationError(f"unknown task kind {kind!r}")
    for t in tasks:
        save_task_csv(t, out / f"{t.id}.csv")
    return f"wrote {len(tasks)} tasks to {out}"


def cmd_embed(cfg: dict, out: Path) -> str:
    paths = _files(cfg["inputs"], "*.csv")
    tasks = [load_task_csv(p) for p in paths]
    d = {t.d for t in tasks}
    if len(d) != 1:
        raise ValidationError("all tasks must share the input dimension")
    ids = [t.id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate task ids among the inputs")
    probe = make_probe(cfg["probe"], h=cfg["h"], d=d.pop(), degree=cfg["degree"], seed=cfg["probe_seed"],
                       input_bias=cfg["input_bias"], scale=cfg["probe_scale"])
    robust = None
    if cfg["estimator"] == "robust":
        robust = RobustFisherConfig(beta=cfg["beta"], lam2_init=cfg["lam2"], steps=cfg["robust_steps"])
    elif cfg["estimator"] not in ("analytic", "empirical"):
        raise ValidationError(f"unknown estimator {cfg['estimator']!r}")
    mc = math.inf if cfg["mc_labels"] is None else cfg["mc_labels"]
    if cfg["estimator"] == "empirical" and mc is not math.inf:
        embs = [embed_task(probe, t, "empirical", HeadFitOptions(weight_decay=cfg["head_weight_decay"]),
                             mc_labels=mc, rng=make_rng((cfg["seed"], 3, i))) for i, t in enumerate(tasks)]
    else:
        embs = M.embed_tasks(probe, tasks, cfg["estimator"], robust, cfg["seed"], cfg["jobs"],
                             HeadFitOptions(weight_decay=cfg["head_weight_decay"]))
    save_probe(probe, out / "probe.json")
    for t, e in zip(tasks, embs):
        save_embedding(e, out / f"{t.id}.emb.json")
    bad = [t.id for t, e in zip(tasks, embs) if not e.converged]
    note = f" ({len(bad)} flagged unconverged)" if bad else ""
    return f"wrote {len(embs)} embeddings to {out}{note}"


def _load_embeddings(inputs) -> list[Embedding]:
    return [load_embedding(p) for p in _files(inputs, "*.emb.json")]


def cmd_dist(cfg: dict, out: Path) -> str:
    embs = _load_embeddings(cfg["inputs"])
    t0 = None
    if cfg["metric"] == "d_asym":
        t0 = M.trivial_vector(embs, cfg["t0_level"])
    dm = distance_matrix(embs, cfg["metric"], t0, cfg["alpha"])
    dm.save(out / f"{cfg['metric']}.csv")
    return f"wrote {len(embs)}x{len(embs)} {cfg['metric']} matrix to {out}"


def cmd_error_matrix(cfg: dict, out: Path) -> str:
    meta = M.build_meta_task(_meta_config(cfg), cfg["jobs"])
    em = M.build_error_matrix(meta, cfg["jobs"])
    em.save(out / "error_matrix.csv")
    _save_meta_description(meta, out)
    return f"wrote {em.values.shape[0]}x{em.values.shape[1]} error matrix to {out}"


def _strategies(names: Sequence[str]) -> list[str]:
    if list(names) == ["all"]:
        return list(M.STRATEGIES)
    bad = [s for s in names if s not in M.STRATEGIES]
    if bad:
        raise ValidationError(f"unknown strategies {bad}; expected {list(M.STRATEGIES)}")
    return list(names)


def cmd_select(cfg: dict, out: Path) -> str:
    from . import serial

    meta, embs, em = _meta_setup(cfg)
    report = M.run_selection(meta, embs, em, _strategies(cfg["strategy"]), _hyper(cfg))
    em.save(out / "error_matrix.csv")
    _save_meta_description(meta, out)
    serial.write_json(report.to_dict(), out / "selection.json")
    text = report.to_text()
    (out / "selection.txt").write_text(text, encoding="utf-8")
    return text.rstrip("\n")


def cmd_model2vec(cfg: dict, out: Path) -> str:
    from . import serial

    meta, embs, em = _meta_setup(cfg)
    hyper = _hyper(cfg)
    report = M.run_selection(meta, embs, em, ["task2vec_asym", "model2vec"], hyper)
    spec = meta.specialists()
    sub = ErrorMatrix(em.values[:, spec], em.task_ids, [em.expert_ids[j] for j in spec])
    allow = meta.allowed()[:, spec]
    t0 = M.trivial_vector(embs, meta.config.t0_level)
    fit = train_model2vec(embs, [embs[meta.expert_task[j]] for j in spec], sub, hyper, t0, allowed=allow,
                          trained_on=[meta.task_ids[meta.expert_task[j]] for j in spec])
    save_registry(fit, out / "registry.json",
                  [f"{meta.task_ids[meta.expert_task[j]]}.emb.json" for j in spec])
    for t, e in zip(meta.tasks, embs):
        save_embedding(e, out / f"{t.id}.emb.json")
    em.save(out / "error_matrix.csv")
    serial.write_json(report.to_dict(), out / "loo.json")
    text = report.to_text()
    (out / "loo.txt").write_text(text, encoding="utf-8")
    return text.rstrip("\n")


def _report_from_dict(doc: dict) -> M.SelectionReport:
    if doc.get("format_version") != M.FORMAT_VERSION:
        raise ValidationError("selection report format_version mismatch")
    names = {f.name for f in fields(M.SelectionReport)}
    return M.SelectionReport(**{k: v for k, v in doc.items() if k in names})


def cmd_report(cfg: dict, out: Path) -> str:
    from . import serial
    from .tasks import SplitSpec

    if not cfg["embed_dir"]:
        raise ValidationError("--embed-dir is required")
    embs = _load_embeddings([cfg["embed_dir"]])
    ids = [e.task_id or f"t{i}" for i, e in enumerate(embs)]
    lines = [f"embeddings: {len(embs)}"]
    norms = [float(np.sum(e.values)) for e in embs]
    x = np.array([e.values for e in embs])
    dims = min(2, *x.shape)
    proj = pca_project(x, dims) if len(embs) >= 2 else np.zeros((len(embs), dims))
    _write_csv(out / "pca.csv", ["task", "pc1", "pc2", "l1_norm"],
               [[tid, float(p[0]), float(p[1]) if dims > 1 else 0.0, n] for tid, p, n in zip(ids, proj, norms)])
    if len(embs) >= 2:
        metric = cfg["metric"]
        t0 = M.trivial_vector(embs) if metric == "d_asym" else None
        dm = distance_matrix(embs, metric, t0, ids=ids)
        dm.save(out / f"{metric}.csv")
        if dm.symmetric:
            (out / "dendrogram.txt").write_text(M.hierarchical_cluster(dm).to_text(), encoding="utf-8")
    if cfg["tasks_dir"]:
        probe = load_probe(Path(cfg["embed_dir"]) / "probe.json")
        by_id = {t.id: t for t in (load_task_csv(p) for p in _files([cfg["tasks_dir"]], "*.csv"))}
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise ValidationError(f"tasks missing from {cfg['tasks_dir']}: {missing[:3]}")
        est = embs[0].estimator if embs[0].estimator in ("analytic", "empirical") else "analytic"
        res = M.norm_error_study([by_id[i] for i in ids], probe, est,
                                 SplitSpec(cfg["train_fraction"], cfg["seed"]),
                                 HeadFitOptions(weight_decay=cfg["head_weight_decay"]), seed=cfg["seed"],
                                 jobs=cfg["jobs"])
        _write_csv(out / "norm_vs_error.csv", ["task", "l1_norm", "test_error"],
                   [[i, float(n), float(e)] for i, n, e in zip(res.task_ids, res.norms, res.errors)])
        lines.append(f"spearman(l1 norm, test error) = {res.rho:.4f}")
    if cfg["selection"]:
        rep = _report_from_dict(serial.read_json(cfg["selection"]))
        table = rep.to_text()
        (out / "table.txt").write_text(table, encoding="utf-8")
        lines.append(table.rstrip("\n"))
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text, encoding="utf-8")
    return text.rstrip("\n")


def cmd_sweep(cfg: dict, out: Path) -> str:
    from . import serial

    sizes: list = []
    for s in cfg["sizes"]:
        sizes.append(None if s == "full" else int(s))
    meta = M.build_meta_task(_meta_config(cfg), cfg["jobs"])
    strategies = _strategies(cfg["strategies"])
    rows = M.data_efficiency_sweep(meta, sizes, strategies, cfg["finetune"], _hyper(cfg),
                                   jobs=cfg["jobs"])
    doc = M.sweep_to_dict(rows)
    if None in sizes and "task2vec_asym" in strategies:
        stab = M.choice_stability(rows)
        doc["stability"] = [{"size": k, "fraction": v} for k, v in stab.items()]
    serial.write_json(doc, out / "sweep.json")
    _write_csv(out / "sweep.csv", ["size", "strategy", "mean_error"],
               [["full" if r.size is None else r.size, r.strategy, r.mean_error] for r in rows])
    return "\n".join(f"{'full' if r.size is None else r.size:>5}  {r.strategy:<14} {r.mean_error:.4f}"
                     for r in rows)


HANDLERS = {
    "gen-tasks": cmd_gen_tasks,
    "embed": cmd_embed,
    "dist": cmd_dist,
    "error-matrix": cmd_error_matrix,
    "select": cmd_select,
    "model2vec": cmd_model2vec,
    "report": cmd_report,
    "sweep": cmd_sweep,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve(args.command, args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        message = HANDLERS[args.command](cfg, out)
        write_config(args.command, cfg, out)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if message:
        print(message)
    return 0


if __name__ == "__main__":
    sys.exit(main())
