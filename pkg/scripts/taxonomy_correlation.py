"""Spearman correlation between d_sym and taxonomic distance on the hierarchical toy suite."""

import argparse

import numpy as np

from taskfisher.distances import distance_matrix
from taskfisher.meta import embed_tasks
from taskfisher.numerics import spearman
from taskfisher.probes import make_probe
from taskfisher.tasks import make_taxonomy_suite, taxonomic_distance


def correlation(kind: str, seed: int, grid_n: int = 64, **probe_kw) -> float:
    tasks, tree = make_taxonomy_suite(grid_n, seed=seed)
    embs = embed_tasks(make_probe(kind, seed=seed, **probe_kw), tasks)
    dm = distance_matrix(embs, "d_sym")
    iu = np.triu_indices(len(tasks), 1)
    dt = np.array([[taxonomic_distance(tree, a, b) for b in tasks] for a in tasks])
    return spearman(dm.values[iu], dt[iu])


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=3)
    args = p.parse_args()
    for kind, kw in [("polynomial", dict(degree=3)), ("random_relu", dict(h=10)), ("two_layer", dict(h=10))]:
        rhos = [correlation(kind, s, **kw) for s in range(args.seeds)]
        print(f"{kind:<12} " + "  ".join(f"{r:+.3f}" for r in rhos))


if __name__ == "__main__":
    main()
