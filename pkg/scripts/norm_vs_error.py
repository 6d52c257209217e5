"""Spearman correlation between embedding L1 norm and held-out error, per probe kind and seed."""

import argparse

from taskfisher.meta import norm_error_study
from taskfisher.probes import make_probe
from taskfisher.tasks import make_partition_task

PROBES = {
    "two_layer": dict(h=10),
    "random_relu": dict(h=10),
    "polynomial": dict(degree=3),
}


def stratified_tasks(n: int, seed: int, grid_n: int = 32):
    ks = [3 + (i * 14) // n for i in range(n)]
    return [make_partition_task(grid_n, k, seed=1000 * seed + i) for i, k in enumerate(ks)]


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--tasks", type=int, default=24)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args()
    for kind, kw in PROBES.items():
        rhos = []
        for seed in range(args.seeds):
            res = norm_error_study(stratified_tasks(args.tasks, seed), make_probe(kind, seed=seed, **kw),
                                   seed=seed, jobs=args.jobs)
            rhos.append(res.rho)
        print(f"{kind:<12} " + "  ".join(f"{r:+.3f}" for r in rhos))


if __name__ == "__main__":
    main()
