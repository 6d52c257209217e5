"""Compare robust and analytic embeddings of partition tasks, and the robust embedding of a random-label task."""

import argparse

import numpy as np

from taskfisher.distances import d_cos
from taskfisher.fisher import RobustFisherConfig, embed_task
from taskfisher.numerics import make_rng
from taskfisher.probes import make_probe
from taskfisher.tasks import make_partition_task, make_random_label_task


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--beta", type=float, default=1.0)
    args = p.parse_args()
    probe = make_probe("two_layer", h=10, seed=0)
    cfg = RobustFisherConfig(beta=args.beta, steps=args.steps)
    for k in (3, 6, 10):
        task = make_partition_task(32, k, seed=k)
        a = embed_task(probe, task, "analytic")
        r = embed_task(probe, task, "robust", robust=cfg, rng=make_rng(k))
        print(f"k={k:<3} cosine distance robust vs analytic: {d_cos(a.values, r.values):.2e}")
    rnd = embed_task(probe, make_random_label_task(32), "robust", robust=cfg, rng=make_rng(1))
    ratio = rnd.precision / rnd.prior_scale
    print("random labels: precision / prior per group:", np.array2string(ratio, precision=4))


if __name__ == "__main__":
    main()
