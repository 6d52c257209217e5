"""Relative error increase of each selection strategy on the toy meta-task, over several seeds."""

import argparse

from taskfisher.meta import MetaConfig, build_error_matrix, build_meta_task, embed_meta, run_selection


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--alpha", type=float, default=0.15)
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args()
    for seed in range(args.seeds):
        meta = build_meta_task(MetaConfig(seed=seed, alpha=args.alpha), args.jobs)
        embs = embed_meta(meta, args.jobs)
        em = build_error_matrix(meta, args.jobs)
        rep = run_selection(meta, embs, em)
        print(f"seed {seed}")
        print(rep.to_text())


if __name__ == "__main__":
    main()
