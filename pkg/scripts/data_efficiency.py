"""Mean error of the generic and the asym-selected expert as the training set shrinks."""

import argparse

from taskfisher.meta import MetaConfig, build_meta_task, choice_stability, data_efficiency_sweep


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sizes", default="64,128,256,full")
    p.add_argument("--finetune", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args()
    sizes = [None if s == "full" else int(s) for s in args.sizes.split(",")]
    meta = build_meta_task(MetaConfig(seed=args.seed), args.jobs)
    rows = data_efficiency_sweep(meta, sizes, finetune=args.finetune, jobs=args.jobs)
    stab = choice_stability(rows) if None in sizes else {}
    for r in rows:
        size = "full" if r.size is None else str(r.size)
        extra = f"  same-as-full {stab[r.size]:.2f}" if r.strategy == "task2vec_asym" and stab else ""
        print(f"{size:>5}  {r.strategy:<14} {r.mean_error:.4f}{extra}")


if __name__ == "__main__":
    main()
