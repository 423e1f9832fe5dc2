"""Initialisation time per feature against context size, CHN vs gradient baselines.

    python scripts/timing_table.py --ks 1,4,16,32 --repetitions 20
"""
import argparse

from chnet.config import RunConfig
from chnet.datasets import generate_synthetic
from chnet.evaluation import MethodContext, parse_methods, time_grid, train_all
from chnet.numerics import Rng
from chnet.pvae import FrozenBase


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--ks", default="1,16")
    ap.add_argument("--methods", default="chn,knn:10,train_from_random:1,train_from_random:5,"
                                         "train_from_random:10")
    ap.add_argument("--batch-size", type=int, default=128)
    ap.add_argument("--repetitions", type=int, default=20)
    args = ap.parse_args()

    config = RunConfig()
    ds, metas, _ = generate_synthetic(500, 60, 3, 0.0, 0.12, "binary", 4,
                                      Rng(args.seed).child("synth").generator())
    trained = train_all(config, ds, metas, args.seed, maml=False)
    # uncached so every request pays for encoding its context rows
    base = FrozenBase(trained.model, ds, trained.split.train, cache=False)
    ctx = MethodContext(base, trained.split, metas, args.seed, trained.chn, tfr_lr=config.tfr_lr)
    methods = parse_methods(args.methods)
    ks = [int(k) for k in args.ks.split(",")]
    features = list(trained.split.meta_train) + list(trained.split.meta_test)
    result = time_grid([(m, k) for m in methods for k in ks], ctx, features,
                       args.batch_size, args.repetitions)

    print(f"ms per feature, {len(features)} features, {args.repetitions} repetitions")
    print(f"{'method':24s}" + "".join(f"{'k=' + str(k):>18s}" for k in ks))
    for m in methods:
        print(f"{str(m):24s}" + "".join(f"{result[m, k][0]:10.3f} ±{result[m, k][1]:6.3f}"
                                         for k in ks))


if __name__ == "__main__":
    main()
