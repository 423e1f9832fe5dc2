"""Command-line entry point: synth, train-base, meta-train, maml-train, evaluate, timing.

Every stage takes ``--seed`` and ``--config``; ``--set key=value`` (repeatable)
and the dedicated flags override values from the config file. The feature
split is drawn once by ``train-base`` and travels inside the base checkpoint.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .checkpoint import load_chn, load_maml, load_pvae, save_chn, save_maml, save_pvae
from .config import RunConfig, load_config
from .datasets import generate_synthetic, load_dataset_dir, metadata_matrix, write_dataset_dir
from .errors import ChnError, InvalidArgument
from .evaluation import (MethodContext, aggregate, aggregate_csv, episodes_csv, evaluate_kshot,
                         make_split, parse_methods, report_csv, time_grid, timing_csv,
                         train_base_model, train_chn, train_maml)
from .numerics import Rng
from .pvae import FrozenBase


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=Path, help="flat 'key = value' file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config value (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="chnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic low-rank dataset")
    _common(p)
    p.add_argument("--rows", type=int, default=500)
    p.add_argument("--features", type=int, default=60)
    p.add_argument("--rank", type=int, default=3)
    p.add_argument("--obs-prob", type=float, default=0.12)
    p.add_argument("--noise-sd", type=float, default=0.0)
    p.add_argument("--kind", choices=("binary", "continuous"), default="binary")
    p.add_argument("--tag-groups", type=int, default=4)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train-base", help="train and freeze the base model")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--trace", type=Path, help="write the per-epoch ELBO here")

    for name, what in (("meta-train", "train the hypernetwork"),
                       ("maml-train", "meta-learn a MAML head initialisation")):
        p = sub.add_parser(name, help=what)
        _common(p)
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--base", type=Path, required=True)
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--trace", type=Path)

    for name, what in (("evaluate", "k-shot evaluation on the meta-test features"),
                       ("timing", "time head initialisation")):
        p = sub.add_parser(name, help=what)
        _common(p)
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--base", type=Path, required=True)
        p.add_argument("--chn", type=Path)
        p.add_argument("--maml", type=Path)
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--ks", type=_int_list)
        if name == "evaluate":
            p.add_argument("--methods", default="chn,random,mean_impute,mean_head,"
                                                "mean_head_matching,knn:10,train_from_random:10")
            p.add_argument("--aggregate", type=Path, help="aggregate CSV (default: <out>.agg.csv)")
            p.add_argument("--episodes", type=Path, help="episode hash CSV")
        else:
            p.add_argument("--methods", default="chn,train_from_random:10")
            p.add_argument("--batch-size", type=int, default=128)
            p.add_argument("--repetitions", type=int, default=20)
    return parser


def _config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise _UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    if getattr(args, "ks", None):
        overrides["ks"] = args.ks
    return config.replace(**overrides)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _trace(path: Path | None, values) -> None:
    if path is not None:
        _write(path, "".join(f"{i},{v!r}\n" for i, v in enumerate(values)))


def _load_base(args, cache: bool = True):
    dataset, metas = load_dataset_dir(args.data)
    model, split = load_pvae(args.base)
    if split is None:
        raise InvalidArgument(f"{args.base}: checkpoint carries no feature split")
    if model.n_features != dataset.n_features:
        raise InvalidArgument(f"{args.base}: built for {model.n_features} features, "
                              f"data has {dataset.n_features}")
    return dataset, metas, model, split, FrozenBase(model, dataset, split.train, cache=cache)


def _cmd_synth(args, config: RunConfig) -> None:
    ds, metas, factors = generate_synthetic(args.rows, args.features, args.rank, args.noise_sd,
                                            args.obs_prob, args.kind, args.tag_groups,
                                            Rng(args.seed).child("synth").generator())
    vocab = [f"group{g}" for g in range(args.tag_groups)]
    write_dataset_dir(args.out, ds, metas, vocab, factors)


def _cmd_train_base(args, config: RunConfig) -> None:
    dataset, metas = load_dataset_dir(args.data)
    split = make_split(config, dataset, metas, args.seed)
    model, trace = train_base_model(config, dataset, split, args.seed)
    save_pvae(model, args.out, split)
    _trace(args.trace, trace)


def _cmd_meta_train(args, config: RunConfig) -> None:
    dataset, metas, _, split, base = _load_base(args)
    chn, trace = train_chn(config, base, split, metadata_matrix(metas, dataset.n_features),
                           args.seed)
    save_chn(chn, args.out)
    _trace(args.trace, trace)


def _cmd_maml_train(args, config: RunConfig) -> None:
    _, _, _, split, base = _load_base(args)
    init, trace = train_maml(config, base, split, args.seed)
    save_maml(init, args.out)
    _trace(args.trace, trace)


def _method_context(args, config: RunConfig, base, split, metas) -> tuple[MethodContext, list]:
    methods = parse_methods(args.methods)
    names = {m.name for m in methods}
    if names & {"chn", "chn_then_finetune"} and args.chn is None:
        raise InvalidArgument("methods chn / chn_then_finetune need --chn <checkpoint>")
    if "maml" in names and args.maml is None:
        raise InvalidArgument("method maml needs --maml <checkpoint>")
    chn = load_chn(args.chn) if args.chn else None
    maml = load_maml(args.maml) if args.maml else None
    ctx = MethodContext(base, split, metas, args.seed, chn, maml, config.tfr_lr)
    return ctx, methods


def _cmd_evaluate(args, config: RunConfig) -> None:
    _, metas, _, split, base = _load_base(args)
    ctx, methods = _method_context(args, config, base, split, metas)
    report = evaluate_kshot(methods, ctx, config.ks)
    header = [f"seed = {args.seed}", *config.lines()]
    _write(args.out, report_csv(report.rows, header))
    agg = args.aggregate or args.out.with_suffix(".agg.csv")
    _write(agg, aggregate_csv(aggregate(report.rows)))
    if args.episodes:
        _write(args.episodes, episodes_csv(report))
    if report.undefined:
        print(f"{report.undefined} (method, feature, k) entries had an undefined metric",
              file=sys.stderr)


def _cmd_timing(args, config: RunConfig) -> None:
    # encodings are recomputed per request so the cost of reading the context is measured
    _, metas, _, split, base = _load_base(args, cache=False)
    ctx, methods = _method_context(args, config, base, split, metas)
    ks = args.ks or (1, 16)
    pairs = [(m, k) for m in methods for k in ks]
    result = time_grid(pairs, ctx, split.meta_test, args.batch_size, args.repetitions)
    rows = [(str(m), k, *result[m, k], args.batch_size, args.repetitions) for m, k in pairs]
    _write(args.out, timing_csv(rows))


_COMMANDS = {
    "synth": _cmd_synth,
    "train-base": _cmd_train_base,
    "meta-train": _cmd_meta_train,
    "maml-train": _cmd_maml_train,
    "evaluate": _cmd_evaluate,
    "timing": _cmd_timing,
}


def run_cli(argv: list[str] | None = None) -> int:
    """Run one subcommand; returns 0 on success, 1 on a runtime error, 2 on bad usage."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = _config(args)
    except _UsageError as e:
        print(str(e).rstrip(), file=sys.stderr)
        return 2
    except InvalidArgument as e:
        print(f"chnet: error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except OSError as e:
        print(f"chnet: cannot read config: {e}", file=sys.stderr)
        return 1
    try:
        _COMMANDS[args.command](args, config)
    except (ChnError, OSError) as e:
        print(f"chnet {args.command}: {e}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
