"""Training pipeline, k-shot evaluation protocol and initialisation timing."""
from __future__ import annotations

import csv
import gc
import io
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .baselines import (HeadBank, KnnIndex, MamlInit, knn_head, maml_adapt, maml_meta_train,
                        mean_head, mean_head_matching, mean_impute_head, random_head,
                        train_from_random)
from .chn import ChnParams, init_chn, meta_train, predict_head
from .config import RunConfig
from .datasets import (Episode, FeatureMeta, FeatureSplit, SparseDataset, metadata_matrix,
                       sample_episode, split_features)
from .errors import InvalidArgument, UndefinedMetric
from .metrics import auroc, rmse
from .numerics import Rng
from .pvae import FrozenBase, HeadParams, PvaeModel, init_pvae, train_base

REPORT_HEADER = ["method", "feature", "k", "metric", "value", "n_targets", "seed"]
AGGREGATE_HEADER = ["method", "k", "metric", "mean", "std", "n_seeds"]
TIMING_HEADER = ["method", "k", "mean_ms", "std_ms", "batch_size", "repetitions"]

_DEFAULT_PARAM = {"knn": 10, "train_from_random": 10, "maml": 0, "chn_then_finetune": 10}
_PLAIN = {"chn", "random", "mean_impute", "mean_head", "mean_head_matching"}


@dataclass(frozen=True)
class MethodId:
    name: str
    param: int | None = None

    def __str__(self) -> str:
        return self.name if self.param is None else f"{self.name}:{self.param}"


def parse_method(text: str) -> MethodId:
    name, _, arg = text.strip().partition(":")
    if name in _PLAIN:
        if arg:
            raise InvalidArgument(f"method {name} takes no parameter")
        return MethodId(name)
    if name in _DEFAULT_PARAM:
        try:
            value = int(arg) if arg else _DEFAULT_PARAM[name]
        except ValueError:
            raise InvalidArgument(f"bad parameter in method {text!r}") from None
        if value < 0 or (name == "knn" and value < 1):
            raise InvalidArgument(f"bad parameter in method {text!r}")
        return MethodId(name, value)
    raise InvalidArgument(f"unknown method {text!r}")


def parse_methods(text: str) -> list[MethodId]:
    return [parse_method(t) for t in text.split(",") if t.strip()]


# --------------------------------------------------------------------------
# training pipeline
# --------------------------------------------------------------------------

def make_split(config: RunConfig, dataset: SparseDataset, metas, seed: int) -> FeatureSplit:
    if config.split_mode == "ordered":
        if not metas or metas[0].scalar is None:
            raise InvalidArgument("ordered split needs a metadata scalar per feature")
        keys = [m.scalar for m in sorted(metas, key=lambda m: m.feature)]
        return split_features(dataset.n_features, config.split_fractions, "ordered", keys=keys)
    return split_features(dataset.n_features, config.split_fractions, "random",
                          rng=Rng(seed).child("split").generator())


def train_base_model(config: RunConfig, dataset: SparseDataset, split: FeatureSplit,
                     seed: int) -> tuple[PvaeModel, list[float]]:
    model = init_pvae(dataset.n_features, dataset.feature_kinds, split.train, config.pvae(),
                      Rng(seed).child("init", "pvae").generator())
    model, trace = train_base(model, dataset, split.train, config.base_training(),
                              Rng(seed).child("train", "pvae"))
    return model.freeze(), trace


def train_chn(config: RunConfig, base: FrozenBase, split: FeatureSplit,
              meta_matrix: np.ndarray | None, seed: int) -> tuple[ChnParams, list[float]]:
    meta_in = 0 if meta_matrix is None else meta_matrix.shape[1]
    chn = init_chn(base.latent_dim, base.d_dim, meta_in, config.chn(),
                   Rng(seed).child("init", "chn").generator())
    return meta_train(chn, base, split.meta_train, meta_matrix, config.meta_training(),
                      Rng(seed).child("train", "chn"))


def train_maml(config: RunConfig, base: FrozenBase, split: FeatureSplit,
               seed: int) -> tuple[MamlInit, list[float]]:
    return maml_meta_train(base, split.meta_train, config.maml(), Rng(seed).child("train", "maml"))


@dataclass
class Trained:
    split: FeatureSplit
    model: PvaeModel
    base: FrozenBase
    base_trace: list[float]
    chn: ChnParams | None = None
    chn_trace: list[float] = field(default_factory=list)
    maml: MamlInit | None = None
    maml_trace: list[float] = field(default_factory=list)


def train_all(config: RunConfig, dataset: SparseDataset, metas, seed: int,
              chn: bool = True, maml: bool = True) -> Trained:
    split = make_split(config, dataset, metas, seed)
    model, base_trace = train_base_model(config, dataset, split, seed)
    base = FrozenBase(model, dataset, split.train)
    out = Trained(split, model, base, base_trace)
    if chn:
        out.chn, out.chn_trace = train_chn(config, base, split,
                                           metadata_matrix(metas, dataset.n_features), seed)
    if maml:
        out.maml, out.maml_trace = train_maml(config, base, split, seed)
    return out


# --------------------------------------------------------------------------
# head producers
# --------------------------------------------------------------------------

class MethodContext:
    """Everything the head producers need for one split."""

    def __init__(self, base: FrozenBase, split: FeatureSplit, metas: Sequence[FeatureMeta] | None,
                 seed: int, chn: ChnParams | None = None, maml: MamlInit | None = None,
                 tfr_lr: float = 1e-2):
        self.base = base
        self.dataset = base.dataset
        self.split = split
        self.metas = list(metas) if metas else None
        self.meta_matrix = metadata_matrix(self.metas, self.dataset.n_features)
        self.seed = seed
        self.chn = chn
        self.maml = maml
        self.tfr_lr = tfr_lr
        self.bank = HeadBank.from_model(base.model, self.metas)
        self._knn: KnnIndex | None = None
        self._global_mean = {kind: self.dataset.global_mean(split.train, kind)
                             for kind in ("binary", "continuous")}

    @property
    def knn_index(self) -> KnnIndex:
        if self._knn is None:
            self._knn = KnnIndex(self.dataset, self.bank)
        return self._knn

    def kind(self, feature: int) -> str:
        return self.dataset.feature_kinds[feature]

    def global_mean(self, feature: int) -> float:
        return self._global_mean[self.kind(feature)]

    def random_init(self, ep: Episode) -> HeadParams:
        gen = Rng(self.seed).child("random_head", ep.feature, ep.k).generator()
        return random_head(self.base.d_dim, gen, self.base.link(ep.feature))

    def chn_heads(self, episodes: Sequence[Episode]) -> list[HeadParams]:
        # one independent forward pass per feature, the unit the timing table measures
        if self.chn is None:
            raise InvalidArgument("method chn needs a trained CHN")
        meta = self.meta_matrix
        return [predict_head(self.chn, self.base, ep.context_rows, ep.context_values,
                             None if meta is None else meta[ep.feature], self.base.link(ep.feature))
                for ep in episodes]


def produce_heads(method: MethodId, ctx: MethodContext,
                  episodes: Sequence[Episode]) -> list[HeadParams]:
    """Heads for a batch of episodes. The CHN handles the batch in one pass."""
    name, p = method.name, method.param
    if name == "chn":
        return ctx.chn_heads(episodes)
    if name == "chn_then_finetune":
        inits = ctx.chn_heads(episodes)
        return [train_from_random(ctx.base, h, ep.context_rows, ep.context_values, p, ctx.tfr_lr)
                for h, ep in zip(inits, episodes)]
    if name == "maml" and ctx.maml is None:
        raise InvalidArgument("method maml needs a trained MAML initialisation")
    out = []
    for ep in episodes:
        link = ctx.base.link(ep.feature)
        if name == "random":
            h = ctx.random_init(ep)
        elif name == "mean_impute":
            h = mean_impute_head(ep.context_values, ctx.kind(ep.feature),
                                 ctx.global_mean(ep.feature), ctx.base.d_dim)
        elif name == "mean_head":
            h = mean_head(ctx.bank, link)
        elif name == "mean_head_matching":
            if ctx.metas is None:
                raise InvalidArgument("mean_head_matching needs metadata")
            h = mean_head_matching(ctx.bank, ctx.metas[ep.feature].tags, link)
        elif name == "knn":
            h = knn_head(ctx.knn_index, ctx.bank, ep.context_rows, ep.context_values, p,
                         ctx.global_mean(ep.feature), link)
        elif name == "train_from_random":
            h = train_from_random(ctx.base, ctx.random_init(ep), ep.context_rows,
                                  ep.context_values, p, ctx.tfr_lr)
        elif name == "maml":
            h = maml_adapt(ctx.maml, ctx.base, ep.context_rows, ep.context_values, p)
        else:
            raise InvalidArgument(f"unknown method {method}")
        out.append(h)
    return out


# --------------------------------------------------------------------------
# k-shot evaluation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ReportRow:
    method: str
    feature: int
    k: int
    metric: str
    value: float
    n_targets: int
    seed: int


@dataclass
class EvalReport:
    rows: list[ReportRow] = field(default_factory=list)
    # (seed, feature, k) -> context hash of the shared episode
    episodes: dict[tuple[int, int, int], str] = field(default_factory=dict)
    # (seed, method, feature, k) -> context hash seen by that method
    seen: dict[tuple[int, str, int, int], str] = field(default_factory=dict)
    undefined: int = 0

    def extend(self, other: "EvalReport") -> None:
        self.rows.extend(other.rows)
        self.episodes.update(other.episodes)
        self.seen.update(other.seen)
        self.undefined += other.undefined


def eval_episode(dataset: SparseDataset, feature: int, k: int, seed: int) -> Episode:
    gen = Rng(seed).child("eval_episode", feature, k).generator()
    return sample_episode(dataset, feature, k, gen)


def score(base: FrozenBase, head: HeadParams, ep: Episode) -> tuple[str, float]:
    ds = base.dataset
    if ds.feature_kinds[ep.feature] == "binary":
        if not len(ep.target_rows):
            return "auroc", float("nan")
        try:
            return "auroc", auroc(base.predict(head, ep.target_rows), ep.target_values)
        except UndefinedMetric:
            return "auroc", float("nan")
    if not len(ep.target_rows):
        return "rmse", float("nan")
    scale = float(ds.scale_max[ep.feature] - ds.scale_min[ep.feature])
    return "rmse", rmse(base.predict(head, ep.target_rows), ep.target_values, scale)


def evaluate_kshot(methods: Sequence[MethodId], ctx: MethodContext, ks: Sequence[int],
                   features: Sequence[int] | None = None) -> EvalReport:
    """Score every method on one shared episode per (feature, k) of the meta-test set."""
    features = list(ctx.split.meta_test if features is None else features)
    features = [j for j in features if ctx.dataset.observed_count(j)]
    if not features:
        raise InvalidArgument("meta-test set is empty")
    report = EvalReport()
    seed = ctx.seed
    for k in ks:
        episodes = [eval_episode(ctx.dataset, j, k, seed) for j in features]
        for ep in episodes:
            report.episodes[seed, ep.feature, k] = ep.context_hash()
        for method in methods:
            heads = produce_heads(method, ctx, episodes)
            for ep, head in zip(episodes, heads):
                if not head.is_finite():
                    raise InvalidArgument(f"{method} produced non-finite head for feature {ep.feature}")
                report.seen[seed, str(method), ep.feature, k] = ep.context_hash()
                metric, value = score(ctx.base, head, ep)
                if not np.isfinite(value):
                    report.undefined += 1
                report.rows.append(ReportRow(str(method), ep.feature, k, metric, value,
                                             len(ep.target_rows), seed))
    order = {str(m): i for i, m in enumerate(methods)}
    report.rows.sort(key=lambda r: (r.seed, order[r.method], r.feature, r.k))
    return report


@dataclass(frozen=True)
class AggregateRow:
    method: str
    k: int
    metric: str
    mean: float
    std: float
    n_seeds: int


def per_seed_means(rows: Iterable[ReportRow]) -> dict[tuple[str, int, str, int], float]:
    """(method, k, metric, seed) -> mean over features defined for every method."""
    rows = list(rows)
    bad = {(r.seed, r.feature, r.k) for r in rows if not np.isfinite(r.value)}
    groups: dict[tuple[str, int, str, int], list[float]] = {}
    for r in rows:
        if (r.seed, r.feature, r.k) in bad:
            continue
        groups.setdefault((r.method, r.k, r.metric, r.seed), []).append(r.value)
    return {key: float(np.mean(v)) for key, v in groups.items()}


def aggregate(rows: Iterable[ReportRow]) -> list[AggregateRow]:
    per_seed = per_seed_means(rows)
    groups: dict[tuple[str, int, str], list[float]] = {}
    for (method, k, metric, seed), v in sorted(per_seed.items(), key=lambda kv: kv[0][3]):
        groups.setdefault((method, k, metric), []).append(v)
    return [AggregateRow(m, k, metric, float(np.mean(v)), float(np.std(v)), len(v))
            for (m, k, metric), v in groups.items()]


def _num(x: float) -> str:
    return repr(float(x))


def report_csv(rows: Sequence[ReportRow], config_lines: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for line in config_lines:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in rows:
        w.writerow([r.method, r.feature, r.k, r.metric, _num(r.value), r.n_targets, r.seed])
    return buf.getvalue()


def aggregate_csv(rows: Sequence[AggregateRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGGREGATE_HEADER)
    for r in rows:
        w.writerow([r.method, r.k, r.metric, _num(r.mean), _num(r.std), r.n_seeds])
    return buf.getvalue()


def episodes_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "feature", "k", "context_hash"])
    for (seed, feature, k), h in sorted(report.episodes.items()):
        w.writerow([seed, feature, k, h])
    return buf.getvalue()


# --------------------------------------------------------------------------
# timing
# --------------------------------------------------------------------------

def time_initialization(method: MethodId, ctx: MethodContext, features: Sequence[int], k: int,
                        batch_size: int = 128, repetitions: int = 20,
                        clock: Callable[[], float] = time.perf_counter) -> tuple[float, float]:
    """Mean and std (over repetitions) of per-feature initialisation time in ms."""
    return time_grid([(method, k)], ctx, features, batch_size, repetitions, clock)[method, k]


def time_grid(pairs: Sequence[tuple[MethodId, int]], ctx: MethodContext, features: Sequence[int],
              batch_size: int = 128, repetitions: int = 20,
              clock: Callable[[], float] = time.perf_counter
              ) -> dict[tuple[MethodId, int], tuple[float, float]]:
    """Time several (method, k) pairs, interleaved so slow drift hits all of them alike.

    Episodes are drawn before timing. Each repetition times every batch of up to
    ``batch_size`` features for every pair and divides by the batch size; one
    warm-up pass is discarded. The garbage collector is paused while timing, as
    ``timeit`` does.
    """
    if repetitions < 1:
        raise InvalidArgument("repetitions must be >= 1")
    if batch_size < 1:
        raise InvalidArgument("batch_size must be >= 1")
    features = [j for j in features if ctx.dataset.observed_count(j)]
    if not features:
        raise InvalidArgument("no features to time")
    staged = {}
    for method, k in pairs:
        episodes = [eval_episode(ctx.dataset, j, k, ctx.seed) for j in features]
        staged[method, k] = [episodes[i:i + batch_size] for i in range(0, len(episodes), batch_size)]
    for (method, _), batches in staged.items():
        for batch in batches:
            produce_heads(method, ctx, batch)
    per_rep: dict[tuple[MethodId, int], list[float]] = {key: [] for key in staged}
    gc_was_on = gc.isenabled()
    gc.disable()
    try:
        for _ in range(repetitions):
            for (method, k), batches in staged.items():
                samples = []
                for batch in batches:
                    t0 = clock()
                    produce_heads(method, ctx, batch)
                    samples.append((clock() - t0) * 1000.0 / len(batch))
                per_rep[method, k].append(float(np.mean(samples)))
    finally:
        if gc_was_on:
            gc.enable()
    return {key: (float(np.mean(v)), float(np.std(v))) for key, v in per_rep.items()}


def timing_csv(rows: Sequence[tuple[str, int, float, float, int, int]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIMING_HEADER)
    for method, k, mean_ms, std_ms, bs, reps in rows:
        w.writerow([method, k, f"{mean_ms:.6f}", f"{std_ms:.6f}", bs, reps])
    return buf.getvalue()
