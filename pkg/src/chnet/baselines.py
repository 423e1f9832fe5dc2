"""Head-initialisation baselines. Every function returns a ``HeadParams``."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logit

from .datasets import FeatureMeta, SparseDataset, cap_targets, sample_context_size, sample_episode
from .errors import ContractViolation, InvalidArgument
from .numerics import Adam, Rng, xavier_init
from .pvae import LINKS, FrozenBase, HeadParams, PvaeModel, feature_nll, head_eta

MEAN_CLAMP = 1e-6


def random_head(d_dim: int, rng: np.random.Generator, link: str = "sigmoid") -> HeadParams:
    """Xavier weights (fan_in = d_dim, fan_out = 1) and a zero bias."""
    return HeadParams(xavier_init(d_dim, 1, rng)[0], 0.0, link)


def mean_impute_head(values, kind: str, global_mean: float, d_dim: int) -> HeadParams:
    """w = 0 and a bias that always predicts the context mean.

    An empty context falls back to ``global_mean``; binary means are clamped to
    [1e-6, 1 - 1e-6] before the logit.
    """
    values = np.asarray(values, dtype=np.float64)
    mean = float(values.mean()) if len(values) else float(global_mean)
    link = LINKS[kind]
    if link == "sigmoid":
        b = float(logit(np.clip(mean, MEAN_CLAMP, 1.0 - MEAN_CLAMP)))
    else:
        b = mean
    return HeadParams(np.zeros(d_dim), b, link)


@dataclass(frozen=True)
class HeadBank:
    """Trained heads of the training-split features, in ascending feature order."""

    features: np.ndarray
    w: np.ndarray
    b: np.ndarray
    links: tuple[str, ...]
    tags: np.ndarray | None = None

    @classmethod
    def from_model(cls, model: PvaeModel, metas: Sequence[FeatureMeta] | None = None) -> "HeadBank":
        feats = np.asarray(model.head_features, dtype=np.int64)
        tags = None
        if metas:
            by_f = {m.feature: np.asarray(m.tags, dtype=np.float64) for m in metas}
            tags = np.stack([by_f[int(j)] for j in feats]) if len(feats) else None
        links = tuple(LINKS[model.feature_kinds[j]] for j in feats)
        return cls(feats, np.array(model.head_w), np.array(model.head_b), links, tags)

    def __len__(self) -> int:
        return len(self.features)

    def select(self, link: str | None) -> np.ndarray:
        """Bank positions with a given link (all positions when none match or link is None)."""
        idx = np.arange(len(self))
        if link is None:
            return idx
        same = idx[np.array([l == link for l in self.links], dtype=bool)] if len(self) else idx
        return same if len(same) else idx


def average_heads(w: np.ndarray, b: np.ndarray, positions, link: str) -> HeadParams:
    """Sequential sum over ``positions`` (in the given order) divided by the count."""
    positions = list(positions)
    if not positions:
        raise InvalidArgument("cannot average an empty set of heads")
    w_sum = np.zeros(w.shape[1])
    b_sum = 0.0
    for p in positions:
        w_sum = w_sum + w[p]
        b_sum = b_sum + b[p]
    n = len(positions)
    return HeadParams(w_sum / n, b_sum / n, link)


def mean_head(bank: HeadBank, link: str = "sigmoid") -> HeadParams:
    if len(bank) == 0:
        raise InvalidArgument("empty head bank")
    return average_heads(bank.w, bank.b, bank.select(link), link)


def mean_head_matching(bank: HeadBank, tags, link: str = "sigmoid") -> HeadParams:
    """Average heads whose tag vector equals ``tags``; no match -> ``mean_head``."""
    if bank.tags is None:
        raise InvalidArgument("head bank has no metadata")
    tags = np.asarray(tags, dtype=np.float64)
    pos = [p for p in bank.select(link) if np.array_equal(bank.tags[p], tags)]
    if not pos:
        return mean_head(bank, link)
    return average_heads(bank.w, bank.b, pos, link)


class KnnIndex:
    """Column-mean-imputed columns of the bank features over all rows."""

    def __init__(self, dataset: SparseDataset, bank: HeadBank):
        self.n_rows = dataset.n_rows
        cols = np.empty((dataset.n_rows, len(bank)))
        for p, j in enumerate(bank.features):
            rows, vals = dataset.feature_observations(int(j))
            cols[:, p] = vals.mean() if len(vals) else 0.0
            cols[rows, p] = vals
        self.columns = cols

    def new_column(self, rows, values, fallback_mean: float) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        col = np.full(self.n_rows, values.mean() if len(values) else fallback_mean)
        col[np.asarray(rows, dtype=np.int64)] = values
        return col

    def distances(self, column: np.ndarray) -> np.ndarray:
        diff = self.columns - column[:, None]
        return np.sqrt((diff * diff).sum(axis=0))


def knn_head(index: KnnIndex, bank: HeadBank, rows, values, k_neighbors: int,
             fallback_mean: float, link: str = "sigmoid") -> HeadParams:
    """Mean head of the k nearest bank features by Euclidean column distance.

    Ties go to the lower feature index; the neighbours are averaged in ascending
    feature order.
    """
    if k_neighbors < 1:
        raise InvalidArgument("k_neighbors must be >= 1")
    if len(bank) == 0:
        raise InvalidArgument("empty head bank")
    dist = index.distances(index.new_column(rows, values, fallback_mean))
    order = np.lexsort((bank.features, dist))
    chosen = np.sort(order[:k_neighbors])
    return average_heads(bank.w, bank.b, chosen, link)


def context_loss(base: FrozenBase, head: HeadParams, rows, values) -> float:
    """Mean per-row NLL of the context observations under ``head``."""
    _, d = base.encodings(rows)
    nll, _ = feature_nll(np.asarray(values, dtype=np.float64), head_eta(d, head.w, head.b),
                         head.link, base.model.output_variance)
    return float(nll.mean())


def fit_head(base: FrozenBase, init: HeadParams, rows, values, epochs: int,
             lr: float, final_loss: bool = True) -> tuple[HeadParams, list[float]]:
    """Full-batch Adam on the context NLL w.r.t. (w, b) only.

    Each epoch runs the frozen model on the context rows, then takes one step.
    Returns the head and the loss before each step, plus the loss of the
    returned head when ``final_loss`` is set (``epochs + 1`` values). An empty
    context or ``lr == 0`` returns ``init`` unchanged.
    """
    if not base.model.frozen:
        raise ContractViolation("base model must be frozen")
    rows = np.asarray(rows, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    head = init.copy()
    if epochs <= 0 or len(rows) == 0 or lr == 0:
        return head, []
    params = {"w": head.w, "b": np.array([head.b])}
    opt = Adam(lr)
    var = base.model.output_variance
    trace = []
    for _ in range(epochs):
        _, d = base.encodings(rows)
        nll, dnll = feature_nll(values, head_eta(d, params["w"], params["b"][0]), head.link, var)
        trace.append(float(nll.mean()))
        n = len(rows)
        opt.step(params, {"w": dnll @ d / n, "b": np.array([dnll.sum() / n])})
    out = HeadParams(params["w"], params["b"][0], head.link)
    if final_loss:
        trace.append(context_loss(base, out, rows, values))
    return out, trace


def train_from_random(base: FrozenBase, init: HeadParams, rows, values, epochs: int,
                      lr: float = 1e-2) -> HeadParams:
    return fit_head(base, init, rows, values, epochs, lr, final_loss=False)[0]


# --------------------------------------------------------------------------
# feature-wise first-order MAML
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MamlConfig:
    alpha: float = 1e-2
    beta: float = 1e-2
    inner_steps: int = 10
    meta_batch: int = 4
    epochs: int = 50
    k_max: int = 32
    target_cap: int = 256


@dataclass
class MamlInit:
    head: HeadParams
    alpha: float = 1e-2
    beta: float = 1e-2
    inner_steps: int = 10
    meta_batch: int = 4


def _target_loss_grad(base: FrozenBase, head: HeadParams, rows, values):
    _, d = base.encodings(rows)
    nll, dnll = feature_nll(values, head_eta(d, head.w, head.b), head.link,
                            base.model.output_variance)
    n = len(rows)
    return float(nll.mean()), dnll @ d / n, float(dnll.sum() / n)


def maml_start_head(base: FrozenBase, rng: Rng, link: str) -> HeadParams:
    """The random initialisation ``maml_meta_train`` starts from for this ``rng``."""
    return random_head(base.d_dim, rng.child("init").generator(), link)


def maml_outer_loss(head: HeadParams, base: FrozenBase, episodes, alpha: float,
                    inner_steps: int) -> float:
    """Mean target NLL after adapting ``head`` on each episode's context."""
    losses = []
    for ep in episodes:
        if not len(ep.target_rows):
            continue
        adapted, _ = fit_head(base, head, ep.context_rows, ep.context_values, inner_steps, alpha,
                              final_loss=False)
        losses.append(_target_loss_grad(base, adapted, ep.target_rows, ep.target_values)[0])
    if not losses:
        raise InvalidArgument("no episode has targets")
    return float(np.mean(losses))


def maml_meta_train(base: FrozenBase, features: Sequence[int], config: MamlConfig,
                    rng: Rng, link: str | None = None) -> tuple[MamlInit, list[float]]:
    """Meta-learn a head initialisation with first-order MAML.

    Inner loop: ``inner_steps`` Adam steps (lr alpha) on the context NLL. Outer
    loop: mean target-set NLL gradient at the adapted heads, applied to the
    initialisation with Adam (lr beta). Returns the init and the per-epoch mean
    outer loss.
    """
    if not base.model.frozen:
        raise ContractViolation("base model must be frozen")
    features = [int(j) for j in features if base.dataset.observed_count(int(j))]
    if len(features) < config.meta_batch:
        raise InvalidArgument(f"need at least {config.meta_batch} meta-train features")
    if link is None:
        links = {base.link(j) for j in features}
        if len(links) != 1:
            raise InvalidArgument("MAML needs meta-train features of a single kind")
        link = links.pop()
    init = maml_start_head(base, rng, link)
    params = {"w": init.w, "b": np.array([init.b])}
    opt = Adam(config.beta)
    trace = []
    for epoch in range(config.epochs):
        gen = rng.child("episodes", epoch).generator()
        order = gen.permutation(len(features))
        losses = []
        for start in range(0, len(order) - config.meta_batch + 1, config.meta_batch):
            g_w = np.zeros_like(params["w"])
            g_b = 0.0
            batch_loss = []
            for i in order[start:start + config.meta_batch]:
                j = features[i]
                k = sample_context_size(gen, config.k_max)
                ep = cap_targets(sample_episode(base.dataset, j, k, gen), config.target_cap, gen)
                if not len(ep.target_rows):
                    continue
                theta = HeadParams(params["w"], params["b"][0], link)
                adapted, _ = fit_head(base, theta, ep.context_rows, ep.context_values,
                                      config.inner_steps, config.alpha, final_loss=False)
                loss, gw, gb = _target_loss_grad(base, adapted, ep.target_rows, ep.target_values)
                batch_loss.append(loss)
                g_w = g_w + gw
                g_b = g_b + gb
            if not batch_loss:
                continue
            n = len(batch_loss)
            opt.step(params, {"w": g_w / n, "b": np.array([g_b / n])})
            losses.append(float(np.mean(batch_loss)))
        trace.append(float(np.mean(losses)) if losses else float("nan"))
    head = HeadParams(params["w"], params["b"][0], link)
    return MamlInit(head, config.alpha, config.beta, config.inner_steps, config.meta_batch), trace


def maml_adapt(init: MamlInit, base: FrozenBase, rows, values, fine_tune_epochs: int) -> HeadParams:
    """Fine-tune the meta-learned init on the context (lr alpha); 0 epochs returns it as-is."""
    return fit_head(base, init.head, rows, values, fine_tune_epochs, init.alpha, final_loss=False)[0]
