"""Contextual hypernetwork: (context set, metadata) -> decoder-head parameters.

Each context row i of feature n contributes f([z_i ; x_n_i]), where z_i is the
frozen base model's posterior mean for the row's other observations. The
contributions are summed (rows in ascending index order), mapped by g to the
context vector c_n, and concatenated with the metadata embedding m_n = h(meta).
A final network maps [c_n ; m_n] to (w_n, b_n) in one forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datasets import Episode, FeatureMeta, cap_targets, sample_context_size, sample_episode
from .errors import ContractViolation, InvalidArgument
from .numerics import Adam, Mlp, Rng, mlp_backward, mlp_forward, param_hash
from .pvae import FrozenBase, HeadParams, feature_nll, head_eta


@dataclass(frozen=True)
class ChnConfig:
    point_dim: int = 25
    point_hidden: tuple[int, ...] = (50,)
    context_dim: int = 25
    context_hidden: tuple[int, ...] = ()
    meta_dim: int = 10
    meta_hidden: tuple[int, ...] = (10,)
    pred_hidden: tuple[int, ...] = (64, 64)


@dataclass
class ChnParams:
    f_net: Mlp
    g_net: Mlp
    h_net: Mlp | None
    pred_net: Mlp
    meta_dim: int

    @property
    def latent_dim(self) -> int:
        return self.f_net.in_dim - 1

    @property
    def d_dim(self) -> int:
        return self.pred_net.out_dim - 1

    @property
    def meta_in(self) -> int:
        return self.h_net.in_dim if self.h_net is not None else 0

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        out.update(self.f_net.tensors("f_net"))
        out.update(self.g_net.tensors("g_net"))
        if self.h_net is not None:
            out.update(self.h_net.tensors("h_net"))
        out.update(self.pred_net.tensors("pred_net"))
        return out

    def param_hash(self) -> str:
        return param_hash(self.tensors())


def init_chn(latent_dim: int, d_dim: int, meta_in: int, config: ChnConfig,
             rng: np.random.Generator) -> ChnParams:
    """``meta_in = 0`` builds a CHN without a metadata network (m_n = 0).

    The final layer of the parameter network starts at zero, so an untrained
    CHN emits w = 0, b = 0.
    """
    c = config
    f = Mlp.init([latent_dim + 1, *c.point_hidden, c.point_dim], rng)
    g = Mlp.init([c.point_dim, *c.context_hidden, c.context_dim], rng)
    h = Mlp.init([meta_in, *c.meta_hidden, c.meta_dim], rng) if meta_in else None
    pred = Mlp.init([c.context_dim + c.meta_dim, *c.pred_hidden, d_dim + 1], rng, zero_last=True)
    return ChnParams(f, g, h, pred, c.meta_dim)


@dataclass
class _Cache:
    seg: np.ndarray
    f_tape: object
    g_tape: object
    h_tape: object
    p_tape: object
    context_dim: int


def _forward(chn: ChnParams, contexts: Sequence[tuple[np.ndarray, np.ndarray]],
             meta: np.ndarray | None) -> tuple[np.ndarray, np.ndarray, _Cache]:
    """Batched forward. ``contexts[b] = (Z [k, L], x [k])`` with rows already sorted."""
    B = len(contexts)
    lengths = [len(x) for _, x in contexts]
    seg = np.repeat(np.arange(B), lengths)
    parts = [np.concatenate([np.asarray(z, dtype=np.float64).reshape(len(x), -1),
                             np.asarray(x, dtype=np.float64)[:, None]], axis=1)
             for z, x in contexts if len(x)]
    s = np.zeros((B, chn.f_net.out_dim))
    f_tape = None
    if parts:
        inp = np.concatenate(parts)
        if inp.shape[1] != chn.f_net.in_dim:
            raise InvalidArgument(f"context encodings have dim {inp.shape[1] - 1}, "
                                  f"expected {chn.latent_dim}")
        out, f_tape = mlp_forward(chn.f_net, inp)
        start = 0
        for b, n in enumerate(lengths):
            if n:
                s[b] = out[start:start + n].sum(axis=0)
            start += n
    c, g_tape = mlp_forward(chn.g_net, s)
    h_tape = None
    if chn.h_net is not None:
        if meta is None or meta.shape != (B, chn.meta_in):
            raise InvalidArgument(f"metadata must have shape ({B}, {chn.meta_in})")
        m, h_tape = mlp_forward(chn.h_net, meta)
    else:
        m = np.zeros((B, chn.meta_dim))
    theta, p_tape = mlp_forward(chn.pred_net, np.concatenate([c, m], axis=1))
    cache = _Cache(seg, f_tape, g_tape, h_tape, p_tape, c.shape[1])
    return theta[:, :-1], theta[:, -1], cache


def _backward(chn: ChnParams, cache: _Cache, d_w: np.ndarray, d_b: np.ndarray) -> dict[str, np.ndarray]:
    d_theta = np.concatenate([d_w, d_b[:, None]], axis=1)
    d_in, p_g = mlp_backward(chn.pred_net, cache.p_tape, d_theta)
    grads = p_g.tensors("pred_net")
    d_c, d_m = d_in[:, :cache.context_dim], d_in[:, cache.context_dim:]
    if chn.h_net is not None:
        _, h_g = mlp_backward(chn.h_net, cache.h_tape, d_m)
        grads.update(h_g.tensors("h_net"))
    d_s, g_g = mlp_backward(chn.g_net, cache.g_tape, d_c)
    grads.update(g_g.tensors("g_net"))
    if cache.f_tape is not None:
        _, f_g = mlp_backward(chn.f_net, cache.f_tape, d_s[cache.seg])
    else:
        f_g = chn.f_net.zeros_like()
    grads.update(f_g.tensors("f_net"))
    return grads


def _meta_vector(chn: ChnParams, meta) -> np.ndarray | None:
    if chn.h_net is None:
        return None
    if meta is None:
        raise InvalidArgument("this CHN expects metadata")
    vec = meta.vector() if isinstance(meta, FeatureMeta) else np.asarray(meta, dtype=np.float64)
    if vec.shape != (chn.meta_in,):
        raise InvalidArgument(f"metadata length {vec.shape} != {chn.meta_in}")
    return vec[None, :]


def _sorted_context(base: FrozenBase, rows, values) -> tuple[np.ndarray, np.ndarray]:
    rows = np.asarray(rows, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    if rows.shape != values.shape:
        raise InvalidArgument("context rows and values differ in length")
    order = np.argsort(rows, kind="stable")
    return base.latents(rows[order]), values[order]


def encode_context(chn: ChnParams, base: FrozenBase, rows, values) -> np.ndarray:
    """c_n = g(sum_i f([z_i ; x_i])); an empty context gives g(0)."""
    z, x = _sorted_context(base, rows, values)
    s = np.zeros(chn.f_net.out_dim)
    if len(x):
        out, _ = mlp_forward(chn.f_net, np.concatenate([z, x[:, None]], axis=1))
        s = out.sum(axis=0)
    return mlp_forward(chn.g_net, s)[0]


def encode_metadata(chn: ChnParams, meta) -> np.ndarray:
    vec = _meta_vector(chn, meta)
    if vec is None:
        return np.zeros(chn.meta_dim)
    return mlp_forward(chn.h_net, vec[0])[0]


def predict_head(chn: ChnParams, base: FrozenBase, rows, values, meta, link: str) -> HeadParams:
    """One forward pass from a context set (rows, values) and metadata to a head."""
    _check_frozen(base)
    w, b, _ = _forward(chn, [_sorted_context(base, rows, values)], _meta_vector(chn, meta))
    return HeadParams(w[0], b[0], link)


def predict_heads(chn: ChnParams, base: FrozenBase, episodes: Sequence[Episode],
                  meta_matrix: np.ndarray | None) -> list[HeadParams]:
    """Batched ``predict_head`` over several features' context sets."""
    _check_frozen(base)
    contexts = [_sorted_context(base, ep.context_rows, ep.context_values) for ep in episodes]
    meta = None
    if chn.h_net is not None:
        meta = meta_matrix[[ep.feature for ep in episodes]]
    w, b, _ = _forward(chn, contexts, meta)
    return [HeadParams(w[i], b[i], base.link(ep.feature)) for i, ep in enumerate(episodes)]


def _check_frozen(base: FrozenBase) -> None:
    if not base.model.frozen:
        raise ContractViolation("base model must be frozen")


def meta_loss(chn: ChnParams, base: FrozenBase, episodes: Sequence[Episode],
              meta_matrix: np.ndarray | None) -> tuple[float, dict[str, np.ndarray]]:
    """Mean target log-likelihood l(psi) over the batch and its gradient w.r.t. psi.

    The normaliser is the total number of target rows across all episodes.
    """
    _check_frozen(base)
    total = sum(len(ep.target_rows) for ep in episodes)
    if total == 0:
        raise InvalidArgument("no target rows in batch")
    contexts = [_sorted_context(base, ep.context_rows, ep.context_values) for ep in episodes]
    meta = meta_matrix[[ep.feature for ep in episodes]] if chn.h_net is not None else None
    w, b, cache = _forward(chn, contexts, meta)
    d_w = np.zeros_like(w)
    d_b = np.zeros_like(b)
    loglik = 0.0
    var = base.model.output_variance
    for i, ep in enumerate(episodes):
        if not len(ep.target_rows):
            continue
        _, d = base.encodings(ep.target_rows)
        eta = head_eta(d, w[i], b[i])
        nll, dnll = feature_nll(ep.target_values, eta, base.link(ep.feature), var)
        loglik -= float(nll.sum())
        d_w[i] = -(dnll @ d) / total
        d_b[i] = -dnll.sum() / total
    return loglik / total, _backward(chn, cache, d_w, d_b)


@dataclass(frozen=True)
class MetaTrainConfig:
    epochs: int = 300
    feature_batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 1e-3
    k_max: int = 32
    target_cap: int = 256


def meta_train(chn: ChnParams, base: FrozenBase, features: Sequence[int],
               meta_matrix: np.ndarray | None, config: MetaTrainConfig,
               rng: Rng) -> tuple[ChnParams, list[float]]:
    """Episodic training of psi; contexts and k_n are redrawn for every feature visit.

    Updates ``chn`` in place and returns it with the per-epoch mean l(psi).
    """
    _check_frozen(base)
    features = [int(j) for j in features]
    if not features:
        raise InvalidArgument("meta-train feature set is empty")
    opt = Adam(config.lr, weight_decay=config.weight_decay)
    trace: list[float] = []
    for epoch in range(config.epochs):
        gen = rng.child("episodes", epoch).generator()
        order = gen.permutation(len(features))
        losses = []
        for start in range(0, len(order), config.feature_batch_size):
            batch = []
            for i in order[start:start + config.feature_batch_size]:
                j = features[i]
                if base.dataset.observed_count(j) == 0:
                    continue
                k = sample_context_size(gen, config.k_max)
                ep = cap_targets(sample_episode(base.dataset, j, k, gen), config.target_cap, gen)
                batch.append(ep)
            if not any(len(ep.target_rows) for ep in batch):
                continue
            value, grads = meta_loss(chn, base, batch, meta_matrix)
            opt.step(chn.tensors(), {k: -g for k, g in grads.items()})
            losses.append(value)
        trace.append(float(np.mean(losses)) if losses else float("nan"))
    return chn, trace
