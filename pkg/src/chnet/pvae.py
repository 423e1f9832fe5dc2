"""Partial VAE base model with per-feature decoder heads.

Pipeline for one data point: every observed pair (j, x_j) goes through a shared
point network on [e_j ; x_j]; the outputs are summed (by ascending feature
index) into a set embedding, the encoder maps it to (mu, logvar), and the
decoder trunk maps z to a shared representation d. Feature n is read out by
its head: eta_n = w_n . d + b_n, with a sigmoid link for binary features and
identity for continuous ones.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .datasets import MaskedRow, RowView, SparseDataset, bernoulli_mask
from .errors import ContractViolation, InvalidArgument
from .numerics import (LOGVAR_MAX, LOGVAR_MIN, Adam, Mlp, Rng, bernoulli_nll_from_logit,
                       clamp_logvar, gaussian_nll, mlp_backward, mlp_forward, param_hash,
                       sigmoid, xavier_init)

LINKS = {"binary": "sigmoid", "continuous": "identity"}


@dataclass
class HeadParams:
    """theta_n = {w_n, b_n} for one output feature."""

    w: np.ndarray
    b: float
    link: str = "sigmoid"

    def __post_init__(self) -> None:
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = float(self.b)
        if self.link not in ("sigmoid", "identity"):
            raise InvalidArgument(f"unknown link {self.link!r}")

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.w)) and np.isfinite(self.b))

    def flat(self) -> np.ndarray:
        return np.append(self.w, self.b)

    def copy(self) -> "HeadParams":
        return HeadParams(self.w.copy(), self.b, self.link)


def apply_link(eta, link: str):
    return sigmoid(eta) if link == "sigmoid" else eta


@dataclass(frozen=True)
class PvaeConfig:
    e_dim: int = 30
    point_hidden: tuple[int, ...] = (30,)
    set_dim: int = 30
    latent_dim: int = 20
    encoder_hidden: tuple[int, ...] = (30,)
    decoder_hidden: tuple[int, ...] = (30,)
    output_variance: float = 0.1


@dataclass
class PvaeModel:
    embeddings: np.ndarray           # [n_features, e_dim]
    point_net: Mlp                   # [e_j ; x_j] -> set_dim
    encoder: Mlp                     # set_dim -> [mu ; logvar]
    decoder: Mlp                     # z -> d (tanh output)
    head_features: np.ndarray        # sorted feature indices that own a head
    head_w: np.ndarray               # [n_heads, d_dim]
    head_b: np.ndarray               # [n_heads]
    feature_kinds: tuple[str, ...]
    output_variance: float = 0.1
    frozen: bool = False
    _head_slot: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.head_features = np.asarray(self.head_features, dtype=np.int64)
        if np.any(np.diff(self.head_features) <= 0):
            raise InvalidArgument("head features must be sorted and unique")
        slot = np.full(len(self.feature_kinds), -1, dtype=np.int64)
        slot[self.head_features] = np.arange(len(self.head_features))
        self._head_slot = slot
        if self.embeddings.shape[0] != len(self.feature_kinds):
            raise InvalidArgument("one embedding row per feature required")

    @property
    def latent_dim(self) -> int:
        return self.encoder.out_dim // 2

    @property
    def d_dim(self) -> int:
        return self.decoder.out_dim

    @property
    def n_features(self) -> int:
        return len(self.feature_kinds)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"embeddings": self.embeddings, "heads.w": self.head_w, "heads.b": self.head_b}
        out.update(self.point_net.tensors("point_net"))
        out.update(self.encoder.tensors("encoder"))
        out.update(self.decoder.tensors("decoder"))
        return out

    def param_hash(self) -> str:
        return param_hash(self.tensors())

    def freeze(self) -> "PvaeModel":
        for arr in self.tensors().values():
            arr.flags.writeable = False
        self.frozen = True
        return self

    def head(self, feature: int) -> HeadParams:
        s = self._head_slot[feature]
        if s < 0:
            raise InvalidArgument(f"feature {feature} has no head")
        return HeadParams(self.head_w[s].copy(), self.head_b[s],
                          LINKS[self.feature_kinds[feature]])

    def head_slots(self, features) -> np.ndarray:
        features = np.asarray(features, dtype=np.int64)
        if len(features) and (features.min() < 0 or features.max() >= self.n_features):
            raise InvalidArgument("feature index out of range")
        slots = self._head_slot[features]
        if np.any(slots < 0):
            raise InvalidArgument(f"features without heads: {features[slots < 0].tolist()}")
        return slots


def init_pvae(n_features: int, feature_kinds: Sequence[str], head_features: Sequence[int],
              config: PvaeConfig, rng: np.random.Generator) -> PvaeModel:
    """Xavier weights and zero biases; embeddings exist for every feature."""
    c = config
    emb = xavier_init(c.e_dim, n_features, rng)  # [n_features, e_dim]
    point = Mlp.init([c.e_dim + 1, *c.point_hidden, c.set_dim], rng)
    enc = Mlp.init([c.set_dim, *c.encoder_hidden, 2 * c.latent_dim], rng)
    dec = Mlp.init([c.latent_dim, *c.decoder_hidden], rng, output_activation="tanh")
    heads = sorted(int(j) for j in head_features)
    d_dim = dec.out_dim
    w = (np.stack([xavier_init(d_dim, 1, rng)[0] for _ in heads]) if heads
         else np.zeros((0, d_dim)))
    return PvaeModel(emb, point, enc, dec, np.asarray(heads, dtype=np.int64), w,
                     np.zeros(len(heads)), tuple(feature_kinds), c.output_variance)


# --------------------------------------------------------------------------
# encoder
# --------------------------------------------------------------------------

@dataclass
class _EncodeCache:
    point_row: np.ndarray
    point_feature: np.ndarray
    point_tape: object
    enc_tape: object
    logvar_raw: np.ndarray
    n_rows: int


def _gather_points(model: PvaeModel, observed: Sequence[tuple[np.ndarray, np.ndarray]]):
    """Concatenate per-row observations, each sorted by feature index."""
    rows, feats, vals = [], [], []
    for r, (f, v) in enumerate(observed):
        f = np.asarray(f, dtype=np.int64)
        v = np.asarray(v, dtype=np.float64)
        if f.shape != v.shape:
            raise InvalidArgument("features and values differ in length")
        if len(f) and (f.min() < 0 or f.max() >= model.n_features):
            raise InvalidArgument(f"unknown feature index in row {r}")
        order = np.argsort(f, kind="stable")
        rows.append(np.full(len(f), r, dtype=np.int64))
        feats.append(f[order])
        vals.append(v[order])
    if not rows:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    return np.concatenate(rows), np.concatenate(feats), np.concatenate(vals)


def _segment_sum(values: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    """Sums of ``values`` rows grouped by the non-decreasing ``seg``.

    A segment's sum depends only on its own rows, not on where it sits in the batch.
    """
    out = np.zeros((n, values.shape[1]))
    if len(seg):
        starts = np.flatnonzero(np.r_[True, seg[1:] != seg[:-1]])
        out[seg[starts]] = np.add.reduceat(values, starts, axis=0)
    return out


def _encode_batch(model: PvaeModel, observed: Sequence[tuple[np.ndarray, np.ndarray]]):
    return _encode_points(model, len(observed), *_gather_points(model, observed))


def _encode_points(model: PvaeModel, n: int, prow: np.ndarray, pfeat: np.ndarray,
                   pval: np.ndarray):
    x = np.concatenate([model.embeddings[pfeat], pval[:, None]], axis=1)
    if len(x):
        out, ptape = mlp_forward(model.point_net, x)
    else:
        out, ptape = np.zeros((0, model.point_net.out_dim)), None
    s = _segment_sum(out, prow, n)
    h, etape = mlp_forward(model.encoder, s)
    L = model.latent_dim
    mu, lv_raw = h[:, :L], h[:, L:]
    return mu, clamp_logvar(lv_raw), _EncodeCache(prow, pfeat, ptape, etape, lv_raw, n)


def _encode_backward(model: PvaeModel, cache: _EncodeCache, dmu: np.ndarray,
                     dlogvar: np.ndarray) -> dict[str, np.ndarray]:
    inside = (cache.logvar_raw >= LOGVAR_MIN) & (cache.logvar_raw <= LOGVAR_MAX)
    dh = np.concatenate([dmu, dlogvar * inside], axis=1)
    ds, enc_g = mlp_backward(model.encoder, cache.enc_tape, dh)
    grads = enc_g.tensors("encoder")
    d_emb = np.zeros_like(model.embeddings)
    if cache.point_tape is not None:
        dx, point_g = mlp_backward(model.point_net, cache.point_tape, ds[cache.point_row])
        np.add.at(d_emb, cache.point_feature, dx[:, :-1])
    else:
        point_g = model.point_net.zeros_like()
    grads.update(point_g.tensors("point_net"))
    grads["embeddings"] = d_emb
    return grads


def encode_partial(model: PvaeModel, features, values) -> tuple[np.ndarray, np.ndarray]:
    """(mu, logvar) of q(z | x_O); invariant to the order of the observed pairs."""
    mu, lv, _ = _encode_batch(model, [(features, values)])
    return mu[0], lv[0]


def latent_mean(model: PvaeModel, features, values) -> np.ndarray:
    return encode_partial(model, features, values)[0]


def encode_rows(model: PvaeModel, observed: Sequence[tuple[np.ndarray, np.ndarray]]
                ) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means z-hat and decoder representations d for a batch of rows."""
    mu, _, _ = _encode_batch(model, observed)
    d, _ = mlp_forward(model.decoder, mu)
    return mu, d


def _encode_view(model: PvaeModel, view: RowView, rows: np.ndarray, decode: bool = True):
    mu, _, _ = _encode_points(model, len(rows), *view.gather(rows))
    if not decode:
        return mu, None
    d, _ = mlp_forward(model.decoder, mu)
    return mu, d


# --------------------------------------------------------------------------
# decoder
# --------------------------------------------------------------------------

def head_eta(d: np.ndarray, w: np.ndarray, b) -> np.ndarray:
    """Per-pair w . d + b; each output depends only on its own (d, w, b)."""
    return (d * w).sum(axis=-1) + b


def decode(model: PvaeModel, z: np.ndarray, features) -> np.ndarray:
    """Pre-link predictions eta for ``features``: shape [len(features)] or [batch, len]."""
    slots = model.head_slots(features)
    d, _ = mlp_forward(model.decoder, z)
    if d.ndim == 1:
        return head_eta(d[None, :], model.head_w[slots], model.head_b[slots])
    return head_eta(d[:, None, :], model.head_w[slots][None], model.head_b[slots][None])


def predict_feature(model: PvaeModel, head: HeadParams, features, values) -> float:
    """link(w . trunk(z-hat) + b) for one row's observed pairs."""
    if head.w.shape != (model.d_dim,):
        raise InvalidArgument(f"head dim {head.w.shape} != d_dim {model.d_dim}")
    z = latent_mean(model, features, values)
    d, _ = mlp_forward(model.decoder, z)
    return float(apply_link(head_eta(d, head.w, head.b), head.link))


def feature_nll(y: np.ndarray, eta: np.ndarray, link: np.ndarray | str,
                variance: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-observation NLL and its derivative w.r.t. eta. ``link`` may be per-element."""
    if isinstance(link, str):
        y = np.asarray(y, dtype=np.float64)
        eta = np.asarray(eta, dtype=np.float64)
        if link == "sigmoid":
            return bernoulli_nll_from_logit(y, eta), sigmoid(eta) - y
        return gaussian_nll(y, eta, variance), (eta - y) / variance
    binary = np.asarray(link)
    nll = np.where(binary, bernoulli_nll_from_logit(y, eta), gaussian_nll(y, eta, variance))
    grad = np.where(binary, sigmoid(eta) - y, (eta - y) / variance)
    return np.asarray(nll, dtype=np.float64), np.asarray(grad, dtype=np.float64)


# --------------------------------------------------------------------------
# ELBO and training
# --------------------------------------------------------------------------

def elbo(model: PvaeModel, batch: Sequence[MaskedRow], rng: np.random.Generator | None = None,
         eps: np.ndarray | None = None,
         kl_weight: float = 1.0) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Single-sample ELBO averaged over ``batch``.

    Reconstruction covers observed and masked-out (hidden) values of each row.
    Returns (mean objective, its gradients w.r.t. every tensor, per-row ELBO).
    The objective is recon - kl_weight * KL; the per-row values always use the
    unweighted KL, so with ``kl_weight=1`` all three agree.
    """
    B = len(batch)
    if B == 0:
        raise InvalidArgument("empty batch")
    mu, lv, cache = _encode_batch(model, [(r.observed_features, r.observed_values) for r in batch])
    if eps is None:
        eps = rng.standard_normal(mu.shape)
    std = np.exp(0.5 * lv)
    z = mu + std * eps
    d, dtape = mlp_forward(model.decoder, z)

    t_row, t_feat, t_val = [], [], []
    for r, row in enumerate(batch):
        f = np.concatenate([row.observed_features, row.hidden_features]).astype(np.int64)
        v = np.concatenate([row.observed_values, row.hidden_values])
        if len(f) == 0:
            raise InvalidArgument(f"row {row.row} has nothing to reconstruct")
        t_row.append(np.full(len(f), r))
        t_feat.append(f)
        t_val.append(v)
    t_row = np.concatenate(t_row)
    t_feat = np.concatenate(t_feat)
    t_val = np.concatenate(t_val)
    slots = model.head_slots(t_feat)
    binary = np.array([k == "binary" for k in model.feature_kinds])[t_feat]
    w_t = model.head_w[slots]
    eta = head_eta(d[t_row], w_t, model.head_b[slots])
    nll, dnll = feature_nll(t_val, eta, binary, model.output_variance)

    recon = np.zeros(B)
    np.add.at(recon, t_row, -nll)
    kl = 0.5 * np.sum(mu * mu + np.exp(lv) - 1.0 - lv, axis=1)
    per_row = recon - kl
    value = float((recon - kl_weight * kl).mean())

    # gradients of mean ELBO
    g_eta = -dnll / B
    g_w = np.zeros_like(model.head_w)
    g_b = np.zeros_like(model.head_b)
    np.add.at(g_w, slots, g_eta[:, None] * d[t_row])
    np.add.at(g_b, slots, g_eta)
    g_d = np.zeros_like(d)
    np.add.at(g_d, t_row, g_eta[:, None] * w_t)
    g_z, dec_g = mlp_backward(model.decoder, dtape, g_d)
    g_mu = g_z - kl_weight * mu / B
    g_lv = g_z * eps * 0.5 * std - kl_weight * 0.5 * (np.exp(lv) - 1.0) / B
    grads = _encode_backward(model, cache, g_mu, g_lv)
    grads.update(dec_g.tensors("decoder"))
    grads["heads.w"] = g_w
    grads["heads.b"] = g_b
    return value, grads, per_row


@dataclass(frozen=True)
class BaseTrainConfig:
    epochs: int = 300
    batch_size: int = 1000
    lr: float = 1e-2
    weight_decay: float = 0.0
    p_keep: float = 0.8
    # < 1 keeps the latent informative on sparse data where the exact ELBO collapses it
    kl_weight: float = 0.12


def train_base(model: PvaeModel, dataset: SparseDataset, train_features: Sequence[int],
               config: BaseTrainConfig, rng: Rng) -> tuple[PvaeModel, list[float]]:
    """Mini-batch Adam ascent on the ELBO over the training features only.

    The optimised objective scales the KL term by ``config.kl_weight``; the
    returned trace is always the unweighted per-epoch mean ELBO. Masks are
    redrawn for every row in every epoch. The model is updated in place.
    """
    if model.frozen:
        raise ContractViolation("cannot train a frozen model")
    train_features = sorted(int(j) for j in train_features)
    if not train_features:
        raise InvalidArgument("empty training feature set")
    if list(model.head_features) != train_features:
        raise InvalidArgument("model heads must match the training feature set exactly")
    view = RowView(dataset, np.asarray(train_features))
    rows = [i for i in range(dataset.n_rows) if len(view.row(i)[0])]
    opt = Adam(config.lr, weight_decay=config.weight_decay)
    trace: list[float] = []
    for epoch in range(config.epochs):
        gen = rng.child("shuffle", epoch).generator()
        mask_gen = rng.child("mask", epoch).generator()
        noise_gen = rng.child("reparam", epoch).generator()
        order = gen.permutation(len(rows))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = []
            for i in order[start:start + config.batch_size]:
                f, v = view.row(rows[i])
                batch.append(bernoulli_mask(rows[i], f, v, config.p_keep, mask_gen))
            value, grads, per_row = elbo(model, batch, noise_gen, kl_weight=config.kl_weight)
            opt.step(model.tensors(), {k: -g for k, g in grads.items()})
            total += float(per_row.sum())
            count += len(batch)
        trace.append(total / count)
    return model, trace


class FrozenBase:
    """A frozen base model bound to a dataset and its input feature set.

    ``z``/``d`` hold the posterior mean and decoder representation of every
    row computed from the row's observations on ``input_features`` only (features
    outside that set never enter the encoder). With ``cache=False`` encodings
    are recomputed on each request.
    """

    def __init__(self, model: PvaeModel, dataset: SparseDataset,
                 input_features: Sequence[int], cache: bool = True):
        if not model.frozen:
            raise ContractViolation("base model must be frozen")
        self.model = model
        self.dataset = dataset
        self.view = RowView(dataset, np.asarray(sorted(input_features), dtype=np.int64))
        self.cached = cache
        if cache:
            z, d = _encode_view(model, self.view, np.arange(dataset.n_rows))
            z.flags.writeable = False
            d.flags.writeable = False
            self._z, self._d = z, d

    @property
    def latent_dim(self) -> int:
        return self.model.latent_dim

    @property
    def d_dim(self) -> int:
        return self.model.d_dim

    def link(self, feature: int) -> str:
        return LINKS[self.dataset.feature_kinds[feature]]

    def encodings(self, rows) -> tuple[np.ndarray, np.ndarray]:
        rows = np.asarray(rows, dtype=np.int64)
        if self.cached:
            return self._z[rows], self._d[rows]
        if len(rows) == 0:
            return np.zeros((0, self.latent_dim)), np.zeros((0, self.d_dim))
        return _encode_view(self.model, self.view, rows)

    def latents(self, rows) -> np.ndarray:
        """Posterior means only (skips the decoder when not cached)."""
        rows = np.asarray(rows, dtype=np.int64)
        if self.cached:
            return self._z[rows]
        if len(rows) == 0:
            return np.zeros((0, self.latent_dim))
        return _encode_view(self.model, self.view, rows, decode=False)[0]

    def eta(self, head: HeadParams, rows) -> np.ndarray:
        _, d = self.encodings(rows)
        return head_eta(d, head.w, head.b)

    def predict(self, head: HeadParams, rows) -> np.ndarray:
        return apply_link(self.eta(head, rows), head.link)
