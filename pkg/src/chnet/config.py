"""Flat ``key = value`` run configuration."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .baselines import MamlConfig
from .chn import ChnConfig, MetaTrainConfig
from .errors import InvalidArgument
from .pvae import BaseTrainConfig, PvaeConfig


@dataclass(frozen=True)
class RunConfig:
    # data split
    split_fractions: tuple[float, ...] = (0.6, 0.3, 0.1)
    split_mode: str = "random"
    # base model
    e_dim: int = 30
    point_hidden: tuple[int, ...] = (30,)
    set_dim: int = 30
    latent_dim: int = 20
    encoder_hidden: tuple[int, ...] = (30,)
    decoder_hidden: tuple[int, ...] = (30,)
    output_variance: float = 0.1
    base_epochs: int = 300
    base_batch_size: int = 1000
    base_lr: float = 1e-2
    base_weight_decay: float = 0.0
    p_keep: float = 0.8
    kl_weight: float = 0.12
    # hypernetwork
    chn_point_dim: int = 25
    chn_point_hidden: tuple[int, ...] = (50,)
    chn_context_dim: int = 25
    chn_context_hidden: tuple[int, ...] = ()
    chn_meta_dim: int = 10
    chn_meta_hidden: tuple[int, ...] = (10,)
    chn_pred_hidden: tuple[int, ...] = (64, 64)
    meta_epochs: int = 300
    meta_batch_size: int = 128
    meta_lr: float = 1e-3
    meta_weight_decay: float = 1e-3
    k_max: int = 32
    target_cap: int = 256
    # baselines
    maml_alpha: float = 1e-2
    maml_beta: float = 1e-2
    maml_inner_steps: int = 10
    maml_meta_batch: int = 4
    maml_epochs: int = 50
    tfr_lr: float = 1e-2
    # evaluation
    ks: tuple[int, ...] = (0, 1, 2, 4, 8, 16, 32)
    n_seeds: int = 5

    def pvae(self) -> PvaeConfig:
        return PvaeConfig(self.e_dim, self.point_hidden, self.set_dim, self.latent_dim,
                          self.encoder_hidden, self.decoder_hidden, self.output_variance)

    def base_training(self) -> BaseTrainConfig:
        return BaseTrainConfig(self.base_epochs, self.base_batch_size, self.base_lr,
                               self.base_weight_decay, self.p_keep, self.kl_weight)

    def chn(self) -> ChnConfig:
        return ChnConfig(self.chn_point_dim, self.chn_point_hidden, self.chn_context_dim,
                         self.chn_context_hidden, self.chn_meta_dim, self.chn_meta_hidden,
                         self.chn_pred_hidden)

    def meta_training(self) -> MetaTrainConfig:
        return MetaTrainConfig(self.meta_epochs, self.meta_batch_size, self.meta_lr,
                               self.meta_weight_decay, self.k_max, self.target_cap)

    def maml(self) -> MamlConfig:
        return MamlConfig(self.maml_alpha, self.maml_beta, self.maml_inner_steps,
                          self.maml_meta_batch, self.maml_epochs, self.k_max, self.target_cap)

    def replace(self, **overrides) -> "RunConfig":
        return dataclasses.replace(self, **{k: parse_value(k, v) if isinstance(v, str) else v
                                            for k, v in overrides.items()})

    def lines(self) -> list[str]:
        return [f"{f.name} = {format_value(getattr(self, f.name))}" for f in fields(self)]


_TYPES = typing.get_type_hints(RunConfig)


def format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def parse_value(key: str, text: str):
    if key not in _TYPES:
        raise InvalidArgument(f"unknown config key {key!r}")
    tp = _TYPES[key]
    text = text.strip()
    try:
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        inner = typing.get_args(tp)[0]
        text = text.strip("[]() ")
        return tuple(inner(x) for x in text.replace(" ", "").split(",") if x)
    except ValueError:
        raise InvalidArgument(f"bad value for {key}: {text!r}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgument(f"config line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key] = parse_value(key, val)
    return dataclasses.replace(base or RunConfig(), **values)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))
