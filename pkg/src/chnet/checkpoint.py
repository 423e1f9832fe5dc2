"""Line-oriented text checkpoints.

Layout::

    PVAE-CKPT v1
    embeddings 60 30
    <60 lines of 30 floats>
    point_net.b0 1 30
    ...

Floats use 17 significant digits, so a save/load round trip is bit-exact.
Vectors are stored as one-row matrices. Non-weight attributes (feature kinds,
the feature split, optimiser settings) are stored as tensors too, which keeps
the file one uniform kind of block.
"""
from __future__ import annotations

import re
from pathlib import Path
from typing import Iterator

import numpy as np

from .baselines import MamlInit
from .chn import ChnParams
from .datasets import FeatureSplit
from .errors import DataError, InvalidArgument, KindMismatch
from .numerics import Mlp
from .pvae import HeadParams, PvaeModel

VERSION = "v1"
KINDS = ("PVAE", "CHN", "MAML")
_KIND_CODES = {"binary": 0.0, "continuous": 1.0}
_LINK_CODES = {"sigmoid": 0.0, "identity": 1.0}


def _fmt(x: float) -> str:
    return "%.17g" % x


def write_tensors(path, kind: str, tensors: dict[str, np.ndarray]) -> None:
    if kind not in KINDS:
        raise InvalidArgument(f"unknown checkpoint kind {kind!r}")
    lines = [f"{kind}-CKPT {VERSION}"]
    for name, arr in tensors.items():
        if re.search(r"\s", name):
            raise InvalidArgument(f"tensor name {name!r} contains whitespace")
        a = np.asarray(arr, dtype=np.float64)
        a = a.reshape(1, -1) if a.ndim < 2 else a
        if a.ndim != 2:
            raise InvalidArgument(f"tensor {name} has {a.ndim} dimensions")
        lines.append(f"{name} {a.shape[0]} {a.shape[1]}")
        lines.extend(" ".join(_fmt(x) for x in row) for row in a)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_tensors(path, expected_kind: str | None = None) -> tuple[str, dict[str, np.ndarray]]:
    """Parse a checkpoint; returns (kind, tensors as 2-D arrays)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"{path}: cannot read checkpoint ({e.strerror})") from None
    lines = text.splitlines()
    if not lines:
        raise DataError(f"{path}: empty checkpoint")
    m = re.fullmatch(r"(\w+)-CKPT (\S+)", lines[0].strip())
    if not m or m.group(1) not in KINDS:
        raise DataError(f"{path}:1: not a checkpoint header: {lines[0][:40]!r}")
    kind, version = m.groups()
    if version != VERSION:
        raise DataError(f"{path}:1: unsupported checkpoint version {version}")
    if expected_kind is not None and kind != expected_kind:
        raise KindMismatch(f"{path}: expected a {expected_kind} checkpoint, found {kind}")
    tensors: dict[str, np.ndarray] = {}
    it: Iterator[tuple[int, str]] = ((i + 2, s) for i, s in enumerate(lines[1:]))
    for lineno, head in it:
        if not head.strip():
            continue
        parts = head.split()
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 'name rows cols', got {head[:40]!r}")
        name = parts[0]
        try:
            rows, cols = int(parts[1]), int(parts[2])
        except ValueError:
            raise DataError(f"{path}:{lineno}: bad shape for tensor {name}") from None
        if rows < 0 or cols < 0:
            raise DataError(f"{path}:{lineno}: negative shape for tensor {name}")
        if name in tensors:
            raise DataError(f"{path}:{lineno}: duplicate tensor {name}")
        data = np.empty((rows, cols))
        for r in range(rows):
            try:
                row_no, row = next(it)
            except StopIteration:
                raise DataError(f"{path}: tensor {name} is incomplete "
                                f"({r} of {rows} rows)") from None
            vals = row.split()
            if len(vals) < cols and row_no == len(lines):
                raise DataError(f"{path}: tensor {name} is incomplete "
                                f"(row {r} of {rows} cut short)")
            if len(vals) != cols:
                raise DataError(f"{path}:{row_no}: tensor {name} row {r} has {len(vals)} "
                                f"values, expected {cols}")
            try:
                data[r] = [float(v) for v in vals]
            except ValueError:
                raise DataError(f"{path}:{row_no}: non-numeric value in tensor {name}") from None
        tensors[name] = data
    return kind, tensors


def _take(tensors: dict[str, np.ndarray], name: str, path) -> np.ndarray:
    try:
        return tensors.pop(name)
    except KeyError:
        raise DataError(f"{path}: missing tensor {name}") from None


def _vector(t: np.ndarray) -> np.ndarray:
    return t.reshape(-1)


def _mlp(tensors, prefix: str, activation: str, path, optional: bool = False) -> Mlp | None:
    weights, biases = [], []
    i = 0
    while f"{prefix}.W{i}" in tensors:
        weights.append(tensors.pop(f"{prefix}.W{i}"))
        biases.append(_vector(_take(tensors, f"{prefix}.b{i}", path)))
        i += 1
    if not weights:
        if optional:
            return None
        raise DataError(f"{path}: missing tensor {prefix}.W0")
    try:
        return Mlp(weights, biases, activation)
    except InvalidArgument as e:
        raise DataError(f"{path}: {prefix}: {e}") from None


def _ints(t: np.ndarray) -> list[int]:
    return [int(x) for x in _vector(t)]


# --------------------------------------------------------------------------
# typed save/load
# --------------------------------------------------------------------------

def save_pvae(model: PvaeModel, path, split: FeatureSplit | None = None) -> None:
    t = dict(model.tensors())
    t["meta.feature_kinds"] = np.array([_KIND_CODES[k] for k in model.feature_kinds])
    t["meta.head_features"] = model.head_features.astype(np.float64)
    t["meta.output_variance"] = np.array([model.output_variance])
    t["meta.frozen"] = np.array([1.0 if model.frozen else 0.0])
    if split is not None:
        t["split.train"] = np.asarray(split.train, dtype=np.float64)
        t["split.meta_train"] = np.asarray(split.meta_train, dtype=np.float64)
        t["split.meta_test"] = np.asarray(split.meta_test, dtype=np.float64)
    write_tensors(path, "PVAE", t)


def load_pvae(path) -> tuple[PvaeModel, FeatureSplit | None]:
    _, t = read_tensors(path, "PVAE")
    codes = {v: k for k, v in _KIND_CODES.items()}
    try:
        kinds = tuple(codes[c] for c in _vector(_take(t, "meta.feature_kinds", path)))
    except KeyError:
        raise DataError(f"{path}: unknown feature kind code") from None
    split = None
    if "split.train" in t:
        split = FeatureSplit(*(tuple(_ints(_take(t, f"split.{n}", path)))
                               for n in ("train", "meta_train", "meta_test")))
    try:
        model = PvaeModel(
            embeddings=_take(t, "embeddings", path),
            point_net=_mlp(t, "point_net", "identity", path),
            encoder=_mlp(t, "encoder", "identity", path),
            decoder=_mlp(t, "decoder", "tanh", path),
            head_features=np.array(_ints(_take(t, "meta.head_features", path)), dtype=np.int64),
            head_w=_take(t, "heads.w", path),
            head_b=_vector(_take(t, "heads.b", path)),
            feature_kinds=kinds,
            output_variance=float(_take(t, "meta.output_variance", path)[0, 0]),
        )
    except InvalidArgument as e:
        raise DataError(f"{path}: {e}") from None
    frozen = bool(_take(t, "meta.frozen", path)[0, 0])
    _no_leftovers(t, path)
    if frozen:
        model.freeze()
    return model, split


def save_chn(chn: ChnParams, path) -> None:
    t = dict(chn.tensors())
    t["meta.meta_dim"] = np.array([float(chn.meta_dim)])
    write_tensors(path, "CHN", t)


def load_chn(path) -> ChnParams:
    _, t = read_tensors(path, "CHN")
    chn = ChnParams(
        f_net=_mlp(t, "f_net", "identity", path),
        g_net=_mlp(t, "g_net", "identity", path),
        h_net=_mlp(t, "h_net", "identity", path, optional=True),
        pred_net=_mlp(t, "pred_net", "identity", path),
        meta_dim=int(_take(t, "meta.meta_dim", path)[0, 0]),
    )
    _no_leftovers(t, path)
    return chn


def save_maml(init: MamlInit, path) -> None:
    write_tensors(path, "MAML", {
        "head.w": init.head.w,
        "head.b": np.array([init.head.b]),
        "head.link": np.array([_LINK_CODES[init.head.link]]),
        "hyper": np.array([init.alpha, init.beta, init.inner_steps, init.meta_batch], dtype=float),
    })


def load_maml(path) -> MamlInit:
    _, t = read_tensors(path, "MAML")
    links = {v: k for k, v in _LINK_CODES.items()}
    link_code = float(_take(t, "head.link", path)[0, 0])
    if link_code not in links:
        raise DataError(f"{path}: unknown link code {link_code}")
    head = HeadParams(_vector(_take(t, "head.w", path)), float(_take(t, "head.b", path)[0, 0]),
                      links[link_code])
    hyper = _vector(_take(t, "hyper", path))
    if len(hyper) != 4:
        raise DataError(f"{path}: tensor hyper needs 4 values")
    _no_leftovers(t, path)
    return MamlInit(head, float(hyper[0]), float(hyper[1]), int(hyper[2]), int(hyper[3]))


def _no_leftovers(t: dict, path) -> None:
    if t:
        raise DataError(f"{path}: unexpected tensors {sorted(t)}")


def save_checkpoint(obj, path, split: FeatureSplit | None = None) -> None:
    if isinstance(obj, PvaeModel):
        save_pvae(obj, path, split)
    elif isinstance(obj, ChnParams):
        save_chn(obj, path)
    elif isinstance(obj, MamlInit):
        save_maml(obj, path)
    else:
        raise InvalidArgument(f"cannot checkpoint {type(obj).__name__}")


def load_checkpoint(path):
    """Load whatever kind the header names. A PVAE loads as (model, split)."""
    kind, _ = read_tensors(path)
    return {"PVAE": load_pvae, "CHN": load_chn, "MAML": load_maml}[kind](path)
