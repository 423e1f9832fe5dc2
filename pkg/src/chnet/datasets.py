"""Sparse partially-observed data: storage, CSV ingestion, feature splits,
masking, episode sampling and a synthetic low-rank generator."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError, InvalidArgument
from .numerics import sigmoid

KINDS = ("binary", "continuous")
TRIPLET_HEADER = ["row", "feature", "value"]
METADATA_HEADER = ["feature", "tags", "scalar"]
FEATURES_HEADER = ["feature", "kind", "min", "max"]


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class SparseDataset:
    """(row, feature, value) triplets with per-feature kind.

    ``values`` are normalised to [0, 1] for continuous features; ``raw`` keeps the
    ingested units, and ``scale_min``/``scale_max`` map between the two.
    Triplets are stored sorted by (row, feature).
    """

    n_rows: int
    n_features: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    raw: np.ndarray
    feature_kinds: tuple[str, ...]
    scale_min: np.ndarray
    scale_max: np.ndarray
    row_ids: tuple[str, ...]
    feature_ids: tuple[str, ...]

    @classmethod
    def build(cls, n_rows: int, n_features: int, rows, cols, raw,
              feature_kinds: Sequence[str], scale_min=None, scale_max=None,
              row_ids=None, feature_ids=None) -> "SparseDataset":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        raw = np.asarray(raw, dtype=np.float64)
        kinds = tuple(feature_kinds)
        if len(kinds) != n_features:
            raise InvalidArgument("one kind per feature required")
        if any(k not in KINDS for k in kinds):
            raise InvalidArgument(f"kinds must be among {KINDS}")
        if not (rows.shape == cols.shape == raw.shape):
            raise InvalidArgument("rows, cols, values must have equal length")
        if len(rows) and (rows.min() < 0 or rows.max() >= n_rows
                          or cols.min() < 0 or cols.max() >= n_features):
            raise InvalidArgument("triplet index out of range")
        if not np.all(np.isfinite(raw)):
            raise DataError("non-finite value in triplets")
        order = np.lexsort((cols, rows))
        rows, cols, raw = rows[order], cols[order], raw[order]
        if len(rows) > 1:
            dup = (rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])
            if dup.any():
                i = int(np.argmax(dup))
                raise DataError(f"duplicate triplet for row {rows[i]}, feature {cols[i]}")
        binary = np.array([k == "binary" for k in kinds], dtype=bool)
        if len(rows):
            bad = binary[cols] & (raw != 0.0) & (raw != 1.0)
            if bad.any():
                i = int(np.argmax(bad))
                raise DataError(f"non-binary value {raw[i]} for binary feature {cols[i]}")
        if scale_min is None or scale_max is None:
            lo = np.zeros(n_features)
            hi = np.ones(n_features)
            for j in np.flatnonzero(~binary):
                v = raw[cols == j]
                if len(v):
                    lo[j], hi[j] = v.min(), v.max()
                    if hi[j] == lo[j]:
                        hi[j] = lo[j] + 1.0
            scale_min = lo if scale_min is None else scale_min
            scale_max = hi if scale_max is None else scale_max
        scale_min = np.asarray(scale_min, dtype=np.float64)
        scale_max = np.asarray(scale_max, dtype=np.float64)
        if np.any(scale_max <= scale_min):
            raise DataError("normalisation range must satisfy max > min")
        values = (raw - scale_min[cols]) / (scale_max[cols] - scale_min[cols])
        if len(values) and (values.min() < 0.0 or values.max() > 1.0):
            raise DataError("value outside its declared range")
        row_ids = tuple(row_ids) if row_ids is not None else tuple(str(i) for i in range(n_rows))
        feature_ids = (tuple(feature_ids) if feature_ids is not None
                       else tuple(str(j) for j in range(n_features)))
        ds = cls(n_rows, n_features, _readonly(rows), _readonly(cols), _readonly(values),
                 _readonly(raw), kinds, _readonly(scale_min), _readonly(scale_max),
                 row_ids, feature_ids)
        ds._build_index()
        return ds

    def _build_index(self) -> None:
        row_ptr = np.searchsorted(self.rows, np.arange(self.n_rows + 1))
        by_feature = np.lexsort((self.rows, self.cols))
        col_ptr = np.searchsorted(self.cols[by_feature], np.arange(self.n_features + 1))
        object.__setattr__(self, "_row_ptr", _readonly(row_ptr))
        object.__setattr__(self, "_by_feature", _readonly(by_feature))
        object.__setattr__(self, "_col_ptr", _readonly(col_ptr))

    def __len__(self) -> int:
        return len(self.rows)

    def row_observations(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Observed (features, values) of row i, sorted by feature."""
        a, b = self._row_ptr[i], self._row_ptr[i + 1]
        return self.cols[a:b], self.values[a:b]

    def feature_observations(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        """Rows where feature j is observed (sorted) and the values there."""
        idx = self._by_feature[self._col_ptr[j]:self._col_ptr[j + 1]]
        return self.rows[idx], self.values[idx]

    def observed_count(self, j: int) -> int:
        return int(self._col_ptr[j + 1] - self._col_ptr[j])

    def restrict(self, features) -> "RowView":
        return RowView(self, np.asarray(sorted(features), dtype=np.int64))

    def denormalize(self, j: int, v):
        return self.scale_min[j] + np.asarray(v) * (self.scale_max[j] - self.scale_min[j])

    def global_mean(self, features, kind: str | None = None) -> float:
        """Mean normalised value over all observations of ``features`` (optionally one kind)."""
        feats = [j for j in features if kind is None or self.feature_kinds[j] == kind]
        parts = [self.feature_observations(j)[1] for j in sorted(feats)]
        vals = np.concatenate(parts) if parts else np.zeros(0)
        return float(vals.mean()) if len(vals) else 0.5


class RowView:
    """Row observations restricted to a feature subset (e.g. the training split)."""

    def __init__(self, dataset: SparseDataset, features: np.ndarray):
        self.dataset = dataset
        self.features = features
        keep = np.zeros(dataset.n_features, dtype=bool)
        keep[features] = True
        self.mask = keep
        sel = keep[dataset.cols]
        self._cols = dataset.cols[sel]
        self._values = dataset.values[sel]
        self._ptr = np.searchsorted(dataset.rows[sel], np.arange(dataset.n_rows + 1))

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        a, b = self._ptr[i], self._ptr[i + 1]
        return self._cols[a:b], self._values[a:b]

    def gather(self, rows) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Flattened observations of ``rows``: (position in ``rows``, feature, value).

        Within each row the features come out sorted, same as ``row``.
        """
        rows = np.asarray(rows, dtype=np.int64)
        start, stop = self._ptr[rows], self._ptr[rows + 1]
        counts = stop - start
        pos = np.repeat(np.arange(len(rows)), counts)
        idx = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts) + start[pos]
        return pos, self._cols[idx], self._values[idx]


@dataclass(frozen=True)
class FeatureMeta:
    feature: int
    tags: np.ndarray
    scalar: float | None = None

    def vector(self) -> np.ndarray:
        if self.scalar is None:
            return np.asarray(self.tags, dtype=np.float64)
        return np.append(np.asarray(self.tags, dtype=np.float64), self.scalar)


def metadata_matrix(metas: Sequence[FeatureMeta] | None, n_features: int) -> np.ndarray | None:
    """Stack metadata vectors by feature index; ``None`` when there is no metadata."""
    if not metas:
        return None
    by_feature = {m.feature: m.vector() for m in metas}
    dims = {len(v) for v in by_feature.values()}
    if len(dims) != 1:
        raise DataError("metadata vectors differ in length")
    dim = dims.pop()
    out = np.zeros((n_features, dim))
    for j, v in by_feature.items():
        out[j] = v
    return out


@dataclass(frozen=True)
class FeatureSplit:
    train: tuple[int, ...]
    meta_train: tuple[int, ...]
    meta_test: tuple[int, ...]

    def __post_init__(self) -> None:
        a, b, c = set(self.train), set(self.meta_train), set(self.meta_test)
        if a & b or a & c or b & c:
            raise InvalidArgument("feature split sets overlap")


@dataclass(frozen=True)
class Episode:
    """Context set C_n and target set T_n for feature n."""

    feature: int
    k: int
    context_rows: np.ndarray
    context_values: np.ndarray
    target_rows: np.ndarray
    target_values: np.ndarray

    def context_hash(self) -> str:
        import hashlib
        return hashlib.sha256(np.asarray(self.context_rows, dtype=np.int64).tobytes()).hexdigest()[:16]


@dataclass(frozen=True)
class MaskedRow:
    row: int
    observed_features: np.ndarray
    observed_values: np.ndarray
    hidden_features: np.ndarray
    hidden_values: np.ndarray


# --------------------------------------------------------------------------
# ingestion
# --------------------------------------------------------------------------

def _data_lines(path: Path, header: list[str]):
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            if lineno == 1 and [c.strip() for c in rec] == header:
                continue
            yield lineno, [c.strip() for c in rec]


def load_triplets(path, feature_kinds: Mapping[str, str] | str,
                  ranges: Mapping[str, tuple[float, float]] | tuple[float, float] | None = None
                  ) -> SparseDataset:
    """Read ``row,feature,value`` lines into a SparseDataset.

    Ids are compacted in first-appearance order. ``feature_kinds`` maps feature id
    to kind (or is one kind for every feature); ``ranges`` declares continuous
    min/max (one tuple for all, or per feature id). Undeclared continuous ranges
    are taken from the data.
    """
    row_index: dict[str, int] = {}
    feat_index: dict[str, int] = {}
    rows, cols, vals = [], [], []
    seen: dict[tuple[int, int], int] = {}
    for lineno, rec in _data_lines(Path(path), TRIPLET_HEADER):
        if len(rec) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(rec)}")
        r = row_index.setdefault(rec[0], len(row_index))
        c = feat_index.setdefault(rec[1], len(feat_index))
        try:
            v = float(rec[2])
        except ValueError:
            raise DataError(f"{path}:{lineno}: bad value {rec[2]!r}") from None
        if (r, c) in seen:
            raise DataError(f"{path}:{lineno}: duplicate (row {rec[0]}, feature {rec[1]}), "
                            f"first seen on line {seen[r, c]}")
        seen[r, c] = lineno
        kind = feature_kinds if isinstance(feature_kinds, str) else feature_kinds.get(rec[1])
        if kind not in KINDS:
            raise DataError(f"{path}:{lineno}: no valid kind declared for feature {rec[1]}")
        if kind == "binary" and v not in (0.0, 1.0):
            raise DataError(f"{path}:{lineno}: non-binary value {rec[2]} for binary feature {rec[1]}")
        rows.append(r)
        cols.append(c)
        vals.append(v)
    fids = list(feat_index)
    kinds = [feature_kinds if isinstance(feature_kinds, str) else feature_kinds[f] for f in fids]
    lo = np.zeros(len(fids))
    hi = np.ones(len(fids))
    cols_a = np.asarray(cols, dtype=np.int64)
    vals_a = np.asarray(vals, dtype=np.float64)
    for j, f in enumerate(fids):
        if kinds[j] != "continuous":
            continue
        decl = ranges.get(f) if isinstance(ranges, Mapping) else ranges
        if decl is not None:
            lo[j], hi[j] = decl
        else:
            v = vals_a[cols_a == j]
            lo[j], hi[j] = v.min(), v.max()
            if hi[j] == lo[j]:
                hi[j] = lo[j] + 1.0
    return SparseDataset.build(len(row_index), len(fids), rows, cols, vals, kinds, lo, hi,
                               row_ids=list(row_index), feature_ids=fids)


def _fmt(x: float) -> str:
    return repr(float(x))


def save_triplets(dataset: SparseDataset, path) -> None:
    """Write original ids and ingested-unit values."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRIPLET_HEADER)
        for r, c, v in zip(dataset.rows, dataset.cols, dataset.raw):
            w.writerow([dataset.row_ids[r], dataset.feature_ids[c], _fmt(v)])


def save_feature_table(dataset: SparseDataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FEATURES_HEADER)
        for j, fid in enumerate(dataset.feature_ids):
            kind = dataset.feature_kinds[j]
            if kind == "continuous":
                w.writerow([fid, kind, _fmt(dataset.scale_min[j]), _fmt(dataset.scale_max[j])])
            else:
                w.writerow([fid, kind, "", ""])


def load_feature_table(path) -> tuple[dict[str, str], dict[str, tuple[float, float]]]:
    kinds, ranges = {}, {}
    for lineno, rec in _data_lines(Path(path), FEATURES_HEADER):
        if len(rec) < 2:
            raise DataError(f"{path}:{lineno}: expected feature,kind[,min,max]")
        kinds[rec[0]] = rec[1]
        if len(rec) >= 4 and rec[2] and rec[3]:
            ranges[rec[0]] = (float(rec[2]), float(rec[3]))
    return kinds, ranges


def load_metadata(path, dataset: SparseDataset, vocab: Sequence[str]) -> list[FeatureMeta]:
    """Read ``feature,tags,scalar`` lines; tags are ``|``-separated, multi-hot over ``vocab``.

    Features without a line get all-zero tags.
    """
    pos = {t: i for i, t in enumerate(vocab)}
    fidx = {f: j for j, f in enumerate(dataset.feature_ids)}
    tags = np.zeros((dataset.n_features, len(vocab)))
    scalars: dict[int, float] = {}
    for lineno, rec in _data_lines(Path(path), METADATA_HEADER):
        rec = rec + [""] * (3 - len(rec))
        if rec[0] not in fidx:
            raise DataError(f"{path}:{lineno}: feature {rec[0]!r} not in dataset")
        j = fidx[rec[0]]
        for t in filter(None, rec[1].split("|")):
            if t not in pos:
                raise DataError(f"{path}:{lineno}: unknown tag {t!r}")
            tags[j, pos[t]] = 1.0
        if rec[2]:
            s = float(rec[2])
            if not 0.0 <= s <= 1.0:
                raise DataError(f"{path}:{lineno}: scalar {s} outside [0, 1]")
            scalars[j] = s
    if scalars and len(scalars) != dataset.n_features:
        raise DataError("metadata scalar must be present for all features or none")
    return [FeatureMeta(j, tags[j].copy(), scalars.get(j)) for j in range(dataset.n_features)]


def metadata_vocab(path) -> list[str]:
    """Sorted tag vocabulary appearing in a metadata file."""
    vocab = set()
    for _, rec in _data_lines(Path(path), METADATA_HEADER):
        if len(rec) > 1:
            vocab.update(filter(None, rec[1].split("|")))
    return sorted(vocab)


def save_metadata(metas: Sequence[FeatureMeta], dataset: SparseDataset,
                  vocab: Sequence[str], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METADATA_HEADER)
        for m in metas:
            names = "|".join(t for t, on in zip(vocab, m.tags) if on)
            w.writerow([dataset.feature_ids[m.feature], names,
                        "" if m.scalar is None else _fmt(m.scalar)])


# --------------------------------------------------------------------------
# splits, episodes, masking
# --------------------------------------------------------------------------

def split_features(n_features: int, fractions: Sequence[float] = (0.6, 0.3, 0.1),
                   mode: str = "random", rng: np.random.Generator | None = None,
                   keys: Sequence[float] | None = None) -> FeatureSplit:
    """Partition features into train / meta-train / meta-test.

    Meta sets get ``floor(fraction * n)`` features; the remainder goes to train.
    ``ordered`` mode sorts by ``keys`` ascending (ties by index), earliest to train.
    """
    if n_features < 3:
        raise InvalidArgument(f"need at least 3 features to split, got {n_features}")
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise InvalidArgument(f"fractions must be 3 positives summing to 1, got {fractions}")
    n_mt = math.floor(fractions[1] * n_features + 1e-9)
    n_te = math.floor(fractions[2] * n_features + 1e-9)
    n_tr = n_features - n_mt - n_te
    if mode == "random":
        if rng is None:
            raise InvalidArgument("random split needs an rng")
        order = rng.permutation(n_features)
    elif mode == "ordered":
        if keys is None or len(keys) != n_features:
            raise InvalidArgument("ordered split needs one key per feature")
        order = np.lexsort((np.arange(n_features), np.asarray(keys, dtype=np.float64)))
    else:
        raise InvalidArgument(f"unknown split mode {mode!r}")
    order = [int(j) for j in order]
    return FeatureSplit(tuple(sorted(order[:n_tr])), tuple(sorted(order[n_tr:n_tr + n_mt])),
                        tuple(sorted(order[n_tr + n_mt:])))


def sample_context_size(rng: np.random.Generator, k_max: int = 32) -> int:
    """Uniform on {0, ..., k_max}."""
    return int(rng.integers(0, k_max + 1))


def sample_episode(dataset: SparseDataset, feature: int, k: int,
                   rng: np.random.Generator) -> Episode:
    rows, vals = dataset.feature_observations(feature)
    if len(rows) == 0:
        raise InvalidArgument(f"feature {feature} has no observations")
    if k < 0:
        raise InvalidArgument(f"context size must be >= 0, got {k}")
    n = min(k, len(rows))
    pick = np.zeros(len(rows), dtype=bool)
    pick[rng.choice(len(rows), size=n, replace=False)] = True
    return Episode(feature, n, rows[pick], vals[pick], rows[~pick], vals[~pick])


def cap_targets(ep: Episode, cap: int, rng: np.random.Generator) -> Episode:
    """Uniformly subsample the target set down to ``cap`` rows (kept sorted)."""
    if len(ep.target_rows) <= cap:
        return ep
    keep = np.sort(rng.choice(len(ep.target_rows), size=cap, replace=False))
    return Episode(ep.feature, ep.k, ep.context_rows, ep.context_values,
                   ep.target_rows[keep], ep.target_values[keep])


def bernoulli_mask(row: int, features: np.ndarray, values: np.ndarray, p_keep: float,
                   rng: np.random.Generator) -> MaskedRow:
    """Keep each observation with probability ``p_keep``; the rest become hidden targets."""
    if not 0.0 < p_keep <= 1.0:
        raise InvalidArgument(f"p_keep must be in (0, 1], got {p_keep}")
    keep = rng.random(len(features)) < p_keep
    return MaskedRow(row, features[keep], values[keep], features[~keep], values[~keep])


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticFactors:
    rows: np.ndarray      # [n_rows, rank]
    features: np.ndarray  # [n_features, rank]


def tag_groups(v: np.ndarray, n_groups: int) -> np.ndarray:
    """Group features by the sign pattern of their leading factor coordinates."""
    if n_groups <= 1:
        return np.zeros(len(v), dtype=np.int64)
    m = min(math.ceil(math.log2(n_groups)), v.shape[1])
    code = np.zeros(len(v), dtype=np.int64)
    for b in range(m):
        code += (v[:, b] > 0).astype(np.int64) << b
    return code % n_groups


def generate_synthetic(n_rows: int, n_features: int, rank: int, noise_sd: float,
                       obs_prob: float, kind: str, n_tag_groups: int,
                       rng: np.random.Generator
                       ) -> tuple[SparseDataset, list[FeatureMeta], SyntheticFactors]:
    """Low-rank data: s_ij = u_i . v_j + noise; value sigmoid(s) or Bernoulli(sigmoid(s))."""
    if rank < 1:
        raise InvalidArgument("rank must be >= 1")
    if not 0.0 < obs_prob <= 1.0:
        raise InvalidArgument("obs_prob must be in (0, 1]")
    if kind not in KINDS:
        raise InvalidArgument(f"kind must be one of {KINDS}")
    u = rng.standard_normal((n_rows, rank))
    v = rng.standard_normal((n_features, rank))
    s = u @ v.T
    if noise_sd:
        s = s + noise_sd * rng.standard_normal(s.shape)
    p = sigmoid(s)
    if kind == "binary":
        x = (rng.random(s.shape) < p).astype(np.float64)
    else:
        x = p
    observed = rng.random(s.shape) < obs_prob
    r, c = np.nonzero(observed)
    ds = SparseDataset.build(n_rows, n_features, r, c, x[r, c], [kind] * n_features,
                             np.zeros(n_features), np.ones(n_features))
    groups = tag_groups(v, n_tag_groups)
    metas = [FeatureMeta(j, np.eye(n_tag_groups)[groups[j]]) for j in range(n_features)]
    return ds, metas, SyntheticFactors(u, v)


def write_dataset_dir(out_dir, dataset: SparseDataset, metas: Sequence[FeatureMeta] | None = None,
                      vocab: Sequence[str] | None = None,
                      factors: SyntheticFactors | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_triplets(dataset, out / "triplets.csv")
    save_feature_table(dataset, out / "features.csv")
    if metas:
        save_metadata(metas, dataset, vocab, out / "metadata.csv")
    if factors is not None:
        with open(out / "factors.txt", "w", encoding="utf-8") as fh:
            for block in (factors.rows, factors.features):
                for vec in block:
                    fh.write(" ".join(f"{x:.17g}" for x in vec) + "\n")


def load_dataset_dir(data_dir) -> tuple[SparseDataset, list[FeatureMeta] | None]:
    d = Path(data_dir)
    if not (d / "triplets.csv").exists():
        raise DataError(f"{d}: missing triplets.csv")
    if (d / "features.csv").exists():
        kinds, ranges = load_feature_table(d / "features.csv")
        ds = load_triplets(d / "triplets.csv", kinds, ranges)
    else:
        ds = load_triplets(d / "triplets.csv", "continuous")
    metas = None
    if (d / "metadata.csv").exists():
        metas = load_metadata(d / "metadata.csv", ds, metadata_vocab(d / "metadata.csv"))
    return ds, metas


def load_factors(path, n_rows: int, n_features: int) -> SyntheticFactors:
    arr = np.loadtxt(path, ndmin=2)
    if len(arr) != n_rows + n_features:
        raise DataError(f"{path}: expected {n_rows + n_features} factor rows, got {len(arr)}")
    return SyntheticFactors(arr[:n_rows], arr[n_rows:])
