import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chnet.datasets import (FeatureMeta, RowView, SparseDataset, bernoulli_mask, cap_targets,
                            generate_synthetic, load_dataset_dir, load_factors, load_metadata,
                            load_triplets, metadata_matrix, sample_context_size, sample_episode,
                            split_features, tag_groups, write_dataset_dir)
from chnet.errors import DataError, InvalidArgument
from chnet.numerics import Rng, sigmoid


def write(path, text):
    path.write_text(text)
    return path


# --- ingestion ---------------------------------------------------------------

def test_triplets_min_max_normalised(tmp_path):
    p = write(tmp_path / "t.csv", "row,feature,value\n0,0,3\n0,1,5\n1,0,1\n")
    ds = load_triplets(p, "continuous", (1.0, 5.0))
    assert (ds.n_rows, ds.n_features) == (2, 2)
    assert sorted(ds.values.tolist()) == [0.0, 0.5, 1.0]
    assert ds.row_observations(0)[1].tolist() == [0.5, 1.0]
    assert ds.denormalize(0, 0.5) == 3.0


def test_empty_triplet_file(tmp_path):
    ds = load_triplets(write(tmp_path / "t.csv", ""), "binary")
    assert (ds.n_rows, ds.n_features, len(ds)) == (0, 0, 0)


def test_duplicate_triplet_named(tmp_path):
    p = write(tmp_path / "t.csv", "0,0,2\n1,0,1\n0,0,2\n")
    with pytest.raises(DataError, match="duplicate.*line 1"):
        load_triplets(p, "continuous")


def test_binary_feature_rejects_fractional_value(tmp_path):
    with pytest.raises(DataError, match="non-binary"):
        load_triplets(write(tmp_path / "t.csv", "0,0,0.5\n"), "binary")


def test_metadata_multi_hot(tmp_path):
    ds = load_triplets(write(tmp_path / "t.csv", "0,0,1\n0,1,1\n0,2,0\n"), "binary")
    meta = write(tmp_path / "m.csv", "feature,tags,scalar\n0,Action|Comedy,\n1,,\n")
    metas = load_metadata(meta, ds, ["Action", "Comedy", "Drama"])
    assert metas[0].tags.tolist() == [1, 1, 0]
    assert metas[1].tags.tolist() == [0, 0, 0]
    assert metas[1].scalar is None and metas[2].tags.tolist() == [0, 0, 0]


def test_metadata_scalar_must_be_all_or_none(tmp_path):
    ds = load_triplets(write(tmp_path / "t.csv", "0,0,1\n0,1,1\n"), "binary")
    meta = write(tmp_path / "m.csv", "0,Action,0.5\n")
    with pytest.raises(DataError, match="all features or none"):
        load_metadata(meta, ds, ["Action"])


def test_metadata_scalar_parsed(tmp_path):
    ds = load_triplets(write(tmp_path / "t.csv", "0,0,1\n"), "binary")
    metas = load_metadata(write(tmp_path / "m.csv", "0,Action|Comedy,0.5\n"), ds,
                          ["Action", "Comedy", "Drama"])
    assert metas[0].tags.tolist() == [1, 1, 0]
    assert metas[0].scalar == 0.5
    assert metas[0].vector().tolist() == [1, 1, 0, 0.5]


def test_metadata_unknown_tag(tmp_path):
    ds = load_triplets(write(tmp_path / "t.csv", "0,0,1\n0,1,1\n0,2,1\n"), "binary")
    with pytest.raises(DataError, match="Horror"):
        load_metadata(write(tmp_path / "m.csv", "2,Horror,\n"), ds, ["Action", "Comedy"])


def test_metadata_matrix_rows_follow_feature_index():
    metas = [FeatureMeta(1, np.array([0.0, 1.0])), FeatureMeta(0, np.array([1.0, 0.0]))]
    assert metadata_matrix(metas, 2).tolist() == [[1, 0], [0, 1]]
    assert metadata_matrix(None, 2) is None


def test_dataset_dir_round_trip(tmp_path):
    ds, metas, factors = generate_synthetic(30, 8, 2, 0.0, 0.5, "binary", 4, Rng(1).generator())
    write_dataset_dir(tmp_path, ds, metas, [f"g{i}" for i in range(4)], factors)
    ds2, metas2 = load_dataset_dir(tmp_path)

    def cells(d):
        return {(d.row_ids[r], d.feature_ids[c], v) for r, c, v in zip(d.rows, d.cols, d.values)}

    assert cells(ds2) == cells(ds)
    # ids are compacted in first-appearance order, so compare tags through the ids
    tags2 = {ds2.feature_ids[m.feature]: m.tags.tolist() for m in metas2}
    assert tags2 == {ds.feature_ids[m.feature]: m.tags.tolist() for m in metas}
    f2 = load_factors(tmp_path / "factors.txt", 30, 8)
    assert np.array_equal(f2.features, factors.features)


def test_row_view_and_gather_agree(toy_dataset):
    view = RowView(toy_dataset, np.array([0, 2, 3]))
    rows = np.array([4, 0, 4, 7])
    pos, feat, val = view.gather(rows)
    for p, r in enumerate(rows):
        f, v = view.row(r)
        assert feat[pos == p].tolist() == f.tolist()
        assert val[pos == p].tolist() == v.tolist()
        assert set(f.tolist()) <= {0, 2, 3}


def test_dataset_is_read_only(toy_dataset):
    with pytest.raises(ValueError):
        toy_dataset.values[0] = 0.3


# --- splits --------------------------------------------------------------------

def test_split_sizes_ten_features():
    s = split_features(10, (0.6, 0.3, 0.1), rng=np.random.default_rng(0))
    assert (len(s.train), len(s.meta_train), len(s.meta_test)) == (6, 3, 1)
    assert sorted(s.train + s.meta_train + s.meta_test) == list(range(10))


def test_split_remainder_goes_to_train():
    s = split_features(82, (0.5, 0.3, 0.2), rng=np.random.default_rng(0))
    assert (len(s.train), len(s.meta_train), len(s.meta_test)) == (42, 24, 16)


def test_ordered_split():
    s = split_features(10, (0.6, 0.3, 0.1), "ordered", keys=[9 - j for j in range(10)])
    assert s.train == (4, 5, 6, 7, 8, 9)
    assert s.meta_test == (0,)


@given(st.integers(3, 200), st.integers(0, 2**32 - 1))
def test_split_is_a_partition(n, seed):
    s = split_features(n, (0.6, 0.3, 0.1), rng=np.random.default_rng(seed))
    assert sorted(s.train + s.meta_train + s.meta_test) == list(range(n))


def test_split_rejects_bad_fractions():
    with pytest.raises(InvalidArgument):
        split_features(10, (0.5, 0.5, 0.5), rng=np.random.default_rng(0))


# --- episodes ------------------------------------------------------------------

def three_row_feature():
    return SparseDataset.build(8, 1, [2, 5, 7], [0, 0, 0], [1.0, 0.0, 1.0], ["binary"])


def test_zero_shot_episode():
    ep = sample_episode(three_row_feature(), 0, 0, np.random.default_rng(0))
    assert len(ep.context_rows) == 0
    assert ep.target_rows.tolist() == [2, 5, 7]


def test_saturated_episode():
    ep = sample_episode(three_row_feature(), 0, 10, np.random.default_rng(0))
    assert ep.context_rows.tolist() == [2, 5, 7] and len(ep.target_rows) == 0
    assert ep.k == 3


@given(st.integers(0, 2**32 - 1))
def test_episode_partitions_observed_rows(seed):
    ep = sample_episode(three_row_feature(), 0, 2, np.random.default_rng(seed))
    assert len(ep.context_rows) == 2 and len(ep.target_rows) == 1
    assert sorted(ep.context_rows.tolist() + ep.target_rows.tolist()) == [2, 5, 7]


def test_cap_targets_keeps_context_and_sorts():
    ds = SparseDataset.build(50, 1, np.arange(50), np.zeros(50), np.ones(50), ["binary"])
    ep = sample_episode(ds, 0, 5, np.random.default_rng(0))
    capped = cap_targets(ep, 10, np.random.default_rng(1))
    assert len(capped.target_rows) == 10
    assert np.all(np.diff(capped.target_rows) > 0)
    assert np.array_equal(capped.context_rows, ep.context_rows)


def test_context_size_distribution():
    gen = np.random.default_rng(0)
    draws = np.array([sample_context_size(gen) for _ in range(100_000)])
    assert draws.min() == 0 and draws.max() == 32
    freq = np.bincount(draws, minlength=33) / len(draws)
    se = np.sqrt((1 / 33) * (32 / 33) / len(draws))
    assert np.all(np.abs(freq - 1 / 33) < 3 * se)


def test_context_size_reproducible():
    a = [sample_context_size(Rng(2).generator()) for _ in range(3)]
    assert len(set(a)) == 1


# --- masking -------------------------------------------------------------------

def test_mask_keep_all():
    f, v = np.arange(5), np.ones(5)
    m = bernoulli_mask(0, f, v, 1.0, np.random.default_rng(0))
    assert m.observed_features.tolist() == f.tolist() and len(m.hidden_features) == 0


def test_mask_half():
    n = 10_000
    m = bernoulli_mask(0, np.arange(n), np.zeros(n), 0.5, np.random.default_rng(0))
    assert abs(len(m.observed_features) / n - 0.5) < 3 * np.sqrt(0.25 / n)


def test_masks_differ_across_epoch_streams():
    f, v = np.arange(40), np.zeros(40)
    a = bernoulli_mask(0, f, v, 0.5, Rng(1).child("mask", 0).generator())
    b = bernoulli_mask(0, f, v, 0.5, Rng(1).child("mask", 1).generator())
    assert a.observed_features.tolist() != b.observed_features.tolist()


# --- synthetic -----------------------------------------------------------------

def test_synthetic_dense_labels_follow_factors():
    ds, _, factors = generate_synthetic(200, 10, 3, 0.0, 1.0, "binary", 4, Rng(3).generator())
    assert len(ds) == 2000
    p = sigmoid(factors.rows @ factors.features.T)
    gen = np.random.default_rng(9)
    resampled = (gen.random((50,) + p.shape) < p).mean(axis=0)
    se = np.sqrt(p * (1 - p) / 50)
    assert np.mean(np.abs(resampled - p) < 3 * se + 1e-12) > 0.99
    x = np.zeros((200, 10))
    x[ds.rows, ds.cols] = ds.values
    # observed labels agree with the generating probabilities on average
    assert abs(x.mean() - p.mean()) < 3 * np.sqrt(0.25 / 2000)


def test_synthetic_observation_count():
    ds, _, _ = generate_synthetic(500, 60, 3, 0.0, 0.1, "binary", 4, Rng(4).generator())
    assert abs(len(ds) - 3000) < 3 * np.sqrt(30000 * 0.1 * 0.9)


def test_identical_factors_share_tag_group():
    v = np.random.default_rng(0).standard_normal((6, 3))
    v[4] = v[1]
    g = tag_groups(v, 4)
    assert g[4] == g[1]
    assert set(g.tolist()) <= {0, 1, 2, 3}
