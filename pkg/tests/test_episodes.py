
import numpy as np
import pytest

from varproto.episodes import (
    Dataset,
    SamplerConfig,
    check_disjoint,
    episode_from_arrays,
    generate_synthetic,
    load_dataset,
    load_splits,
    sample_episode,
    split_labels,
    write_dataset,
)
from varproto.errors import ConfigurationError, FormatError, UsageError
from varproto.streams import substream


def tiny():
    x = np.arange(18, dtype=float).reshape(6, 3)
    return Dataset(x, [0, 0, 0, 1, 1, 1], ("a", "b"))


def test_exhaustive_episode_uses_every_example():
    ds = tiny()
    ep = sample_episode(ds, SamplerConfig(ways=2, shots=1, supports=2), np.random.default_rng(0))
    used = np.concatenate([ep.support_idx, ep.query_idx])
    assert sorted(used.tolist()) == list(range(6))
    assert not set(ep.support_idx) & set(ep.query_idx)
    assert ep.support_x.shape == (4, 3) and ep.query_x.shape == (2, 3)
    assert ep.support_y.tolist() == [0, 0, 1, 1] and ep.query_y.tolist() == [0, 1]


def test_episode_counts_and_label_consistency(benchmark_splits):
    tr, _ = benchmark_splits
    cfg = SamplerConfig()
    ep = sample_episode(tr, cfg, substream(1, "t"))
    assert ep.support_x.shape == (64, 64) and ep.query_x.shape == (32, 64)
    assert np.bincount(ep.support_y).tolist() == [16] * 4
    assert np.bincount(ep.query_y).tolist() == [8] * 4
    for c, lab in enumerate(ep.label_map):
        assert np.all(tr.labels[ep.support_idx[ep.support_y == c]] == lab)
        assert np.all(tr.labels[ep.query_idx[ep.query_y == c]] == lab)


def test_same_seed_same_episode(benchmark_splits):
    tr, _ = benchmark_splits
    a = sample_episode(tr, SamplerConfig(), substream(3, "x"))
    b = sample_episode(tr, SamplerConfig(), substream(3, "x"))
    assert np.array_equal(a.support_idx, b.support_idx) and np.array_equal(a.query_idx, b.query_idx)


def test_sqrt_size_weighting_frequency():
    small = generate_synthetic(4, 25, 2, 5.0, 1.0, 0, name="small")
    large = generate_synthetic(4, 100, 2, 5.0, 1.0, 1, name="large")
    cfg = SamplerConfig(ways=2, shots=1, supports=1, task_weighting="sqrt-size")
    rng = substream(0, "weighting")
    n = 10_000
    hits = sum(sample_episode([small, large], cfg, rng).dataset == "large" for _ in range(n))
    sigma = np.sqrt((2 / 3) * (1 / 3) / n)
    assert abs(hits / n - 2 / 3) < 3 * sigma < 0.02


def test_labels_too_small_are_excluded():
    x = np.zeros((7, 2))
    ds = Dataset(x, [0, 0, 0, 1, 1, 1, 2], ("a", "b", "c"))
    assert ds.eligible_labels(3).tolist() == [0, 1]
    ep = sample_episode(ds, SamplerConfig(ways=2, shots=1, supports=2), np.random.default_rng(0))
    assert set(ep.label_map) == {0, 1}
    with pytest.raises(ConfigurationError):
        sample_episode(ds, SamplerConfig(ways=3, shots=1, supports=2), np.random.default_rng(0))


def test_sampler_config_validates():
    with pytest.raises(ConfigurationError):
        SamplerConfig(ways=1)
    with pytest.raises(ConfigurationError):
        SamplerConfig(task_weighting="size")


def test_zero_noise_gives_identical_rows():
    ds = generate_synthetic(3, 5, 4, 2.0, 0.0, 11)
    for lab in range(3):
        rows = ds.features[ds.labels == lab]
        assert np.all(rows == rows[0])
        assert np.linalg.norm(rows[0]) == pytest.approx(2.0, rel=1e-12)


def test_generator_is_deterministic_and_records_parameters():
    a = generate_synthetic(4, 10, 8, 3.0, 0.5, 42)
    b = generate_synthetic(4, 10, 8, 3.0, 0.5, 42)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.metadata["generator"]["class_separation"] == 3.0
    assert not np.array_equal(a.features, generate_synthetic(4, 10, 8, 3.0, 0.5, 43).features)


def test_well_separated_blobs_are_nearest_center_solvable():
    ds = generate_synthetic(4, 1000, 16, 10.0, 0.1, 5)
    centers = np.stack([ds.features[ds.labels == i].mean(0) for i in range(4)])
    d = ((ds.features[:, None, :] - centers[None]) ** 2).sum(-1)
    assert np.mean(d.argmin(1) == ds.labels) == 1.0


def test_standard_benchmark_shape(benchmark_splits):
    tr, va = benchmark_splits
    assert (tr.n_labels, va.n_labels, tr.dim, len(tr), len(va)) == (28, 8, 64, 8400, 2400)
    assert not set(tr.label_names) & set(va.label_names)


def test_check_disjoint_rejects_overlap():
    ds = tiny()
    with pytest.raises(ConfigurationError, match="both"):
        check_disjoint(ds, ds)


def test_split_labels_is_label_disjoint():
    tr, va = split_labels(generate_synthetic(5, 3, 2, 1.0, 1.0, 0), 2)
    assert tr.label_names == ("L0", "L1", "L2") and va.label_names == ("L3", "L4")
    assert va.split == "meta-val"


@pytest.mark.parametrize("fmt", ["jsonl", "csv"])
def test_round_trip(tmp_path, fmt):
    ds = generate_synthetic(3, 4, 5, 2.0, 1.0, 8)
    path = tmp_path / f"d.{fmt}"
    write_dataset(ds, path, fmt)
    back = load_dataset(path, fmt)
    assert back.equals(ds)


def test_two_record_file(tmp_path):
    p = tmp_path / "two.jsonl"
    p.write_text('{"label": "x", "features": [1, 2, 3]}\n{"label": "y", "features": [4, 5, 6]}\n')
    ds = load_dataset(p)
    assert (len(ds), ds.dim, ds.n_labels) == (2, 3, 2)


def test_ragged_record_cites_record_index(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"label": "x", "features": [1, 2, 3, 4]}\n{"label": "x", "features": [1, 2, 3]}\n')
    with pytest.raises(FormatError, match="record 1"):
        load_dataset(p)


@pytest.mark.parametrize(
    "text, needle",
    [("", "no records"), ("not json\n", "line 1"), ('{"label": "x", "features": "abc"}\n', "features")],
)
def test_malformed_files(tmp_path, text, needle):
    p = tmp_path / "m.jsonl"
    p.write_text(text)
    with pytest.raises(FormatError, match=needle):
        load_dataset(p)


def test_missing_file():
    with pytest.raises(FormatError, match="not found"):
        load_dataset("/nonexistent/file.jsonl")


def test_load_splits_rechecks_disjointness(tmp_path):
    ds = generate_synthetic(4, 3, 2, 1.0, 1.0, 0)
    write_dataset(ds, tmp_path / "a.jsonl")
    with pytest.raises(ConfigurationError):
        load_splits(tmp_path / "a.jsonl", tmp_path / "a.jsonl")


def test_dataset_validation():
    with pytest.raises(UsageError):
        Dataset(np.zeros((2, 2)), [0, 1], ("a",))
    with pytest.raises(UsageError):
        Dataset(np.zeros((2, 2)), [0, 0], ("a", "b"))
    with pytest.raises(UsageError):
        Dataset(np.array([[np.nan, 0.0]]), [0], ("a",))
    ds = tiny()
    with pytest.raises(ValueError):
        ds.features[0, 0] = 1.0


def test_permuted_episode_relabels_queries():
    r = np.random.default_rng(0)
    ep = episode_from_arrays(r.standard_normal((3, 2, 4)), r.standard_normal((3, 2, 4)))
    p = ep.permuted([2, 0, 1])
    for c in range(3):
        orig = ep.query_x[ep.query_y == c]
        new_c = [2, 0, 1].index(c)
        assert np.array_equal(p.query_x[p.query_y == new_c], orig)
        assert np.array_equal(p.support_by_class()[new_c], ep.support_by_class()[c])


def test_dataset_iteration():
    ex = list(tiny())
    assert len(ex) == 6 and ex[4].label == 1 and ex[4].features.tolist() == [12.0, 13.0, 14.0]
