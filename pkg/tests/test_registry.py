import json

import numpy as np
import pytest

from varproto import registry
from varproto.encoder import EncoderParams, encode
from varproto.episodes import Dataset, generate_synthetic
from varproto.errors import ConfigurationError, FormatError, IncompatibleVersionError, RegistryLookupError, UsageError
from varproto.proto import ClassGaussian, class_stats
from varproto.registry import StatsRegistry, TaskEntry, classify, fit_task, stability_experiment


@pytest.fixture
def params():
    return EncoderParams.init(6, 12, 5, seed=3, dropout_rate=0.1)


@pytest.fixture
def data():
    return generate_synthetic(3, 20, 6, 4.0, 1.0, 1)


def make_registry(params, n_tasks=3):
    reg = StatsRegistry()
    for t in range(n_tasks):
        ds = generate_synthetic(2 + t, 10, 6, 3.0, 1.0, 10 + t, label_prefix=f"T{t}_")
        reg.add(f"task{t}", fit_task(params, ds, kind="isotropic" if t == 1 else "diagonal", top_k=3), params.fingerprint())
    return reg


def test_singletons_give_zero_variance(params):
    ds = Dataset(np.random.default_rng(0).standard_normal((3, 6)), [0, 1, 2], ("x", "y", "z"))
    e = fit_task(params, ds)
    assert all(np.all(c.var == 0) for c in e.classes)


def test_fitting_is_deterministic(params, data):
    assert fit_task(params, data).same_as(fit_task(params, data))


def test_fit_uses_eval_mode_encoder(params, data):
    e = fit_task(params, data)
    emb = encode(params, data.features)
    for i, c in enumerate(e.classes):
        assert c.same_as(class_stats(emb[data.labels == i]))
    assert e.labels == data.label_names


def test_classify_matches_recomputation(params, data):
    reg = StatsRegistry()
    reg.add("t", fit_task(params, data), params.fingerprint())
    q = np.random.default_rng(5).standard_normal((300, 6))
    labels, probs = classify(reg, "t", q, params)
    emb = encode(params, q)
    means = np.stack([c.mean for c in reg.tasks["t"].classes])
    var = np.stack([c.var for c in reg.tasks["t"].classes])
    logits = -(((emb[:, None, :] - means[None]) ** 2).sum(-1) + var.sum(1))
    ref = np.exp(logits - logits.max(1, keepdims=True))
    ref /= ref.sum(1, keepdims=True)
    assert np.max(np.abs(probs - ref)) < 1e-12
    assert labels == [data.label_names[i] for i in ref.argmax(1)]


def test_classify_on_embeddings_and_known_cases():
    far = [ClassGaussian(np.zeros(2), np.zeros(2)), ClassGaussian(np.full(2, 50.0), np.ones(2))]
    reg = StatsRegistry({"t": TaskEntry(("near", "far"), tuple(far), (0, 1), 1)})
    labels, _ = classify(reg, "t", [[0.0, 0.0]])
    assert labels == ["near"]
    one = StatsRegistry({"s": TaskEntry(("only",), (far[0],), (0,), 1)})
    labels, probs = classify(one, "s", [[3.0, 4.0], [1.0, 1.0]])
    assert labels == ["only", "only"] and np.all(probs == 1.0)


def test_fit_then_classify_its_own_set_beats_oracle_minus_margin(params):
    ds = generate_synthetic(2, 100, 6, 4.0, 1.0, 21)
    reg = StatsRegistry()
    reg.add("bin", fit_task(params, ds), params.fingerprint())
    labels, _ = classify(reg, "bin", ds.features, params)
    acc = np.mean(np.array(labels) == np.array([ds.label_names[y] for y in ds.labels]))
    emb = encode(params, ds.features)
    centers = np.stack([emb[ds.labels == i].mean(0) for i in range(2)])
    oracle = np.mean(((emb[:, None] - centers[None]) ** 2).sum(-1).argmin(1) == ds.labels)
    assert acc >= oracle - 0.02


def test_classify_errors_and_no_mutation(params, data):
    reg = StatsRegistry()
    reg.add("t", fit_task(params, data), params.fingerprint())
    before = registry.to_dict(reg)
    with pytest.raises(RegistryLookupError):
        classify(reg, "missing", np.zeros((1, 5)))
    with pytest.raises(UsageError):
        classify(reg, "t", np.zeros((1, 4)))
    classify(reg, "t", np.zeros((2, 6)), params)
    assert registry.to_dict(reg) == before


def test_fingerprint_mismatch_only_warns(params, data, caplog):
    reg = StatsRegistry()
    reg.add("t", fit_task(params, data), params.fingerprint())
    other = EncoderParams.init(6, 12, 5, seed=4)
    labels, _ = classify(reg, "t", np.zeros((1, 6)), other)
    assert len(labels) == 1 and "fingerprint" in caplog.text


def test_empty_registry_round_trip(tmp_path):
    path = tmp_path / "r.json"
    registry.save(StatsRegistry(), path)
    assert registry.load(path).same_as(StatsRegistry())


def test_three_task_round_trip_is_bit_exact(params, tmp_path):
    reg = make_registry(params)
    path = tmp_path / "r.json"
    registry.save(reg, path)
    back = registry.load(path)
    assert back.same_as(reg)
    for tid, e in reg.tasks.items():
        for a, b in zip(e.classes, back.tasks[tid].classes):
            assert a.mean.tobytes() == b.mean.tobytes() and a.scale.tobytes() == b.scale.tobytes()


def test_isotropic_entries_store_one_scalar(params, tmp_path):
    path = tmp_path / "r.json"
    registry.save(make_registry(params), path)
    obj = json.loads(path.read_text())
    cls = obj["tasks"]["task1"]["classes"][0]
    assert "alpha" in cls and "var" not in cls and isinstance(cls["alpha"]["decimal"], float)
    assert set(obj) == {"format_version", "encoder_fingerprint", "tasks"}
    assert set(obj["tasks"]["task0"]) == {"dim", "kind", "top_k", "dataset_indices", "classes"}


def test_truncated_file_is_rejected(params, tmp_path):
    path = tmp_path / "r.json"
    registry.save(make_registry(params), path)
    text = path.read_text()
    path.write_text(text[: len(text) // 3])
    with pytest.raises(FormatError, match="byte"):
        registry.load(path)


def test_version_mismatch(params, tmp_path):
    path = tmp_path / "r.json"
    registry.save(make_registry(params, 1), path)
    obj = json.loads(path.read_text())
    obj["format_version"] = 2
    path.write_text(json.dumps(obj))
    with pytest.raises(IncompatibleVersionError):
        registry.load(path)


def test_corrupted_record_reports_offset(params, tmp_path):
    path = tmp_path / "r.json"
    registry.save(make_registry(params, 1), path)
    obj = json.loads(path.read_text())
    bad = obj["tasks"]["task0"]["classes"][1]["mean"]
    bad["hex"] = bad["hex"][:-4]
    text = json.dumps(obj, indent=1)
    path.write_text(text)
    with pytest.raises(FormatError, match=r"byte \d+") as err:
        registry.load(path)
    offset = int(str(err.value).rsplit("byte ", 1)[1].rstrip(")"))
    assert text.encode()[offset:].startswith(bad["hex"][:16].encode())


def test_invariants_checked_on_load(params, tmp_path):
    path = tmp_path / "r.json"
    registry.save(make_registry(params, 1), path)
    obj = json.loads(path.read_text())
    obj["tasks"]["task0"]["dataset_indices"] = [3, 1]
    path.write_text(json.dumps(obj))
    with pytest.raises(FormatError, match="invariant"):
        registry.load(path)
    del obj["encoder_fingerprint"]
    path.write_text(json.dumps(obj))
    with pytest.raises(FormatError, match="fingerprint"):
        registry.load(path)


def test_task_entry_invariants():
    a = ClassGaussian(np.zeros(3), np.ones(3))
    with pytest.raises(UsageError):
        TaskEntry(("a", "b"), (a, ClassGaussian(np.zeros(2), np.ones(2))), (0,), 1)
    with pytest.raises(UsageError):
        TaskEntry(("a",), (a,), (1, 1), 1)
    with pytest.raises(UsageError):
        TaskEntry(("a",), (a,), (5,), 1)


def test_fit_empty_dataset_is_usage_error(params):
    with pytest.raises(UsageError):
        registry.fit_embeddings(np.zeros((0, 5)), np.zeros(0, int), ())


def test_stability_full_class_has_zero_std():
    ds = generate_synthetic(3, 8, 4, 2.0, 1.0, 0)
    rep = stability_experiment(None, ds, [8], 5, ds)
    assert rep.std[8] == 0.0


def test_stability_single_resample_is_deterministic():
    ds = generate_synthetic(3, 20, 4, 2.0, 1.0, 0)
    a = stability_experiment(None, ds, [2, 5], 1, ds, seed=3).to_dict()
    assert a == stability_experiment(None, ds, [2, 5], 1, ds, seed=3).to_dict()


def test_stability_f1_metric():
    ds = generate_synthetic(3, 20, 4, 6.0, 0.5, 0)
    rep = stability_experiment(None, ds, [4], 3, ds, metric="f1")
    assert 0.9 <= rep.mean[4] <= 1.0


def test_stability_needs_enough_examples():
    ds = generate_synthetic(3, 5, 4, 2.0, 1.0, 0)
    with pytest.raises(ConfigurationError):
        stability_experiment(None, ds, [2, 6], 3, ds)


def test_macro_f1_hand_value():
    y = np.array([0, 0, 1, 1])
    p = np.array([0, 1, 1, 1])
    # class 0: tp=1 fp=0 fn=1 -> 2/3 ; class 1: tp=2 fp=1 fn=0 -> 4/5
    assert registry.macro_f1(y, p, 2) == pytest.approx((2 / 3 + 4 / 5) / 2, abs=1e-15)
