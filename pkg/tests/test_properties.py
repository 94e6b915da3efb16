"""Property-based checks of the library's invariants."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from varproto import codec, registry
from varproto.encoder import EncoderParams
from varproto.episodes import SamplerConfig, episode_from_arrays, generate_synthetic, sample_episode
from varproto.loss import episode_loss
from varproto.monitor import avi_score, dataset_indices
from varproto.numcore import Tape, finite_diff_check, l2norm, mean, mul, relu, softmax, square, tsum
from varproto.proto import ClassGaussian, bures_sq, class_probabilities, predict

settings.register_profile("repo", max_examples=60, deadline=None, derandomize=True)
settings.load_profile("repo")

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
nonneg = st.floats(0, 20, allow_nan=False, allow_infinity=False)


# magnitudes whose squared differences cannot underflow to zero
unit_scale = st.one_of(st.just(0.0), st.floats(1e-100, 50), st.floats(-50, -1e-100))


@st.composite
def gaussians(draw, n=1, dim=None, mean_el=finite, var_el=nonneg):
    d = dim or draw(st.integers(1, 8))
    out = []
    for _ in range(n):
        m = draw(arrays(np.float64, d, elements=mean_el))
        v = draw(arrays(np.float64, d, elements=var_el))
        out.append(ClassGaussian(m, v))
    return out


@st.composite
def task(draw, max_classes=5):
    d = draw(st.integers(2, 8))
    c = draw(st.integers(1, max_classes))
    classes = draw(gaussians(c, d))
    q = draw(arrays(np.float64, (draw(st.integers(1, 6)), d), elements=finite))
    return classes, q


@given(arrays(np.float64, st.integers(1, 10), elements=finite), st.floats(-1e3, 1e3))
def test_softmax_shift_invariance(logits, c):
    assert np.max(np.abs(softmax(logits + c) - softmax(logits))) < 1e-12


@given(gaussians(2))
def test_bures_symmetric_nonnegative(pair):
    a, b = pair
    ab, ba = bures_sq(a, b), bures_sq(b, a)
    assert ab >= 0 and abs(ab - ba) <= 1e-9 * max(1.0, ab)
    assert bures_sq(a, a) == 0.0


@given(st.integers(1, 8).flatmap(lambda d: gaussians(3, d)))
def test_bures_triangle_inequality(tri):
    a, b, c = (np.sqrt(x) for x in (bures_sq(tri[0], tri[2]), bures_sq(tri[0], tri[1]), bures_sq(tri[1], tri[2])))
    assert a <= b + c + 1e-9


@given(st.integers(1, 8).flatmap(lambda d: gaussians(2, d, unit_scale, st.one_of(st.just(0.0), st.floats(1e-100, 20)))))
def test_bures_zero_only_for_equal(pair):
    a, b = pair
    if not (np.array_equal(a.mean, b.mean) and np.array_equal(a.var, b.var)):
        assert bures_sq(a, b) > 0


@given(task(), st.floats(0, 100))
def test_common_isotropic_shift_leaves_probabilities(tq, w):
    classes, q = tq
    shifted = [ClassGaussian(c.mean, c.var + w) for c in classes]
    assert np.max(np.abs(class_probabilities(q, shifted) - class_probabilities(q, classes))) < 1e-12
    assert np.array_equal(predict(q, shifted), predict(q, classes)) or w > 0 and _has_near_tie(q, classes)


def _has_near_tie(q, classes):
    from varproto.proto import class_logits

    lg = np.sort(class_logits(q, classes), axis=1)
    return lg.shape[1] > 1 and np.any(lg[:, -1] - lg[:, -2] < 1e-9 * np.maximum(1, np.abs(lg[:, -1])))


@given(task(), st.randoms(use_true_random=False))
def test_predict_permutation_equivariant(tq, rnd):
    classes, q = tq
    perm = list(range(len(classes)))
    rnd.shuffle(perm)
    base = predict(q, classes)
    moved = predict(q, [classes[p] for p in perm])
    from varproto.proto import class_logits

    lg = class_logits(q, classes)
    for i in range(len(q)):
        if np.sum(lg[i] == lg[i].max()) == 1:
            assert perm[moved[i]] == base[i]


@given(task(max_classes=4), st.integers(1, 8), st.randoms(use_true_random=False))
def test_avi_bounded_and_order_free(tq, k, rnd):
    classes, q = tq
    k = min(k, classes[0].dim)
    ds = dataset_indices(classes, k)
    s = avi_score(q[0], classes, ds, k)
    assert 0.0 <= s.value <= 1.0 and s.flagged == (s.value < 0.5)
    shuffled = list(classes)
    rnd.shuffle(shuffled)
    assert avi_score(q[0], shuffled, ds, k).value == s.value


@given(st.integers(2, 8).flatmap(lambda d: gaussians(3, d)))
def test_dataset_indices_monotone_in_k(classes):
    d = classes[0].dim
    for c in classes:
        for k in range(1, d):
            assert set(dataset_indices([c], k)) <= set(dataset_indices([c], k + 1))


@given(arrays(np.float64, st.integers(0, 12), elements=st.floats(allow_nan=True, allow_infinity=True, width=64)))
def test_codec_round_trip_preserves_bits(a):
    assert codec.decode_array(codec.encode_array(a)).tobytes() == a.tobytes()


@given(st.lists(st.integers(1, 3).flatmap(lambda c: st.integers(1, 6).flatmap(lambda d: gaussians(c, d))), max_size=3))
def test_registry_round_trip_lossless(tmp_path_factory, tasks):
    reg = registry.StatsRegistry(encoder_fingerprint="sha256:00")
    for i, classes in enumerate(tasks):
        reg.tasks[f"t{i}"] = registry.TaskEntry(tuple(f"c{j}" for j in range(len(classes))), tuple(classes), (0,), 1)
    path = tmp_path_factory.mktemp("reg") / "r.json"
    registry.save(reg, path)
    assert registry.load(path).same_as(reg)


@given(st.integers(0, 10_000))
def test_episode_loss_reg_term_and_class_order(seed):
    r = np.random.default_rng(seed)
    ways = int(r.integers(2, 4))
    ep = episode_from_arrays(r.standard_normal((ways, 3, 4)), r.standard_normal((ways, 2, 4)))
    p = EncoderParams.init(4, 6, 3, seed=seed, dropout_rate=0.0)
    res = episode_loss(p, ep, 0.1)
    assert res.reg >= 0
    assert abs(res.reg - registry_reg(res.variances, 0.1)) < 1e-10
    perm = r.permutation(ways)
    assert abs(episode_loss(p, ep.permuted(perm), 0.1).value - res.value) < 1e-12


def registry_reg(var, lam):
    return lam / var.shape[0] * sum(np.sqrt((v * v).sum()) for v in var)


def test_support_query_disjoint_over_many_episodes():
    ds = generate_synthetic(6, 30, 2, 3.0, 1.0, 0)
    rng = np.random.default_rng(0)
    cfg = SamplerConfig(ways=3, shots=4, supports=5)
    for _ in range(10_000):
        ep = sample_episode(ds, cfg, rng)
        assert np.intersect1d(ep.support_idx, ep.query_idx).size == 0


OPS = {
    "relu": lambda t, x: tsum(mul(relu(t), x)),
    "square": lambda t, x: tsum(mul(square(t), x)),
    "mean": lambda t, x: tsum(square(mean(mul(t, x), axis=0))),
    "l2norm": lambda t, x: tsum(l2norm(t, axis=1)),
    "softmax": lambda t, x: tsum(mul(softmax(t, axis=1), x)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_at_100_random_points(name):
    fn = OPS[name]
    worst = 0.0
    for i in range(100):
        r = np.random.default_rng(i)
        x0, w = r.standard_normal((3, 4)), r.standard_normal((3, 4))

        def loss(p):
            tape = Tape()
            t = tape.leaf(p["x"])
            out = fn(t, w)
            tape.backward(out)
            return float(out.value), {"x": tape.grad(t)}

        worst = max(worst, finite_diff_check(loss, {"x": x0}))
    assert worst < 1e-4
