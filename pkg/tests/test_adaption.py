"""Training machinery: judge oracles, gradients, Adam, end-to-end runs."""

import math

import numpy as np
import pytest

from deepsim.adaption import (Adam, AdaptionHistory, CoeffBatch, JudgeNet,
                              TrainConfig, TrainerState, _sync_grad, _two_afc,
                              bce, judge_features, load_judge, loss_and_grads,
                              save_judge, sigmoid, sync_loss, train_adaption,
                              train_step, triplet_coeffs)
from deepsim.distortions import (DistortionKind, DistortionOrdering,
                                 make_triplet, triplet_rng)
from deepsim.errors import ConfigError, TrainingDivergedError
from deepsim.similarity import ComparisonMethod, Metric, ScalarWeights

from helpers import ListDataset, synth_images, toy_network

MEAN = ComparisonMethod.MEAN


# ---------------------------------------------------------------------------
# Elementary pieces

def test_sigmoid_matches_definition_and_is_stable():
    xs = np.array([-3.0, -0.5, 0.0, 0.5, 3.0])
    np.testing.assert_allclose(sigmoid(xs), 1.0 / (1.0 + np.exp(-xs)),
                               rtol=1e-12)
    assert sigmoid(np.array([1000.0]))[0] == 1.0
    assert sigmoid(np.array([-1000.0]))[0] == 0.0


def test_bce_matches_definition_and_clamps():
    p, t = 0.73, 1.0
    assert bce(p, t) == pytest.approx(-math.log(0.73), rel=1e-12)
    assert bce(0.73, 0.0) == pytest.approx(-math.log(0.27), rel=1e-12)
    assert np.isfinite(bce(0.0, 1.0))
    assert np.isfinite(bce(1.0, 0.0))


def test_sync_loss_equal_distances_is_ten_log_two():
    # sigmoid(0) = 0.5 regardless of the label, so 10 * ln 2 exactly
    want = 10.0 * math.log(2.0)
    for d in (0.0, 0.37, 5.0):
        for label in (0.0, 1.0):
            assert sync_loss(d, d, label) == pytest.approx(want, rel=1e-12)


def test_sync_loss_hand_value():
    # d0=3, d1=1, label 0: 10 * -ln(1 - sigmoid(2)) = 10 * ln(1 + e^2)
    want = 10.0 * math.log(1.0 + math.exp(2.0))
    assert sync_loss(3.0, 1.0, 0.0) == pytest.approx(want, rel=1e-12)
    assert sync_loss(3.0, 1.0, 0.0) == pytest.approx(21.269280110429727,
                                                     abs=1e-9)


def test_sync_grad_matches_finite_difference():
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(30):
        d0, d1 = rng.uniform(0, 4, 2)
        label = float(rng.integers(0, 2))
        g = float(_sync_grad(d0, d1, label))
        fd0 = (sync_loss(d0 + h, d1, label) - sync_loss(d0 - h, d1, label)) / (2 * h)
        fd1 = (sync_loss(d0, d1 + h, label) - sync_loss(d0, d1 - h, label)) / (2 * h)
        assert g == pytest.approx(fd0, rel=1e-5, abs=1e-8)
        assert -g == pytest.approx(fd1, rel=1e-5, abs=1e-8)


def test_judge_features_values_and_jacobians():
    d0, d1 = 2.0, 0.5
    feats, dd0, dd1 = judge_features(d0, d1)
    np.testing.assert_allclose(
        feats, [2.0, 0.5, 1.5, 2.0 / (0.5 + 1e-10), 0.5 / (2.0 + 1e-10)],
        rtol=1e-12)
    h = 1e-6
    fp, _, _ = judge_features(d0 + h, d1)
    fm, _, _ = judge_features(d0 - h, d1)
    np.testing.assert_allclose(dd0, (fp - fm) / (2 * h), rtol=1e-4, atol=1e-7)
    fp, _, _ = judge_features(d0, d1 + h)
    fm, _, _ = judge_features(d0, d1 - h)
    np.testing.assert_allclose(dd1, (fp - fm) / (2 * h), rtol=1e-4, atol=1e-7)


def test_two_afc_scoring_rule():
    # d1 < d0 scores the label itself, otherwise (ties included) 1 - label
    assert _two_afc([1.0], [0.5], [1.0]) == 1.0
    assert _two_afc([1.0], [0.5], [0.0]) == 0.0
    assert _two_afc([0.5], [1.0], [0.0]) == 1.0
    assert _two_afc([0.7], [0.7], [1.0]) == 0.0
    assert _two_afc([0.7], [0.7], [0.0]) == 1.0
    assert _two_afc([1, 1], [0, 2], [1, 1]) == 0.5


# ---------------------------------------------------------------------------
# Judge network

def manual_judge_forward(judge, feats):
    """Reference forward with explicit per-sample loops."""
    out = []
    for row in np.atleast_2d(feats):
        z1 = judge.w1 @ row + judge.b1
        a1 = np.array([z if z > 0 else 0.2 * z for z in z1])
        z2 = judge.w2 @ a1 + judge.b2
        a2 = np.array([z if z > 0 else 0.2 * z for z in z2])
        z3 = float((judge.w3 @ a2 + judge.b3)[0])
        out.append(1.0 / (1.0 + math.exp(-z3)))
    return np.array(out)


def test_judge_forward_matches_manual_reference():
    judge = JudgeNet.init(np.random.default_rng(1))
    rng = np.random.default_rng(2)
    feats = rng.uniform(-2, 2, size=(8, 5))
    got = judge.forward(feats)
    np.testing.assert_allclose(got, manual_judge_forward(judge, feats),
                               rtol=1e-12)
    assert ((got > 0) & (got < 1)).all()


def test_judge_init_bounds_and_zero_biases():
    judge = JudgeNet.init(np.random.default_rng(3))
    assert np.abs(judge.w1).max() <= 1.0 / math.sqrt(5)
    assert np.abs(judge.w2).max() <= 1.0 / math.sqrt(32)
    assert np.abs(judge.w3).max() <= 1.0 / math.sqrt(32)
    assert (judge.b1 == 0).all() and (judge.b2 == 0).all() \
        and (judge.b3 == 0).all()
    with pytest.raises(ConfigError, match="widths"):
        JudgeNet(np.zeros((31, 5)), np.zeros(31), np.zeros((32, 31)),
                 np.zeros(32), np.zeros((1, 32)), np.zeros(1))


def test_judge_backward_matches_finite_difference():
    judge = JudgeNet.init(np.random.default_rng(4))
    rng = np.random.default_rng(5)
    feats = rng.uniform(-1.5, 1.5, size=(6, 5))
    targets = rng.integers(0, 2, size=6).astype(np.float64)

    def total_loss():
        return float(bce(judge.forward(feats), targets).sum())

    prob, cache = judge.forward(feats, with_cache=True)
    grads, dfeats = judge.backward(cache, prob - targets)
    h = 1e-6
    for name in JudgeNet.PARAM_NAMES:
        arr = getattr(judge, name)
        flat = arr.reshape(-1)
        idx = rng.choice(flat.size, size=min(10, flat.size), replace=False)
        for i in idx:
            keep = flat[i]
            flat[i] = keep + h
            up = total_loss()
            flat[i] = keep - h
            down = total_loss()
            flat[i] = keep
            fd = (up - down) / (2 * h)
            assert grads[name].reshape(-1)[i] == pytest.approx(
                fd, rel=1e-4, abs=1e-8), name
    for b in range(feats.shape[0]):
        for j in range(5):
            keep = feats[b, j]
            feats[b, j] = keep + h
            up = total_loss()
            feats[b, j] = keep - h
            down = total_loss()
            feats[b, j] = keep
            fd = (up - down) / (2 * h)
            assert dfeats[b, j] == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_judge_save_load_round_trip(tmp_path):
    judge = JudgeNet.init(np.random.default_rng(6))
    path = tmp_path / "judge.dsw"
    save_judge(path, judge, meta={"note": "x"})
    back = load_judge(path)
    for name in JudgeNet.PARAM_NAMES:
        np.testing.assert_allclose(getattr(back, name), getattr(judge, name),
                                   atol=1e-6)
    feats = np.random.default_rng(7).uniform(-1, 1, size=(4, 5))
    np.testing.assert_allclose(back.forward(feats), judge.forward(feats),
                               atol=1e-5)


# ---------------------------------------------------------------------------
# Adam

def test_adam_first_step_is_signlike():
    adam = Adam()
    p = {"x": np.array([1.0, 1.0])}
    g = {"x": np.array([2.0, -0.25])}
    adam.step(p, g, lr=0.5)
    # first step: m-hat = g, v-hat = g^2, update = lr * g / (|g| + eps)
    np.testing.assert_allclose(p["x"], [0.5, 1.5], atol=1e-7)
    assert adam.t == 1


def test_adam_two_steps_match_reference():
    adam = Adam()
    p = {"x": np.array([0.3])}
    grads = [np.array([1.5]), np.array([-0.7])]
    for g in grads:
        adam.step(p, {"x": g}, lr=0.01)

    x, m, v = 0.3, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = 0.9 * m + 0.1 * float(g[0])
        v = 0.999 * v + 0.001 * float(g[0]) ** 2
        x -= 0.01 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t))
                                            + 1e-8)
    assert p["x"][0] == pytest.approx(x, rel=1e-12)


def test_adam_zero_lr_touches_nothing():
    adam = Adam()
    p = {"x": np.array([1.0])}
    adam.step(p, {"x": np.array([5.0])}, lr=0.1)
    t_before = adam.t
    m_before = {k: v.copy() for k, v in adam.m.items()}
    v_before = {k: v.copy() for k, v in adam.v.items()}
    x_before = p["x"].copy()
    adam.step(p, {"x": np.array([123.0])}, lr=0.0)
    assert adam.t == t_before
    np.testing.assert_array_equal(p["x"], x_before)
    for k in m_before:
        np.testing.assert_array_equal(adam.m[k], m_before[k])
        np.testing.assert_array_equal(adam.v[k], v_before[k])


# ---------------------------------------------------------------------------
# Config

def test_lr_schedule_constant_then_linear_decay():
    cfg = TrainConfig(base_lr=1.0, epochs=10)
    got = [cfg.lr_at(e) for e in range(1, 11)]
    np.testing.assert_allclose(
        got, [1.0, 1.0, 1.0, 1.0, 1.0, 0.8, 0.6, 0.4, 0.2, 0.0], atol=1e-12)
    assert TrainConfig(base_lr=0.5, epochs=10).lr_at(8) == pytest.approx(0.2)


def test_config_validation():
    with pytest.raises(ConfigError, match="base_lr"):
        TrainConfig(base_lr=0.0)
    with pytest.raises(ConfigError, match="batch_size"):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError, match="val_fraction"):
        TrainConfig(val_fraction=1.0)
    with pytest.raises(ConfigError, match="epochs"):
        TrainConfig(epochs=0)


# ---------------------------------------------------------------------------
# Coefficient batches

def make_batch(net, n=6, seed=0, size=16):
    images = synth_images(seed + 100, n, size=size)
    ordering = DistortionOrdering((DistortionKind.SHIFT_HUE,
                                   DistortionKind.GAUSSIAN_BLUR,
                                   DistortionKind.LOWER_BRIGHTNESS))
    trips = [make_triplet(img, ordering, triplet_rng(seed, i, 0))
             for i, img in enumerate(images)]
    return trips, triplet_coeffs(net, MEAN, trips)


def test_coeff_batch_distances_match_metric(tmp_path):
    net = toy_network(tmp_path, seed=23, bias_scale=0.8)
    trips, batch = make_batch(net)
    rng = np.random.default_rng(8)
    scalars = [rng.random(16), rng.random(32)]
    w = ScalarWeights(tuple(scalars), tap_indices=(1, 4))
    metric = Metric(net, MEAN, weights=w)
    d0, d1 = batch.distances(scalars)
    for i, t in enumerate(trips):
        assert d0[i] == pytest.approx(metric.distance(t.ref, t.x0), rel=1e-9)
        assert d1[i] == pytest.approx(metric.distance(t.ref, t.x1), rel=1e-9)
    assert len(batch) == len(trips)
    assert len(batch.manifest_lines) == len(trips)


# ---------------------------------------------------------------------------
# Gradient audit of the full loss

@pytest.mark.parametrize("sync_active", [False, True])
def test_loss_gradients_match_finite_differences(tmp_path, sync_active):
    net = toy_network(tmp_path, seed=23, bias_scale=0.8)
    _, batch = make_batch(net, n=5, seed=3)
    judge = JudgeNet.init(np.random.default_rng(9))
    state = TrainerState(net.spec.tap_channels(), judge)
    rng = np.random.default_rng(10)
    for w in state.scalars:
        w += rng.uniform(-0.3, 0.3, size=w.shape)

    stats, grads = loss_and_grads(state, batch, sync_active)

    def loss_now():
        return loss_and_grads(state, batch, sync_active)[0]["loss"]

    h = 1e-6
    for name, param in state.params().items():
        flat = param.reshape(-1)
        idx = rng.choice(flat.size, size=min(8, flat.size), replace=False)
        for i in idx:
            keep = flat[i]
            flat[i] = keep + h
            up = loss_now()
            flat[i] = keep - h
            down = loss_now()
            flat[i] = keep
            fd = (up - down) / (2 * h)
            got = grads[name].reshape(-1)[i]
            assert got == pytest.approx(fd, rel=1e-3, abs=1e-8), name


# ---------------------------------------------------------------------------
# train_step behavior

def test_train_step_zero_lr_is_noop(tmp_path):
    net = toy_network(tmp_path, seed=23, bias_scale=0.8)
    _, batch = make_batch(net, n=4, seed=5)
    state = TrainerState(net.spec.tap_channels(),
                         JudgeNet.init(np.random.default_rng(11)))
    before = {k: v.copy() for k, v in state.params().items()}
    train_step(state, batch, lr=0.1, sync_active=True)  # warm the moments
    mid = {k: v.copy() for k, v in state.params().items()}
    assert any(not np.array_equal(before[k], mid[k]) for k in before)
    t_mid = state.adam.t
    m_mid = {k: v.copy() for k, v in state.adam.m.items()}
    train_step(state, batch, lr=0.0, sync_active=True)
    for k, v in state.params().items():
        np.testing.assert_array_equal(v, mid[k])
    assert state.adam.t == t_mid
    for k in m_mid:
        np.testing.assert_array_equal(state.adam.m[k], m_mid[k])


def test_train_step_clamps_scalars_nonnegative(tmp_path):
    net = toy_network(tmp_path, seed=23, bias_scale=0.8)
    _, batch = make_batch(net, n=4, seed=6)
    state = TrainerState(net.spec.tap_channels(),
                         JudgeNet.init(np.random.default_rng(12)))
    for _ in range(5):
        train_step(state, batch, lr=5.0, sync_active=True)
    lows = [float(w.min()) for w in state.scalars]
    assert min(lows) >= 0.0
    # an lr this large overshoots; the clamp must actually have engaged
    assert min(lows) == 0.0


def test_train_step_reports_divergence_context():
    batch = CoeffBatch(coeffs0=(np.array([[np.nan, 1.0]]),),
                       coeffs1=(np.array([[1.0, 1.0]]),),
                       judgements=np.array([1.0]),
                       manifest_lines=("{\"image\": \"bad\"}",))
    state = TrainerState([2], JudgeNet.init(np.random.default_rng(13)))
    with pytest.raises(TrainingDivergedError) as err:
        train_step(state, batch, lr=0.1, sync_active=False,
                   epoch=5, batch_index=2)
    assert err.value.epoch == 5
    assert err.value.batch == 2
    assert "bad" in err.value.triplet_line


# ---------------------------------------------------------------------------
# Full training runs

ORDERING = DistortionOrdering((DistortionKind.SHIFT_HUE,
                               DistortionKind.GAUSSIAN_BLUR,
                               DistortionKind.LOWER_BRIGHTNESS))


def small_run(tmp_path, seed=101, n=40, epochs=4):
    net = toy_network(tmp_path, seed=23, bias_scale=0.8)
    images = ListDataset(synth_images(42, n))
    cfg = TrainConfig(base_lr=0.1, batch_size=10, seed=seed, epochs=epochs)
    return train_adaption(net, MEAN, images, ORDERING, cfg)


def test_train_adaption_structure_and_invariants(tmp_path):
    weights, judge, history = small_run(tmp_path)
    assert isinstance(history, AdaptionHistory)
    assert [r.epoch for r in history.records] == [1, 2, 3, 4]
    cfg = TrainConfig(base_lr=0.1, batch_size=10, seed=101, epochs=4)
    for r in history.records:
        assert r.lr == cfg.lr_at(r.epoch)
        assert np.isfinite(r.train_loss) and np.isfinite(r.val_loss)
        assert 0.0 <= r.val_2afc <= 1.0
    assert weights.min_entry() >= 0.0
    assert weights.tap_indices == (1, 4)
    assert weights.network == "toynet"
    assert weights.method == "mean"
    # sync starts active and can only be disabled by an epoch-end validation
    assert history.records[0].sync_active
    if history.sync_off_epoch > 0:
        off = history.sync_off_epoch
        flipped = [r for r in history.records if r.epoch > off]
        assert all(not r.sync_active for r in flipped)
        assert history.records[off - 1].val_2afc > 0.5


def test_train_adaption_is_bit_deterministic(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    w_a, j_a, h_a = small_run(tmp_path / "a", seed=7, n=20, epochs=2)
    w_b, j_b, h_b = small_run(tmp_path / "b", seed=7, n=20, epochs=2)
    assert h_a.to_dict() == h_b.to_dict()
    for va, vb in zip(w_a.values, w_b.values):
        np.testing.assert_array_equal(va, vb)
    for name in JudgeNet.PARAM_NAMES:
        np.testing.assert_array_equal(getattr(j_a, name), getattr(j_b, name))


def test_train_adaption_seed_changes_results(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    _, _, h_a = small_run(tmp_path / "a", seed=7, n=20, epochs=2)
    _, _, h_b = small_run(tmp_path / "b", seed=8, n=20, epochs=2)
    assert h_a.to_dict() != h_b.to_dict()


def test_train_adaption_leaves_network_frozen(tmp_path):
    net = toy_network(tmp_path, seed=23, bias_scale=0.8)
    checksum = net.checksum()
    images = ListDataset(synth_images(42, 20))
    cfg = TrainConfig(base_lr=0.1, batch_size=10, seed=3, epochs=2)
    train_adaption(net, MEAN, images, ORDERING, cfg)
    assert net.checksum() == checksum


def test_train_adaption_improves_val_2afc(tmp_path):
    weights, _, history = small_run(tmp_path, seed=101, n=60, epochs=6)
    final = history.records[-1].val_2afc
    assert final >= history.baseline_val_2afc
    assert final > 0.5


def test_train_adaption_rejects_empty_inputs(tmp_path):
    net = toy_network(tmp_path, seed=23, bias_scale=0.8)
    with pytest.raises(ConfigError, match="empty image set"):
        train_adaption(net, MEAN, [], ORDERING, TrainConfig())
