import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_difference, rel_error
from vreid.embedhead import (BN_EPS, PARAM_NAMES, THETA_NAMES, HeadParameters, Prediction, SGDConfig,
                             StepSchedule, backward, checksum, cross_entropy, embed, forward, init_head,
                             load_checkpoint, lr_at_epoch, save_checkpoint, sgd_step, softmax, swap_classifier)
from vreid.errors import ConfigError, DataError, NumericError


def head_and_batch(seed, n=8, d_in=16, classes=7, e=12):
    rng = np.random.default_rng(seed)
    p = init_head(d_in, classes, seed, embed_dim=e)
    # perturb BN affine so the gradient check exercises gamma/beta
    p.bn_gamma += rng.normal(0, 0.3, e)
    p.bn_beta += rng.normal(0, 0.3, e)
    return p, rng.normal(size=(n, d_in)), rng.integers(0, classes, n)


def loss_fn(p, x, y):
    return lambda: cross_entropy(forward(p, x, "train", update_stats=False)[1], y)


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(seed):
    p, x, y = head_and_batch(seed)
    _, _, cache = forward(p, x, "train", update_stats=False)
    g = backward(p, cache, x, y)
    for name in PARAM_NAMES:
        num = central_difference(loss_fn(p, x, y), getattr(p, name), h=1e-4)
        if name == "fc1_bias":
            # batch norm subtracts the batch mean, so this gradient vanishes
            assert np.abs(g[name]).max() < 1e-12 and np.abs(num).max() < 1e-8
        else:
            assert rel_error(g[name], num) < 1e-4, name


def test_softmax_stable_and_normalised():
    z = np.array([[1000.0, 1000.0, -1000.0]])
    s = softmax(z)
    assert np.allclose(s, [[0.5, 0.5, 0.0]])


def test_cross_entropy_uniform_logits():
    pred = Prediction(np.zeros((4, 5)), softmax(np.zeros((4, 5))))
    assert cross_entropy(pred, [0, 1, 2, 3]) == pytest.approx(np.log(5))


def test_cross_entropy_large_logits_finite():
    z = np.array([[1e4, 0.0], [0.0, 1e4]])
    assert cross_entropy(Prediction(z, softmax(z)), [1, 0]) == pytest.approx(1e4)


def test_cross_entropy_rejects_bad_labels():
    pred = Prediction(np.zeros((2, 3)), softmax(np.zeros((2, 3))))
    with pytest.raises(DataError):
        cross_entropy(pred, [0, 3])


def test_train_mode_batch_statistics():
    p, x, _ = head_and_batch(0)
    f, _, cache = forward(p, x, "train", update_stats=False)
    h = x @ p.fc1_weight + p.fc1_bias
    xhat = (h - h.mean(0)) / np.sqrt(h.var(0) + BN_EPS)
    assert np.allclose(f, p.bn_gamma * xhat + p.bn_beta)
    assert np.allclose(cache.xhat.mean(0), 0, atol=1e-12)


def test_running_stats_update_uses_unbiased_variance():
    p, x, _ = head_and_batch(1)
    h = x @ p.fc1_weight + p.fc1_bias
    forward(p, x, "train")
    assert np.allclose(p.bn_running_mean, 0.1 * h.mean(0))
    assert np.allclose(p.bn_running_var, 0.9 + 0.1 * h.var(0, ddof=1))


def test_eval_mode_does_not_touch_stats():
    p, x, _ = head_and_batch(2)
    before = p.copy()
    forward(p, x, "eval")
    assert checksum(p) == checksum(before)


def test_embed_equals_eval_forward():
    p, x, _ = head_and_batch(3)
    assert np.array_equal(embed(p, x, batch_size=3), forward(p, x, "eval")[0])


def test_backward_rejects_stale_cache():
    p, x, y = head_and_batch(4)
    _, _, cache = forward(p, x, "train")
    g = backward(p, cache, x, y)
    sgd_step(p, g, SGDConfig(), {})
    with pytest.raises(DataError):
        backward(p, cache, x, y)
    _, _, cache = forward(p, x, "train")
    with pytest.raises(DataError):
        backward(p, cache, x + 1, y)
    with pytest.raises(DataError):
        backward(p, None, x, y)


def test_forward_rejects_nan_and_shape():
    p, x, _ = head_and_batch(5)
    x[0, 0] = np.nan
    with pytest.raises(NumericError):
        forward(p, x)
    with pytest.raises(DataError):
        forward(p, np.ones((2, 3)))


def test_sgd_step_update_rule():
    p, x, y = head_and_batch(6)
    cfg = SGDConfig(lr=0.1, momentum=0.9, weight_decay=0.01)
    grads = {n: np.full_like(getattr(p, n), 0.5) for n in PARAM_NAMES}
    ref = p.copy()
    buffers = {}
    sgd_step(p, grads, cfg, buffers)
    sgd_step(p, grads, cfg, buffers)
    for n in PARAM_NAMES:
        w, v = getattr(ref, n).copy(), np.zeros_like(getattr(ref, n))
        wd = 0.0 if n in ("bn_gamma", "bn_beta") else 0.01
        for _ in range(2):
            v = 0.9 * v + 0.5 + wd * w
            w = w - 0.1 * v
        assert np.allclose(getattr(p, n), w), n
    assert p.step == 2
    # running statistics are not optimizer state
    assert np.array_equal(p.bn_running_var, ref.bn_running_var)


def test_sgd_zero_lr_is_noop_and_negative_rejected():
    p, x, y = head_and_batch(7)
    ref = checksum(p)
    grads = {n: np.ones_like(getattr(p, n)) for n in PARAM_NAMES}
    sgd_step(p, grads, SGDConfig(lr=0.0), {})
    assert checksum(p) == ref
    with pytest.raises(ConfigError):
        sgd_step(p, grads, SGDConfig(lr=-1.0), {})


def test_step_schedule():
    s = StepSchedule(0.02, (40,), 0.1)
    assert lr_at_epoch(s, 0) == 0.02
    assert lr_at_epoch(s, 39) == 0.02
    assert lr_at_epoch(s, 40) == pytest.approx(0.002)
    s2 = StepSchedule(0.02, (8,), 0.1)
    assert lr_at_epoch(s2, 11) == pytest.approx(0.002)


def test_init_bounds_and_determinism():
    p = init_head(16, 5, seed=3, embed_dim=8)
    assert np.all(np.abs(p.fc1_weight) <= 1 / np.sqrt(16))
    assert np.all(np.abs(p.cls_weight) <= 1 / np.sqrt(8))
    assert np.array_equal(p.bn_gamma, np.ones(8)) and np.array_equal(p.bn_running_var, np.ones(8))
    assert checksum(p) == checksum(init_head(16, 5, seed=3, embed_dim=8))
    assert checksum(p) != checksum(init_head(16, 5, seed=4, embed_dim=8))


def test_swap_classifier_keeps_theta():
    p, x, y = head_and_batch(8)
    buffers = {"cls_weight": 1, "cls_bias": 2, "fc1_weight": 3}
    q = swap_classifier(p, 4, seed=1, buffers=buffers)
    assert q.num_classes == 4
    assert checksum(q, THETA_NAMES) == checksum(p, THETA_NAMES)
    assert p.num_classes == 7
    assert buffers == {"fc1_weight": 3}
    with pytest.raises(ConfigError):
        swap_classifier(p, 1, seed=0)


def test_checkpoint_round_trip_and_layout(tmp_path):
    p, _, _ = head_and_batch(9)
    path = tmp_path / "h.bin"
    save_checkpoint(p, path)
    raw = path.read_bytes()
    assert raw[:4] == b"RFHD"
    assert np.frombuffer(raw[4:20], "<u4").tolist() == [1, 16, 7, 12]
    assert np.array_equal(np.frombuffer(raw, "<f8", count=16 * 12, offset=20), p.fc1_weight.ravel())
    q = load_checkpoint(path)
    assert checksum(q) == checksum(p)
    save_checkpoint(q, tmp_path / "h2.bin")
    assert (tmp_path / "h2.bin").read_bytes() == raw


def test_checkpoint_rejects_corruption(tmp_path):
    p, _, _ = head_and_batch(10)
    path = tmp_path / "h.bin"
    save_checkpoint(p, path)
    raw = path.read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.bin").write_bytes(raw[:-8])
    (tmp_path / "ver.bin").write_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    for name in ("bad.bin", "short.bin", "ver.bin"):
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / name)


def test_validate_rejects_non_finite():
    p, _, _ = head_and_batch(11)
    p.cls_bias[0] = np.inf
    with pytest.raises(NumericError):
        p.validate()


@given(arrays(np.float64, (5, 4), elements=st.floats(-50, 50)))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_sum_to_one(z):
    s = softmax(z)
    assert np.allclose(s.sum(axis=1), 1.0)
    assert np.all(s >= 0)
