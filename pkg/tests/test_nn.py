import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import max_rel_err, numeric_grad
from dinospeech import nn
from dinospeech.dino import log_softmax_backward
from dinospeech.errors import ConfigError, DataError, FormatError, NumericError
from dinospeech.nn import (
    ConvSpec,
    Encoder,
    EncoderConfig,
    HeadConfig,
    OptimizerState,
    ProjectionHead,
    conv1d,
    conv1d_backward,
    grad_check,
    l2_normalize,
    l2_normalize_backward,
    sgd_step,
    stats_pool,
    stats_pool_backward,
    weight_norm_linear,
    weight_norm_linear_backward,
)

TOL = 1e-4


# --- per-op finite-difference checks (shapes <= 16) ---------------------------


@pytest.mark.parametrize("name", ["relu", "gelu"])
def test_activation_gradient(name, rng):
    x = rng.normal(size=(6, 5))
    x[np.abs(x) < 1e-2] = 0.5  # keep away from the relu kink
    a = rng.normal(size=x.shape)
    analytic = nn.activation_backward(name, x, a)
    numeric = numeric_grad(lambda z: float((a * nn.activation(name, z)).sum()), x)
    assert max_rel_err(analytic, numeric) <= TOL


@pytest.mark.parametrize("kernel,dilation", [(1, 1), (3, 1), (3, 2), (5, 3)])
def test_conv1d_gradients(kernel, dilation, rng):
    x = rng.normal(size=(2, 9, 4))
    w = rng.normal(size=(kernel, 4, 3))
    b = rng.normal(size=3)
    a = rng.normal(size=(2, 9, 3))

    def loss(xx, ww, bb):
        return float((a * conv1d(xx, ww, bb, dilation)[0]).sum())

    _, cols = conv1d(x, w, b, dilation)
    dx, dw, db = conv1d_backward(a, cols, w, dilation)
    assert max_rel_err(dx, numeric_grad(lambda z: loss(z, w, b), x)) <= TOL
    assert max_rel_err(dw, numeric_grad(lambda z: loss(x, z, b), w)) <= TOL
    assert max_rel_err(db, numeric_grad(lambda z: loss(x, w, z), b)) <= TOL


def test_conv1d_matches_direct_sum(rng):
    x = rng.normal(size=(1, 7, 2))
    w = rng.normal(size=(3, 2, 4))
    b = rng.normal(size=4)
    y, _ = conv1d(x, w, b, dilation=2)
    pad = 2
    xp = np.concatenate([np.zeros((pad, 2)), x[0], np.zeros((pad, 2))])
    for t in range(7):
        direct = b + sum(xp[t + 2 * j] @ w[j] for j in range(3))
        np.testing.assert_allclose(y[0, t], direct, rtol=1e-12)


def test_stats_pool_gradient(rng):
    x = rng.normal(size=(3, 11, 5))
    a = rng.normal(size=(3, 10))
    out, cache = stats_pool(x)
    analytic = stats_pool_backward(a, cache)
    numeric = numeric_grad(lambda z: float((a * stats_pool(z)[0]).sum()), x)
    assert max_rel_err(analytic, numeric) <= TOL


def test_l2_normalize_gradient(rng):
    v = rng.normal(size=(4, 7))
    a = rng.normal(size=(4, 7))
    out, norm = l2_normalize(v)
    analytic = l2_normalize_backward(a, out, norm)
    numeric = numeric_grad(lambda z: float((a * l2_normalize(z)[0]).sum()), v)
    assert max_rel_err(analytic, numeric) <= TOL


def test_weight_norm_linear_gradients(rng):
    W = rng.normal(size=(6, 5))
    v = l2_normalize(rng.normal(size=(3, 5)))[0]
    a = rng.normal(size=(3, 6))
    _, cache = weight_norm_linear(W, v)
    dv, dW = weight_norm_linear_backward(a, v, cache)
    assert max_rel_err(dv, numeric_grad(lambda z: float((a * weight_norm_linear(W, z)[0]).sum()), v)) <= TOL
    assert max_rel_err(dW, numeric_grad(lambda z: float((a * weight_norm_linear(z, v)[0]).sum()), W)) <= TOL


def test_log_softmax_gradient(rng):
    z = rng.normal(size=(4, 9))
    a = rng.normal(size=(4, 9))
    logp = nn.log_softmax(z)
    numeric = numeric_grad(lambda q: float((a * nn.log_softmax(q)).sum()), z)
    assert max_rel_err(log_softmax_backward(a, logp), numeric) <= TOL


def _small_encoder(activation="relu"):
    return Encoder(EncoderConfig(feature_dim=4, conv=(ConvSpec(5, 3, 1), ConvSpec(6, 3, 2)),
                                 activation=activation, embed_dim=7))


@pytest.mark.parametrize("activation", ["relu", "gelu"])
def test_encoder_gradient(activation, rng):
    enc = _small_encoder(activation)
    params = enc.init(rng, np.float64)
    for k in params:
        if k.endswith(".b"):
            params[k] = rng.normal(0, 0.1, params[k].shape)
    x = rng.normal(size=(2, 12, 4))
    a = rng.normal(size=(2, 7))

    def fn(p):
        emb, cache = enc.forward(p, x)
        return float((a * emb).sum()), enc.backward(p, cache, a)

    assert grad_check(fn, params, eps=1e-6, max_coords=None) <= TOL


def test_encoder_post_pool_gradient_only(rng):
    enc = _small_encoder()
    params = enc.init(rng, np.float64)
    x = rng.normal(size=(1, 10, 4))
    emb, cache = enc.forward(params, x)
    g = enc.backward(params, cache, np.ones_like(emb), post_pool_only=True)
    assert set(g) == set(Encoder.POST_POOL)


def test_head_gradient(rng):
    head = ProjectionHead(HeadConfig(in_dim=6, hidden=8, bottleneck=4, n_outputs=5))
    params = head.init(rng, np.float64)
    e = rng.normal(size=(3, 6))
    a = rng.normal(size=(3, 5))

    def fn(p):
        logits, cache = head.forward(p, e)
        return float((a * logits).sum()), head.backward(p, cache, a)[1]

    assert grad_check(fn, params, eps=1e-6, max_coords=None) <= TOL
    logits, cache = head.forward(params, e)
    ge, _ = head.backward(params, cache, a)
    numeric = numeric_grad(lambda z: float((a * head.forward(params, z)[0]).sum()), e)
    assert max_rel_err(ge, numeric) <= TOL


# --- stats pooling examples ---------------------------------------------------


def test_stats_pool_constant():
    out, _ = stats_pool(np.full((5, 2), 3.0))
    np.testing.assert_allclose(out, [3, 3, np.sqrt(1e-5), np.sqrt(1e-5)])


def test_stats_pool_two_values():
    out, _ = stats_pool(np.array([[0.0], [2.0]]))
    np.testing.assert_allclose(out, [1.0, np.sqrt(1 + 1e-5)])


def test_stats_pool_two_pass_oracle(rng):
    x = rng.normal(size=(50, 8))
    mean = [sum(x[t, d] for t in range(50)) / 50 for d in range(8)]
    var = [sum((x[t, d] - mean[d]) ** 2 for t in range(50)) / 50 for d in range(8)]
    out, _ = stats_pool(x)
    np.testing.assert_allclose(out, np.concatenate([mean, np.sqrt(np.array(var) + 1e-5)]), atol=1e-6)


# --- encoder examples ----------------------------------------------------------


def test_identity_encoder_gives_pooled_stats(rng):
    enc = Encoder(EncoderConfig(feature_dim=3, conv=(ConvSpec(3, 1, 1),), embed_dim=4))
    sel = np.zeros((6, 4))
    sel[[0, 2, 3, 5], [0, 1, 2, 3]] = 1.0
    params = {"conv0.w": np.eye(3)[None], "conv0.b": np.zeros(3), "embed.w": sel, "embed.b": np.zeros(4)}
    x = rng.uniform(0.1, 2.0, size=(20, 3))  # positive so relu is the identity
    pooled = np.concatenate([x.mean(0), np.sqrt(x.var(0) + 1e-5)])
    np.testing.assert_allclose(enc.embed(params, x), pooled @ sel, rtol=1e-12)


def test_zero_params_give_zero_embedding(rng):
    enc = _small_encoder()
    params = {k: np.zeros_like(v) for k, v in enc.init(rng).items()}
    assert np.all(enc.embed(params, rng.normal(size=(9, 4))) == 0)


def test_embedding_dim_independent_of_length(rng):
    enc = _small_encoder()
    params = enc.init(rng)
    assert enc.embed(params, rng.normal(size=(9, 4))).shape == (7,)
    assert enc.embed(params, rng.normal(size=(31, 4))).shape == (7,)


def test_pooling_invariant_to_exact_tiling(rng):
    x = rng.normal(size=(13, 5))
    a, _ = stats_pool(x)
    b, _ = stats_pool(np.tile(x, (4, 1)))
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_encoder_rejects_wrong_features(rng):
    enc = _small_encoder()
    with pytest.raises(DataError):
        enc.embed(enc.init(rng), np.zeros((5, 3)))


def test_even_kernel_rejected():
    with pytest.raises(ConfigError):
        EncoderConfig(conv=(ConvSpec(4, 2, 1),)).validate()


def test_batch_and_single_forward_agree(rng):
    enc = _small_encoder()
    params = enc.init(rng)
    x = rng.normal(size=(3, 10, 4)).astype(np.float32)
    batched = enc.embed(params, x)
    for i in range(3):
        np.testing.assert_allclose(batched[i], enc.embed(params, x[i]), rtol=1e-5, atol=1e-6)


# --- l2 / weight norm examples ---------------------------------------------------


def test_l2_examples():
    np.testing.assert_allclose(l2_normalize(np.array([3.0, 4.0]))[0], [0.6, 0.8])
    u = np.array([0.6, 0.8])
    np.testing.assert_allclose(l2_normalize(u)[0], u)
    with pytest.raises(NumericError):
        l2_normalize(np.zeros(3))


def test_weight_norm_examples(rng):
    v = np.array([0.6, 0.8])
    W = np.array([[3.0, 4.0], [-4.0, 3.0]])
    logits, _ = weight_norm_linear(W, v)
    np.testing.assert_allclose(logits, [1.0, 0.0], atol=1e-12)
    W2 = rng.normal(size=(5, 2))
    scaled = W2.copy()
    scaled[2] *= 10
    np.testing.assert_allclose(weight_norm_linear(W2, v)[0], weight_norm_linear(scaled, v)[0], rtol=1e-12)
    with pytest.raises(NumericError):
        weight_norm_linear(np.zeros((2, 2)), v)


@given(hnp.arrays(np.float64, (4, 6), elements=st.floats(-1e3, 1e3)),
       hnp.arrays(np.float64, (6,), elements=st.floats(-1e3, 1e3)))
def test_weight_norm_logits_bounded(W, v):
    if np.any(np.linalg.norm(W, axis=1) < 1e-6) or np.linalg.norm(v) < 1e-6:
        return
    logits, _ = weight_norm_linear(W, l2_normalize(v)[0])
    assert np.all(np.abs(logits) <= 1 + 1e-12)


# --- optimiser ------------------------------------------------------------------


def test_sgd_plain_gradient_descent():
    p = {"x": np.array([1.0, -2.0])}
    sgd_step(p, {"x": np.array([0.5, 0.5])}, OptimizerState(lr=0.1, momentum=0.0))
    np.testing.assert_allclose(p["x"], [0.95, -2.05])


def test_sgd_zero_gradient_is_noop():
    p = {"x": np.array([1.0, -2.0])}
    sgd_step(p, {"x": np.zeros(2)}, OptimizerState(lr=0.1, momentum=0.9))
    np.testing.assert_array_equal(p["x"], [1.0, -2.0])


def test_sgd_two_step_hand_recursion():
    # f(x) = x^2, buf = 0.9 buf + 2x, x -= 0.1 buf, starting from x = 1:
    #   step 1: buf = 2,               x = 0.8
    #   step 2: buf = 0.9*2 + 1.6 = 3.4, x = 0.8 - 0.34 = 0.46
    p = {"x": np.array([1.0])}
    st_ = OptimizerState(lr=0.1, momentum=0.9)
    for _ in range(2):
        sgd_step(p, {"x": 2 * p["x"]}, st_)
    assert p["x"][0] == pytest.approx(0.46, abs=1e-12)


def test_sgd_weight_decay():
    p = {"x": np.array([2.0])}
    sgd_step(p, {"x": np.array([0.0])}, OptimizerState(lr=0.5, momentum=0.0, weight_decay=0.1))
    assert p["x"][0] == pytest.approx(2.0 - 0.5 * 0.2)


def test_sgd_shape_mismatch():
    with pytest.raises(DataError):
        sgd_step({"x": np.zeros(2)}, {"x": np.zeros(3)}, OptimizerState())


def test_optimizer_state_validation():
    with pytest.raises(ConfigError):
        OptimizerState(momentum=1.0)
    with pytest.raises(ConfigError):
        OptimizerState(weight_decay=-1.0)


def test_warmup_schedule():
    lrs = [nn.warmup_lr(s, 100, 1.0) for s in range(100)]
    assert lrs[0] == pytest.approx(0.1) and lrs[9] == 1.0 and lrs[50] == 1.0
    assert all(a <= b for a, b in zip(lrs, lrs[1:]))
    assert nn.warmup_lr(0, 100, 1.0, warmup_frac=0.0) == 1.0


# --- grad_check harness ------------------------------------------------------------


def test_grad_check_quadratic(rng):
    params = {"x": rng.normal(size=30)}
    err = grad_check(lambda p: (float(p["x"] @ p["x"]), {"x": 2 * p["x"]}), params)
    assert err < 1e-8


def test_grad_check_constant():
    assert grad_check(lambda p: (3.0, {"x": np.zeros(4)}), {"x": np.ones(4)}) == 0.0


def test_grad_check_detects_wrong_gradient(rng):
    params = {"x": rng.normal(size=10)}
    err = grad_check(lambda p: (float(p["x"] @ p["x"]), {"x": 3 * p["x"]}), params)
    assert err > 0.1


def test_grad_check_rejects_nondeterminism():
    r = np.random.default_rng(0)
    with pytest.raises(NumericError):
        grad_check(lambda p: (float(r.normal()), {"x": np.zeros(2)}), {"x": np.ones(2)})


def test_grad_check_samples_at_least_200_coords():
    seen = []

    def fn(p):
        seen.append(1)
        return float((p["a"] ** 2).sum() + (p["b"] ** 2).sum()), {"a": 2 * p["a"], "b": 2 * p["b"]}

    grad_check(fn, {"a": np.ones(500), "b": np.ones(3)}, max_coords=50)
    assert (len(seen) - 2) // 2 == 200


def test_check_finite():
    with pytest.raises(NumericError):
        nn.check_finite("x", np.array([1.0, np.inf]))


# --- checkpoints -------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {"b": rng.normal(size=(2, 3)).astype(np.float32), "a": np.arange(4, dtype=np.float32)}
    path = tmp_path / "m.ckpt"
    nn.save_checkpoint(path, tensors, {"kind": "test", "step": 3})
    raw = path.read_bytes()
    assert raw.startswith(b"DINOCKPT1\n")
    manifest = json.loads(raw.split(b"\n")[1])
    assert [e["name"] for e in manifest["tensors"]] == ["a", "b"]
    assert manifest["tensors"][1] == {"name": "b", "shape": [2, 3], "offset": 16}
    back, meta = nn.load_checkpoint(path)
    assert meta == {"kind": "test", "step": 3}
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])
    nn.save_checkpoint(tmp_path / "m2.ckpt", tensors, {"step": 3, "kind": "test"})
    assert (tmp_path / "m2.ckpt").read_bytes() == raw


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"NOPE\n")
    with pytest.raises(FormatError):
        nn.load_checkpoint(p)
    p.write_bytes(b'DINOCKPT1\n{"tensors":[{"name":"a","shape":[9],"offset":0}],"meta":{}}\n\0\0\0\0')
    with pytest.raises(FormatError):
        nn.load_checkpoint(p)


def test_params_digest_changes_with_values():
    a = {"x": np.zeros(3, np.float32)}
    b = {"x": np.array([0, 0, 1e-7], np.float32)}
    assert nn.params_digest(a) != nn.params_digest(b)
    assert nn.params_digest(a) == nn.params_digest(nn.copy_params(a))
