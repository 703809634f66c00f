import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nnwm import core
from nnwm.core import Conv2D, Dense, Model, OptimizerState, ReLU, AvgPool, SoftmaxOutput, sgd_step
from nnwm.errors import ConfigError, NumericError, UsageError
from nnwm.watermark import Message, attach_regularizer, make_key

from conftest import small_net


def loop_loss(model, x, labels):
    """Scalar re-evaluation of the small_net graph with explicit loops."""
    W1, b1 = model.layer("conv1").params["W"], model.layer("conv1").params["b"]
    W2, b2 = model.layer("conv2").params["W"], model.layer("conv2").params["b"]
    Wf, bf = model.layer("fc").params["W"], model.layer("fc").params["b"]

    def conv(img, W, b):
        H, Wd, D = len(img), len(img[0]), len(img[0][0])
        S, L = W.shape[0], W.shape[3]
        out = [[[0.0] * L for _ in range(Wd)] for _ in range(H)]
        for r in range(H):
            for c in range(Wd):
                for l in range(L):
                    acc = b[l]
                    for i in range(S):
                        for j in range(S):
                            rr, cc = r + i - S // 2, c + j - S // 2
                            if 0 <= rr < H and 0 <= cc < Wd:
                                for k in range(D):
                                    acc += img[rr][cc][k] * W[i, j, k, l]
                    out[r][c][l] = max(acc, 0.0)
        return out

    total = 0.0
    for n in range(len(x)):
        img = x[n].tolist()
        a = conv(conv(img, W1, b1), W2, b2)
        H, Wd, C = len(a) // 2, len(a[0]) // 2, len(a[0][0])
        flat = []
        for r in range(H):
            for c in range(Wd):
                for ch in range(C):
                    flat.append((a[2 * r][2 * c][ch] + a[2 * r + 1][2 * c][ch]
                                 + a[2 * r][2 * c + 1][ch] + a[2 * r + 1][2 * c + 1][ch]) / 4)
        logits = [bf[o] + sum(flat[i] * Wf[i, o] for i in range(len(flat))) for o in range(Wf.shape[1])]
        mx = max(logits)
        lse = mx + math.log(sum(math.exp(v - mx) for v in logits))
        total += lse - logits[labels[n]]
    return total / len(x)


def test_dense_identity_passes_input_through():
    m = Model([Dense("fc", 3, 3), SoftmaxOutput("out")], (3,))
    m.layer("fc").params["W"] = np.eye(3)
    x = np.array([[1.0, -2.0, 0.5]])
    acts, _ = core.forward(m, x, np.array([0]))
    np.testing.assert_array_equal(acts.logits, x)


def test_uniform_logits_loss_is_log_classes():
    m = Model([Dense("fc", 4, 2), SoftmaxOutput("out")], (4,))
    _, loss = core.forward(m, np.ones((3, 4)), np.array([0, 1, 1]))
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    m5 = Model([Dense("fc", 4, 5), SoftmaxOutput("out")], (4,))
    assert core.forward(m5, np.ones((2, 4)), np.array([0, 4]))[1] == pytest.approx(math.log(5), abs=1e-15)


def test_loss_matches_scalar_loop_oracle(net, batch):
    x, y = batch
    _, loss = core.forward(net, x, y)
    assert loss == pytest.approx(loop_loss(net, x, y), rel=1e-12)


def test_zero_input_gives_zero_weight_grad_and_nonzero_bias_grad():
    m = Model([Dense("fc", 4, 3), SoftmaxOutput("out")], (4,))
    m.init(0)
    x, y = np.zeros((2, 4)), np.array([0, 2])
    acts, _ = core.forward(m, x, y)
    gW, gb = core.backward(m, acts, y)
    assert not gW.any()
    assert np.abs(gb).sum() > 0


def test_backward_matches_finite_differences(net, batch):
    rep = core.grad_check(net, *batch)
    assert rep.passed, rep


def test_repeated_batch_gives_same_mean_gradient(net, batch):
    x, y = batch
    g1 = core.backward(net, core.forward(net, x, y)[0], y)
    x2, y2 = np.concatenate([x, x]), np.concatenate([y, y])
    g2 = core.backward(net, core.forward(net, x2, y2)[0], y2)
    for a, b in zip(g1, g2):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_soft_targets_equal_one_hot_for_hard_labels(net, batch):
    x, y = batch
    assert core.forward(net, x, np.eye(3)[y])[1] == core.forward(net, x, y)[1]


def test_stale_activations_rejected(net, batch):
    x, y = batch
    acts, _ = core.forward(net, x, y)
    with pytest.raises(UsageError):
        core.backward(net, acts, (y + 1) % 3)
    net.set_parameters(net.parameters())
    with pytest.raises(UsageError):
        core.backward(net, acts, y)


def test_shape_mismatch_is_config_error(net):
    with pytest.raises(ConfigError):
        core.forward(net, np.zeros((2, 5, 4, 2)), np.array([0, 1]))
    with pytest.raises(ConfigError):
        core.forward(net, np.zeros((2, 4, 4, 2)), np.array([0, 1, 2]))
    with pytest.raises(ConfigError):
        Model([Dense("fc", 7, 2)], (4,))


def test_overflow_names_the_layer(net, batch):
    x, y = batch
    net.layer("conv1").params["W"][:] = 1e308
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NumericError, match="conv1"):
            core.forward(net, x, y)


def test_forward_is_deterministic(batch):
    x, y = batch
    a, b = small_net(3), small_net(3)
    assert core.forward(a, x, y)[1] == core.forward(b, x, y)[1]


# --- optimizer -------------------------------------------------------------

def test_plain_sgd_update_is_exact():
    w, g = [np.array([1.0, -2.0, 3.0])], [np.array([0.5, 0.25, -1.0])]
    (w1,) = sgd_step(w, g, OptimizerState(lr=0.1, momentum=0.0, weight_decay=0.0))
    np.testing.assert_array_equal(w1, w[0] - 0.1 * g[0])
    # dyadic values: the difference itself is exact
    (w2,) = sgd_step(w, g, OptimizerState(lr=0.125, momentum=0.0, weight_decay=0.0))
    np.testing.assert_array_equal(w2 - w[0], -0.125 * g[0])


def test_weight_decay_shrinks_with_zero_gradient():
    w = [np.array([2.0, -4.0])]
    state = OptimizerState(lr=0.1, momentum=0.0, weight_decay=0.5)
    (w1,) = sgd_step(w, [np.zeros(2)], state)
    np.testing.assert_allclose(w1, w[0] - 0.1 * 0.5 * w[0], rtol=0, atol=1e-15)


def test_nesterov_two_steps_on_quadratic():
    # f(w) = a/2 w^2, g = a w; hand recurrence with v0 = 0
    a, lr, mu, w0 = 3.0, 0.1, 0.9, 1.0
    v1 = a * w0
    w1 = w0 - lr * (a * w0 + mu * v1)          # 1 - 0.1*(3 + 2.7) = 0.43
    v2 = mu * v1 + a * w1
    w2 = w1 - lr * (a * w1 + mu * v2)
    assert w1 == pytest.approx(0.43)
    state = OptimizerState(lr=lr, momentum=mu, weight_decay=0.0)
    w = [np.array([w0])]
    w = sgd_step(w, [a * w[0]], state)
    assert w[0][0] == pytest.approx(w1, abs=1e-15)
    w = sgd_step(w, [a * w[0]], state)
    assert w[0][0] == pytest.approx(w2, abs=1e-15)


def test_schedule_and_validation():
    state = OptimizerState(lr=0.1, schedule=core.default_schedule(10))
    assert state.lr_at(5) == 0.1
    assert state.lr_at(6) == pytest.approx(0.02)
    for bad in ({"lr": 0}, {"momentum": 1.0}, {"weight_decay": -1}, {"schedule": [(1, 0.0)]}):
        with pytest.raises(ConfigError):
            OptimizerState(**bad)


def test_nonfinite_gradient_rejected():
    with pytest.raises(NumericError):
        sgd_step([np.zeros(2)], [np.array([np.nan, 0.0])], OptimizerState())


# --- gradient checker ------------------------------------------------------

def test_grad_check_with_zero_lambda_equals_plain(net, batch):
    plain = core.grad_check(net, *batch)
    key = make_key("random", 1, 8, 27)
    attach_regularizer(net, "conv2", key, Message.ones(8), 0.0)
    with_reg = core.grad_check(net, *batch)
    assert with_reg.max_rel_err == plain.max_rel_err


def test_grad_check_with_regularizer(net, batch):
    attach_regularizer(net, "conv2", make_key("random", 1, 8, 27), Message.random(8, 2), 0.01)
    assert core.grad_check(net, *batch).max_rel_err <= 1e-4


def test_grad_check_detects_corrupted_gradient(net, batch):
    x, y = batch
    grads = core.backward(net, core.forward(net, x, y)[0], y)
    grads[0] = grads[0].copy()
    grads[0].flat[5] *= 2
    assert not core.grad_check(net, x, y, analytic=grads).passed


@st.composite
def random_host(draw):
    h = draw(st.sampled_from([2, 4]))
    d = draw(st.integers(1, 3))
    n_conv = draw(st.integers(1, 2))
    layers, depth = [], d
    for i in range(n_conv):
        s = draw(st.sampled_from([1, 3]))
        f = draw(st.integers(1, 3))
        layers += [Conv2D(f"conv{i}", s, depth, f), ReLU(f"relu{i}")]
        depth = f
    pool = draw(st.sampled_from([None, 0, 2]))
    hw = h
    if pool is not None:
        layers.append(AvgPool("pool", pool))
        hw = 1 if pool == 0 else h // 2
    classes = draw(st.integers(2, 4))
    layers += [Dense("fc", hw * hw * depth, classes), SoftmaxOutput("out")]
    seed = draw(st.integers(0, 2**16))
    m = Model(layers, (h, h, d), "conv0", seed)
    m.init(seed)
    # zero biases behind a dead ReLU put pre-activations exactly on the kink
    rng = np.random.default_rng(seed + 1)
    for layer in m.layers:
        if "b" in layer.params:
            layer.params["b"] = 0.1 * rng.standard_normal(layer.params["b"].shape)
    return m, seed, classes


@settings(max_examples=25, deadline=None)
@given(random_host(), st.integers(1, 3))
def test_gradient_property_random_hosts(host, n):
    model, seed, classes = host
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n,) + model.input_shape)
    y = rng.integers(0, classes, size=n)
    conv = model.layer("conv0")
    M = conv.size * conv.size * conv.depth
    T = int(rng.integers(1, 2 * M + 1))
    attach_regularizer(model, "conv0", make_key("random", seed, T, M), Message.random(T, seed), 0.01)
    rep = core.grad_check(model, x, y)
    assert rep.max_rel_err <= 1e-4, rep
