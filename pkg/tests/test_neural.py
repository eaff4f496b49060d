import numpy as np
import pytest

from tsjepa.neural import (SGD, AdamW, BatchNorm, Dense, Dropout, Network, NonFiniteError, StepDecay,
                           ema_update, grad_check_suite, gradient_check, load_network, save_network)


def test_dense_identity():
    net = Network.from_spec([{"kind": "dense", "in": 3, "out": 3}])
    net.layers[0].params["W"][...] = np.eye(3)
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(net(x), x)


def test_relu_negative_is_zero():
    net = Network.from_spec([{"kind": "relu"}])
    assert np.all(net(-np.ones((2, 4))) == 0)


def test_dropout_rate_zero_train_equals_eval(rng):
    net = Network.from_spec([{"kind": "dense", "in": 4, "out": 3}, {"kind": "dropout", "rate": 0.0}])
    x = rng.normal(size=(5, 4))
    assert np.array_equal(net.forward(x, True, rng)[0], net(x))


def test_dropout_train_only(rng):
    d = Dropout(0.5)
    x = np.ones((1000, 10))
    y, _ = d.forward(x, True, rng)
    assert 0.4 < np.mean(y == 0) < 0.6
    assert np.array_equal(d.forward(x, False)[0], x)
    with pytest.raises(ValueError):
        Dropout(1.0)


def test_dense_square_loss_gradient(rng):
    layer = Dense(3, 2, rng)
    x, t = rng.normal(size=(1, 3)), rng.normal(size=(1, 2))
    y, cache = layer.forward(x)
    _, g = layer.backward(2 * (y - t), cache)
    assert np.allclose(g["W"], 2 * (y - t).T @ x)


def test_zero_upstream_gives_zero_grads(rng):
    net = Network.from_spec([{"kind": "conv2d", "in": 1, "out": 2, "kernel": 3, "padding": 1},
                             {"kind": "batchnorm", "features": 2}, {"kind": "relu"}, {"kind": "flatten"},
                             {"kind": "dense", "in": 32, "out": 1}], rng)
    y, cache = net.forward(rng.normal(size=(3, 1, 4, 4)), True, rng)
    grads, dx = net.backward(np.zeros_like(y), cache)
    assert all(np.all(g == 0) for g in net.flat_grads(grads))
    assert np.all(dx == 0)


def test_backward_needs_cache():
    net = Network.from_spec([{"kind": "relu"}])
    with pytest.raises(ValueError):
        net.backward(np.ones((1, 1)), None)


def test_shape_mismatch_raises():
    net = Network.from_spec([{"kind": "dense", "in": 3, "out": 2}])
    with pytest.raises(ValueError):
        net(np.ones((2, 4)))


def test_non_finite_output_raises():
    net = Network.from_spec([{"kind": "dense", "in": 1, "out": 1}])
    with pytest.raises(NonFiniteError):
        net(np.array([[np.inf]]))


def test_gradient_check_suite():
    rows = grad_check_suite(np.random.default_rng(7), 10)
    kinds = {r[0].split(":")[0].rsplit("-", 1)[0] for r in rows}
    assert {"dense", "conv2d", "batchnorm", "relu", "dropout", "flatten"} <= {k.split("-")[0] for k in kinds}
    assert max(err for *_, err in rows) <= 1e-4


def test_gradient_check_detects_wrong_gradient(rng):
    net = Network.from_spec([{"kind": "dense", "in": 3, "out": 2}], rng)
    orig = Dense.backward

    def broken(self, dy, x):
        dx, g = orig(self, dy, x)
        g["W"] = g["W"] * 1.01
        return dx, g
    Dense.backward = broken
    try:
        errs = gradient_check(net, rng.normal(size=(4, 3)))
    finally:
        Dense.backward = orig
    assert errs["0.W"] > 1e-4


def test_batchnorm_train_standardizes(rng):
    bn = BatchNorm(3, affine=False)
    x = rng.normal(3.0, 5.0, size=(256, 3))
    y, _ = bn.forward(x, train=True)
    assert np.allclose(y.mean(axis=0), 0, atol=1e-6)
    assert np.allclose(y.var(axis=0), 1, atol=1e-6 + 1e-5 * 3)  # eps keeps var just under 1


def test_batchnorm_running_stats(rng):
    bn = BatchNorm(2, momentum=0.1)
    x = rng.normal(size=(10, 2))
    bn.forward(x, train=True)
    assert np.allclose(bn.buffers["running_mean"], 0.1 * x.mean(axis=0))


def test_sgd_zero_grad_unchanged():
    w = np.array([1.0, -2.0])
    SGD([w], 0.1).step([np.zeros(2)])
    assert np.array_equal(w, [1.0, -2.0])


def test_sgd_quadratic_step():
    w = np.array([1.0])
    SGD([w], 0.1).step([2 * w])
    assert w[0] == pytest.approx(0.8)


def test_sgd_decoupled_weight_decay():
    w = np.array([1.0])
    SGD([w], 0.1, weight_decay=4e-4).step([np.zeros(1)])
    assert w[0] == pytest.approx(1 - 0.1 * 4e-4)


@pytest.mark.parametrize("scale", [1e-6, 1.0, 1e6])
def test_adamw_first_step_is_lr(scale):
    w = np.array([0.5, -0.5])
    AdamW([w], 1e-3, weight_decay=0.0).step([np.array([scale, -scale])])
    # bias-corrected first step: lr * |g| / (|g| + eps)
    assert np.allclose(np.abs(w - [0.5, -0.5]), 1e-3 * scale / (scale + 1e-8), rtol=1e-9)
    assert np.allclose(np.abs(w - [0.5, -0.5]), 1e-3, rtol=0.02)


def test_adamw_zero_grad_zero_decay_unchanged():
    w = np.array([3.0])
    AdamW([w], 1e-2, weight_decay=0.0).step([np.zeros(1)])
    assert w[0] == 3.0


def test_lr_schedule():
    opt = SGD([np.zeros(1)], 1.0, schedule=StepDecay(20, 0.99))
    lrs = []
    for _ in range(45):
        lrs.append(opt.lr)
        opt.end_epoch()
    assert lrs[19] == 1.0 and lrs[20] == pytest.approx(0.99) and lrs[40] == pytest.approx(0.99**2)
    with pytest.raises(ValueError):
        SGD([np.zeros(1)], 0.0)


def _pair(value_t, value_o):
    t = Network.from_spec([{"kind": "dense", "in": 2, "out": 2}])
    o = Network.from_spec([{"kind": "dense", "in": 2, "out": 2}])
    for k in t.layers[0].params:
        t.layers[0].params[k][...] = value_t
        o.layers[0].params[k][...] = value_o
    return t, o


@pytest.mark.parametrize("eta,expect", [(0.0, 0.0), (1.0, 1.0), (0.99, 0.99)])
def test_ema_examples(eta, expect):
    t, o = _pair(1.0, 0.0)
    ema_update(t, o, eta)
    assert np.allclose(t.layers[0].params["W"], expect)


def test_ema_geometric_convergence():
    t, o = _pair(1.0, 0.25)
    for k in range(1, 30):
        ema_update(t, o, 0.9)
        assert np.allclose(np.abs(t.layers[0].params["W"] - 0.25), 0.75 * 0.9**k, rtol=1e-12)


def test_training_is_deterministic():
    def run():
        rng = np.random.default_rng(5)
        net = Network.from_spec([{"kind": "dense", "in": 3, "out": 4}, {"kind": "relu"},
                                 {"kind": "dropout", "rate": 0.2}, {"kind": "dense", "in": 4, "out": 1}], rng)
        opt = AdamW(net.parameters(), 1e-2)
        x, t = rng.normal(size=(16, 3)), rng.normal(size=(16, 1))
        for _ in range(20):
            y, c = net.forward(x, True, rng)
            g, _ = net.backward(2 * (y - t) / len(t), c)
            opt.step(net.flat_grads(g))
        return np.concatenate([p.ravel() for p in net.parameters()])
    assert np.array_equal(run(), run())


def test_checkpoint_round_trip(tmp_path, rng):
    net = Network.from_spec([{"kind": "conv2d", "in": 2, "out": 3, "kernel": 3, "stride": 2, "padding": 1},
                             {"kind": "batchnorm", "features": 3}, {"kind": "relu"}, {"kind": "flatten"},
                             {"kind": "dense", "in": 12, "out": 2}], rng)
    x = rng.normal(size=(4, 2, 4, 4))
    net.forward(x, True, rng)
    save_network(tmp_path / "n.ckpt", net, {"step": 3})
    back, meta = load_network(tmp_path / "n.ckpt")
    assert meta == {"step": 3}
    assert np.array_equal(back(x), net(x))
    raw = (tmp_path / "n.ckpt").read_bytes()
    assert raw[:8] == b"TSJCKPT1"
    with pytest.raises(ValueError):
        (tmp_path / "bad").write_bytes(b"nope" * 10)
        load_network(tmp_path / "bad")
