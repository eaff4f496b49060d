import numpy as np
import pytest
from dataclasses import replace

from tsjepa.jepa import (JepaConfig, JepaModel, _rollout_backward, _rollout_train, collapse_diagnostic,
                         cosine, encode_dataset, encoder_arch, export_embeddings, loss_cosine, loss_cosine_grad,
                         make_optimizer, predictor_arch, rollout_error, to_channels, train_jepa, train_step)
from tsjepa.neural import Network
from tsjepa.plant import AugmentConfig, Dataset, Trajectory

TINY = JepaConfig(embed_dim=3, kappa=2, horizon=3, frame_hw=(4, 8), conv_channels=(2,), predictor_hidden=5,
                  batch_size=4, epochs=2)


def test_cosine_loss_examples(rng):
    z = rng.normal(size=(5, 4))
    assert loss_cosine(z, z) == pytest.approx(-1.0)
    assert loss_cosine(-z, z) == pytest.approx(1.0)
    assert loss_cosine(np.array([[1.0, 0]]), np.array([[0, 2.0]])) == pytest.approx(0.0)


def test_cosine_loss_scale_invariant(rng):
    a, b = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    assert loss_cosine(2.5 * a, 0.1 * b) == pytest.approx(loss_cosine(a, b), abs=1e-14)


def test_cosine_loss_gradient(rng):
    a, b = rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 2, 4))
    _, g = loss_cosine_grad(a, b)
    num = np.zeros_like(a)
    h = 1e-6
    for i in np.ndindex(a.shape):
        ap, am = a.copy(), a.copy()
        ap[i] += h
        am[i] -= h
        num[i] = (loss_cosine(ap, b) - loss_cosine(am, b)) / (2 * h)
    assert np.allclose(g, num, atol=1e-8)


def test_shapes_and_parameter_count(rng):
    cfg = JepaConfig()
    m = JepaModel.init(cfg, rng)
    stacks = rng.normal(size=(3, 2, 16, 32, 3))
    assert m.encode(stacks).shape == (3, 32)
    enc = (6 * 9 + 1) * 8 + 2 * 8 + (8 * 9 + 1) * 16 + 2 * 16 + (16 * 4 * 8 + 1) * 32
    pred = (33 + 1) * 128 + (128 + 1) * 32
    assert m.encoder.num_parameters() == enc
    assert m.predictor.num_parameters() == pred
    assert m.num_parameters() == enc + pred
    assert m.rollout(m.encode(stacks), np.zeros((3, 4))).shape == (3, 4, 32)


def test_kappa_doubles_input():
    a = encoder_arch(replace(TINY, kappa=1))
    b = encoder_arch(replace(TINY, kappa=2))
    assert b[0]["in"] == 2 * a[0]["in"]
    assert predictor_arch(TINY)[0]["in"] == TINY.embed_dim + 1


def test_to_channels_layout(rng):
    s = rng.normal(size=(2, 2, 4, 8, 3))
    c = to_channels(s)
    assert c.shape == (2, 6, 4, 8)
    assert np.array_equal(c[1, 4], s[1, 1, :, :, 1])


def test_encode_deterministic(rng):
    m = JepaModel.init(TINY, rng)
    s = rng.normal(size=(2, 2, 4, 8, 3))
    assert np.array_equal(m.encode(s), m.encode(s))


def test_rollout_composition(rng):
    m = JepaModel.init(TINY, rng)
    z0 = rng.normal(size=(4, 3))
    u = rng.normal(size=(4, 5))
    full = m.rollout(z0, u)
    part = m.rollout(m.rollout(z0, u[:, :2])[:, -1], u[:, 2:])
    assert np.allclose(full[:, 2:], part, atol=1e-14)
    assert np.array_equal(m.rollout(z0, u[:, :1])[:, 0], m.predict_step(z0, u[:, 0]))


def _batch(rng, B=4, cfg=TINY):
    h, w = cfg.frame_hw
    return (rng.normal(size=(B, cfg.kappa, h, w, 3)), rng.normal(size=(B, cfg.horizon, cfg.kappa, h, w, 3)),
            rng.normal(size=(B, cfg.horizon)))


@pytest.mark.parametrize("residual", [True, False])
def test_training_gradient_matches_finite_differences(rng, residual):
    cfg = replace(TINY, residual_predictor=residual)
    m = JepaModel.init(cfg, rng)
    ctx, tgt, u = _batch(rng)
    B, K = u.shape
    zt = m.target(to_channels(tgt.reshape((B * K,) + tgt.shape[2:]))).reshape(B, K, -1)

    def loss():
        z0, _ = m.encoder.forward(to_channels(ctx), train=True)
        return loss_cosine(_rollout_train(m, z0, u)[0], zt)

    z0, ec = m.encoder.forward(to_channels(ctx), train=True)
    pred, caches = _rollout_train(m, z0, u)
    _, dpred = loss_cosine_grad(pred, zt)
    pg, dz0 = _rollout_backward(m, dpred, caches)
    eg, _ = m.encoder.backward(dz0, ec)
    analytic = m.encoder.flat_grads(eg) + pg
    params = m.encoder.parameters() + m.predictor.parameters()
    h = 1e-6
    for p, g in zip(params, analytic):
        num = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            lp = loss()
            p[i] = old - h
            lm = loss()
            p[i] = old
            num[i] = (lp - lm) / (2 * h)
        assert np.allclose(g, num, rtol=1e-4, atol=1e-8)


def test_optimizer_covers_online_params_only(rng):
    m = JepaModel.init(TINY, rng)
    opt = make_optimizer(m)
    ids = {id(p) for p in opt.params}
    assert ids == {id(p) for p in m.encoder.parameters() + m.predictor.parameters()}
    assert not ids & {id(p) for p in m.target.parameters()}


def test_target_follows_ema_recursion_exactly(rng):
    m = JepaModel.init(TINY, rng)
    opt = make_optimizer(m)
    replay = [p.copy() for p in m.target.parameters()]
    assert all(np.array_equal(a, b) for a, b in zip(replay, m.encoder.parameters()))
    for _ in range(4):
        train_step(m, opt, *_batch(rng))
        for r, o in zip(replay, m.encoder.parameters()):
            r *= TINY.ema_eta
            r += (1 - TINY.ema_eta) * o
    assert all(np.array_equal(a, b) for a, b in zip(replay, m.target.parameters()))


def _const_dataset(n=3, length=12):
    frame = np.full((8, 16, 3), 0.5, np.float32)
    trajs = [Trajectory(np.repeat(frame[None], length, 0), np.zeros((length, 4), np.float32),
                        np.zeros(length, np.float32)) for _ in range(n)]
    return Dataset(trajs, {"command_mean": 0.0, "command_std": 1.0})


def test_constant_task_reaches_optimum():
    cfg = replace(TINY, frame_hw=(4, 8), epochs=20, horizon=2)
    aug = AugmentConfig(target_size=(4, 8))
    res = train_jepa(_const_dataset(), cfg, np.random.default_rng(0), aug)
    assert min(res.epoch_loss) <= -0.99


def test_training_deterministic(tiny):
    cfg, train = tiny["cfg"], tiny["data"]["train"]
    a = train_jepa(train, cfg.jepa, np.random.default_rng(3), cfg.augment)
    b = train_jepa(train, cfg.jepa, np.random.default_rng(3), cfg.augment)
    assert a.epoch_loss == b.epoch_loss


def test_collapse_diagnostic_examples():
    same = np.ones((50, 8))
    d = collapse_diagnostic(same)
    assert d["min_std"] == 0 and d["mean_cosine"] == pytest.approx(1.0) and d["collapsed"]
    iso = np.random.default_rng(0).normal(size=(1000, 64))
    d = collapse_diagnostic(iso)
    assert d["mean_abs_cosine"] < 0.15 and not d["collapsed"]


def test_rollout_error_shape_and_range(tiny):
    m = tiny["result"].model
    err = rollout_error(m, tiny["data"]["heldout"], 3, tiny["cfg"].augment)
    assert err.shape == (3,)
    assert np.all((err >= 0) & (err <= 2))


def test_save_load_and_export(tiny, tmp_path):
    m = tiny["result"].model
    m.save(tmp_path / "m")
    back = JepaModel.load(tmp_path / "m")
    emb = encode_dataset(m, tiny["data"]["heldout"], tiny["cfg"].augment)
    emb2 = encode_dataset(back, tiny["data"]["heldout"], tiny["cfg"].augment)
    assert all(np.array_equal(a, b) for a, b in zip(emb, emb2))
    path = export_embeddings(tmp_path / "e.csv", emb)
    lines = path.read_text().splitlines()
    assert lines[0].split(",")[:3] == ["traj", "step", "z0"]
    assert len(lines) == 1 + sum(len(z) for z in emb)


def test_config_validation():
    with pytest.raises(ValueError):
        JepaConfig(frame_hw=(15, 32))
    with pytest.raises(ValueError):
        JepaConfig(ema_eta=1.5)
