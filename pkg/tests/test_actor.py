import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings, strategies as st

from tsjepa.actor import (ActorConfig, ActorModel, SupervisedModel, embedding_payload_bits,
                          frame_payload_bits, nmae, train_actor, train_supervised_baseline, unit_rows)
from tsjepa.seeding import child_rng

FAST = ActorConfig(hidden=(32,), dropout=0.0, lr=1e-2, epochs=300, patience=300, unit_norm_inputs=False)


def test_nmae_examples():
    t = np.linspace(-20, 20, 11)
    assert nmae(t, t, 40) == 0
    assert nmae(t + 0.5, t, 40) == pytest.approx(0.0125)
    assert nmae(t + 1.0, t, 40) == pytest.approx(2 * nmae(t + 0.5, t, 40))
    with pytest.raises(ValueError):
        nmae(t, t, 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=20), st.floats(-5, 5))
def test_nmae_shift_invariant(vals, c):
    p = np.array(vals)
    t = p[::-1].copy()
    assert nmae(p + c, t + c, 40) == pytest.approx(nmae(p, t, 40), abs=1e-9)


def test_realizable_linear_target():
    rng = np.random.default_rng(0)
    Z = rng.normal(size=(400, 4))
    u = Z @ np.array([1.0, -2.0, 0.5, 0.0]) * 0.3
    cfg = replace(FAST, hidden=(), val_fraction=0.0, lr=3e-2, weight_decay=0.0)
    _, fit = train_actor(Z, u, cfg, rng, 0.0, 1.0)
    assert min(fit.train_mse) < 1e-6


def test_selected_validation_mse_non_increasing():
    rng = np.random.default_rng(1)
    Z = rng.normal(size=(300, 3))
    u = np.sin(Z[:, 0]) + 0.1 * rng.normal(size=300)
    _, fit = train_actor(Z, u, replace(FAST, epochs=40), rng, 0.0, 1.0)
    best = fit.best_so_far
    assert np.all(np.diff(best) <= 0)
    assert best[-1] == pytest.approx(fit.val_mse[fit.best_epoch])


def test_actor_deterministic_and_clamped():
    Z = np.random.default_rng(2).normal(size=(200, 3))
    u = 30 * np.tanh(Z[:, 0])
    a, fa = train_actor(Z, u, replace(FAST, epochs=20), np.random.default_rng(5), float(u.mean()), float(u.std()))
    b, fb = train_actor(Z, u, replace(FAST, epochs=20), np.random.default_rng(5), float(u.mean()), float(u.std()))
    assert fa.val_mse == fb.val_mse
    big = np.random.default_rng(3).normal(scale=100, size=(500, 3))
    out = a.predict(big)
    assert np.all((out >= -20) & (out <= 20))
    assert np.array_equal(a.predict(Z[:5]), a.predict(Z[:5]))


def test_unit_norm_inputs_ignore_scale(tmp_path):
    Z = np.random.default_rng(4).normal(size=(100, 5))
    a, _ = train_actor(Z, Z[:, 0], replace(FAST, epochs=5, unit_norm_inputs=True), np.random.default_rng(0),
                       0.0, 1.0)
    assert np.allclose(a.predict(3 * Z[:7]), a.predict(Z[:7]))
    assert np.allclose(np.linalg.norm(unit_rows(Z), axis=1), 1)
    a.save(tmp_path / "a.ckpt")
    b = ActorModel.load(tmp_path / "a.ckpt")
    assert b.unit_norm and np.array_equal(a.predict(Z), b.predict(Z))


def test_group_split_keeps_trajectories_apart():
    from tsjepa.actor import _split
    groups = np.repeat(np.arange(10), 7)
    tr, va = _split(len(groups), groups, 0.2, np.random.default_rng(0))
    assert not set(groups[tr]) & set(groups[va])
    assert len(set(groups[va])) == 2


def test_nan_loss_aborts():
    from tsjepa.neural import NonFiniteError
    Z = np.ones((10, 2))
    with pytest.raises((NonFiniteError, FloatingPointError, ValueError)):
        train_actor(Z, np.full(10, np.nan), replace(FAST, epochs=2), np.random.default_rng(0), 0.0, 1.0)


def test_payload_bits():
    assert embedding_payload_bits(32) == 1024
    assert frame_payload_bits((16, 32), 2) == 16 * 32 * 24 * 2
    assert frame_payload_bits((16, 32), 4) == 2 * frame_payload_bits((16, 32), 2)


def test_supervised_baseline_deterministic(tiny, tmp_path):
    cfg, train = tiny["cfg"], tiny["data"]["train"]
    a, fa = train_supervised_baseline(train, 2, cfg.supervised, child_rng(0, "s"), cfg.augment, cfg.jepa.frame_hw)
    b, fb = train_supervised_baseline(train, 2, cfg.supervised, child_rng(0, "s"), cfg.augment, cfg.jepa.frame_hw)
    assert fa.val_mse == fb.val_mse
    a.save(tmp_path / "s.ckpt")
    back = SupervisedModel.load(tmp_path / "s.ckpt")
    x = np.random.default_rng(0).normal(size=(3, 2, 16, 32, 3))
    assert np.array_equal(back.predict(x), a.predict(x))
    assert np.all(np.isfinite(a.predict(x)))


def test_config_validation():
    with pytest.raises(ValueError):
        ActorConfig(val_fraction=1.0)
    with pytest.raises(ValueError):
        ActorConfig(u_min=1, u_max=0)
