import csv
import numpy as np
import pytest
from dataclasses import replace

from tsjepa.plant import AugmentConfig, PlantParams, RenderSpec, augment, design_controller, generate_dataset
from tsjepa.seeding import child_rng
from tsjepa.sim import (SWEEP_COLUMNS, EpisodeConfig, Models, SweepResult, control_score, expert_closed_loop,
                        initial_states, mape, run_episode, sweep)


@pytest.fixture(scope="module")
def optimal_models():
    p = PlantParams()
    return Models(p, design_controller(p))


def test_control_score_examples():
    assert control_score([0.04, 0, 0.03, 0]) == 1
    assert control_score([0.06, 0, 0.0, 0]) == 0
    assert control_score([0.0, 0, 0.0501, 0]) == 0
    assert control_score([1.04, 0, 0.0, 0], x_desired=1.0) == 1


def test_mape_examples():
    a = np.full((4, 4, 3), 1.0)
    assert mape(a, a) == 0
    assert mape(a, a * 1.1) == pytest.approx(10.0, rel=1e-5)


def test_mape_shifts_right_under_augmentation():
    p = PlantParams()
    ds = generate_dataset(2, 30, p, design_controller(p), RenderSpec(), 3)
    rng = np.random.default_rng(0)
    cfg = AugmentConfig(target_size=None, normalize=False)
    raw, aug = [], []
    for t in ds.trajectories:
        f = t.frames.astype(float)
        a = np.stack([augment(x, rng, cfg) for x in f])
        raw += [mape(f[k - 1], f[k]) for k in range(1, len(f))]
        aug += [mape(a[k - 1], a[k]) for k in range(1, len(a))]
    assert np.median(aug) > np.median(raw)


def test_optimal_ideal_matches_expert_loop(optimal_models):
    cfg = EpisodeConfig(stack="optimal", ideal_channel=True, seed=4)
    rep = run_episode(cfg, optimal_models)
    s0 = initial_states(cfg, child_rng(4, "init"))
    scores, states = expert_closed_loop(s0, cfg.length, optimal_models.plant, optimal_models.gains,
                                        child_rng(4, "plant"))
    assert np.array_equal(rep.scores, scores)
    assert np.array_equal(rep.states, states)
    assert rep.norm_score == pytest.approx(scores.mean())


def test_optimal_sanity_floor(optimal_models):
    for I in (1, 3):
        rep = run_episode(EpisodeConfig(stack="optimal", n_devices=I, grants=I, loss_prob=0.0), optimal_models)
        assert rep.norm_score >= 0.5


def test_bit_conservation(tiny):
    m = tiny["models"]
    rep = run_episode(EpisodeConfig(n_devices=3, grants=1, length=20), m)
    assert rep.payload_bits == 32 * m.jepa.cfg.embed_dim
    assert rep.total_bits == rep.delivered.sum() * rep.payload_bits
    sup = run_episode(EpisodeConfig(n_devices=3, grants=1, length=20, stack="supervised"), m)
    assert sup.payload_bits == 16 * 32 * 24 * m.supervised.kappa
    none = run_episode(EpisodeConfig(length=5, bootstrap=False, loss_prob=1.0), m)
    assert none.total_bits == 0


def test_loss_one_equals_transmit_once(tiny):
    m = tiny["models"]
    a = run_episode(EpisodeConfig(n_devices=2, grants=1, length=30, loss_prob=1.0, seed=2), m)
    b = run_episode(EpisodeConfig(n_devices=2, grants=1, length=30, transmit_once=True, seed=2), m)
    assert np.array_equal(a.commands, b.commands)
    assert np.array_equal(a.states, b.states)
    assert a.delivered[1:].sum() == 0 and a.delivered[0].all()


def test_loss_zero_delivers_every_grant(tiny):
    rep = run_episode(EpisodeConfig(n_devices=4, grants=2, length=30, loss_prob=0.0), tiny["models"])
    assert np.array_equal(rep.granted, rep.delivered)
    assert np.all(rep.granted.sum(axis=1)[1:] == 2)


def test_full_grants_make_policies_equal(tiny):
    reps = [run_episode(EpisodeConfig(n_devices=3, grants=3, length=25, policy=p, ideal_channel=True, snr_db=-100),
                        tiny["models"]) for p in ("channel-aware", "round-robin", "opportunistic")]
    for r in reps[1:]:
        assert np.array_equal(r.commands, reps[0].commands)


def test_aoi_in_report_follows_grants(tiny):
    rep = run_episode(EpisodeConfig(n_devices=4, grants=1, length=40), tiny["models"])
    aoi, g = rep.aoi, rep.granted
    for k in range(1, 40):
        assert np.array_equal(aoi[k], np.where(g[k - 1], 1, aoi[k - 1] + 1))


def test_divergence_marks_failure(optimal_models):
    rep = run_episode(EpisodeConfig(stack="optimal", init_angle=1.5, loss_prob=1.0, length=600), optimal_models)
    k = rep.failed_at[0]
    assert k > 0
    assert np.all(rep.scores[k:] == 0) and np.all(rep.commands[k:] == 0)


def test_reproducible_csv(tiny, tmp_path):
    cfg = EpisodeConfig(n_devices=3, grants=1, length=15, seed=9)
    for name in ("a", "b"):
        rep = run_episode(cfg, tiny["models"])
        rep.write_trace(tmp_path / f"{name}.csv")
        rep.write_control(tmp_path / f"{name}c.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "ac.csv").read_bytes() == (tmp_path / "bc.csv").read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == "slot,device,snr_db,eps,aoi,score,granted,delivered"


def test_config_validation():
    with pytest.raises(ValueError):
        EpisodeConfig(n_devices=2, grants=3)
    with pytest.raises(ValueError):
        EpisodeConfig(stack="telepathy")
    with pytest.raises(ValueError):
        EpisodeConfig(loss_prob=1.5)


def test_missing_models_rejected(optimal_models):
    with pytest.raises(ValueError):
        run_episode(EpisodeConfig(stack="ts-jepa"), optimal_models)


def test_sweep_rows_and_parallel_equivalence(tiny, tmp_path):
    base = EpisodeConfig(length=10)
    a = sweep(base, tiny["models"], (1, 2), stacks=("ts-jepa", "supervised"), n_seeds=2)
    b = sweep(base, tiny["models"], (1, 2), stacks=("ts-jepa", "supervised"), n_seeds=2, jobs=2)
    assert a.rows == b.rows
    assert len(a.rows) == 2 * 3 * 2 * 2
    a.write_csv(tmp_path / "s.csv")
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert tuple(rows[0]) == SWEEP_COLUMNS
    assert rows[1][SWEEP_COLUMNS.index("loss_prob")] == ""


def test_supported_picks_largest_in_band():
    rows = [{"stack": "s", "policy": "p", "loss_prob": None, "I": I, "norm_score": v}
            for I, v in ((1, 0.9), (2, 0.8), (4, 0.5))]
    assert SweepResult(rows).supported() == {("s", "p", None): 2}
    assert SweepResult(rows[2:]).supported() == {("s", "p", None): 0}
