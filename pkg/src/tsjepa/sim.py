"""Closed-loop multi-device co-simulation over a shared uplink, metrics and sweeps.

Per slot: channel draw, scheduling, transmission, controller update (fresh
embedding or one predictor step), command, plant step, AoI update.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .actor import ActorModel, SupervisedModel, embedding_payload_bits, frame_payload_bits
from .channel import DeviceLinks, RadioParams, linear_to_db, place_devices
from .jepa import AutoEncoder, JepaModel
from .plant import (ANG, CART_PALETTE, POS, AugmentConfig, ControllerGains, PlantParams, RenderSpec,
                    eval_transform, expert_command, render_batch, step)
from .scheduler import POLICIES, SchedulerConfig, initial_aoi, schedule, update_aoi
from .seeding import child_rng

STACKS = ("ts-jepa", "supervised", "optimal", "autoencoder")


@dataclass
class EpisodeConfig:
    n_devices: int = 1
    grants: int = 1
    length: int = 100
    policy: str = "channel-aware"
    stack: str = "ts-jepa"
    snr_db: float = 10.0                 # scheduler threshold gamma_th
    loss_prob: float | None = None       # overrides the channel outage when set
    ideal_channel: bool = False
    bootstrap: bool = True               # every device's first observation arrives at slot 0
    transmit_once: bool = False          # deliver at slot 0 only
    placement: str = "fixed"
    d2d_m: float = 50.0
    init_angle: float | None = None      # fixed initial angle (pos 0); else uniform draws
    init_angle_range: float = 0.05       # start inside the success region
    init_pos_range: float = 0.02
    x_desired: float = 0.0
    pos_tol: float = 0.05
    angle_tol: float = 0.05
    frame_kappa: int = 2                 # stack depth of frame-transmitting stacks
    randomize_color: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.stack not in STACKS:
            raise ValueError(f"stack must be one of {STACKS}, got {self.stack!r}")
        if self.n_devices < 1 or self.length < 1:
            raise ValueError("n_devices and length must be >= 1")
        # Grants may equal the device count (the no-contention case).
        if not 1 <= self.grants <= self.n_devices:
            raise ValueError("grants must satisfy 1 <= grants <= n_devices")
        if self.loss_prob is not None and not 0 <= self.loss_prob <= 1:
            raise ValueError("loss_prob must lie in [0, 1]")


@dataclass
class Models:
    """Everything a control stack may need at run time."""
    plant: PlantParams
    gains: ControllerGains
    render: RenderSpec = field(default_factory=RenderSpec)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    jepa: JepaModel | None = None
    actor: ActorModel | None = None
    supervised: SupervisedModel | None = None
    autoencoder: AutoEncoder | None = None
    ae_actor: ActorModel | None = None


def control_score(states, x_desired=0.0, pos_tol=0.05, angle_tol=0.05) -> np.ndarray:
    """1 where the cart is within `pos_tol` of the target and the pole within `angle_tol`."""
    s = np.asarray(states, float)
    ok = (np.abs(s[..., POS] - x_desired) <= pos_tol) & (np.abs(s[..., ANG]) <= angle_tol)
    return ok.astype(np.int64)


def mape(prev, curr, guard: float = 1e-6) -> float:
    """Mean absolute percentage change between two frames."""
    prev = np.asarray(prev, float)
    curr = np.asarray(curr, float)
    return float(np.mean(np.abs(curr - prev) / (np.abs(prev) + guard)) * 100.0)


def initial_states(cfg: EpisodeConfig, rng) -> np.ndarray:
    s = np.zeros((cfg.n_devices, 4))
    if cfg.init_angle is not None:
        s[:, ANG] = cfg.init_angle
    else:
        s[:, ANG] = rng.uniform(-cfg.init_angle_range, cfg.init_angle_range, cfg.n_devices)
        s[:, POS] = rng.uniform(-cfg.init_pos_range, cfg.init_pos_range, cfg.n_devices)
    return s


def payload_bits(cfg: EpisodeConfig, models: Models) -> int:
    if cfg.stack == "ts-jepa":
        return embedding_payload_bits(models.jepa.cfg.embed_dim)
    if cfg.stack == "autoencoder":
        return embedding_payload_bits(models.autoencoder.cfg.embed_dim)
    hw = models.augment.target_size or (models.render.height, models.render.width)
    kappa = models.supervised.kappa if cfg.stack == "supervised" and models.supervised else cfg.frame_kappa
    return frame_payload_bits(hw, kappa)


def expert_closed_loop(state0, length: int, params: PlantParams, gains: ControllerGains, rng,
                       x_desired=0.0, pos_tol=0.05, angle_tol=0.05):
    """Reference run of the expert on the plant alone. Returns (scores, states)."""
    s = np.atleast_2d(np.asarray(state0, float)).copy()
    scores, states = [], [s.copy()]
    for _ in range(length):
        scores.append(control_score(s, x_desired, pos_tol, angle_tol))
        s = step(s, expert_command(s, params, gains), params, rng)
        states.append(s.copy())
    return np.array(scores), np.array(states)


@dataclass
class EpisodeReport:
    cfg: EpisodeConfig
    payload_bits: int
    scores: np.ndarray          # (T, I) in-tolerance indicator at the start of each slot
    commands: np.ndarray        # (T, I) applied
    expert: np.ndarray          # (T, I) expert command at the true state
    states: np.ndarray          # (T + 1, I, 4)
    snr_db: np.ndarray
    eps: np.ndarray
    aoi: np.ndarray             # at decision time
    sched_score: np.ndarray
    granted: np.ndarray
    delivered: np.ndarray
    failed_at: np.ndarray       # slot of divergence, -1 if none

    @property
    def norm_score(self) -> float:
        return float(self.scores.mean())

    @property
    def bits(self) -> np.ndarray:
        return self.delivered.sum(axis=0) * self.payload_bits

    @property
    def total_bits(self) -> int:
        return int(self.bits.sum())

    @property
    def mean_aoi(self) -> float:
        return float(self.aoi.mean())

    def summary(self) -> dict:
        return {
            "config": asdict(self.cfg),
            "norm_score": self.norm_score,
            "device_scores": self.scores.mean(axis=0).tolist(),
            "total_bits": self.total_bits,
            "bits_per_device": self.bits.tolist(),
            "payload_bits": self.payload_bits,
            "mean_aoi": self.mean_aoi,
            "deliveries": int(self.delivered.sum()),
            "grants": int(self.granted.sum()),
            "failed_at": self.failed_at.tolist(),
            "command_mae": float(np.mean(np.abs(self.commands - self.expert))),
        }

    def write_trace(self, path):
        """Scheduling trace: one row per slot and device."""
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["slot", "device", "snr_db", "eps", "aoi", "score", "granted", "delivered"])
            T, n = self.granted.shape
            for k in range(T):
                for i in range(n):
                    w.writerow([k, i, _f(self.snr_db[k, i]), _f(self.eps[k, i]), int(self.aoi[k, i]),
                                _f(self.sched_score[k, i]), int(self.granted[k, i]),
                                int(self.delivered[k, i])])
        return path

    def write_control(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["slot", "device", "cart_pos", "cart_vel", "pole_angle", "pole_ang_vel",
                        "command", "expert_command", "control_score"])
            T, n = self.commands.shape
            for k in range(T):
                for i in range(n):
                    s = self.states[k, i]
                    w.writerow([k, i] + [_f(v) for v in s] +
                               [_f(self.commands[k, i]), _f(self.expert[k, i]), int(self.scores[k, i])])
        return path


def _f(v) -> str:
    return repr(float(v))


def _render_stacks(models: Models, history, idx, colors) -> np.ndarray:
    """Normalized kappa-stacks for devices `idx` from the state ring buffer."""
    kappa = len(history)
    states = np.stack([h[idx] for h in history], axis=1)        # (n, kappa, 4)
    cols = np.repeat(colors[idx], kappa, axis=0)
    frames = render_batch(states.reshape(-1, 4), models.render, models.plant, cols).image
    frames = frames.reshape((len(idx), kappa) + frames.shape[1:])
    return eval_transform(frames, models.augment)


def run_episode(cfg: EpisodeConfig, models: Models, radio: RadioParams | None = None,
                sched: SchedulerConfig | None = None) -> EpisodeReport:
    radio = radio or RadioParams()
    sched = replace(sched or SchedulerConfig(), grants_per_slot=cfg.grants, snr_threshold_db=cfg.snr_db)
    stack = cfg.stack
    if stack == "ts-jepa" and (models.jepa is None or models.actor is None):
        raise ValueError("ts-jepa stack needs a JEPA model and an actor")
    if stack == "supervised" and models.supervised is None:
        raise ValueError("supervised stack needs a supervised model")
    if stack == "autoencoder" and (models.autoencoder is None or models.ae_actor is None):
        raise ValueError("autoencoder stack needs an auto-encoder and its actor")

    n, T = cfg.n_devices, cfg.length
    plant = models.plant
    rng_plant = child_rng(cfg.seed, "plant")
    rng_loss = child_rng(cfg.seed, "loss")
    s = initial_states(cfg, child_rng(cfg.seed, "init"))
    d2d = place_devices(n, child_rng(cfg.seed, "placement"), cfg.placement, cfg.d2d_m)
    links = DeviceLinks(d2d, radio, child_rng(cfg.seed, "channel"))
    crng = child_rng(cfg.seed, "colors")
    palette = np.asarray(CART_PALETTE, float)
    colors = (palette[crng.integers(len(palette), size=n)] if cfg.randomize_color
              else np.tile(np.asarray(models.render.cart_color, float), (n, 1)))

    bits = payload_bits(cfg, models)
    rbar = bits / plant.dt
    kappa = {"ts-jepa": models.jepa.cfg.kappa if models.jepa else 1,
             "autoencoder": models.autoencoder.cfg.kappa if models.autoencoder else 1,
             "supervised": models.supervised.kappa if models.supervised else 1}.get(stack, 1)
    history = [s.copy() for _ in range(kappa)]

    d = models.jepa.cfg.embed_dim if stack == "ts-jepa" else 0
    z = np.zeros((n, d))
    has_obs = np.zeros(n, bool)
    u_last = np.zeros(n)
    aoi = initial_aoi(n)
    alive = np.ones(n, bool)
    failed_at = np.full(n, -1)

    rec = {k: np.zeros((T, n)) for k in ("scores", "commands", "expert", "snr_db", "eps", "aoi",
                                          "sched_score", "granted", "delivered")}
    states = np.zeros((T + 1, n, 4))
    states[0] = s
    for k in range(T):
        rec["scores"][k] = control_score(s, cfg.x_desired, cfg.pos_tol, cfg.angle_tol) * alive
        rec["expert"][k] = np.where(alive, expert_command(np.where(alive[:, None], s, 0.0), plant,
                                                          models.gains), 0.0)
        snr, eps, outage = links.slot(radio.bandwidth_hz, rbar)
        eps = np.broadcast_to(eps, (n,)).astype(float)
        if cfg.ideal_channel:
            eps, outage = np.zeros(n), np.zeros(n, bool)
        if cfg.loss_prob is not None:
            eps = np.full(n, float(cfg.loss_prob))
            outage = rng_loss.random(n) < cfg.loss_prob
        frame = schedule(cfg.policy, snr=snr, outage=eps, aoi=aoi, slot_index=k, cfg=sched)
        alpha = frame.decisions.copy()
        if cfg.transmit_once:
            alpha[:] = k == 0
        elif cfg.bootstrap and k == 0:
            alpha[:] = True
        xi = alpha & ~outage
        if k == 0 and (cfg.bootstrap or cfg.transmit_once):
            xi = alpha.copy()
        xi &= alive

        u = u_last.copy()
        fresh = np.flatnonzero(xi)
        if stack == "ts-jepa":
            roll = has_obs & ~xi & alive
            if roll.any():
                z[roll] = models.jepa.predict_step(z[roll], models.jepa.normalize_command(u_last[roll]))
            if fresh.size:
                z[fresh] = models.jepa.encode(_render_stacks(models, history, fresh, colors))
            has_obs |= xi
            act = np.flatnonzero(has_obs & alive)
            if act.size:
                u[act] = models.actor.predict(z[act])
        elif fresh.size:
            if stack == "optimal":
                u[fresh] = expert_command(s[fresh], plant, models.gains)
            elif stack == "supervised":
                u[fresh] = models.supervised.predict(_render_stacks(models, history, fresh, colors))
            else:
                emb = models.autoencoder.encode(_render_stacks(models, history, fresh, colors))
                u[fresh] = models.ae_actor.predict(emb)
            has_obs |= xi
        u = np.where(alive, np.clip(u, plant.u_min, plant.u_max), 0.0)

        rec["commands"][k] = u
        rec["snr_db"][k] = linear_to_db(snr)
        rec["eps"][k] = eps
        rec["aoi"][k] = aoi
        rec["sched_score"][k] = frame.scores
        rec["granted"][k] = alpha
        rec["delivered"][k] = xi

        if alive.any():
            s[alive] = step(s[alive], u[alive], plant, rng_plant)
        fell = alive & (~np.all(np.isfinite(s), axis=1) | (np.abs(s[:, ANG]) > np.pi / 2))
        failed_at[fell] = k + 1
        alive &= ~fell
        s[~alive] = np.where(np.isfinite(s[~alive]), s[~alive], 0.0)
        states[k + 1] = s
        history = history[1:] + [s.copy()]
        aoi = update_aoi(aoi, alpha)
        u_last = u

    return EpisodeReport(cfg, bits, rec["scores"].astype(np.int64), rec["commands"], rec["expert"], states,
                         rec["snr_db"], rec["eps"], rec["aoi"].astype(np.int64), rec["sched_score"],
                         rec["granted"].astype(bool), rec["delivered"].astype(bool), failed_at)


# --------------------------------------------------------------------------- sweeps

SWEEP_COLUMNS = ("policy", "stack", "I", "J", "snr_db", "loss_prob", "seed", "norm_score",
                 "bits_total", "mean_aoi")

_WORKER: dict = {}


def _init_worker(models, radio, sched):
    _WORKER.update(models=models, radio=radio, sched=sched)


def _run_row(cfg: EpisodeConfig) -> dict:
    rep = run_episode(cfg, _WORKER["models"], _WORKER["radio"], _WORKER["sched"])
    return {"policy": cfg.policy, "stack": cfg.stack, "I": cfg.n_devices, "J": cfg.grants,
            "snr_db": cfg.snr_db, "loss_prob": cfg.loss_prob, "seed": cfg.seed,
            "norm_score": rep.norm_score, "bits_total": rep.total_bits, "mean_aoi": rep.mean_aoi}


@dataclass
class SweepResult:
    rows: list
    band: tuple = (0.74, 1.0)

    def mean_scores(self) -> dict:
        """(stack, policy, loss_prob, I) -> mean normalized score over seeds."""
        acc: dict = {}
        for r in self.rows:
            acc.setdefault((r["stack"], r["policy"], r["loss_prob"], r["I"]), []).append(r["norm_score"])
        return {k: float(np.mean(v)) for k, v in sorted(acc.items(), key=lambda kv: _sort_key(kv[0]))}

    def supported(self) -> dict:
        """(stack, policy, loss_prob) -> largest I whose mean score is inside the band."""
        lo, hi = self.band
        out: dict = {}
        for (stack, policy, loss, I), m in self.mean_scores().items():
            key = (stack, policy, loss)
            out.setdefault(key, 0)
            if lo <= m <= hi:
                out[key] = max(out[key], I)
        return out

    def write_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SWEEP_COLUMNS)
            for r in self.rows:
                w.writerow([_cell(r[c]) for c in SWEEP_COLUMNS])
        return path

    def summary(self) -> dict:
        return {"band": list(self.band),
                "supported": [{"stack": s, "policy": p, "loss_prob": l, "max_devices": v}
                              for (s, p, l), v in self.supported().items()],
                "mean_scores": [{"stack": s, "policy": p, "loss_prob": l, "I": i, "mean_score": m}
                                for (s, p, l, i), m in self.mean_scores().items()]}


def _sort_key(key):
    return tuple(-1.0 if v is None else v for v in key)


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def sweep(base: EpisodeConfig, models: Models, device_counts, policies=POLICIES, stacks=("ts-jepa",),
          n_seeds: int = 20, loss_probs=(None,), radio: RadioParams | None = None,
          sched: SchedulerConfig | None = None, jobs: int = 1, band=(0.74, 1.0)) -> SweepResult:
    """Mean normalized score over seeds for every (stack, policy, loss, I) point.
    Seeds are shared across policies and stacks (common random numbers)."""
    radio = radio or RadioParams()
    sched = sched or SchedulerConfig()
    cfgs = [replace(base, stack=st, policy=po, loss_prob=lp, n_devices=int(I),
                    grants=min(base.grants, int(I)), seed=base.seed + s)
            for st in stacks for po in policies for lp in loss_probs for I in device_counts
            for s in range(n_seeds)]
    if jobs > 1 and len(cfgs) > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                                 initargs=(models, radio, sched)) as ex:
            rows = list(ex.map(_run_row, cfgs, chunksize=max(1, len(cfgs) // (4 * jobs))))
    else:
        _init_worker(models, radio, sched)
        rows = [_run_row(c) for c in cfgs]
    return SweepResult(rows, tuple(band))


def scalability_sweep(base, models, device_counts, policies=POLICIES, stacks=("ts-jepa",), n_seeds=20,
                      **kw) -> SweepResult:
    return sweep(base, models, device_counts, policies, stacks, n_seeds, loss_probs=(base.loss_prob,), **kw)


def packet_loss_sweep(base, models, loss_probs, device_counts, policies=POLICIES, stacks=("ts-jepa",),
                      n_seeds=20, **kw) -> SweepResult:
    return sweep(base, models, device_counts, policies, stacks, n_seeds, loss_probs=tuple(loss_probs), **kw)


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path
