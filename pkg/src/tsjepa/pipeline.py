"""End-to-end stages shared by the CLI, the experiment scripts and the tests:
data generation, JEPA/actor/baseline training and held-out evaluation."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .actor import ActorModel, SupervisedModel, nmae, train_actor, train_supervised_baseline
from .config import ExperimentConfig
from .jepa import (AutoEncoder, JepaModel, collapse_diagnostic, encode_dataset, finish, prepare_frames,
                   train_autoencoder, train_jepa)
from .plant import Dataset, InitialStateDist, design_controller, generate_dataset, stack_indices
from .seeding import child_rng, child_seed
from .sim import Models

log = logging.getLogger(__name__)


def int_seed(seed: int, name: str) -> int:
    return int(child_seed(seed, name).generate_state(1, np.uint64)[0])


def make_datasets(cfg: ExperimentConfig, seed: int, jobs: int = 1, which=("train", "heldout", "actor")):
    gains = design_controller(cfg.plant)
    init = InitialStateDist(cfg.data.init_angle, cfg.data.init_pos)
    sizes = {"train": cfg.data.n_traj, "heldout": cfg.data.heldout_traj, "actor": cfg.data.actor_traj}
    return {name: generate_dataset(sizes[name], cfg.data.length, cfg.plant, gains, cfg.render,
                                   int_seed(seed, f"data-{name}"), init, cfg.data.randomize_color, jobs)
            for name in which}


def with_stats(ds: Dataset, ref: Dataset) -> Dataset:
    """Re-use the command normalization of `ref` (the JEPA training set)."""
    keys = ("command_mean", "command_std", "command_min", "command_max")
    return Dataset(ds.trajectories, dict(ds.manifest, **{k: ref.manifest[k] for k in keys}))


def flat_commands(ds: Dataset) -> np.ndarray:
    return np.concatenate([t.commands.astype(float) for t in ds.trajectories]) if len(ds) else np.zeros(0)


def command_range(ds: Dataset) -> float:
    return float(ds.manifest["command_max"] - ds.manifest["command_min"])


def fit_actor(cfg: ExperimentConfig, model, ds: Dataset, seed: int, name="actor"):
    """Encode `ds` with the frozen encoder and fit an actor on the pairs."""
    emb = encode_dataset(model, ds, cfg.augment) if isinstance(model, JepaModel) else \
        encode_ae(model, ds, cfg)
    groups = np.concatenate([np.full(len(z), i) for i, z in enumerate(emb)])
    return train_actor(np.concatenate(emb), flat_commands(ds), cfg.actor, child_rng(seed, name),
                       ds.command_mean, ds.command_std, groups)


def encode_ae(ae: AutoEncoder, ds: Dataset, cfg: ExperimentConfig):
    frames = prepare_frames(ds, cfg.augment)
    out = []
    for f in frames:
        stacks = finish(np.stack([f[stack_indices(k, ae.cfg.kappa)] for k in range(len(f))]), cfg.augment)
        out.append(ae.encode(stacks))
    return out


def rollout_nmae(model: JepaModel, actor: ActorModel, ds: Dataset, depth: int, urange: float, aug) -> np.ndarray:
    """NMAE of actor commands computed from depth-k predictor rollouts (k = 1..depth)
    against the logged commands, over all valid start steps."""
    emb = encode_dataset(model, ds, aug)
    errs = [[] for _ in range(depth)]
    for t, z in zip(ds.trajectories, emb):
        n = t.length - depth
        if n <= 0:
            continue
        u = model.normalize_command(np.stack([t.commands[k:k + depth] for k in range(n)]))
        roll = model.rollout(z[:n], u)
        for k in range(depth):
            pred = actor.predict(roll[:, k])
            errs[k].append(np.abs(pred - t.commands[k + 1:k + 1 + n]))
    return np.array([np.concatenate(e).mean() / urange for e in errs])


@dataclass
class DeskResult:
    cfg: ExperimentConfig
    seed: int
    jepa: JepaModel
    actor: ActorModel
    supervised: SupervisedModel | None
    epoch_loss: list
    collapse: dict
    actor_nmae: float
    mean_nmae: float
    supervised_nmae: float | None
    rollout_nmae: list
    timings: dict = field(default_factory=dict)
    command_range: float = 0.0

    @property
    def loss_ratio(self) -> float:
        """Distance of the final epoch loss from -1 relative to the first epoch's."""
        return (self.epoch_loss[-1] + 1.0) / (self.epoch_loss[0] + 1.0)

    def models(self) -> Models:
        return Models(self.cfg.plant, design_controller(self.cfg.plant), self.cfg.render, self.cfg.augment,
                      self.jepa, self.actor, self.supervised)

    def metrics(self) -> dict:
        return {"epoch_loss": self.epoch_loss, "loss_ratio": self.loss_ratio,
                "min_std": self.collapse["min_std"], "mean_cosine": self.collapse["mean_cosine"],
                "actor_nmae": self.actor_nmae, "mean_predictor_nmae": self.mean_nmae,
                "supervised_nmae": self.supervised_nmae, "rollout_nmae": self.rollout_nmae,
                "command_range": self.command_range, "timings": self.timings}


def desk_run(cfg: ExperimentConfig, seed: int = 0, jobs: int = 1, supervised: bool = True,
             rollout_depth: int = 10, progress=None) -> DeskResult:
    """The desk-scale experiment: train JEPA on the training set, fit the actor on
    the (larger) actor set, evaluate everything on held-out trajectories."""
    t0 = time.perf_counter()
    data = make_datasets(cfg, seed, jobs)
    train = data["train"]
    heldout = with_stats(data["heldout"], train)
    actor_ds = with_stats(data["actor"], train)
    t1 = time.perf_counter()
    res = train_jepa(train, cfg.jepa, child_rng(seed, "train"), cfg.augment, progress=progress)
    t2 = time.perf_counter()
    model = res.model
    collapse = collapse_diagnostic(np.concatenate(encode_dataset(model, heldout, cfg.augment)))
    actor, _ = fit_actor(cfg, model, actor_ds, seed)
    t3 = time.perf_counter()
    urange = command_range(train)
    truth = flat_commands(heldout)
    pred = np.concatenate([actor.predict(z) for z in encode_dataset(model, heldout, cfg.augment)])
    actor_err = nmae(pred, truth, urange)
    mean_err = nmae(np.full_like(truth, train.command_mean), truth, urange)
    roll = rollout_nmae(model, actor, heldout, rollout_depth, urange, cfg.augment)
    sup, sup_err = None, None
    if supervised:
        sup, _ = train_supervised_baseline(train, cfg.supervised_kappa, cfg.supervised,
                                           child_rng(seed, "supervised"), cfg.augment, cfg.jepa.frame_hw)
        frames = prepare_frames(heldout, cfg.augment)
        sp = []
        for f in frames:
            stacks = finish(np.stack([f[stack_indices(k, sup.kappa)] for k in range(len(f))]), cfg.augment)
            sp.append(sup.predict(stacks))
        sup_err = nmae(np.concatenate(sp), truth, urange)
    t4 = time.perf_counter()
    timings = {"data_s": t1 - t0, "jepa_s": t2 - t1, "actor_s": t3 - t2, "eval_supervised_s": t4 - t3}
    return DeskResult(cfg, seed, model, actor, sup, res.epoch_loss, collapse, actor_err, mean_err, sup_err,
                      roll.tolist(), timings, urange)


def quick_config(cfg: ExperimentConfig | None = None) -> ExperimentConfig:
    """A seconds-scale variant for smoke tests."""
    cfg = cfg or ExperimentConfig()
    return replace(cfg, data=replace(cfg.data, n_traj=3, heldout_traj=2, actor_traj=3, length=20),
                   jepa=replace(cfg.jepa, epochs=2, horizon=2),
                   actor=replace(cfg.actor, epochs=3, hidden=(16,)),
                   supervised=replace(cfg.supervised, epochs=2, hidden=(8,)), autoencoder_epochs=1)


def fit_autoencoder(cfg: ExperimentConfig, train: Dataset, actor_ds: Dataset, seed: int):
    ae, curve = train_autoencoder(train, replace(cfg.jepa, epochs=cfg.autoencoder_epochs),
                                  child_rng(seed, "autoencoder"), cfg.augment)
    ae_actor, _ = fit_actor(cfg, ae, actor_ds, seed, "ae-actor")
    return ae, ae_actor, curve
