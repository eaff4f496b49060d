"""Semantic actor (embedding -> command), the supervised frame-input baseline,
and the normalized command error metric."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .jepa import finish, gather_stacks, prepare_frames, to_channels, windows
from .neural import AdamW, Network, NonFiniteError, StepDecay, load_network, save_network
from .plant import AugmentConfig, Dataset

log = logging.getLogger(__name__)


@dataclass
class ActorConfig:
    hidden: tuple = (128, 64)
    dropout: float = 0.2
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 300
    weight_decay: float = 0.01
    val_fraction: float = 0.2
    patience: int = 40
    lr_decay_every: int = 20
    lr_decay: float = 0.99
    u_min: float = -20.0
    u_max: float = 20.0
    unit_norm_inputs: bool = True   # the cosine loss leaves embedding scale undefined

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.u_min >= self.u_max:
            raise ValueError("u_min must be < u_max")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def full_scale_actor_config() -> ActorConfig:
    return ActorConfig(hidden=(1024, 256), lr=6e-3, batch_size=200, epochs=300)


def mlp_arch(n_in: int, hidden, dropout: float, n_out: int = 1) -> list:
    arch = []
    for h in hidden:
        arch += [{"kind": "dense", "in": n_in, "out": h}, {"kind": "relu"}]
        if dropout > 0:
            arch.append({"kind": "dropout", "rate": dropout})
        n_in = h
    arch.append({"kind": "dense", "in": n_in, "out": n_out})
    return arch


def unit_rows(z, eps=1e-12):
    return z / np.maximum(np.linalg.norm(z, axis=-1, keepdims=True), eps)


def nmae(predicted, truth, command_range) -> float:
    """Mean absolute command error divided by the command range."""
    if not command_range > 0:
        raise ValueError("command_range must be > 0")
    return float(np.mean(np.abs(np.asarray(predicted, float) - np.asarray(truth, float))) / command_range)


@dataclass
class FitResult:
    net: Network
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    best_epoch: int = 0

    @property
    def best_so_far(self) -> list:
        """Validation MSE of the retained checkpoint after each epoch."""
        return list(np.minimum.accumulate(self.val_mse)) if self.val_mse else []


def _split(n: int, groups, val_fraction: float, rng):
    if val_fraction == 0 or n < 2:
        idx = np.arange(n)
        return idx, idx
    if groups is not None:
        groups = np.asarray(groups)
        uniq = np.unique(groups)
        n_val = max(1, int(round(val_fraction * len(uniq))))
        if n_val >= len(uniq):
            n_val = len(uniq) - 1
        if n_val >= 1:
            val_g = rng.permutation(uniq)[:n_val]
            mask = np.isin(groups, val_g)
            return np.flatnonzero(~mask), np.flatnonzero(mask)
    perm = rng.permutation(n)
    n_val = max(1, int(round(val_fraction * n)))
    return perm[n_val:], perm[:n_val]


def fit_regressor(net: Network, inputs, targets, cfg: ActorConfig, rng: np.random.Generator,
                  groups=None, batch_fn=None) -> FitResult:
    """AdamW on mean squared error with best-validation checkpoint selection.

    `inputs` is indexed by sample; `batch_fn(inputs, idx, train, rng)` may build
    the network input for a batch (default: ``inputs[idx]``).
    """
    targets = np.asarray(targets, float).reshape(len(targets), -1)
    batch_fn = batch_fn or (lambda x, i, train, r: x[i])
    tr, va = _split(len(targets), groups, cfg.val_fraction, rng)
    opt = AdamW(net.parameters(), cfg.lr, weight_decay=cfg.weight_decay,
                schedule=StepDecay(cfg.lr_decay_every, cfg.lr_decay))
    res = FitResult(net.copy())
    best = np.inf
    stale = 0
    for epoch in range(cfg.epochs):
        order = tr[rng.permutation(len(tr))]
        losses = []
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            y, cache = net.forward(batch_fn(inputs, idx, True, rng), train=True, rng=rng)
            diff = y - targets[idx]
            loss = float(np.mean(diff**2))
            if not np.isfinite(loss):
                raise NonFiniteError("regression loss is not finite")
            grads, _ = net.backward(2.0 * diff / diff.size, cache)
            opt.step(net.flat_grads(grads))
            losses.append(loss)
        opt.end_epoch()
        val = float(np.mean((net(batch_fn(inputs, va, False, None)) - targets[va]) ** 2))
        res.train_mse.append(float(np.mean(losses)))
        res.val_mse.append(val)
        if val < best:
            best, stale = val, 0
            res.net.load_state(net)
            res.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return res


@dataclass
class ActorModel:
    net: Network
    command_mean: float
    command_std: float
    input_mean: np.ndarray
    input_std: np.ndarray
    u_min: float = -20.0
    u_max: float = 20.0
    unit_norm: bool = False

    def predict_normalized(self, z):
        z = np.atleast_2d(np.asarray(z, float))
        if self.unit_norm:
            z = unit_rows(z)
        z = (z - self.input_mean) / self.input_std
        return self.net(z)[:, 0]

    def predict(self, z) -> np.ndarray:
        """Commands in newtons, clamped to the actuator limits."""
        u = self.predict_normalized(z) * self.command_std + self.command_mean
        return np.clip(u, self.u_min, self.u_max)

    def save(self, path):
        return save_network(path, self.net, {
            "command_mean": self.command_mean, "command_std": self.command_std,
            "input_mean": self.input_mean.tolist(), "input_std": self.input_std.tolist(),
            "u_min": self.u_min, "u_max": self.u_max, "unit_norm": self.unit_norm})

    @classmethod
    def load(cls, path):
        net, m = load_network(path)
        return cls(net, m["command_mean"], m["command_std"], np.array(m["input_mean"]),
                   np.array(m["input_std"]), m["u_min"], m["u_max"], m.get("unit_norm", False))


def train_actor(embeddings, commands, cfg: ActorConfig, rng: np.random.Generator,
                command_mean: float, command_std: float, groups=None):
    """Fit the actor on (embedding, command) pairs. Returns (ActorModel, FitResult)."""
    Z = np.asarray(embeddings, float)
    if cfg.unit_norm_inputs:
        Z = unit_rows(Z)
    mu, sd = Z.mean(axis=0), Z.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    net = Network.from_spec(mlp_arch(Z.shape[1], cfg.hidden, cfg.dropout), rng)
    u = (np.asarray(commands, float) - command_mean) / command_std
    fit = fit_regressor(net, (Z - mu) / sd, u, cfg, rng, groups)
    return ActorModel(fit.net, command_mean, command_std, mu, sd, cfg.u_min, cfg.u_max,
                      cfg.unit_norm_inputs), fit


# --------------------------------------------------------------------------- supervised baseline


def supervised_arch(kappa: int, frame_hw, conv_channels=(8, 16), hidden=64, dropout=0.2) -> list:
    arch = []
    c_in = 3 * kappa
    h, w = frame_hw
    for c in conv_channels:
        arch += [{"kind": "conv2d", "in": c_in, "out": c, "kernel": 3, "stride": 2, "padding": 1},
                 {"kind": "batchnorm", "features": c}, {"kind": "relu"}]
        c_in, h, w = c, h // 2, w // 2
    arch += [{"kind": "flatten"}]
    arch += mlp_arch(c_in * h * w, (hidden,), dropout)
    return arch


@dataclass
class SupervisedModel:
    """Frame stack -> command network (the raw-observation baseline)."""
    net: Network
    kappa: int
    command_mean: float
    command_std: float
    u_min: float = -20.0
    u_max: float = 20.0

    def predict(self, stacks) -> np.ndarray:
        u = self.net(to_channels(stacks))[:, 0] * self.command_std + self.command_mean
        return np.clip(u, self.u_min, self.u_max)

    def save(self, path):
        return save_network(path, self.net, {"kappa": self.kappa, "command_mean": self.command_mean,
                                             "command_std": self.command_std, "u_min": self.u_min,
                                             "u_max": self.u_max})

    @classmethod
    def load(cls, path):
        net, m = load_network(path)
        return cls(net, m["kappa"], m["command_mean"], m["command_std"], m["u_min"], m["u_max"])


def train_supervised_baseline(dataset: Dataset, kappa: int, cfg: ActorConfig, rng: np.random.Generator,
                              aug: AugmentConfig | None = None, frame_hw=(16, 32), augment_train=True):
    """MSE regression from augmented frame stacks straight to commands."""
    aug = aug or AugmentConfig()
    frames = prepare_frames(dataset, aug)
    wins = windows(dataset, 0)
    mean, std = dataset.command_mean, dataset.command_std
    u = np.array([dataset.trajectories[i].commands[k] for i, k in wins], float)
    hidden = cfg.hidden[0] if cfg.hidden else 64
    net = Network.from_spec(supervised_arch(kappa, frame_hw, hidden=hidden, dropout=cfg.dropout), rng)

    def batch_fn(w, idx, train, r):
        stacks = gather_stacks(frames, w[idx, 0], w[idx, 1], kappa)
        return to_channels(finish(stacks, aug, r, train and augment_train))

    fit = fit_regressor(net, wins, (u - mean) / std, cfg, rng, groups=wins[:, 0], batch_fn=batch_fn)
    return SupervisedModel(fit.net, kappa, mean, std, cfg.u_min, cfg.u_max), fit


def frame_payload_bits(frame_hw, kappa: int) -> int:
    h, w = frame_hw
    return int(h * w * 24 * kappa)


def embedding_payload_bits(embed_dim: int) -> int:
    return int(embed_dim * 32)


def config_dict(cfg) -> dict:
    return asdict(cfg)
