"""Time-series JEPA: context encoder, EMA target encoder, command-conditioned
latent predictor, cosine training objective and embedding diagnostics.

Frame stacks are ``(N, kappa, H, W, 3)`` arrays that are already resized (and,
for encoding, normalized); the encoder sees them as ``3 * kappa`` channels.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .neural import SGD, AdamW, Network, NonFiniteError, StepDecay, ema_update, save_network
from .plant import AugmentConfig, Dataset, augment_batch, normalize, resize_batch, stack_indices

log = logging.getLogger(__name__)

COS_EPS = 1e-12


@dataclass
class JepaConfig:
    embed_dim: int = 32
    kappa: int = 2
    horizon: int = 4                   # K_p
    ema_eta: float = 0.99
    frame_hw: tuple = (16, 32)
    conv_channels: tuple = (8, 16)
    predictor_hidden: int = 128
    residual_predictor: bool = True
    output_batchnorm: bool = False
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 50
    weight_decay: float = 4e-4
    lr_decay_every: int = 20
    lr_decay: float = 0.99
    augment: bool = True

    def __post_init__(self):
        self.frame_hw = tuple(self.frame_hw)
        self.conv_channels = tuple(self.conv_channels)
        if self.kappa < 1 or self.horizon < 1:
            raise ValueError("kappa and horizon must be >= 1")
        if not 0 <= self.ema_eta <= 1:
            raise ValueError("ema_eta must lie in [0, 1]")
        if self.embed_dim < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("embed_dim, batch_size must be >= 1 and epochs >= 0")
        h, w = self.frame_hw
        f = 2 ** len(self.conv_channels)
        if h % f or w % f:
            raise ValueError(f"frame_hw {self.frame_hw} must be divisible by {f}")


def full_scale_config() -> JepaConfig:
    """Full-scale preset (GPU-sized; not exercised by the tests)."""
    return JepaConfig(embed_dim=256, frame_hw=(64, 128), conv_channels=(64, 128, 256),
                      predictor_hidden=1024, lr=0.2, momentum=0.0, batch_size=256, epochs=150)


def encoder_arch(cfg: JepaConfig) -> list:
    arch = []
    c_in = 3 * cfg.kappa
    h, w = cfg.frame_hw
    for c in cfg.conv_channels:
        arch += [{"kind": "conv2d", "in": c_in, "out": c, "kernel": 3, "stride": 2, "padding": 1},
                 {"kind": "batchnorm", "features": c}, {"kind": "relu"}]
        c_in, h, w = c, h // 2, w // 2
    arch += [{"kind": "flatten"}, {"kind": "dense", "in": c_in * h * w, "out": cfg.embed_dim}]
    if cfg.output_batchnorm:
        arch.append({"kind": "batchnorm", "features": cfg.embed_dim, "affine": False})
    return arch


def predictor_arch(cfg: JepaConfig) -> list:
    return [{"kind": "dense", "in": cfg.embed_dim + 1, "out": cfg.predictor_hidden},
            {"kind": "relu"},
            {"kind": "dense", "in": cfg.predictor_hidden, "out": cfg.embed_dim}]


def to_channels(stacks) -> np.ndarray:
    """(N, kappa, H, W, 3) -> (N, 3 * kappa, H, W)."""
    s = np.asarray(stacks, dtype=float)
    n, k, h, w, c = s.shape
    return s.transpose(0, 1, 4, 2, 3).reshape(n, k * c, h, w)


# --------------------------------------------------------------------------- loss


def cosine(a, b):
    na = np.maximum(np.linalg.norm(a, axis=-1), COS_EPS)
    nb = np.maximum(np.linalg.norm(b, axis=-1), COS_EPS)
    return np.sum(a * b, axis=-1) / (na * nb)


def loss_cosine(pred, target) -> float:
    """Mean negative cosine similarity over all leading axes; -1 is perfect."""
    return float(-np.mean(cosine(pred, target)))


def loss_cosine_grad(pred, target):
    """Returns (loss, d loss / d pred)."""
    na = np.maximum(np.linalg.norm(pred, axis=-1, keepdims=True), COS_EPS)
    nb = np.maximum(np.linalg.norm(target, axis=-1, keepdims=True), COS_EPS)
    cos = np.sum(pred * target, axis=-1, keepdims=True) / (na * nb)
    m = cos.size
    grad = -(target / (na * nb) - cos * pred / na**2) / m
    return float(-cos.mean()), grad


# --------------------------------------------------------------------------- model


@dataclass
class JepaModel:
    encoder: Network
    target: Network
    predictor: Network
    cfg: JepaConfig
    command_mean: float = 0.0
    command_std: float = 1.0

    @classmethod
    def init(cls, cfg: JepaConfig, rng: np.random.Generator, command_mean=0.0, command_std=1.0):
        enc = Network.from_spec(encoder_arch(cfg), rng)
        pred = Network.from_spec(predictor_arch(cfg), rng)
        return cls(enc, enc.copy(), pred, cfg, command_mean, command_std)

    def normalize_command(self, u):
        return (np.asarray(u, float) - self.command_mean) / self.command_std

    def encode(self, stacks, target: bool = False) -> np.ndarray:
        """Eval-mode embeddings of normalized stacks ``(N, kappa, H, W, 3)``."""
        net = self.target if target else self.encoder
        return net(to_channels(stacks))

    def predict_step(self, z, u_norm):
        z = np.atleast_2d(z)
        u = np.asarray(u_norm, float).reshape(len(z), 1)
        out = self.predictor(np.concatenate([z, u], axis=1))
        return z + out if self.cfg.residual_predictor else out

    def rollout(self, z0, u_norm) -> np.ndarray:
        """Auto-regressive rollout: ``(N, d), (N, K) -> (N, K, d)``."""
        z = np.atleast_2d(np.asarray(z0, float))
        u = np.asarray(u_norm, float).reshape(len(z), -1)
        out = np.empty((len(z), u.shape[1], z.shape[1]))
        for k in range(u.shape[1]):
            z = self.predict_step(z, u[:, k])
            if not np.all(np.isfinite(z)):
                raise NonFiniteError(f"rollout diverged at depth {k + 1}")
            out[:, k] = z
        return out

    def num_parameters(self) -> int:
        return self.encoder.num_parameters() + self.predictor.num_parameters()

    def save(self, out_dir, extra: dict | None = None):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = {"cfg": asdict(self.cfg), "command_mean": self.command_mean,
                "command_std": self.command_std, **(extra or {})}
        paths = {}
        for name in ("encoder", "target", "predictor"):
            paths[name] = save_network(out / f"{name}.ckpt", getattr(self, name), meta)
        return paths

    @classmethod
    def load(cls, out_dir) -> "JepaModel":
        from .neural import load_network
        out = Path(out_dir)
        enc, meta = load_network(out / "encoder.ckpt")
        tgt, _ = load_network(out / "target.ckpt")
        pred, _ = load_network(out / "predictor.ckpt")
        return cls(enc, tgt, pred, JepaConfig(**meta["cfg"]), meta["command_mean"], meta["command_std"])


# --------------------------------------------------------------------------- data


def prepare_frames(dataset: Dataset, aug: AugmentConfig) -> list:
    """Resize every trajectory's frames once at the mid-range blur sigma.

    Training then jitters colours on these small frames; the blur sigma range is
    narrow enough that redrawing it per sample changes pixels by < 1e-5.
    """
    sigma = float(np.mean(aug.sigma_range))
    out = []
    for t in dataset.trajectories:
        f = np.asarray(t.frames, float)
        if aug.target_size is not None:
            f = resize_batch(f, aug.target_size, np.full(len(f), sigma), aug.blur_kernel)
        out.append(f)
    return out


def gather_stacks(frames: list, traj_idx, steps, kappa: int) -> np.ndarray:
    """Stacks ending at ``steps`` of trajectories ``traj_idx``: (N, kappa, H, W, 3)."""
    return np.stack([frames[i][stack_indices(int(k), kappa)] for i, k in zip(traj_idx, steps)])


def finish(stacks, aug: AugmentConfig, rng=None, train=False):
    """Colour-jitter (train) and normalize pre-resized stacks."""
    if train and rng is not None:
        return augment_batch(stacks, rng, replace(aug, target_size=None))
    return normalize(stacks, aug.mean, aug.std) if aug.normalize else np.asarray(stacks, float)


def windows(dataset: Dataset, horizon: int) -> np.ndarray:
    """All (trajectory, start step) pairs with `horizon` future frames available."""
    rows = [(i, k) for i, t in enumerate(dataset.trajectories) for k in range(t.length - horizon)]
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


# --------------------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: JepaModel
    epoch_loss: list = field(default_factory=list)
    step_loss: list = field(default_factory=list)


def _rollout_train(model: JepaModel, z0, u):
    """Rollout keeping per-step caches for backprop through the chain."""
    z = z0
    preds, caches = [], []
    for k in range(u.shape[1]):
        out, c = model.predictor.forward(np.concatenate([z, u[:, k:k + 1]], axis=1), train=True)
        z = z + out if model.cfg.residual_predictor else out
        preds.append(z)
        caches.append(c)
    return np.stack(preds, axis=1), caches


def _rollout_backward(model: JepaModel, dpred, caches):
    """Returns (predictor grads, d loss / d z0)."""
    d = model.cfg.embed_dim
    total = None
    carry = np.zeros_like(dpred[:, 0])
    for k in range(dpred.shape[1] - 1, -1, -1):
        g = dpred[:, k] + carry
        grads, dx = model.predictor.backward(g, caches[k])
        flat = model.predictor.flat_grads(grads)
        total = flat if total is None else [a + b for a, b in zip(total, flat)]
        carry = dx[:, :d] + (g if model.cfg.residual_predictor else 0.0)
    return total, carry


def train_step(model: JepaModel, opt, ctx, tgt, u):
    """One optimization step on a batch. ctx: (B, kappa, H, W, 3) normalized;
    tgt: (B, K, kappa, H, W, 3); u: (B, K) normalized commands. Returns loss."""
    B, K = u.shape
    z0, enc_cache = model.encoder.forward(to_channels(ctx), train=True)
    zt = model.target(to_channels(tgt.reshape((B * K,) + tgt.shape[2:]))).reshape(B, K, -1)
    pred, caches = _rollout_train(model, z0, u)
    loss, dpred = loss_cosine_grad(pred, zt)
    if not np.isfinite(loss):
        raise NonFiniteError("training loss is not finite")
    pgrads, dz0 = _rollout_backward(model, dpred, caches)
    egrads, _ = model.encoder.backward(dz0, enc_cache)
    opt.step(model.encoder.flat_grads(egrads) + pgrads)
    ema_update(model.target, model.encoder, model.cfg.ema_eta)
    return loss


def make_optimizer(model: JepaModel):
    cfg = model.cfg
    params = model.encoder.parameters() + model.predictor.parameters()
    return SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay,
               StepDecay(cfg.lr_decay_every, cfg.lr_decay))


def train_jepa(dataset: Dataset, cfg: JepaConfig, rng: np.random.Generator,
               aug: AugmentConfig | None = None, diagnostic_dir=None, progress=None) -> TrainResult:
    """Alternate online-encoder/predictor SGD steps with EMA target updates."""
    aug = aug or AugmentConfig()
    mean, std = dataset.command_mean, dataset.command_std
    model = JepaModel.init(cfg, rng, mean, std)
    opt = make_optimizer(model)
    frames = prepare_frames(dataset, aug)
    wins = windows(dataset, cfg.horizon)
    if len(wins) == 0:
        raise ValueError("dataset has no windows of the requested horizon")
    cmds = [(t.commands.astype(float) - mean) / std for t in dataset.trajectories]
    res = TrainResult(model)
    K = cfg.horizon
    for epoch in range(cfg.epochs):
        order = wins[rng.permutation(len(wins))]
        losses = []
        for b in range(0, len(order), cfg.batch_size):
            batch = order[b:b + cfg.batch_size]
            ti, k0 = batch[:, 0], batch[:, 1]
            ctx = gather_stacks(frames, ti, k0, cfg.kappa)
            tti = np.repeat(ti, K)
            tk = (k0[:, None] + np.arange(1, K + 1)[None]).ravel()
            tgt = gather_stacks(frames, tti, tk, cfg.kappa)
            ctx = finish(ctx, aug, rng, cfg.augment)
            tgt = finish(tgt, aug, rng, cfg.augment).reshape((len(batch), K) + tgt.shape[1:])
            u = np.stack([cmds[i][k:k + K] for i, k in zip(ti, k0)])
            try:
                loss = train_step(model, opt, ctx, tgt, u)
            except NonFiniteError:
                if diagnostic_dir is not None:
                    model.save(diagnostic_dir, {"epoch": epoch, "diverged": True})
                raise
            losses.append(loss)
        res.step_loss.extend(losses)
        res.epoch_loss.append(float(np.mean(losses)))
        opt.end_epoch()
        if progress:
            progress(epoch, res.epoch_loss[-1])
        log.debug("epoch %d loss %.6f", epoch, res.epoch_loss[-1])
    return res


# --------------------------------------------------------------------------- evaluation


def encode_dataset(model: JepaModel, dataset: Dataset, aug: AugmentConfig | None = None,
                   target: bool = False, frames=None) -> list:
    """Per-trajectory eval-mode embeddings ``(L, d)`` for every step."""
    aug = aug or AugmentConfig()
    frames = prepare_frames(dataset, aug) if frames is None else frames
    out = []
    for f in frames:
        idx = np.arange(len(f))
        stacks = finish(np.stack([f[stack_indices(k, model.cfg.kappa)] for k in idx]), aug)
        out.append(model.encode(stacks, target=target))
    return out


def rollout_error(model: JepaModel, dataset: Dataset, depth: int, aug=None) -> np.ndarray:
    """Mean (1 - cosine) between depth-k rollouts and target-encoder embeddings,
    for k = 1..depth, averaged over all start steps of every trajectory."""
    aug = aug or AugmentConfig()
    frames = prepare_frames(dataset, aug)
    zc = encode_dataset(model, dataset, aug, frames=frames)
    zt = encode_dataset(model, dataset, aug, target=True, frames=frames)
    errs = []
    for t, c, g in zip(dataset.trajectories, zc, zt):
        n = t.length - depth
        if n <= 0:
            continue
        u = model.normalize_command(np.stack([t.commands[k:k + depth] for k in range(n)]))
        pred = model.rollout(c[:n], u)
        truth = np.stack([g[k + 1:k + 1 + depth] for k in range(n)])
        errs.append(1.0 - cosine(pred, truth))
    return np.concatenate(errs).mean(axis=0)


def collapse_diagnostic(embeddings, max_pairs: int = 2000) -> dict:
    """Per-dimension std and mean pairwise cosine over a probe set."""
    z = np.asarray(embeddings, float).reshape(-1, np.shape(embeddings)[-1])
    std = z.std(axis=0)
    probe = z[:max_pairs]
    n = np.maximum(np.linalg.norm(probe, axis=1, keepdims=True), COS_EPS)
    u = probe / n
    gram = u @ u.T
    m = len(probe)
    off = ~np.eye(m, dtype=bool)
    mean_cos = float(gram[off].mean()) if m > 1 else 1.0
    mean_abs = float(np.abs(gram[off]).mean()) if m > 1 else 1.0
    return {"std": std, "min_std": float(std.min()), "mean_cosine": mean_cos,
            "mean_abs_cosine": mean_abs, "collapsed": bool(std.min() < 1e-3 or mean_cos > 0.99)}


def export_embeddings(path, embeddings: list):
    """CSV rows ``traj, step, z0..z{d-1}`` for external plotting tools."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        d = embeddings[0].shape[1] if embeddings else 0
        w.writerow(["traj", "step"] + [f"z{i}" for i in range(d)])
        for ti, z in enumerate(embeddings):
            for k, row in enumerate(z):
                w.writerow([ti, k] + [repr(float(v)) for v in row])
    return path


# --------------------------------------------------------------------------- auto-encoder hook


@dataclass
class AutoEncoder:
    """Reconstruction baseline: same encoder shape, dense decoder to the stack."""
    encoder: Network
    decoder: Network
    cfg: JepaConfig

    def encode(self, stacks):
        return self.encoder(to_channels(stacks))


def train_autoencoder(dataset: Dataset, cfg: JepaConfig, rng: np.random.Generator,
                      aug: AugmentConfig | None = None, hidden: int = 256, lr: float = 1e-3):
    aug = aug or AugmentConfig()
    enc = Network.from_spec(encoder_arch(cfg), rng)
    h, w = cfg.frame_hw
    out_dim = 3 * cfg.kappa * h * w
    dec = Network.from_spec([{"kind": "dense", "in": cfg.embed_dim, "out": hidden}, {"kind": "relu"},
                             {"kind": "dense", "in": hidden, "out": out_dim}], rng)
    opt = AdamW(enc.parameters() + dec.parameters(), lr, weight_decay=cfg.weight_decay,
                schedule=StepDecay(cfg.lr_decay_every, cfg.lr_decay))
    frames = prepare_frames(dataset, aug)
    wins = windows(dataset, 0)
    curve = []
    for _ in range(cfg.epochs):
        order = wins[rng.permutation(len(wins))]
        losses = []
        for b in range(0, len(order), cfg.batch_size):
            batch = order[b:b + cfg.batch_size]
            x = to_channels(finish(gather_stacks(frames, batch[:, 0], batch[:, 1], cfg.kappa), aug,
                                   rng, cfg.augment))
            z, ce = enc.forward(x, train=True)
            y, cd = dec.forward(z, train=True)
            diff = y - x.reshape(len(x), -1)
            losses.append(float(np.mean(diff**2)))
            gd, dz = dec.backward(2 * diff / diff.size, cd)
            ge, _ = enc.backward(dz, ce)
            opt.step(enc.flat_grads(ge) + dec.flat_grads(gd))
        curve.append(float(np.mean(losses)))
        opt.end_epoch()
    return AutoEncoder(enc, dec, cfg), curve
