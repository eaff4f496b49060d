"""Cart-pole plant: physics, expert LQR policy, rendering, augmentation, datasets.

States are float arrays of shape ``(..., 4)`` laid out as
``[cart_pos, cart_vel, pole_angle, pole_ang_vel]`` with angle 0 = upright.
Frames are float arrays of shape ``(H, W, 3)`` with intensities in [0, 1].
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.linalg import expm
from scipy.ndimage import convolve1d

POS, VEL, ANG, ANG_VEL = range(4)
STATE_DIM = 4


class DivergedError(ValueError):
    """Raised when a plant state is non-finite or has fallen over."""


@dataclass
class PlantParams:
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    pole_half_length: float = 0.5
    gravity: float = 9.81
    dt: float = 1e-3
    process_noise_var: float = 1e-6
    u_min: float = -20.0
    u_max: float = 20.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        for name in ("cart_mass", "pole_mass", "pole_half_length", "gravity"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.process_noise_var < 0:
            raise ValueError("process_noise_var must be >= 0")
        if not self.u_min < self.u_max:
            raise ValueError("u_min must be < u_max")


def make_state(cart_pos=0.0, cart_vel=0.0, pole_angle=0.0, pole_ang_vel=0.0) -> np.ndarray:
    return np.array([cart_pos, cart_vel, pole_angle, pole_ang_vel], dtype=float)


def dynamics(state: np.ndarray, force, params: PlantParams) -> np.ndarray:
    """Continuous-time frictionless cart-pole derivative (Florian 2007 form)."""
    state = np.asarray(state, dtype=float)
    force = np.asarray(force, dtype=float)
    m, l = params.pole_mass, params.pole_half_length
    total = params.cart_mass + m
    theta, theta_dot = state[..., ANG], state[..., ANG_VEL]
    sin, cos = np.sin(theta), np.cos(theta)
    temp = (force + m * l * theta_dot**2 * sin) / total
    theta_acc = (params.gravity * sin - cos * temp) / (l * (4.0 / 3.0 - m * cos**2 / total))
    x_acc = temp - m * l * theta_acc * cos / total
    return np.stack([state[..., VEL], x_acc, theta_dot, theta_acc], axis=-1)


def rk4(state: np.ndarray, force, params: PlantParams) -> np.ndarray:
    dt = params.dt
    k1 = dynamics(state, force, params)
    k2 = dynamics(state + 0.5 * dt * k1, force, params)
    k3 = dynamics(state + 0.5 * dt * k2, force, params)
    k4 = dynamics(state + dt * k3, force, params)
    return state + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def step(state, force, params: PlantParams, rng: np.random.Generator | None = None) -> np.ndarray:
    """Advance one sampling interval with zero-order-hold force and additive noise.

    Works on a single state or a batch ``(N, 4)`` with a matching force vector.
    The force is clamped to the plant limits.
    """
    state = np.asarray(state, dtype=float)
    if not np.all(np.isfinite(state)):
        raise DivergedError("non-finite plant state")
    force = np.clip(np.asarray(force, dtype=float), params.u_min, params.u_max)
    nxt = rk4(state, force, params)
    if params.process_noise_var > 0:
        if rng is None:
            raise ValueError("rng required when process_noise_var > 0")
        nxt = nxt + rng.normal(0.0, np.sqrt(params.process_noise_var), size=nxt.shape)
    return nxt


def energy(state, params: PlantParams) -> np.ndarray:
    """Total mechanical energy with the pole modelled as a uniform rod."""
    state = np.asarray(state, dtype=float)
    m, l, M = params.pole_mass, params.pole_half_length, params.cart_mass
    xd, th, thd = state[..., VEL], state[..., ANG], state[..., ANG_VEL]
    vx = xd + l * thd * np.cos(th)
    vy = -l * thd * np.sin(th)
    kinetic = 0.5 * M * xd**2 + 0.5 * m * (vx**2 + vy**2) + 0.5 * (m * l**2 / 3.0) * thd**2
    potential = m * params.gravity * l * np.cos(th)
    return kinetic + potential


# --------------------------------------------------------------------------- control


def continuous_linearization(params: PlantParams) -> tuple[np.ndarray, np.ndarray]:
    """Analytic Jacobians of `dynamics` about the upright equilibrium."""
    m, l, g = params.pole_mass, params.pole_half_length, params.gravity
    total = params.cart_mass + m
    denom = l * (4.0 / 3.0 - m / total)
    a_th = g / denom
    b_th = -1.0 / (total * denom)
    A = np.zeros((4, 4))
    A[POS, VEL] = 1.0
    A[ANG, ANG_VEL] = 1.0
    A[ANG_VEL, ANG] = a_th
    A[VEL, ANG] = -m * l * a_th / total
    B = np.zeros((4, 1))
    B[ANG_VEL, 0] = b_th
    B[VEL, 0] = 1.0 / total - m * l * b_th / total
    return A, B


def discretize(A: np.ndarray, B: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact zero-order-hold discretization via the augmented matrix exponential."""
    n, k = B.shape
    aug = np.zeros((n + k, n + k))
    aug[:n, :n] = A * dt
    aug[:n, n:] = B * dt
    e = expm(aug)
    return e[:n, :n], e[:n, n:]


@dataclass
class ControllerGains:
    K: np.ndarray  # (1, 4)
    x_desired: np.ndarray
    A: np.ndarray
    B: np.ndarray
    P: np.ndarray
    iterations: int


def riccati_gain(A, B, Q, R, tol=1e-10, max_iter=200_000):
    """Iterate the discrete Riccati recursion from P = Q until successive iterates
    differ by less than `tol` (max-abs). Returns (K, P, iterations)."""
    P = np.array(Q, dtype=float)
    for it in range(1, max_iter + 1):
        BtP = B.T @ P
        gain = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = Q + A.T @ P @ A - (A.T @ P @ B) @ gain
        P_next = 0.5 * (P_next + P_next.T)
        diff = np.max(np.abs(P_next - P))
        P = P_next
        if diff < tol:
            K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
            return K, P, it
    raise RuntimeError(f"Riccati iteration did not converge in {max_iter} iterations")


def design_controller(params: PlantParams, state_weight=None, command_weight=None,
                      x_desired=None) -> ControllerGains:
    Q = np.eye(4) if state_weight is None else np.atleast_2d(np.asarray(state_weight, float))
    R = 0.01 * np.eye(1) if command_weight is None else np.atleast_2d(np.asarray(command_weight, float))
    if np.any(np.linalg.eigvalsh(0.5 * (Q + Q.T)) < -1e-12):
        raise ValueError("state_weight must be positive semidefinite")
    if np.any(np.linalg.eigvalsh(0.5 * (R + R.T)) <= 0):
        raise ValueError("command_weight must be positive definite")
    Ac, Bc = continuous_linearization(params)
    A, B = discretize(Ac, Bc, params.dt)
    # Scale-normalise so the absolute convergence tolerance is meaningful; the
    # gain is invariant to joint scaling of (Q, R).
    scale = max(np.abs(Q).max(), np.abs(R).max())
    K, P, iters = riccati_gain(A, B, Q / scale, R / scale)
    xd = np.zeros(4) if x_desired is None else np.asarray(x_desired, float)
    return ControllerGains(K=K, x_desired=xd, A=A, B=B, P=P * scale, iterations=iters)


def expert_command(state, params: PlantParams, gains: ControllerGains):
    """Saturated LQR command ``clamp(-K (x - x_d))``. Batched over leading dims."""
    state = np.asarray(state, dtype=float)
    if not np.all(np.isfinite(state)):
        raise DivergedError("non-finite plant state")
    u = -(state - gains.x_desired) @ gains.K[0]
    u = np.clip(u, params.u_min, params.u_max)
    return float(u) if np.ndim(u) == 0 else u


# --------------------------------------------------------------------------- rendering


@dataclass
class RenderSpec:
    width: int = 64
    height: int = 32
    scale: float = 20.0  # pixels per meter
    cart_color: tuple = (0.2, 0.4, 0.8)
    pole_color: tuple = (0.55, 0.27, 0.07)
    track_color: tuple = (0.5, 0.5, 0.5)
    track_row: float = 28.0
    cart_width_m: float = 0.4
    cart_height_m: float = 0.2
    pole_thickness_px: float = 2.0


class Rendered(NamedTuple):
    image: np.ndarray
    clipped: bool | np.ndarray


def _coverage(dist, half_width):
    # Box-filtered antialiasing: 1 inside, linear ramp over one pixel at the edge.
    return np.clip(half_width + 0.5 - dist, 0.0, 1.0)


def render_batch(states, spec: RenderSpec, params: PlantParams | None = None,
                 cart_colors=None) -> Rendered:
    """Rasterize a batch of states ``(N, 4)`` into frames ``(N, H, W, 3)``."""
    params = params or PlantParams()
    states = np.atleast_2d(np.asarray(states, dtype=float))
    n = states.shape[0]
    H, W, s = spec.height, spec.width, spec.scale
    rows = np.arange(H, dtype=float)[None, :, None] + 0.5
    cols = np.arange(W, dtype=float)[None, None, :] + 0.5

    cart_w, cart_h = spec.cart_width_m * s, spec.cart_height_m * s
    half_span = W / 2.0 - cart_w / 2.0
    cx_raw = W / 2.0 + states[:, POS] * s
    cx = np.clip(cx_raw, W / 2.0 - half_span, W / 2.0 + half_span)
    clipped = np.abs(cx_raw - cx) > 1e-9
    cx = cx[:, None, None]
    cy = spec.track_row - cart_h / 2.0

    img = np.ones((n, H, W, 3))

    def blend(alpha, color):
        color = np.asarray(color, dtype=float).reshape(-1, 1, 1, 3)
        img[...] = img * (1.0 - alpha[..., None]) + color * alpha[..., None]

    track = _coverage(np.abs(rows - spec.track_row), 0.5) * np.ones((n, 1, W))
    blend(track, spec.track_color)

    cart = _coverage(np.abs(cols - cx), cart_w / 2) * _coverage(np.abs(rows - cy), cart_h / 2)
    colors = spec.cart_color if cart_colors is None else np.asarray(cart_colors, float)
    blend(cart, colors)

    # Pole: segment from the pivot (top-centre of the cart) along the angle.
    length = 2.0 * params.pole_half_length * s
    px, py = cx, spec.track_row - cart_h
    th = states[:, ANG][:, None, None]
    tx, ty = px + length * np.sin(th), py - length * np.cos(th)
    dx, dy = tx - px, ty - py
    t = np.clip(((cols - px) * dx + (rows - py) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    dist = np.hypot(cols - (px + t * dx), rows - (py + t * dy))
    blend(_coverage(dist, spec.pole_thickness_px / 2), spec.pole_color)

    return Rendered(np.clip(img, 0.0, 1.0), clipped)


def render(state, spec: RenderSpec, params: PlantParams | None = None, cart_color=None) -> Rendered:
    colors = None if cart_color is None else [cart_color]
    out = render_batch(np.asarray(state, float)[None], spec, params, colors)
    return Rendered(out.image[0], bool(out.clipped[0]))


# --------------------------------------------------------------------------- augmentation


IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class AugmentConfig:
    brightness: float = 0.05
    contrast: float = 0.1
    saturation: float = 0.1
    hue: float = 0.05
    grayscale_p: float = 0.05
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD
    target_size: tuple | None = (16, 32)  # (H, W); None keeps the input size
    blur_kernel: int = 5
    sigma_range: tuple = (0.1, 0.2)
    normalize: bool = True


def _gray(img):
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def _adjust_brightness(img, f):
    return np.clip(img * f, 0.0, 1.0)


def _adjust_contrast(img, f):
    # Blend toward the mean luma of each frame.
    m = _gray(img).mean(axis=(-2, -1), keepdims=True)[..., None]
    return np.clip((img - m) * f + m, 0.0, 1.0)


def _adjust_saturation(img, f):
    g = _gray(img)[..., None]
    return np.clip((img - g) * f + g, 0.0, 1.0)


def _adjust_hue(img, shift):
    # Rotate the HSV hue; value and chroma are preserved.
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    mx = np.maximum(np.maximum(r, g), b)
    c = mx - np.minimum(np.minimum(r, g), b)
    safe = np.where(c > 0, c, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0,
                 np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = (h + 6.0 * np.asarray(shift)) % 6.0
    out = np.empty_like(img)
    for ch, n in enumerate((5.0, 3.0, 1.0)):
        k = (n + h) % 6.0
        out[..., ch] = mx - c * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)
    return out


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def resize(img, target_size, sigma: float, kernel: int = 5):
    """Gaussian blur then area-resample ``(..., H, W, 3)`` to ``target_size``."""
    k = gaussian_kernel(kernel, sigma)
    img = convolve1d(img, k, axis=-3, mode="nearest")
    img = convolve1d(img, k, axis=-2, mode="nearest")
    H, W = img.shape[-3:-1]
    th, tw = target_size
    if (th, tw) == (H, W):
        return img
    if H % th or W % tw:
        raise ValueError(f"resize needs integer factors, got {(H, W)} -> {(th, tw)}")
    fh, fw = H // th, W // tw
    shape = img.shape[:-3] + (th, fh, tw, fw, 3)
    return img.reshape(shape).mean(axis=(-4, -2))


def normalize(img, mean=IMAGENET_MEAN, std=IMAGENET_STD):
    return (img - np.asarray(mean)) / np.asarray(std)


def _blur_down_axis(img, kernels, axis, factor):
    """Per-sample blur (edge padded) fused with a `factor` box downsample along
    `axis`; kernels is (N, K)."""
    n_k = kernels.shape[1]
    r = n_k // 2
    box = np.ones(factor) / factor
    taps = np.stack([np.convolve(k, box) for k in kernels])  # (N, K + factor - 1)
    pad = [(0, 0)] * img.ndim
    pad[axis] = (r, r)
    padded = np.pad(img, pad, mode="edge")
    n_out = img.shape[axis] // factor
    bshape = (img.shape[0],) + (1,) * (img.ndim - 1)
    sl = [slice(None)] * img.ndim
    out = None
    for t in range(taps.shape[1]):
        sl[axis] = slice(t, t + factor * (n_out - 1) + 1, factor)
        term = taps[:, t].reshape(bshape) * padded[tuple(sl)]
        out = term if out is None else out + term
    return out


def resize_batch(img, target_size, sigmas, kernel: int = 5):
    """:func:`resize` with one blur sigma per leading-axis sample."""
    img = np.asarray(img, dtype=float)
    x = np.arange(kernel) - (kernel - 1) / 2.0
    k = np.exp(-0.5 * (x[None, :] / np.asarray(sigmas, float)[:, None]) ** 2)
    k /= k.sum(axis=1, keepdims=True)
    H, W = img.shape[-3:-1]
    th, tw = target_size
    if H % th or W % tw:
        raise ValueError(f"resize needs integer factors, got {(H, W)} -> {(th, tw)}")
    img = _blur_down_axis(img, k, img.ndim - 3, H // th)
    return _blur_down_axis(img, k, img.ndim - 2, W // tw)


def augment_batch(frames, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    """Augment a batch ``(N, ..., H, W, 3)``: one random parameter set per sample,
    shared by everything inside it (e.g. the frames of a stack)."""
    img = np.asarray(frames, dtype=float)
    n = img.shape[0]
    # Blur-resize first: the colour ops are per-pixel, so running them on the
    # smaller frame is equivalent up to clipping and much cheaper.
    if cfg.target_size is not None:
        img = resize_batch(img, cfg.target_size, rng.uniform(*cfg.sigma_range, n), cfg.blur_kernel)
    else:
        img = img.copy()
    bshape = (n,) + (1,) * (img.ndim - 1)
    ops = []
    if cfg.brightness > 0:
        f = rng.uniform(max(0.0, 1 - cfg.brightness), 1 + cfg.brightness, n).reshape(bshape)
        ops.append(lambda x, i, f=f: _adjust_brightness(x, f[i]))
    if cfg.contrast > 0:
        f = rng.uniform(max(0.0, 1 - cfg.contrast), 1 + cfg.contrast, n).reshape(bshape)
        ops.append(lambda x, i, f=f: _adjust_contrast(x, f[i]))
    if cfg.saturation > 0:
        f = rng.uniform(max(0.0, 1 - cfg.saturation), 1 + cfg.saturation, n).reshape(bshape)
        ops.append(lambda x, i, f=f: _adjust_saturation(x, f[i]))
    if cfg.hue > 0:
        h = rng.uniform(-cfg.hue, cfg.hue, n).reshape(bshape[:-1])
        ops.append(lambda x, i, h=h: _adjust_hue(x, h[i]))
    # Random op order per sample: group samples sharing a permutation.
    if ops:
        keys = [tuple(rng.permutation(len(ops))) for _ in range(n)]
        for key in sorted(set(keys)):
            idx = np.array([i for i, k in enumerate(keys) if k == key])
            sub = img[idx]
            for o in key:
                sub = ops[o](sub, idx)
            img[idx] = sub
    if cfg.grayscale_p > 0:
        gray = rng.random(n) < cfg.grayscale_p
        if gray.any():
            img[gray] = np.repeat(_gray(img[gray])[..., None], 3, axis=-1)
    if cfg.normalize:
        img = normalize(img, cfg.mean, cfg.std)
    return img


def augment(frame, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    """Blur-resize, random colour jitter (in random order), grayscale, then
    normalization.

    `frame` may be a single ``(H, W, 3)`` frame or a stack ``(k, H, W, 3)``; one
    set of random parameters is drawn and shared across a stack so temporal
    differences survive augmentation.
    """
    return augment_batch(np.asarray(frame, dtype=float)[None], rng, cfg)[0]


def eval_transform(frames, cfg: AugmentConfig) -> np.ndarray:
    """Deterministic test-time pipeline: fixed mid-range blur, resize, normalize."""
    img = np.asarray(frames, dtype=float)
    if cfg.target_size is not None:
        img = resize(img, cfg.target_size, float(np.mean(cfg.sigma_range)), cfg.blur_kernel)
    if cfg.normalize:
        img = normalize(img, cfg.mean, cfg.std)
    return img


# --------------------------------------------------------------------------- datasets


CART_PALETTE = (
    (0.2, 0.4, 0.8),
    (0.8, 0.2, 0.2),
    (0.2, 0.65, 0.3),
    (0.6, 0.3, 0.7),
    (0.9, 0.6, 0.1),
)


@dataclass
class InitialStateDist:
    angle: float = 0.1   # uniform in [-angle, angle]
    pos: float = 0.2     # uniform in [-pos, pos]

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        size = () if n is None else (n,)
        s = np.zeros(size + (4,))
        s[..., POS] = rng.uniform(-self.pos, self.pos, size)
        s[..., ANG] = rng.uniform(-self.angle, self.angle, size)
        return s


@dataclass
class Trajectory:
    frames: np.ndarray    # (L, H, W, 3) float32
    states: np.ndarray    # (L, 4) float32
    commands: np.ndarray  # (L,) float32
    cart_color: tuple = (0.2, 0.4, 0.8)

    @property
    def length(self) -> int:
        return len(self.commands)


@dataclass
class Dataset:
    trajectories: list
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.trajectories)

    @property
    def command_mean(self) -> float:
        return self.manifest["command_mean"]

    @property
    def command_std(self) -> float:
        return self.manifest["command_std"]


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def simulate_trajectory(length, params, gains, spec, rng, init=None, randomize_color=True,
                        max_retries=100):
    """Roll out the expert policy from a random initial state, re-drawing the start
    if the pole falls over. Returns (Trajectory, retries)."""
    init = init or InitialStateDist()
    color = CART_PALETTE[rng.integers(len(CART_PALETTE))] if randomize_color else spec.cart_color
    for retries in range(max_retries + 1):
        s = init.sample(rng)
        states, commands = [], []
        ok = True
        for _ in range(length):
            if abs(s[ANG]) > np.pi / 2 or not np.all(np.isfinite(s)):
                ok = False
                break
            u = expert_command(s, params, gains)
            states.append(s)
            commands.append(u)
            s = step(s, u, params, rng)
        if ok:
            states = np.array(states).reshape(-1, 4)
            frames = render_batch(states, spec, params, [color] * len(states)).image
            return Trajectory(frames.astype(np.float32), states.astype(np.float32),
                              np.asarray(commands, dtype=np.float32), tuple(color)), retries
    raise DivergedError(f"trajectory diverged {max_retries + 1} times in a row")


def _traj_job(args):
    seed, idx, length, params, gains, spec, init, randomize_color = args
    return simulate_trajectory(length, params, gains, spec, trajectory_rng(seed, idx), init,
                               randomize_color)


def generate_dataset(n_traj: int, length: int, params: PlantParams, gains: ControllerGains,
                     spec: RenderSpec, seed: int, init: InitialStateDist | None = None,
                     randomize_color: bool = True, jobs: int = 1) -> Dataset:
    init = init or InitialStateDist()
    jobs_args = [(seed, i, length, params, gains, spec, init, randomize_color) for i in range(n_traj)]
    if jobs > 1 and n_traj > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_traj_job, jobs_args))
    else:
        results = [_traj_job(a) for a in jobs_args]
    trajs = [t for t, _ in results]
    retries = [r for _, r in results]
    if trajs:
        allu = np.concatenate([t.commands.astype(float) for t in trajs])
        mean, std = float(allu.mean()), float(allu.std())
        umin, umax = float(allu.min()), float(allu.max())
    else:
        mean, std, umin, umax = 0.0, 1.0, 0.0, 0.0
    manifest = {
        "seed": seed,
        "n_traj": n_traj,
        "length": length,
        "params": asdict(params),
        "render": asdict(spec),
        "init": asdict(init),
        "gain": gains.K[0].tolist(),
        "command_mean": mean,
        "command_std": std if std > 0 else 1.0,
        "command_min": umin,
        "command_max": umax,
        "retries": retries,
        "frame_shape": [spec.height, spec.width, 3],
        "cart_colors": [list(t.cart_color) for t in trajs],
    }
    return Dataset(trajs, manifest)


def save_dataset(ds: Dataset, out_dir) -> Path:
    """Write ``manifest.json`` plus one little-endian float32 file per trajectory,
    laid out as ``[frames | states | commands]``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, t in enumerate(ds.trajectories):
        name = f"traj_{i:05d}.bin"
        blob = np.concatenate([t.frames.ravel(), t.states.ravel(), t.commands.ravel()])
        (out / name).write_bytes(blob.astype("<f4").tobytes())
        files.append({"file": name, "length": t.length,
                      "sha256": hashlib.sha256((out / name).read_bytes()).hexdigest()})
    manifest = dict(ds.manifest, files=files)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    H, W, C = manifest["frame_shape"]
    trajs = []
    for entry, color in zip(manifest.get("files", []), manifest.get("cart_colors", [])):
        L = entry["length"]
        blob = np.frombuffer((path / entry["file"]).read_bytes(), dtype="<f4")
        nf = L * H * W * C
        expected = nf + L * 4 + L
        if blob.size != expected:
            raise ValueError(f"{entry['file']}: expected {expected} floats, found {blob.size}")
        frames = blob[:nf].reshape(L, H, W, C).astype(np.float32)
        states = blob[nf:nf + 4 * L].reshape(L, 4).astype(np.float32)
        commands = blob[nf + 4 * L:].astype(np.float32)
        trajs.append(Trajectory(frames, states, commands, tuple(color)))
    return Dataset(trajs, manifest)


def dataset_hash(path) -> str:
    """Content hash of a saved dataset directory (manifest + trajectory files)."""
    path = Path(path)
    h = hashlib.sha256()
    for name in sorted(os.listdir(path)):
        h.update(name.encode())
        h.update((path / name).read_bytes())
    return h.hexdigest()


def stack_indices(k: int, kappa: int) -> Sequence[int]:
    """Frame indices forming the kappa-stack that ends at step k (edge-padded)."""
    return [max(0, k - kappa + 1 + j) for j in range(kappa)]
