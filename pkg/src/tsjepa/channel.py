"""Indoor-factory uplink model: path loss, LoS probability, Rayleigh block fading,
SNR, Shannon rate and closed-form outage probability.

All functions broadcast over numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class RadioParams:
    carrier_ghz: float = 3.75
    bandwidth_hz: float = 10e6          # per device (total / grants)
    tx_power_w: float = 0.2
    noise_power_dbm: float = -95.0
    rate_threshold_bps: float = 1.024e6
    clutter_size_m: float = 2.0
    clutter_density: float = 0.6
    clutter_height_m: float = 3.0
    bs_height_m: float = 10.0
    dev_height_m: float = 1.5
    shadow_std_db: float = 4.0

    def __post_init__(self):
        for name in ("carrier_ghz", "bandwidth_hz", "tx_power_w", "clutter_size_m",
                     "clutter_height_m", "bs_height_m", "dev_height_m"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.rate_threshold_bps < 0 or self.shadow_std_db < 0:
            raise ValueError("rate_threshold_bps and shadow_std_db must be >= 0")
        if not 0 < self.clutter_density < 1:
            raise ValueError("clutter_density must lie in (0, 1)")
        if not self.dev_height_m < self.clutter_height_m < self.bs_height_m:
            raise ValueError("need dev_height_m < clutter_height_m < bs_height_m")

    @property
    def noise_power_w(self) -> float:
        return dbm_to_watt(self.noise_power_dbm)


@dataclass
class LinkGeometry:
    d2d_m: float
    d3d_m: float

    @classmethod
    def from_2d(cls, d2d_m, params: RadioParams) -> "LinkGeometry":
        dh = params.bs_height_m - params.dev_height_m
        return cls(d2d_m, np.sqrt(np.asarray(d2d_m, float) ** 2 + dh**2))


@dataclass
class LinkState:
    is_los: bool
    pathloss_db: float
    fading_power: float
    snr_linear: float
    outage_prob: float
    in_outage: bool


def dbm_to_watt(dbm):
    return 10.0 ** ((np.asarray(dbm, float) - 30.0) / 10.0)


def watt_to_dbm(w):
    return 10.0 * np.log10(np.asarray(w, float)) + 30.0


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, float) / 10.0)


def linear_to_db(x):
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(np.asarray(x, float))


def pathloss_los_db(geom: LinkGeometry, carrier_ghz):
    return 31.84 + 21.5 * np.log10(geom.d3d_m) + 19.0 * np.log10(carrier_ghz)


def pathloss_general_db(geom: LinkGeometry, carrier_ghz):
    return 33.63 + 21.9 * np.log10(geom.d3d_m) + 20.0 * np.log10(carrier_ghz)


def pathloss_nlos_db(geom: LinkGeometry, carrier_ghz):
    return np.maximum(pathloss_general_db(geom, carrier_ghz), pathloss_los_db(geom, carrier_ghz))


def p_los(geom: LinkGeometry, params: RadioParams):
    """LoS probability for the sparse-clutter, high-BS factory layout."""
    if not params.clutter_density < 1 or params.clutter_height_m <= params.dev_height_m:
        raise ValueError("p_los needs clutter_density < 1 and clutter height above the device")
    k_subsce = -params.clutter_size_m / np.log(1.0 - params.clutter_density)
    ratio = (params.bs_height_m - params.dev_height_m) / (params.clutter_height_m - params.dev_height_m)
    return np.exp(-(np.asarray(geom.d2d_m, float) / k_subsce) * ratio)


def snr_linear(pathloss_db, tx_power_w, fading_power, noise_power_dbm):
    return 10.0 ** (-np.asarray(pathloss_db, float) / 10.0) * tx_power_w * fading_power / dbm_to_watt(noise_power_dbm)


def rate_bps(snr, bandwidth_hz):
    return bandwidth_hz * np.log2(1.0 + np.asarray(snr, float))


def outage_prob(pathloss_db, params: RadioParams, bandwidth_hz=None, rate_threshold_bps=None):
    """Closed-form P[rate < R̄] under unit-mean exponential fading power."""
    w = params.bandwidth_hz if bandwidth_hz is None else bandwidth_hz
    rbar = params.rate_threshold_bps if rate_threshold_bps is None else rate_threshold_bps
    a = 10.0 ** (np.asarray(pathloss_db, float) / 10.0) * params.noise_power_w / params.tx_power_w
    with np.errstate(over="ignore"):  # huge R̄/W saturates to certain outage
        return -np.expm1(-a * np.expm1(np.log(2.0) * np.asarray(rbar, float) / w))


def draw_large_scale(geom: LinkGeometry, params: RadioParams, rng: np.random.Generator,
                     force_los: bool | None = None):
    """Per-episode draw of LoS class and shadowed path loss. Returns (is_los, pl_db)."""
    d2d = np.asarray(geom.d2d_m, float)
    if force_los is None:
        is_los = rng.random(d2d.shape) < p_los(geom, params)
    else:
        is_los = np.full(d2d.shape, bool(force_los))
    pl = np.where(is_los, pathloss_los_db(geom, params.carrier_ghz),
                  pathloss_nlos_db(geom, params.carrier_ghz))
    if params.shadow_std_db > 0:
        pl = pl + rng.normal(0.0, params.shadow_std_db, d2d.shape)
    return is_los, pl


def draw_fading(rng: np.random.Generator, size=None):
    """Rayleigh block fading: |H|^2 ~ Exponential(1), fresh every slot."""
    return rng.exponential(1.0, size)


def link_state(is_los, pl_db, fading_power, params: RadioParams, bandwidth_hz=None,
               rate_threshold_bps=None) -> LinkState:
    w = params.bandwidth_hz if bandwidth_hz is None else bandwidth_hz
    rbar = params.rate_threshold_bps if rate_threshold_bps is None else rate_threshold_bps
    snr = snr_linear(pl_db, params.tx_power_w, fading_power, params.noise_power_dbm)
    eps = outage_prob(pl_db, params, w, rbar)
    return LinkState(is_los, pl_db, fading_power, snr, eps, rate_bps(snr, w) < rbar)


def sample_link(geom: LinkGeometry, params: RadioParams, rng: np.random.Generator,
                force_los: bool | None = None, fading_power=None) -> LinkState:
    """One fresh draw of LoS class, shadowing and fading for a single link."""
    is_los, pl = draw_large_scale(geom, params, rng, force_los)
    h2 = draw_fading(rng, np.shape(pl)) if fading_power is None else fading_power
    return link_state(is_los, pl, h2, params)


class DeviceLinks:
    """Uplinks of a device population over one episode.

    Geometry, LoS class and shadowing are drawn once at construction; fading is
    redrawn on every call to :meth:`slot`.
    """

    def __init__(self, d2d_m, params: RadioParams, rng: np.random.Generator):
        self.params = params
        self.geometry = LinkGeometry.from_2d(np.asarray(d2d_m, float), params)
        self.is_los, self.pathloss_db = draw_large_scale(self.geometry, params, rng)
        self.rng = rng

    def __len__(self):
        return len(self.pathloss_db)

    def outage(self, bandwidth_hz=None, rate_threshold_bps=None):
        return outage_prob(self.pathloss_db, self.params, bandwidth_hz, rate_threshold_bps)

    def slot(self, bandwidth_hz=None, rate_threshold_bps=None):
        """Draw this slot's fading; returns (snr, eps, in_outage) arrays."""
        p = self.params
        w = p.bandwidth_hz if bandwidth_hz is None else bandwidth_hz
        rbar = p.rate_threshold_bps if rate_threshold_bps is None else rate_threshold_bps
        h2 = draw_fading(self.rng, len(self))
        snr = snr_linear(self.pathloss_db, p.tx_power_w, h2, p.noise_power_dbm)
        return snr, self.outage(w, rbar), rate_bps(snr, w) < rbar


def place_devices(n: int, rng: np.random.Generator, mode: str = "fixed", d2d_m: float = 50.0,
                  hall=(300.0, 150.0)):
    """2-D device-to-BS distances: all at `d2d_m`, or uniform in a hall with the BS
    at its centre."""
    if mode == "fixed":
        return np.full(n, float(d2d_m))
    if mode == "hall":
        x = rng.uniform(-hall[0] / 2, hall[0] / 2, n)
        y = rng.uniform(-hall[1] / 2, hall[1] / 2, n)
        return np.maximum(np.hypot(x, y), 1.0)
    raise ValueError(f"unknown placement mode {mode!r}")


def outage_monte_carlo(pathloss_db, params: RadioParams, n_samples: int, rng: np.random.Generator,
                       batch: int = 1_000_000):
    """Empirical outage fraction over exponential fading draws, with the binomial
    standard error evaluated at the closed-form probability."""
    hits = 0
    left = n_samples
    while left > 0:
        m = min(batch, left)
        snr = snr_linear(pathloss_db, params.tx_power_w, draw_fading(rng, m), params.noise_power_dbm)
        hits += int(np.count_nonzero(rate_bps(snr, params.bandwidth_hz) < params.rate_threshold_bps))
        left -= m
    p = float(outage_prob(pathloss_db, params))
    return hits / n_samples, np.sqrt(max(p * (1 - p), 0.0) / n_samples)


def channel_test_points(n_points: int, rng: np.random.Generator):
    """Random (PL, P, W, R̄) points whose outage probabilities span (1e-3, 0.99)."""
    rows = []
    for _ in range(n_points):
        pl = rng.uniform(70.0, 120.0)
        p = rng.uniform(0.01, 1.0)
        w = rng.uniform(1e5, 2e7)
        target = rng.uniform(1e-3, 0.99)
        a = 10.0 ** (pl / 10.0) * dbm_to_watt(-95.0) / p
        rbar = w * np.log2(1.0 - np.log1p(-target) / a)
        rows.append((pl, p, w, float(rbar)))
    return rows
