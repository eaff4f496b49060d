"""Age-of-information tracking and uplink grant policies."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SchedulerConfig:
    omega1: float = 1.0
    omega2: float = 0.5
    snr_threshold_db: float = 10.0
    grants_per_slot: int = 1

    def __post_init__(self):
        if self.omega1 < 0 or self.omega2 < 0:
            raise ValueError("omega1 and omega2 must be >= 0")
        if self.grants_per_slot < 1:
            raise ValueError("grants_per_slot must be >= 1")

    @property
    def snr_threshold_linear(self) -> float:
        return 10.0 ** (self.snr_threshold_db / 10.0)


@dataclass
class ScheduleFrame:
    decisions: np.ndarray          # bool, alpha
    scores: np.ndarray             # S_i
    events: np.ndarray | None = None  # bool, xi; filled after transmission


def initial_aoi(n: int) -> np.ndarray:
    return np.ones(n, dtype=np.int64)


def update_aoi(aoi, decisions) -> np.ndarray:
    """Scheduled devices reset to 1; the rest age by one slot."""
    aoi = np.asarray(aoi, dtype=np.int64)
    return np.where(np.asarray(decisions, bool), 1, aoi + 1)


def score(outage, age, cfg: SchedulerConfig):
    return cfg.omega1 * (1.0 - np.asarray(outage, float)) - cfg.omega2 * np.log(np.asarray(age, float))


def schedule_channel_aware(snr, outage, aoi, cfg: SchedulerConfig) -> ScheduleFrame:
    """Channel-aware grant selection.

    Devices whose SNR clears the threshold are ranked by their score, evaluated at
    the age they would reach if skipped this slot; the top J are granted. Ties go
    to the older device, then to the lower index.
    """
    snr = np.asarray(snr, float)
    aoi = np.asarray(aoi, np.int64)
    skip_age = aoi + 1
    s = score(outage, skip_age, cfg)
    cand = np.flatnonzero(snr >= cfg.snr_threshold_linear)
    # lexsort: last key is primary.
    order = cand[np.lexsort((cand, -skip_age[cand], -s[cand]))]
    decisions = np.zeros(len(snr), dtype=bool)
    decisions[order[: cfg.grants_per_slot]] = True
    return ScheduleFrame(decisions, s)


def schedule_round_robin(n_devices: int, slot_index: int, grants: int) -> np.ndarray:
    decisions = np.zeros(n_devices, dtype=bool)
    idx = (slot_index * grants + np.arange(min(grants, n_devices))) % n_devices
    decisions[idx] = True
    return decisions


def schedule_opportunistic(snr, grants: int) -> np.ndarray:
    """Grant the `grants` devices with the highest instantaneous SNR (stable sort,
    so equal SNRs favour lower indices)."""
    snr = np.asarray(snr, float)
    order = np.argsort(-snr, kind="stable")
    decisions = np.zeros(len(snr), dtype=bool)
    decisions[order[:grants]] = True
    return decisions


def transmission_event(decisions, in_outage) -> np.ndarray:
    """A granted transmission is delivered unless the slot's fading puts it in outage."""
    return np.asarray(decisions, bool) & ~np.asarray(in_outage, bool)


def schedule(policy: str, *, snr, outage, aoi, slot_index: int, cfg: SchedulerConfig) -> ScheduleFrame:
    n = len(snr)
    if policy == "channel-aware":
        return schedule_channel_aware(snr, outage, aoi, cfg)
    s = score(outage, np.asarray(aoi) + 1, cfg)
    if policy == "round-robin":
        return ScheduleFrame(schedule_round_robin(n, slot_index, cfg.grants_per_slot), s)
    if policy == "opportunistic":
        return ScheduleFrame(schedule_opportunistic(snr, cfg.grants_per_slot), s)
    raise ValueError(f"unknown scheduling policy {policy!r}")


POLICIES = ("channel-aware", "round-robin", "opportunistic")
