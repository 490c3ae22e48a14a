"""Ring-road mobility and V2V / V2I channel gains.

Vehicles live on a multi-lane ring; positions wrap modulo the ring length so
density stays constant. V2V links get log-distance pathloss, a lognormal
shadowing term and a Rayleigh power factor held for one control epoch. The V2I
uplink to the road-side unit is redrawn every slot.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .config import SimConfig

C0 = 299792458.0


@dataclass
class Fleet:
    """Struct-of-arrays vehicle state. Index i is the vehicle id."""

    position_m: np.ndarray
    lane: np.ndarray
    speed_mps: np.ndarray
    heading: np.ndarray
    road_length_m: float

    @property
    def n(self) -> int:
        return len(self.position_m)

    @property
    def velocity_mps(self) -> np.ndarray:
        return self.heading * self.speed_mps


def place_vehicles(cfg: SimConfig, rng: np.random.Generator, n: int | None = None,
                   road_length_m: float | None = None) -> Fleet:
    """Uniform random placement with speeds in [0.5 vmax, vmax]."""
    n = cfg.vehicle_count() if n is None else n
    length = cfg.ring_length_m() if road_length_m is None else road_length_m
    pos = rng.uniform(0.0, length, size=n)
    lane = rng.integers(0, cfg.n_lanes, size=n)
    vmax = cfg.max_speed_mps
    speed = rng.uniform(0.5 * vmax, vmax, size=n)
    # lanes in the lower half of the carriageway drive in the opposite direction
    heading = np.where(lane < (cfg.n_lanes + 1) // 2, 1.0, -1.0) if cfg.n_lanes > 1 else np.ones(n)
    return Fleet(pos, lane, speed, heading, float(length))


def advance_mobility(fleet: Fleet, dt_s: float) -> Fleet:
    if dt_s <= 0:
        raise ValueError("dt_s must be positive")
    pos = np.mod(fleet.position_m + fleet.velocity_mps * dt_s, fleet.road_length_m)
    # guard against fmod returning exactly L for tiny negative inputs
    pos = np.where(pos >= fleet.road_length_m, 0.0, pos)
    return Fleet(pos, fleet.lane, fleet.speed_mps, fleet.heading, fleet.road_length_m)


def ring_offsets(fleet: Fleet) -> np.ndarray:
    """Signed along-road offset x_j - x_i wrapped to [-L/2, L/2)."""
    L = fleet.road_length_m
    dx = fleet.position_m[None, :] - fleet.position_m[:, None]
    return (dx + 0.5 * L) % L - 0.5 * L


def pairwise_distance(fleet: Fleet, cfg: SimConfig, dx: np.ndarray | None = None) -> np.ndarray:
    if dx is None:
        dx = ring_offsets(fleet)
    dy = (fleet.lane[None, :] - fleet.lane[:, None]) * cfg.lane_width_m
    return np.sqrt(dx * dx + dy * dy)


def radial_velocity(fleet: Fleet, cfg: SimConfig) -> np.ndarray:
    """d/dt of the pairwise distance (positive when separating)."""
    dx = ring_offsets(fleet)
    d = pairwise_distance(fleet, cfg, dx)
    u = fleet.velocity_mps
    dv = u[None, :] - u[:, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        vr = np.where(d > 0, dx * dv / np.maximum(d, 1e-12), 0.0)
    return vr


def rsu_distance(fleet: Fleet, cfg: SimConfig) -> np.ndarray:
    dx = fleet.position_m - 0.5 * fleet.road_length_m
    return np.sqrt(dx * dx + cfg.rsu_offset_m ** 2)


def pathloss_db(distance_m, cfg: SimConfig | None = None):
    """Log-distance pathloss anchored at free space at 1 m."""
    fc = 5.9e9 if cfg is None else cfg.carrier_freq_hz
    n = 2.75 if cfg is None else cfg.pathloss_exponent
    pl0 = 20.0 * np.log10(4.0 * np.pi * fc / C0)
    d = np.maximum(np.asarray(distance_m, dtype=float), 1.0)
    out = pl0 + 10.0 * n * np.log10(d)
    return float(out) if out.ndim == 0 else out


def pathloss_gain(distance_m, cfg: SimConfig):
    """Linear large-scale gain including both antenna gains (no shadowing)."""
    return 10.0 ** ((2.0 * cfg.antenna_gain_db - pathloss_db(distance_m, cfg)) / 10.0)


@dataclass
class V2VFadingState:
    """Per-epoch symmetric shadowing (dB) and Rayleigh power factors."""

    shadowing_db: np.ndarray
    rayleigh: np.ndarray

    def factor(self, rows=None) -> np.ndarray:
        s = self.shadowing_db if rows is None else self.shadowing_db[rows]
        r = self.rayleigh if rows is None else self.rayleigh[rows]
        return 10.0 ** (-s / 10.0) * r


def draw_v2v_fading(n: int, cfg: SimConfig, rng: np.random.Generator) -> V2VFadingState:
    if not cfg.fading:
        return V2VFadingState(np.zeros((n, n)), np.ones((n, n)))
    sh = rng.normal(0.0, cfg.shadowing_std_db, size=(n, n))
    ra = rng.exponential(1.0, size=(n, n))
    # symmetric: mirror the upper triangle
    iu = np.triu_indices(n, 1)
    sh[iu[1], iu[0]] = sh[iu]
    ra[iu[1], iu[0]] = ra[iu]
    np.fill_diagonal(sh, 0.0)
    np.fill_diagonal(ra, 1.0)
    return V2VFadingState(sh, ra)


def draw_v2i_fading(n: int, cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    if not cfg.fading:
        return np.ones(n)
    return rng.exponential(1.0, size=n)


@dataclass
class ChannelSnapshot:
    """Gains for one slot. V2V rows are computed lazily for transmitters."""

    slot: int
    distance_m: np.ndarray
    v2v_state: V2VFadingState
    v2i_gain: np.ndarray
    cfg: SimConfig

    def v2v_rows(self, rows) -> np.ndarray:
        rows = np.asarray(rows, dtype=int)
        g = pathloss_gain(self.distance_m[rows], self.cfg) * self.v2v_state.factor(rows)
        return g

    @property
    def v2v_gain(self) -> np.ndarray:
        return self.v2v_rows(np.arange(self.distance_m.shape[0]))

    @property
    def shadowing_db(self) -> np.ndarray:
        return self.v2v_state.shadowing_db


class ChannelModel:
    """Holds the per-epoch V2V state and caches one snapshot per slot."""

    def __init__(self, cfg: SimConfig, fading_rng: np.random.Generator, trace_path=None):
        self.cfg = cfg
        self.rng = fading_rng
        self.v2v_state: V2VFadingState | None = None
        self._cache: ChannelSnapshot | None = None
        self._trace = None
        if trace_path is not None:
            self._trace_fh = open(trace_path, "w", newline="")
            self._trace = csv.writer(self._trace_fh)
            self._trace.writerow(["slot", "i", "j", "gain_db"])

    def new_epoch(self, n: int) -> None:
        self.v2v_state = draw_v2v_fading(n, self.cfg, self.rng)

    def sample_channels(self, slot: int, fleet: Fleet, distance_m: np.ndarray) -> ChannelSnapshot:
        if self._cache is not None and self._cache.slot == slot:
            return self._cache
        if self.v2v_state is None:
            self.new_epoch(fleet.n)
        g_rsu = pathloss_gain(rsu_distance(fleet, self.cfg), self.cfg)
        g_rsu = g_rsu * draw_v2i_fading(fleet.n, self.cfg, self.rng)
        snap = ChannelSnapshot(slot, distance_m, self.v2v_state, g_rsu, self.cfg)
        self._cache = snap
        if self._trace is not None:
            g = 10 * np.log10(snap.v2v_gain)
            for i in range(fleet.n):
                for j in range(fleet.n):
                    if i != j:
                        self._trace.writerow([slot, i, j, f"{g[i, j]:.6f}"])
                self._trace.writerow([slot, i, "rsu", f"{10 * np.log10(g_rsu[i]):.6f}"])
        return snap

    def close(self) -> None:
        if self._trace is not None:
            self._trace_fh.close()
            self._trace = None
