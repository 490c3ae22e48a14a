"""Simulation configuration and deterministic random streams.

All quantities carry their unit in the field name (``_hz``, ``_s``, ``_w``,
``_db``, ...). Derived fields (slot duration, symbol duration, usable PRB
count) are filled from the numerology and bandwidth when left unset.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration files."""


@dataclass(frozen=True)
class SimConfig:
    # radio numerology
    carrier_freq_hz: float = 5.9e9
    bandwidth_hz: float = 10e6
    numerology_mu: int = 0
    scs_hz: float | None = None
    slot_s: float | None = None
    sym_s: float | None = None
    guard_prb: float = 3.5
    n_prb_pool: int | None = None
    n_sl_prb_per_vehicle: int = 12
    n_o_max_prb: int = 4
    tx_power_w: float = 0.1995
    noise_figure_db: float = 9.0
    temperature_k: float = 290.0
    rsrp_threshold_dbm: float = -128.0
    snr_decode_threshold_db: float = 8.0
    rho_si: float = 1e-7
    rcs_dbsm: float = 10.0
    antenna_gain_db: float = 3.0
    # propagation and mobility
    pathloss_exponent: float = 2.75
    shadowing_std_db: float = 3.0
    fading: bool = True
    max_speed_kmh: float = 70.0
    density_veh_per_km: float = 80.0
    road_length_m: float = 1000.0
    n_vehicles: int = 0  # 0: derived from density and road length
    n_lanes: int = 4
    lane_width_m: float = 4.0
    rsu_offset_m: float = 20.0
    # traffic
    packet_bytes: int = 190
    msg_rate_hz: float = 10.0
    awareness_range_m: float = 200.0
    prr_bin_m: float = 20.0
    prr_max_distance_m: float = 300.0
    prr_threshold: float = 0.8
    ema_coef: float = 0.1
    rate_floor_bps: float = 1.0
    delay_cap_s: float = 1.0
    # SB-SPS
    t_sen_ms: float = 1000.0
    t_sel_ms: float = 100.0
    rri_ms: float = 100.0
    cbr_window_slots: int = 100
    min_candidate_fraction: float = 0.2
    rsrp_step_db: float = 3.0
    keep_prob_set: tuple = (0.0, 0.2, 0.4, 0.6, 0.8)
    rc_set: tuple = (5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15)
    # computing
    f_local_hz: float = 2e9
    c_mec_cycles_per_slot: float = 2e7
    kappa_s_cycles_per_bit: float = 500.0
    kappa_c_cycles_per_bit: float = 100.0
    b_quant_bits: int = 8
    kappa_dvfs: float = 1e-28
    xi_c_bits_per_cycle: float = 0.01
    xi_s_bits_per_cycle: float = 0.002
    t_bh_s: float = 0.010
    t_cl_s: float = 0.002
    delta_c_s: float = 0.020
    delta_s_s: float = 0.050
    e_max_j_per_slot: float = 0.050
    # sensing
    gamma_det_s_db: float = 10.0
    r_sens_m: float = 150.0
    crlb_weights: tuple = (0.5, 0.5)
    ref_distance_m: float = 80.0
    # objective
    weights: tuple = (0.30, 0.35, 0.35)
    comm_utility_weights: tuple = (0.5, 0.5)
    comp_penalty_weights: tuple = (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)
    d_c_min_bits: float = 1520.0
    # learning
    episodes: int = 500
    steps: int = 40
    slots_per_epoch: int = 0  # 0: one RRI
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    grad_clip: float = 0.5
    ppo_epochs: int = 4
    actor_hidden: tuple = (256, 128, 64)
    critic_hidden: tuple = (512, 256, 128)
    share_actor: bool = False
    max_separate_actors: int = 32
    greedy_candidates: int = 64
    seed: int = 0

    def __post_init__(self):
        # Fill derived fields. frozen=True forces object.__setattr__.
        scs = self.scs_hz if self.scs_hz is not None else 15e3 * 2 ** self.numerology_mu
        slot = self.slot_s if self.slot_s is not None else 1e-3 * 2.0 ** (-self.numerology_mu)
        sym = self.sym_s if self.sym_s is not None else 1.0 / scs
        n_prb = self.n_prb_pool
        if n_prb is None:
            n_prb = int(math.floor(self.bandwidth_hz / (12 * scs) - self.guard_prb))
        object.__setattr__(self, "scs_hz", float(scs))
        object.__setattr__(self, "slot_s", float(slot))
        object.__setattr__(self, "sym_s", float(sym))
        object.__setattr__(self, "n_prb_pool", int(n_prb))
        for name in _TUPLE_FIELDS:
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "rc_set", tuple(int(v) for v in self.rc_set))
        object.__setattr__(self, "keep_prob_set", tuple(float(v) for v in self.keep_prob_set))
        _validate(self)

    # convenience views -------------------------------------------------
    @property
    def packet_bits(self) -> int:
        return 8 * int(self.packet_bytes)

    @property
    def min_rate_bps(self) -> float:
        return self.d_c_min_bits / self.slot_s

    @property
    def rri_slots(self) -> int:
        return int(round(self.rri_ms * 1e-3 / self.slot_s))

    @property
    def t_sen_slots(self) -> int:
        return int(round(self.t_sen_ms * 1e-3 / self.slot_s))

    @property
    def t_sel_slots(self) -> int:
        return int(round(self.t_sel_ms * 1e-3 / self.slot_s))

    @property
    def epoch_slots(self) -> int:
        return self.slots_per_epoch if self.slots_per_epoch > 0 else self.rri_slots

    @property
    def n_subchannels(self) -> int:
        return self.n_prb_pool // self.n_sl_prb_per_vehicle

    @property
    def n_resources(self) -> int:
        return self.rri_slots * self.n_subchannels

    @property
    def prb_bw_hz(self) -> float:
        return 12.0 * self.scs_hz

    @property
    def noise_psd_w_per_hz(self) -> float:
        return 1.380649e-23 * self.temperature_k * 10 ** (self.noise_figure_db / 10)

    @property
    def antenna_gain_lin(self) -> float:
        return 10 ** (self.antenna_gain_db / 10)

    @property
    def gamma_det_lin(self) -> float:
        return 10 ** (self.gamma_det_s_db / 10)

    @property
    def snr_threshold_lin(self) -> float:
        return 10 ** (self.snr_decode_threshold_db / 10)

    @property
    def wavelength_m(self) -> float:
        return 299792458.0 / self.carrier_freq_hz

    @property
    def max_speed_mps(self) -> float:
        return self.max_speed_kmh / 3.6

    def vehicle_count(self) -> int:
        """Number of vehicles on the ring implied by density and length."""
        if self.n_vehicles > 0:
            return int(self.n_vehicles)
        n = self.density_veh_per_km * self.road_length_m / 1000.0
        return int(round(n))

    def ring_length_m(self) -> float:
        if self.n_vehicles > 0:
            return 1000.0 * self.n_vehicles / self.density_veh_per_km
        return float(self.road_length_m)

    def replace(self, **changes) -> "SimConfig":
        # derived values are recomputed from the new inputs unless they were
        # set explicitly (i.e. differ from what the inputs would give)
        base = self.to_dict()
        auto = SimConfig(**{k: v for k, v in base.items() if k not in _DERIVED})
        for k in _DERIVED:
            if k not in changes and getattr(self, k) == getattr(auto, k):
                base.pop(k, None)
        base.update(changes)
        return SimConfig(**base)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


_TUPLE_FIELDS = ("keep_prob_set", "rc_set", "crlb_weights", "weights",
                 "comm_utility_weights", "comp_penalty_weights",
                 "actor_hidden", "critic_hidden")
_DERIVED = ("scs_hz", "slot_s", "sym_s", "n_prb_pool")
_POSITIVE = ("carrier_freq_hz", "bandwidth_hz", "scs_hz", "slot_s", "sym_s",
             "tx_power_w", "max_speed_kmh", "density_veh_per_km", "road_length_m",
             "t_sen_ms", "t_sel_ms", "rri_ms", "f_local_hz",
             "c_mec_cycles_per_slot", "kappa_s_cycles_per_bit",
             "kappa_c_cycles_per_bit", "kappa_dvfs", "xi_c_bits_per_cycle",
             "xi_s_bits_per_cycle", "t_bh_s", "t_cl_s", "delta_c_s", "delta_s_s",
             "e_max_j_per_slot", "r_sens_m", "temperature_k", "packet_bytes",
             "b_quant_bits", "awareness_range_m", "prr_bin_m", "d_c_min_bits",
             "rate_floor_bps", "delay_cap_s", "actor_lr", "critic_lr",
             "ref_distance_m", "lane_width_m")
_WEIGHT_TUPLES = {"weights": 3, "comm_utility_weights": 2,
                  "comp_penalty_weights": 3, "crlb_weights": 2}


def _validate(cfg: SimConfig) -> None:
    for name in _POSITIVE:
        v = getattr(cfg, name)
        if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
            raise ConfigError(f"{name} must be strictly positive, got {v!r}")
    if cfg.numerology_mu < 0:
        raise ConfigError("numerology_mu must be >= 0")
    if abs(cfg.slot_s - 1e-3 * 2.0 ** (-cfg.numerology_mu)) > 1e-15:
        raise ConfigError("slot_s must equal 2^-mu ms")
    if abs(cfg.sym_s * cfg.scs_hz - 1.0) > 1e-6:
        raise ConfigError("sym_s must equal 1/scs_hz")
    if cfg.n_prb_pool <= 0:
        raise ConfigError("n_prb_pool must be positive")
    if not 1 <= cfg.n_sl_prb_per_vehicle <= cfg.n_prb_pool:
        raise ConfigError("n_sl_prb_per_vehicle must lie in [1, n_prb_pool]")
    if cfg.n_o_max_prb < 0:
        raise ConfigError("n_o_max_prb must be >= 0")
    for name, n in _WEIGHT_TUPLES.items():
        w = getattr(cfg, name)
        if len(w) != n or any((not math.isfinite(x)) or x < 0 for x in w):
            raise ConfigError(f"{name} must hold {n} non-negative entries")
    if not math.isclose(sum(cfg.weights), 1.0, rel_tol=0, abs_tol=1e-9):
        raise ConfigError(f"weights must sum to 1, got {sum(cfg.weights)!r}")
    if sum(cfg.comm_utility_weights) <= 0:
        raise ConfigError("comm_utility_weights must have a positive sum")
    if not cfg.keep_prob_set or any(not 0 <= p < 1 for p in cfg.keep_prob_set):
        raise ConfigError("keep_prob_set entries must lie in [0, 1)")
    if not cfg.rc_set or min(cfg.rc_set) < 1:
        raise ConfigError("rc_set entries must be >= 1")
    if cfg.rri_slots < 1 or cfg.t_sen_slots % cfg.rri_slots != 0:
        raise ConfigError("t_sen_ms must be a multiple of rri_ms")
    if cfg.n_subchannels < 1:
        raise ConfigError("n_prb_pool must hold at least one subchannel")
    if cfg.n_vehicles < 0:
        raise ConfigError("n_vehicles must be >= 0")
    if cfg.n_lanes < 1:
        raise ConfigError("n_lanes must be >= 1")
    if cfg.steps < 1 or cfg.episodes < 1 or cfg.ppo_epochs < 1:
        raise ConfigError("steps, episodes and ppo_epochs must be >= 1")
    if not 0 < cfg.gamma <= 1 or not 0 <= cfg.gae_lambda <= 1:
        raise ConfigError("gamma must lie in (0,1] and gae_lambda in [0,1]")
    if cfg.clip_eps <= 0:
        raise ConfigError("clip_eps must be positive")
    if not 0 < cfg.prr_threshold <= 1:
        raise ConfigError("prr_threshold must lie in (0,1]")
    if not 0 < cfg.ema_coef <= 1:
        raise ConfigError("ema_coef must lie in (0,1]")
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    if not (math.isfinite(cfg.msg_rate_hz) and cfg.msg_rate_hz >= 0):
        raise ConfigError("msg_rate_hz must be >= 0")
    if cfg.msg_rate_hz * cfg.slot_s > 1:
        raise ConfigError("msg_rate_hz exceeds one packet per slot")


_FIELD_NAMES = {f.name for f in dataclasses.fields(SimConfig)}


def config_from_dict(data: dict) -> SimConfig:
    unknown = sorted(set(data) - _FIELD_NAMES)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    try:
        return SimConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | os.PathLike, env: dict | None = None) -> SimConfig:
    """Read a TOML (or JSON) config file, validate it and apply ISCC_SEED."""
    path = Path(path)
    env = os.environ if env is None else env
    text = path.read_bytes()
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(text.decode("utf-8"))
        else:
            data = tomllib.loads(text.decode("utf-8"))
    except (tomllib.TOMLDecodeError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a table")
    # allow a flat file or one with a single [sim] table
    if set(data) == {"sim"} and isinstance(data["sim"], dict):
        data = data["sim"]
    if env.get("ISCC_SEED"):
        try:
            data = dict(data, seed=int(env["ISCC_SEED"]))
        except ValueError as exc:
            raise ConfigError("ISCC_SEED must be an integer") from exc
    return config_from_dict(data)


def save_config(cfg: SimConfig, path: str | os.PathLike) -> None:
    path = Path(path)
    data = cfg.to_dict()
    if path.suffix.lower() == ".json":
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    else:
        path.write_text(tomli_w.dumps(data))


def config_hash(cfg: SimConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# random streams -----------------------------------------------------------

STREAM_NAMES = ("mobility", "fading", "traffic", "policy", "mac")


@dataclass(frozen=True)
class RngStreams:
    """Named, independently keyed Philox generators.

    A generator is identified by ``(seed, stream, entity)``; the entity may be
    an int or a tuple of ints (e.g. ``(episode, vehicle)``).
    """

    seed: int
    names: tuple = field(default=STREAM_NAMES)

    def stream(self, name: str, entity: Any = 0) -> np.random.Generator:
        return stream(self, name, entity)


def stream(rng: RngStreams, name: str, entity: Any = 0) -> np.random.Generator:
    if name not in rng.names:
        raise KeyError(f"unknown stream {name!r}; known: {', '.join(rng.names)}")
    ent = list(entity) if isinstance(entity, (tuple, list)) else [entity]
    words = [int(rng.seed), rng.names.index(name)] + [int(e) for e in ent]
    if any(w < 0 for w in words):
        raise ValueError("seed and entity ids must be non-negative")
    key = np.random.SeedSequence(words).generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
