"""Sidelink communication: arrivals, SINR, decode outcomes, queues and utility."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import SimConfig


@dataclass
class TxOutcome:
    receivers: np.ndarray
    sinr: np.ndarray
    decoded: np.ndarray
    prr: float
    rate_bps: float
    rate_eff_bps: float
    delivered_bits: float
    avg_sinr: float
    sl_delay_s: float = 0.0


@dataclass
class CommState:
    queue_bits: float = 0.0
    arrivals_bits: float = 0.0
    prr: float = 0.0
    rate_eff_bps: float = 0.0
    prr_ema: float = 0.0
    rate_eff_ema: float = 0.0
    cbr: float = 0.0
    avg_sinr_linear: float = 0.0


def arrivals(n: int, rng: np.random.Generator, cfg: SimConfig) -> np.ndarray:
    """Bernoulli packet arrivals for ``n`` vehicles in one slot (bits)."""
    p = cfg.msg_rate_hz * cfg.slot_s
    return (rng.random(n) < p) * float(cfg.packet_bits)


def noise_power_w(n_prb, cfg: SimConfig):
    return cfg.noise_psd_w_per_hz * cfg.prb_bw_hz * np.asarray(n_prb, dtype=float)


def sinr_matrix(tx_power_w, gains: np.ndarray, same_resource: np.ndarray, noise_w) -> np.ndarray:
    """SINR of each transmitter row at every receiver column.

    ``gains`` is (T, N) linear gain from transmitter t to receiver j;
    ``same_resource`` is (T, T) boolean, True where two transmitters share
    slot offset and subchannel (diagonal ignored); ``noise_w`` is (T,).
    """
    rx = np.asarray(tx_power_w, dtype=float).reshape(-1, 1) * gains
    co = same_resource.astype(float)
    np.fill_diagonal(co, 0.0)
    interf = co @ rx
    return rx / (interf + np.asarray(noise_w, dtype=float).reshape(-1, 1))


def shannon_rate(n_c_prb, avg_sinr, cfg: SimConfig):
    return cfg.prb_bw_hz * np.asarray(n_c_prb, dtype=float) * np.log2(1.0 + np.asarray(avg_sinr, dtype=float))


def sl_delay(queue_bits, rate_eff_bps, cfg: SimConfig):
    return np.minimum(np.asarray(queue_bits, dtype=float) / (np.asarray(rate_eff_bps, dtype=float)
                                                            + cfg.rate_floor_bps), cfg.delay_cap_s)


def tx_outcome(sinrs, n_c_prb: int, cfg: SimConfig, queue_bits: float = 0.0,
               receivers=None, nominal_sinr: float | None = None) -> TxOutcome:
    """Outcome of one transmission towards its intended receiver set.

    ``sinrs`` are linear SINRs at the receivers in the awareness range. An
    empty set counts as fully successful, with the rate evaluated at
    ``nominal_sinr`` (default: the decode threshold).
    """
    s = np.asarray(sinrs, dtype=float).ravel()
    rec = np.arange(s.size) if receivers is None else np.asarray(receivers)
    if s.size == 0:
        dec = np.zeros(0, dtype=bool)
        prr = 1.0
        gbar = cfg.snr_threshold_lin if nominal_sinr is None else float(nominal_sinr)
        rate = float(shannon_rate(n_c_prb, gbar, cfg))
        r_eff = rate
    else:
        dec = s >= cfg.snr_threshold_lin
        prr = float(dec.mean())
        gbar = float(s.mean())
        rate = float(shannon_rate(n_c_prb, gbar, cfg))
        r_eff = rate * prr
    delivered = cfg.slot_s * r_eff
    return TxOutcome(rec, s, dec, prr, rate, r_eff, delivered, gbar,
                     float(sl_delay(queue_bits, r_eff, cfg)))


def update_queue(queue_bits, delivered_bits, arrivals_bits):
    """Serve whole bits up to the delivered capacity, then add arrivals.

    Returns (new_queue, served)."""
    q = np.asarray(queue_bits, dtype=float)
    served = np.minimum(q, np.floor(np.asarray(delivered_bits, dtype=float)))
    new_q = np.maximum(q - served, 0.0) + np.asarray(arrivals_bits, dtype=float)
    if new_q.ndim == 0:
        return float(new_q), float(served)
    return new_q, served


def comm_utility(prr, rate_eff_bps, cfg: SimConfig):
    """Return (utility, normalised deficiency in [0, 1])."""
    a_prr, a_rate = cfg.comm_utility_weights
    u = a_prr * np.asarray(prr, dtype=float) + a_rate * np.minimum(
        np.asarray(rate_eff_bps, dtype=float) / cfg.min_rate_bps, 1.0)
    phi = np.clip(1.0 - u / (a_prr + a_rate), 0.0, 1.0)
    if np.ndim(u) == 0:
        return float(u), float(phi)
    return u, phi


INFEASIBLE = -1


def min_prb_demand(prr: float, avg_sinr: float, cfg: SimConfig, d_min_bits: float | None = None) -> int:
    """Smallest PRB count whose expected delivered bits cover ``d_min_bits``.

    Returns ``INFEASIBLE`` when the observed PRR or average SINR is zero.
    """
    d = cfg.d_c_min_bits if d_min_bits is None else d_min_bits
    if d <= 0:
        return 0
    if prr <= 0 or avg_sinr <= 0:
        return INFEASIBLE
    per_prb = cfg.slot_s * prr * cfg.prb_bw_hz * math.log2(1.0 + avg_sinr)
    return int(math.ceil(d / per_prb - 1e-12))


def max_reliable_distance(prr_by_distance: dict, threshold: float) -> float:
    if not prr_by_distance:
        raise ValueError("empty PRR-vs-distance table")
    ok = [d for d, p in prr_by_distance.items() if p is not None and np.isfinite(p) and p >= threshold]
    return float(max(ok)) if ok else 0.0


class DistanceBins:
    """Decode counters in bins of width ``w`` centred on multiples of ``w``."""

    def __init__(self, cfg: SimConfig):
        self.w = cfg.prr_bin_m
        self.nb = int(round(cfg.prr_max_distance_m / self.w)) + 1
        self.success = np.zeros(self.nb)
        self.total = np.zeros(self.nb)

    def add(self, dist, decoded) -> None:
        b = np.floor(np.asarray(dist) / self.w + 0.5).astype(int)
        keep = b < self.nb
        np.add.at(self.total, b[keep], 1.0)
        np.add.at(self.success, b[keep], np.asarray(decoded, dtype=float)[keep])

    def midpoints(self) -> np.ndarray:
        return np.arange(self.nb) * self.w

    def prr(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.total > 0, self.success / np.maximum(self.total, 1), np.nan)

    def table(self) -> dict:
        p = self.prr()
        return {float(d): float(v) for d, v in zip(self.midpoints(), p) if np.isfinite(v)}
