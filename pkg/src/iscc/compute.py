"""Local CPU scheduling, V2I offloading, MEC strict-priority queues, cloud
path, completion delays and vehicle energy.

All functions are vectorised over vehicles. Workloads are CPU cycles, payloads
bits; both are kept integer-valued so queue bookkeeping is exact.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import SimConfig


@dataclass
class LocalComputeState:
    v_c: np.ndarray
    v_s: np.ndarray
    f_c: np.ndarray
    f_s: np.ndarray
    ov_c: np.ndarray
    ov_s: np.ndarray
    t_loc_c: np.ndarray
    t_loc_s: np.ndarray
    e_loc: np.ndarray


@dataclass
class MecState:
    l_c: float = 0.0
    l_s: float = 0.0
    served_c: float = 0.0
    served_s: float = 0.0
    arrived_c: float = 0.0
    arrived_s: float = 0.0
    que_delay_c: float = 0.0
    que_delay_s: float = 0.0


@dataclass
class OffloadOutcome:
    d_off_c: np.ndarray
    d_off_s: np.ndarray
    sinr: np.ndarray
    rate_bps: np.ndarray
    t_tx_c: np.ndarray
    t_tx_s: np.ndarray
    e_tx_c: np.ndarray
    e_tx_s: np.ndarray
    t_rem_c: np.ndarray
    t_rem_s: np.ndarray
    t_comp_c: np.ndarray
    t_comp_s: np.ndarray
    t_e2e_c: np.ndarray
    e_sens: np.ndarray
    e_tot: np.ndarray
    psi_comp: np.ndarray


def local_schedule(v_c, v_s, cfg: SimConfig, f_max=None) -> LocalComputeState:
    """Communication-priority split of the per-slot CPU budget."""
    v_c = np.asarray(v_c, dtype=float)
    v_s = np.asarray(v_s, dtype=float)
    F = cfg.f_local_hz if f_max is None else f_max
    cap = F * cfg.slot_s
    f_c = np.minimum(v_c, cap)
    f_s = np.minimum(v_s, np.maximum(cap - f_c, 0.0))
    ov_c = np.maximum(v_c - f_c, 0.0)
    ov_s = np.maximum(v_s - f_s, 0.0)
    v_loc = f_c + f_s
    e_loc = cfg.kappa_dvfs * v_loc * (v_loc / cfg.slot_s) ** 2
    return LocalComputeState(v_c, v_s, f_c, f_s, ov_c, ov_s, f_c / F, v_loc / F, e_loc)


def offload_sinr(active, g_rsu, n_o, cfg: SimConfig, p_off=None):
    """Uplink SINR and rate with interference from all simultaneous offloaders."""
    active = np.asarray(active, dtype=bool)
    p = cfg.tx_power_w if p_off is None else p_off
    rx = np.where(active, p * np.asarray(g_rsu, dtype=float), 0.0)
    b_off = cfg.prb_bw_hz * np.asarray(n_o, dtype=float)
    interf = rx.sum() - rx
    noise = cfg.noise_psd_w_per_hz * b_off
    with np.errstate(divide="ignore", invalid="ignore"):
        sinr = np.where(active & (b_off > 0), rx / (interf + noise), 0.0)
    rate = b_off * np.log2(1.0 + sinr)
    rate = np.where(active, rate, 0.0)
    return sinr, rate


class OffloadBuffers:
    """Vehicle-side uplink backlog per destination class (bits).

    Columns: 0 communication overflow to MEC, 1 sensing overflow to MEC,
    2 sensing overflow to the cloud. Communication is sent first; within a
    class bits leave in arrival order.
    """

    def __init__(self, n: int):
        self.bits = np.zeros((n, 3))

    def total(self) -> np.ndarray:
        return self.bits.sum(axis=1)

    def push(self, d_c, d_s_mec, d_s_cloud) -> None:
        self.bits[:, 0] += d_c
        self.bits[:, 1] += d_s_mec
        self.bits[:, 2] += d_s_cloud

    def drain(self, capacity_bits) -> np.ndarray:
        """Remove up to ``capacity_bits`` per vehicle; returns sent (n, 3)."""
        cap = np.floor(np.asarray(capacity_bits, dtype=float))
        sent = np.zeros_like(self.bits)
        for k in range(3):
            s = np.minimum(self.bits[:, k], cap)
            sent[:, k] = s
            cap = cap - s
        self.bits -= sent
        return sent


def step_mec(mec: MecState, arrive_c: float, arrive_s: float, cfg: SimConfig) -> MecState:
    """Strict-priority service of the current backlog, then enqueue arrivals.

    Queueing delays are evaluated on the updated backlog.
    """
    C = cfg.c_mec_cycles_per_slot
    sc = min(mec.l_c, C)
    ss = min(mec.l_s, max(C - sc, 0.0))
    lc = max(mec.l_c - sc, 0.0) + arrive_c
    ls = max(mec.l_s - ss, 0.0) + arrive_s
    T = cfg.slot_s
    return MecState(lc, ls, sc, ss, arrive_c, arrive_s, lc * T / C, (lc + ls) * T / C)


def remote_delays(eta_c, eta_s, t_tx_c, t_tx_s, ov_c, ov_s, mec: MecState, cfg: SimConfig):
    eta_c = np.asarray(eta_c)
    eta_s = np.asarray(eta_s)
    T, C = cfg.slot_s, cfg.c_mec_cycles_per_slot
    edge_c = mec.que_delay_c + np.asarray(ov_c) * T / C
    edge_s = mec.que_delay_s + np.asarray(ov_s) * T / C
    t_rem_c = np.where(eta_c == 1, t_tx_c + edge_c, 0.0)
    t_rem_s = np.where(eta_s == 1, t_tx_s + edge_s,
                       np.where(eta_s == 2, t_tx_s + cfg.t_bh_s + cfg.t_cl_s, 0.0))
    return t_rem_c, t_rem_s


def sensing_energy(m_s, n_s, cfg: SimConfig, p_sens=None):
    p = cfg.tx_power_w if p_sens is None else p_sens
    return np.where(np.asarray(n_s) > 0, p * np.asarray(m_s, dtype=float) * cfg.sym_s, 0.0)


def comp_penalty(t_comp_c, t_comp_s, e_tot, cfg: SimConfig):
    a_dc, a_ds, a_e = cfg.comp_penalty_weights
    out = (a_dc * np.minimum(np.asarray(t_comp_c) / cfg.delta_c_s, 1.0)
           + a_ds * np.minimum(np.asarray(t_comp_s) / cfg.delta_s_s, 1.0)
           + a_e * np.minimum(np.asarray(e_tot) / cfg.e_max_j_per_slot, 1.0))
    return float(out) if np.ndim(out) == 0 else out


def completion(local: LocalComputeState, t_rem_c, t_rem_s, e_tx_c, e_tx_s, e_sens,
               t_sl, cfg: SimConfig, d_off_c=None, d_off_s=None, sinr=None, rate=None,
               t_tx_c=None, t_tx_s=None) -> OffloadOutcome:
    t_comp_c = np.maximum(local.t_loc_c, t_rem_c)
    t_comp_s = np.maximum(local.t_loc_s, t_rem_s)
    e_tot = local.e_loc + e_tx_c + e_tx_s + e_sens
    psi = comp_penalty(t_comp_c, t_comp_s, e_tot, cfg)
    z = np.zeros_like(t_comp_c)
    return OffloadOutcome(
        z if d_off_c is None else d_off_c, z if d_off_s is None else d_off_s,
        z if sinr is None else sinr, z if rate is None else rate,
        z if t_tx_c is None else t_tx_c, z if t_tx_s is None else t_tx_s,
        np.asarray(e_tx_c, dtype=float) + z, np.asarray(e_tx_s, dtype=float) + z,
        np.asarray(t_rem_c, dtype=float) + z, np.asarray(t_rem_s, dtype=float) + z,
        t_comp_c, t_comp_s, np.asarray(t_sl) + t_comp_c, np.asarray(e_sens, dtype=float) + z,
        e_tot, np.asarray(psi, dtype=float) + z)


def offload_slot(buffers: OffloadBuffers, local: LocalComputeState, eta_c, eta_s, n_o,
                 g_rsu, cfg: SimConfig):
    """Form this slot's overflow payloads, push them to the uplink buffers and
    transmit for one slot.

    Returns a dict with payloads, SINR/rate, per-class uplink delays and
    energies, the bits sent per class and the MEC arrivals in cycles.
    Overflow whose routing decision is local (eta == 0) is not uploaded.
    """
    eta_c = np.asarray(eta_c)
    eta_s = np.asarray(eta_s)
    d_c = np.where(eta_c == 1, np.ceil(cfg.xi_c_bits_per_cycle * local.ov_c - 1e-9), 0.0)
    d_s = np.where(eta_s > 0, np.ceil(cfg.xi_s_bits_per_cycle * local.ov_s - 1e-9), 0.0)
    d_c = np.maximum(d_c, 0.0)
    d_s = np.maximum(d_s, 0.0)
    if not (d_c.any() or d_s.any() or buffers.bits.any()):
        z = np.zeros(d_c.shape)
        return dict(d_off_c=d_c, d_off_s=d_s, sinr=z, rate=z, t_tx_c=z, t_tx_s=z, e_tx_c=z,
                    e_tx_s=z, sent=np.zeros((d_c.size, 3)), mec_arrive_c=0.0, mec_arrive_s=0.0,
                    active=np.zeros(d_c.shape, dtype=bool))
    ahead_c = buffers.bits[:, 0].copy()
    ahead_s = buffers.bits.sum(axis=1)
    buffers.push(d_c, np.where(eta_s == 1, d_s, 0.0), np.where(eta_s == 2, d_s, 0.0))
    active = (np.asarray(n_o) > 0) & (buffers.total() > 0)
    sinr, rate = offload_sinr(active, g_rsu, n_o, cfg)
    cap = cfg.delay_cap_s
    with np.errstate(divide="ignore", invalid="ignore"):
        t_tx_c = np.where(d_c > 0, np.where(rate > 0, (ahead_c + d_c) / rate, cap), 0.0)
        t_tx_s = np.where(d_s > 0, np.where(rate > 0, (ahead_s + d_c + d_s) / rate, cap), 0.0)
    t_tx_c = np.minimum(t_tx_c, cap)
    t_tx_s = np.minimum(t_tx_s, cap)
    sent = buffers.drain(rate * cfg.slot_s)
    tot = sent.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        busy = np.where(rate > 0, tot / rate, 0.0)
        e_radio = cfg.tx_power_w * busy
        e_tx_c = np.where(tot > 0, e_radio * sent[:, 0] / np.maximum(tot, 1.0), 0.0)
    e_tx_s = e_radio - e_tx_c
    arr_c = float(np.rint(sent[:, 0].sum() / cfg.xi_c_bits_per_cycle))
    arr_s = float(np.rint(sent[:, 1].sum() / cfg.xi_s_bits_per_cycle))
    return dict(d_off_c=d_c, d_off_s=d_s, sinr=sinr, rate=rate, t_tx_c=t_tx_c, t_tx_s=t_tx_s,
                e_tx_c=e_tx_c, e_tx_s=e_tx_s, sent=sent, mec_arrive_c=arr_c, mec_arrive_s=arr_s,
                active=active)
