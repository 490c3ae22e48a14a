"""Sensing-centric (SCG) and computation-centric (CCG) greedy baselines.

Each vehicle scores K head-wise uniform feasible actions plus one corner
action with a one-epoch surrogate of its own cost, holding everything else
at the last observed state, and keeps the best one.
"""
from __future__ import annotations

import numpy as np

from .. import comm, compute, mac, sensing
from ..config import SimConfig
from ..env import ActionVector, IsccEnv

H_IDX = {h: k for k, h in enumerate(mac.HEADS)}


class LookaheadModel:
    """Per-vehicle surrogate predictor built from a snapshot of the env."""

    def __init__(self, env: IsccEnv):
        self.cfg = env.cfg
        self.n = env.n
        self.snap = env.lookahead()
        self.mec_que_c = env.mec.que_delay_c
        self.mec_que_s = env.mec.que_delay_s

    def n_c_min(self, i: int) -> int:
        cfg = self.cfg
        k = comm.min_prb_demand(self.snap["prr"][i], self.snap["gbar"][i], cfg)
        if k == comm.INFEASIBLE:
            k = comm.min_prb_demand(1.0, cfg.snr_threshold_lin, cfg)
        return int(min(max(k, 0), cfg.n_sl_prb_per_vehicle - 2))

    def sensing_cost(self, i: int, acts: np.ndarray) -> np.ndarray:
        """Predicted normalised sensing penalty summed over the epoch."""
        K = acts.shape[0]
        fs = sensing.FleetSensing(self.cfg, acts[:, H_IDX["n_s"]], acts[:, H_IDX["m_s"]] + 1)
        d = np.broadcast_to(self.snap["dist"][i], (K, self.n)).copy()
        _, norm, _ = fs.penalties(d, self_col=np.full(K, i))
        return norm * self.cfg.epoch_slots

    def compute_terms(self, i: int, acts: np.ndarray) -> dict:
        cfg = self.cfg
        n_s = acts[:, H_IDX["n_s"]]
        m_s = acts[:, H_IDX["m_s"]] + 1
        n_o = acts[:, H_IDX["n_o"]]
        eta_c = acts[:, H_IDX["eta_c"]]
        eta_s = acts[:, H_IDX["eta_s"]]
        v_c = cfg.kappa_c_cycles_per_bit * cfg.msg_rate_hz * cfg.slot_s * cfg.packet_bits
        v_s = (sensing.sensing_data_bits(n_s, m_s, cfg) * int(cfg.kappa_s_cycles_per_bit)).astype(float)
        loc = compute.local_schedule(np.full(v_s.shape, v_c), v_s, cfg)
        d_c = np.where(eta_c == 1, np.ceil(cfg.xi_c_bits_per_cycle * loc.ov_c), 0.0)
        d_s = np.where(eta_s > 0, np.ceil(cfg.xi_s_bits_per_cycle * loc.ov_s), 0.0)
        g = self.snap["g_rsu_mean"]
        others = self.snap["n_offloaders"] - int(self.snap["offload_backlog"][i] > 0)
        g_oth = np.mean(np.delete(g, i)) if self.n > 1 else 0.0
        b_off = cfg.prb_bw_hz * n_o
        p = cfg.tx_power_w
        with np.errstate(divide="ignore", invalid="ignore"):
            sinr = np.where(n_o > 0, p * g[i] / (max(others, 0) * p * g_oth + cfg.noise_psd_w_per_hz * b_off), 0.0)
            rate = b_off * np.log2(1.0 + sinr)
            ahead = self.snap["offload_backlog"][i]
            cap = cfg.delay_cap_s
            t_tx_c = np.where(d_c > 0, np.where(rate > 0, (ahead + d_c) / rate, cap), 0.0)
            t_tx_s = np.where(d_s > 0, np.where(rate > 0, (ahead + d_c + d_s) / rate, cap), 0.0)
            busy = np.where(rate > 0, np.minimum((d_c + d_s) / rate, cfg.slot_s), 0.0)
        t_tx_c = np.minimum(t_tx_c, cap)
        t_tx_s = np.minimum(t_tx_s, cap)
        mec = compute.MecState(que_delay_c=self.mec_que_c, que_delay_s=self.mec_que_s)
        t_rem_c, t_rem_s = compute.remote_delays(eta_c, eta_s, t_tx_c, t_tx_s,
                                                 np.where(d_c > 0, loc.ov_c, 0.0),
                                                 np.where(d_s > 0, loc.ov_s, 0.0), mec, cfg)
        t_rem_c = np.where(d_c > 0, t_rem_c, 0.0)
        t_rem_s = np.where(d_s > 0, t_rem_s, 0.0)
        e_sens = compute.sensing_energy(m_s, n_s, cfg)
        e_tot = loc.e_loc + p * busy + e_sens
        t_comp_c = np.maximum(loc.t_loc_c, t_rem_c)
        t_comp_s = np.maximum(loc.t_loc_s, t_rem_s)
        psi = compute.comp_penalty(t_comp_c, t_comp_s, e_tot, cfg)
        return {"psi": np.asarray(psi) * cfg.epoch_slots, "delay": t_comp_c + t_comp_s}

    def compute_cost(self, i: int, acts: np.ndarray) -> np.ndarray:
        return self.compute_terms(i, acts)["psi"]


def _admissible(mask_row: np.ndarray, lo: int = 0, hi: int | None = None) -> np.ndarray:
    idx = np.flatnonzero(mask_row)
    hi = mask_row.size - 1 if hi is None else hi
    return idx[(idx >= lo) & (idx <= hi)]


def sample_candidates(mask: mac.ActionMask, n_c_min: int, k: int, rng: np.random.Generator,
                      cfg: SimConfig) -> np.ndarray:
    """K head-wise uniform actions with N_s >= 2, M_s >= 2 and N_c >= n_c_min."""
    n_sl = cfg.n_sl_prb_per_vehicle
    out = np.zeros((k, len(mac.HEADS)), dtype=np.int64)
    for h in mac.HEADS:
        if h == "n_c":
            n_s = out[:, H_IDX["n_s"]]
            col = np.zeros(k, dtype=np.int64)
            u = rng.random(k)
            for v in np.unique(n_s):
                adm = _admissible(mask.n_c_mask(int(v)), n_c_min)
                sel = n_s == v
                col[sel] = adm[np.minimum((u[sel] * adm.size).astype(int), adm.size - 1)]
            out[:, H_IDX[h]] = col
            continue
        if h == "n_s":
            adm = _admissible(mask.heads[h], 2, n_sl - n_c_min)
        elif h == "m_s":
            adm = _admissible(mask.heads[h], 1)
        else:
            adm = _admissible(mask.heads[h])
        out[:, H_IDX[h]] = adm[rng.integers(adm.size, size=k)]
    return out


def _mac_heads(mask: mac.ActionMask, rng: np.random.Generator) -> dict:
    out = {}
    for h in mac.MAC_HEADS:
        adm = _admissible(mask.heads[h])
        out[h] = int(adm[rng.integers(adm.size)])
    return out


def scg_corner(mask, n_c_min: int, rng, cfg: SimConfig) -> np.ndarray:
    a = _mac_heads(mask, rng)
    a.update(n_s=cfg.n_sl_prb_per_vehicle - n_c_min, n_c=n_c_min, n_o=cfg.n_o_max_prb,
             m_s=13, eta_c=1, eta_s=1)
    return np.array([a[h] for h in mac.HEADS], dtype=np.int64)


def ccg_corner(mask, n_c_min: int, rng, cfg: SimConfig, model: LookaheadModel | None = None,
               vehicle: int = 0) -> np.ndarray:
    a = _mac_heads(mask, rng)
    a.update(n_s=2, n_c=n_c_min, n_o=cfg.n_o_max_prb, m_s=1, eta_c=0, eta_s=0)
    base = np.array([a[h] for h in mac.HEADS], dtype=np.int64)
    if model is None:
        return base
    combos = [(ec, es) for ec in (0, 1) for es in (0, 1, 2)]
    cand = np.repeat(base[None], len(combos), axis=0)
    cand[:, H_IDX["eta_c"]] = [c[0] for c in combos]
    cand[:, H_IDX["eta_s"]] = [c[1] for c in combos]
    delay = model.compute_terms(vehicle, cand)["delay"]
    return cand[int(np.argmin(delay))]


def select_scg(cands: np.ndarray, eps: np.ndarray) -> int:
    """Index of the smallest sensing cost; ties go to larger N_s, then
    larger M_s, then pool order."""
    order = np.lexsort((np.arange(len(eps)), -cands[:, H_IDX["m_s"]], -cands[:, H_IDX["n_s"]], eps))
    return int(order[0])


def select_ccg(cands: np.ndarray, psi: np.ndarray) -> int:
    """Index of the smallest compute cost; ties go to smaller M_s, then pool order."""
    order = np.lexsort((np.arange(len(psi)), cands[:, H_IDX["m_s"]], psi))
    return int(order[0])


def greedy_scg(vehicle: int, mask: mac.ActionMask, model: LookaheadModel, rng: np.random.Generator,
               k: int | None = None) -> ActionVector:
    cfg = model.cfg
    ncm = model.n_c_min(vehicle)
    k = cfg.greedy_candidates if k is None else k
    cands = np.vstack([scg_corner(mask, ncm, rng, cfg)[None], sample_candidates(mask, ncm, k, rng, cfg)])
    eps = model.sensing_cost(vehicle, cands)
    return ActionVector.from_array(cands[select_scg(cands, eps)])


def greedy_ccg(vehicle: int, mask: mac.ActionMask, model: LookaheadModel, rng: np.random.Generator,
               k: int | None = None) -> ActionVector:
    cfg = model.cfg
    ncm = model.n_c_min(vehicle)
    k = cfg.greedy_candidates if k is None else k
    corner = ccg_corner(mask, ncm, rng, cfg, model, vehicle)
    cands = np.vstack([corner[None], sample_candidates(mask, ncm, k, rng, cfg)])
    psi = model.compute_cost(vehicle, cands)
    return ActionVector.from_array(cands[select_ccg(cands, psi)])


class GreedyPolicy:
    def __init__(self, kind: str, rng: np.random.Generator):
        if kind not in ("scg", "ccg"):
            raise ValueError(f"unknown greedy policy {kind!r}")
        self.kind = kind
        self.rng = rng

    def act(self, env: IsccEnv, obs_raw=None) -> list:
        model = LookaheadModel(env)
        fn = greedy_scg if self.kind == "scg" else greedy_ccg
        return [fn(i, m, model, self.rng) for i, m in enumerate(env.masks)]
