"""Mode-2 sensing-based semi-persistent scheduling (SB-SPS).

Resources are (slot offset within the RRI, subchannel) pairs flattened to
``offset * n_subchannels + subchannel``. Each vehicle keeps a sliding window
of per-slot observations (RSRP per subchannel, decoded SCIs, busy PRBs) from
which it forms candidate sets and its channel busy ratio.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .config import SimConfig

HEADS = ("resource", "rc", "keep", "n_s", "n_c", "n_o", "m_s", "eta_c", "eta_s")
MAC_HEADS = ("resource", "rc", "keep")
CROSS_HEADS = ("n_s", "n_c", "n_o", "m_s", "eta_c", "eta_s")


def head_sizes(cfg: SimConfig) -> dict:
    return {
        "resource": cfg.n_resources,
        "rc": len(cfg.rc_set),
        "keep": len(cfg.keep_prob_set),
        "n_s": cfg.n_sl_prb_per_vehicle + 1,
        "n_c": cfg.n_sl_prb_per_vehicle + 1,
        "n_o": cfg.n_o_max_prb + 1,
        "m_s": 14,
        "eta_c": 2,
        "eta_s": 3,
    }


def resource_index(offset, subch, cfg: SimConfig):
    return np.asarray(offset) * cfg.n_subchannels + np.asarray(subch)


def resource_offset_subch(index, cfg: SimConfig):
    idx = np.asarray(index)
    return idx // cfg.n_subchannels, idx % cfg.n_subchannels


@dataclass(frozen=True)
class Reservation:
    resource: int
    rc_remaining: int
    keep_prob: float
    rri_ms: float = 100.0


class ResourceGrid:
    """Sensing-window history for ``n_obs`` observers.

    The ring buffer holds exactly one sensing window (T_sen slots). Slots
    whose index is older than the window are ignored even if not yet
    overwritten, so eviction does not depend on record cadence.
    """

    def __init__(self, cfg: SimConfig, n_obs: int = 1):
        self.cfg = cfg
        self.n_obs = n_obs
        self.win = cfg.t_sen_slots
        self.rri = cfg.rri_slots
        self.n_sub = cfg.n_subchannels
        self.rsrp_dbm = np.full((n_obs, self.win, self.n_sub), -np.inf)
        self.sci = np.zeros((n_obs, self.win, self.n_sub), dtype=bool)
        self.busy_prb = np.zeros((n_obs, self.win, self.n_sub), dtype=np.int16)
        self.busy_tot = np.zeros((n_obs, self.win), dtype=np.int64)
        self.measured = np.zeros((n_obs, self.win), dtype=bool)
        self.slot_of = np.full(self.win, -1, dtype=np.int64)
        self.last_slot = -1

    def record_observation(self, slot: int, decoded_sci=None, rsrp_dbm=None,
                           occupied_prb=None, blind=None) -> None:
        """Store one slot. Arrays are (n_obs, n_subchannels); ``blind`` is
        (n_obs,) and marks observers that transmitted in this slot."""
        if slot <= self.last_slot:
            raise ValueError(f"out-of-order slot {slot} after {self.last_slot}")
        pos = slot % self.win
        self.slot_of[pos] = slot
        self.last_slot = slot
        if rsrp_dbm is None:
            if decoded_sci is not None:
                raise ValueError("decoded SCIs need the matching RSRP measurements")
            self.rsrp_dbm[:, pos, :] = -np.inf
            self.sci[:, pos, :] = False
            self.busy_prb[:, pos, :] = 0
            self.busy_tot[:, pos] = 0
            self.measured[:, pos] = True if blind is None else ~np.asarray(blind)
            return
        rsrp = np.asarray(rsrp_dbm, dtype=float).reshape(self.n_obs, self.n_sub)
        sci = (np.zeros_like(rsrp, dtype=bool) if decoded_sci is None
               else np.asarray(decoded_sci, dtype=bool).reshape(self.n_obs, self.n_sub))
        busy = rsrp > self.cfg.rsrp_threshold_dbm
        if occupied_prb is None:
            prb = np.where(busy, self.cfg.n_sl_prb_per_vehicle, 0)
        else:
            prb = np.where(busy, np.asarray(occupied_prb).reshape(self.n_obs, self.n_sub), 0)
        meas = np.ones(self.n_obs, dtype=bool) if blind is None else ~np.asarray(blind, dtype=bool)
        self.rsrp_dbm[:, pos, :] = np.where(meas[:, None], rsrp, -np.inf)
        self.sci[:, pos, :] = sci & meas[:, None]
        self.busy_prb[:, pos, :] = np.where(meas[:, None], prb, 0)
        self.busy_tot[:, pos] = self.busy_prb[:, pos, :].sum(axis=1)
        self.measured[:, pos] = meas

    def _valid_positions(self, now: int, span: int) -> np.ndarray:
        age = now - self.slot_of
        return (self.slot_of >= 0) & (age >= 0) & (age < span)

    def latest_by_resource(self, obs: int, now: int):
        """Latest measured RSRP per (offset, subchannel) inside the window and
        whether a SCI was decoded there within the last selection span."""
        nper = self.win // self.rri
        valid = self._valid_positions(now, self.win) & self.measured[obs]
        slots = np.where(valid, self.slot_of, -1).reshape(nper, self.rri)
        best = np.argmax(slots, axis=0)  # most recent period per offset
        have = slots[best, np.arange(self.rri)] >= 0
        rs = self.rsrp_dbm[obs].reshape(nper, self.rri, self.n_sub)[best, np.arange(self.rri)]
        rs = np.where(have[:, None], rs, -np.inf)
        recent = self._valid_positions(now, self.cfg.t_sel_slots) & self.measured[obs]
        hit = self.sci[obs] & recent[:, None]
        sci_rsrp = np.where(hit, self.rsrp_dbm[obs], -np.inf).reshape(nper, self.rri, self.n_sub).max(axis=0)
        return rs, sci_rsrp

    def candidate_set(self, obs: int = 0, now: int | None = None) -> np.ndarray:
        now = self.last_slot if now is None else now
        rs, sci_rsrp = self.latest_by_resource(obs, now)
        total = self.rri * self.n_sub
        need = int(np.ceil(self.cfg.min_candidate_fraction * total))
        thr = self.cfg.rsrp_threshold_dbm
        while True:
            # measured power above threshold, or a reservation announced by a
            # decoded SCI whose RSRP exceeds the threshold
            excl = (rs > thr) | (sci_rsrp > thr)
            cand = np.flatnonzero(~excl.ravel())
            if cand.size >= need:
                return cand
            thr += self.cfg.rsrp_step_db

    def cbr(self, obs=None, now: int | None = None):
        """Busy PRB fraction over the measured slots of the last
        ``cbr_window_slots`` slots."""
        now = self.last_slot if now is None else now
        valid = self._valid_positions(now, self.cfg.cbr_window_slots)
        idx = np.flatnonzero(valid)
        obs_idx = np.arange(self.n_obs) if obs is None else np.atleast_1d(obs)
        if idx.size == 0:
            out = np.zeros(obs_idx.size)
        else:
            if obs is None:
                busy = self.busy_tot[:, idx].sum(axis=1)
                n_meas = self.measured[:, idx].sum(axis=1)
            else:
                busy = self.busy_tot[np.ix_(obs_idx, idx)].sum(axis=1)
                n_meas = self.measured[np.ix_(obs_idx, idx)].sum(axis=1)
            out = np.where(n_meas > 0, busy / (np.maximum(n_meas, 1) * self.cfg.n_prb_pool), 0.0)
        return out if obs is None or np.ndim(obs) else float(out[0])


def cbr_from_counts(busy_prbs: int, n_slots: int, n_prb_pool: int) -> float:
    return busy_prbs / (n_slots * n_prb_pool)


def own_resource_busy(grid: ResourceGrid, obs: int, resource: int, now: int) -> bool:
    """Re-evaluation trigger: a decoded SCI from another vehicle was seen on
    our reserved resource in the latest measured period."""
    _, sci_rsrp = grid.latest_by_resource(obs, now)
    off, sub = resource_offset_subch(resource, grid.cfg)
    return bool(np.isfinite(sci_rsrp[off, sub]))


def tick_reservation(res: Reservation, rng: np.random.Generator, cfg: SimConfig):
    """Advance one reservation period. Returns (event, reservation)."""
    rc = res.rc_remaining - 1
    if rc > 0:
        return "none", replace(res, rc_remaining=rc)
    u = rng.random()
    if u < res.keep_prob:
        new_rc = int(rng.choice(cfg.rc_set))
        return "keep", replace(res, rc_remaining=new_rc)
    return "reselect", replace(res, rc_remaining=0)


# action masks -----------------------------------------------------------------

@dataclass
class ActionMask:
    """Per-head boolean masks plus the coupling N_s + N_c <= N_sl.

    ``frozen`` heads have exactly one admissible value carried over from the
    previous epoch; they are excluded from the policy log-probability.
    """

    heads: dict
    frozen: dict
    n_sl: int

    def n_c_mask(self, n_s: int) -> np.ndarray:
        m = self.heads["n_c"].copy()
        m[self.n_sl - n_s + 1:] = False
        return m

    def admits(self, action: dict) -> bool:
        for h in HEADS:
            v = int(action[h])
            if not 0 <= v < self.heads[h].size or not self.heads[h][v]:
                return False
        return action["n_s"] + action["n_c"] <= self.n_sl


def build_mask(cfg: SimConfig, cand_set, reselect: bool, current: dict | None = None,
               n_s_min: int = 0) -> ActionMask:
    """Feasible action domain for one vehicle.

    When no reselection is pending the MAC heads are frozen to ``current``
    (indices into the resource, rc and keep heads).
    """
    sizes = head_sizes(cfg)
    heads = {h: np.ones(n, dtype=bool) for h, n in sizes.items()}
    frozen = {h: False for h in HEADS}
    if reselect:
        r = np.zeros(sizes["resource"], dtype=bool)
        r[np.asarray(cand_set, dtype=int)] = True
        heads["resource"] = r
    else:
        if current is None:
            raise ValueError("current reservation required when not reselecting")
        for h in MAC_HEADS:
            m = np.zeros(sizes[h], dtype=bool)
            m[int(current[h])] = True
            heads[h] = m
            frozen[h] = True
    if n_s_min:
        heads["n_s"][:n_s_min] = False
    return ActionMask(heads, frozen, cfg.n_sl_prb_per_vehicle)


def feasible_by_constraints(action: dict, cfg: SimConfig, cand_set, reselect: bool,
                            current: dict | None = None) -> bool:
    """Direct statement of the feasible set, written independently of the
    mask arrays (used to cross-check them)."""
    cand = set() if cand_set is None else set(int(c) for c in cand_set)
    if reselect:
        if action["resource"] not in cand:
            return False
    else:
        if any(action[h] != current[h] for h in MAC_HEADS):
            return False
    if not 0 <= action["rc"] < len(cfg.rc_set):
        return False
    if not 0 <= action["keep"] < len(cfg.keep_prob_set):
        return False
    n_s, n_c = action["n_s"], action["n_c"]
    if n_s < 0 or n_c < 0 or n_s + n_c > cfg.n_sl_prb_per_vehicle:
        return False
    if not 0 <= action["n_o"] <= cfg.n_o_max_prb:
        return False
    if not 1 <= action["m_s"] + 1 <= 14:
        return False
    return action["eta_c"] in (0, 1) and action["eta_s"] in (0, 1, 2)


class MacTrace:
    def __init__(self, path):
        self.fh = open(path, "w", newline="")
        self.w = csv.writer(self.fh)
        self.w.writerow(["epoch", "vehicle", "resource", "rc", "keep_prob", "event"])

    def log(self, epoch, vehicle, res: Reservation, event: str) -> None:
        self.w.writerow([epoch, vehicle, res.resource, res.rc_remaining, res.keep_prob, event])

    def close(self):
        self.fh.close()
