"""Cooperative multi-vehicle ISCC environment.

Two timescales: actions are applied once per control epoch (one RRI); inside
an epoch the slot loop runs a fixed phase sequence for all vehicles and then
updates the shared MEC server. The shared reward of an epoch is the negative
mean slot cost over vehicles and slots.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import channel, comm, compute, mac, sensing
from .config import RngStreams, SimConfig

OBS_FIELDS = ("queue_bits", "v_s_cycles", "ov_c", "ov_s", "cbr", "prr", "rate_eff",
              "avg_sinr", "rc_remaining", "v2i_gain", "mec_level_c", "mec_level_s")
OBS_DIM = len(OBS_FIELDS)

SLOT_PHASES = ("apply_decisions", "sensing", "arrivals", "tx_outcomes", "queue_update",
               "utility", "comm_workload", "local_schedule", "overflow", "offload",
               "mec_update", "completion", "cost")


@dataclass
class ActionVector:
    """Head indices of one agent's action."""

    resource: int
    rc: int
    keep: int
    n_s: int
    n_c: int
    n_o: int
    m_s: int  # index: symbols = m_s + 1
    eta_c: int
    eta_s: int

    def as_dict(self) -> dict:
        return {h: int(getattr(self, h)) for h in mac.HEADS}

    @classmethod
    def from_dict(cls, d: dict) -> "ActionVector":
        return cls(**{h: int(d[h]) for h in mac.HEADS})

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, h) for h in mac.HEADS], dtype=np.int64)

    @classmethod
    def from_array(cls, a) -> "ActionVector":
        return cls(*[int(x) for x in a])


def decode_action(av: ActionVector, mask: mac.ActionMask, cfg: SimConfig) -> dict:
    """Map head indices to physical settings; rejects masked-out choices."""
    a = av.as_dict()
    if not mask.admits(a):
        raise ValueError(f"action {a} is outside the feasible set")
    return {
        "resource": a["resource"],
        "rc": cfg.rc_set[a["rc"]],
        "keep_prob": cfg.keep_prob_set[a["keep"]],
        "n_s": a["n_s"],
        "n_c": a["n_c"],
        "n_o": a["n_o"],
        "m_s": a["m_s"] + 1,
        "eta_c": a["eta_c"],
        "eta_s": a["eta_s"],
    }


def cost(eps_norm, phi, psi, cfg: SimConfig):
    """Weighted slot cost of normalised sensing, communication and compute terms."""
    for name, v in (("sensing", eps_norm), ("communication", phi), ("compute", psi)):
        arr = np.asarray(v)
        if np.any(arr < -1e-12) or np.any(arr > 1 + 1e-12):
            raise ValueError(f"{name} cost term outside [0, 1]")
    ws, wc, wp = cfg.weights
    out = ws * np.asarray(eps_norm) + wc * np.asarray(phi) + wp * np.asarray(psi)
    return float(out) if np.ndim(out) == 0 else out


def backlog_level(l_cycles, cfg: SimConfig) -> int:
    x = l_cycles / cfg.c_mec_cycles_per_slot
    return 0 if x < 0.5 else (1 if x < 2.0 else 2)


def obs_features(raw: np.ndarray) -> np.ndarray:
    """Compress heavy-tailed raw observations before standardisation."""
    f = np.array(raw, dtype=float, copy=True)
    for k in (0, 1, 2, 3, 6, 7):
        f[..., k] = np.log1p(np.maximum(f[..., k], 0.0))
    f[..., 9] = np.log10(np.maximum(f[..., 9], 1e-30))
    return f


class ObsNormalizer:
    """Running mean/variance standardisation, frozen at evaluation."""

    def __init__(self, dim: int = OBS_DIM, clip: float = 5.0):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 1e-4
        self.clip = clip
        self.frozen = False

    def update(self, x: np.ndarray) -> None:
        if self.frozen:
            return
        x = np.asarray(x, dtype=float).reshape(-1, self.mean.size)
        bm, bv, bc = x.mean(0), x.var(0), x.shape[0]
        delta = bm - self.mean
        tot = self.count + bc
        self.mean = self.mean + delta * bc / tot
        m2 = self.var * self.count + bv * bc + delta ** 2 * self.count * bc / tot
        self.var = m2 / tot
        self.count = tot

    def __call__(self, x: np.ndarray) -> np.ndarray:
        z = (np.asarray(x, dtype=float) - self.mean) / np.sqrt(self.var + 1e-8)
        return np.clip(z, -self.clip, self.clip)

    def state(self) -> dict:
        return {"mean": self.mean.tolist(), "var": self.var.tolist(), "count": self.count}

    def load(self, st: dict) -> None:
        self.mean = np.asarray(st["mean"], dtype=float)
        self.var = np.asarray(st["var"], dtype=float)
        self.count = float(st["count"])


def encode_obs(raw: np.ndarray, norm: ObsNormalizer, update: bool = False) -> np.ndarray:
    f = obs_features(raw)
    if update:
        norm.update(f)
    return norm(f)


def global_state(obs_norm: np.ndarray, l_c: float, l_s: float, cfg: SimConfig,
                 epoch: int = 0) -> np.ndarray:
    """Critic input: all normalised observations, the MEC backlogs in units
    of per-slot capacity and the fraction of the episode still to run.

    Episodes are cut at a fixed horizon with a zero bootstrap, so the value
    depends on the remaining epochs; without that feature the critic error
    would be dominated by the horizon effect."""
    c = cfg.c_mec_cycles_per_slot
    left = (cfg.steps - epoch) / cfg.steps
    return np.concatenate([np.asarray(obs_norm).ravel(), [np.log1p(l_c / c), np.log1p(l_s / c), left]])


@dataclass
class EpochResult:
    costs: np.ndarray  # (N, slots)
    reward: float
    obs_raw: np.ndarray
    masks: list
    frozen: list
    done: bool
    diagnostics: dict = field(default_factory=dict)


class KpiAccumulator:
    """Running sums over an episode for the evaluation KPIs."""

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.bins = comm.DistanceBins(cfg)
        self.sums = {k: 0.0 for k in ("rate_eff_bps", "cbr", "t_e2e_s", "e_tot_j", "t_comp_c_s",
                                      "t_comp_s_s", "vehicle_slots", "mec_delay_s", "slots",
                                      "crlb_range", "crlb_vel", "crlb_n", "prr_sum", "prr_n",
                                      "cost", "c7", "c8", "c9")}

    def as_dict(self) -> dict:
        s = self.sums
        vs = max(s["vehicle_slots"], 1)
        tab = self.bins.table()
        out = {
            "throughput_mbps": s["rate_eff_bps"] / vs / 1e6,
            "cbr": s["cbr"] / vs,
            "latency_ms": 1e3 * s["t_e2e_s"] / vs,
            "energy_mj": 1e3 * s["e_tot_j"] / vs,
            "t_comp_c_ms": 1e3 * s["t_comp_c_s"] / vs,
            "t_comp_s_ms": 1e3 * s["t_comp_s_s"] / vs,
            "mec_delay_ms": 1e3 * s["mec_delay_s"] / max(s["slots"], 1),
            "crlb_range_m": s["crlb_range"] / s["crlb_n"] if s["crlb_n"] else float("nan"),
            "crlb_vel_mps": s["crlb_vel"] / s["crlb_n"] if s["crlb_n"] else float("nan"),
            "prr": s["prr_sum"] / s["prr_n"] if s["prr_n"] else float("nan"),
            "mean_cost": s["cost"] / vs,
            "c7": s["c7"], "c8": s["c8"], "c9": s["c9"],
            "prr_by_distance": tab,
            "bin_success": self.bins.success.tolist(),
            "bin_total": self.bins.total.tolist(),
            "bin_width": float(self.bins.w),
        }
        ref = float(self.cfg.ref_distance_m)
        out["prr_at_ref_m"] = tab.get(ref, float("nan"))
        out["d_max_m"] = comm.max_reliable_distance(tab, self.cfg.prr_threshold) if tab else 0.0
        return out


class IsccEnv:
    """Simulator of N vehicles, one RSU with an MEC server and a cloud.

    ``reset`` and ``step_epoch`` follow the usual multi-agent pattern; the
    per-agent action masks are available as ``env.masks`` after each call.
    """

    def __init__(self, cfg: SimConfig, record: bool = False, trace_phases: bool = False,
                 forced_offloaders: int = 0, forced_cycles_per_slot: float = 5e5,
                 channel_trace=None, mac_trace=None, epoch_log=None):
        self.cfg = cfg
        self.record = record
        self.trace_phases = trace_phases
        self.phase_log: list = []
        self.forced_offloaders = int(forced_offloaders)
        self.forced_cycles = float(forced_cycles_per_slot)
        self.channel_trace = channel_trace
        self.mac_trace_path = mac_trace
        self.epoch_log_path = epoch_log
        self.n = cfg.vehicle_count()
        if self.n < 1:
            raise ValueError("configuration yields no vehicles")
        self.sizes = mac.head_sizes(cfg)

    # ------------------------------------------------------------------ reset
    def reset(self, seed: int | None = None, episode: int = 0, keep_kpi: bool = False):
        """Start an episode. With ``keep_kpi`` the KPI sums continue across
        episodes (used to pool evaluation episodes of one seed)."""
        cfg = self.cfg
        if cfg.n_vehicles > 0 and cfg.road_length_m != 1000.0:
            implied = cfg.density_veh_per_km * cfg.road_length_m / 1000.0
            if abs(implied - cfg.n_vehicles) > 1e-9:
                raise ValueError("n_vehicles, density_veh_per_km and road_length_m disagree")
        if cfg.n_vehicles == 0:
            implied = cfg.density_veh_per_km * cfg.road_length_m / 1000.0
            if abs(implied - round(implied)) > 1e-9:
                raise ValueError("density_veh_per_km * road_length_m must give a whole vehicle count")
        self.seed = cfg.seed if seed is None else int(seed)
        self.episode = int(episode)
        rs = RngStreams(self.seed)
        ent = (self.episode,)
        self.rng_mob = rs.stream("mobility", ent)
        self.rng_fad = rs.stream("fading", ent)
        self.rng_trf = rs.stream("traffic", ent)
        self.rng_mac = rs.stream("mac", ent)
        n = self.n
        self.fleet = channel.place_vehicles(cfg, self.rng_mob, n=n)
        self.channels = channel.ChannelModel(cfg, self.rng_fad, trace_path=self.channel_trace)
        self.grid = mac.ResourceGrid(cfg, n)
        self.slot = 0
        self.epoch = 0
        # reservations
        self.res_index = self.rng_mac.integers(0, cfg.n_resources, size=n)
        self.rc_idx = self.rng_mac.integers(0, len(cfg.rc_set), size=n)
        self.rc_remaining = np.array([cfg.rc_set[k] for k in self.rc_idx], dtype=np.int64)
        self.keep_idx = self.rng_mac.integers(0, len(cfg.keep_prob_set), size=n)
        self.reselect = np.zeros(n, dtype=bool)
        self.last_event = ["init"] * n
        # cross-layer settings (set by first action)
        z = np.zeros(n, dtype=np.int64)
        self.n_s, self.n_c, self.n_o, self.m_s, self.eta_c, self.eta_s = z.copy(), z.copy(), z.copy(), z + 1, z.copy(), z.copy()
        # communication state
        self.queue = np.zeros(n)
        self.prr = np.zeros(n)
        self.rate = np.zeros(n)
        self.rate_eff = np.zeros(n)
        self.gbar = np.zeros(n)
        self.prr_ema = np.zeros(n)
        self.rate_eff_ema = np.zeros(n)
        self.gbar_ema = np.zeros(n)
        self.cbr_now = np.zeros(n)
        # compute state
        self.buffers = compute.OffloadBuffers(n)
        self.mec = compute.MecState()
        self.cum = {k: 0.0 for k in ("arrivals_bits", "served_bits", "mec_arr_c", "mec_arr_s",
                                     "mec_srv_c", "mec_srv_s", "dropped_ov_cycles")}
        if not (keep_kpi and hasattr(self, "kpi")):
            self.kpi = KpiAccumulator(cfg)
        self.prio_ok = 0
        self.prio_slots = 0
        self._obs_extra = {"v_s": np.zeros(n), "ov_c": np.zeros(n), "ov_s": np.zeros(n),
                           "g_rsu": np.ones(n)}
        self._mac_trace = mac.MacTrace(self.mac_trace_path) if self.mac_trace_path else None
        self._epoch_fh = open(self.epoch_log_path, "w") if self.epoch_log_path else None
        self.recorded: list = []
        self.masks, self.frozen = self._build_masks()
        return self.observe(), self.masks

    # ----------------------------------------------------------- observation
    def observe(self) -> np.ndarray:
        cfg = self.cfg
        o = np.zeros((self.n, OBS_DIM))
        o[:, 0] = self.queue
        o[:, 1] = self._obs_extra["v_s"]
        o[:, 2] = self._obs_extra["ov_c"]
        o[:, 3] = self._obs_extra["ov_s"]
        o[:, 4] = self.cbr_now
        o[:, 5] = self.prr_ema
        o[:, 6] = self.rate_eff_ema
        o[:, 7] = self.gbar_ema
        o[:, 8] = self.rc_remaining
        o[:, 9] = self._obs_extra["g_rsu"]
        o[:, 10] = backlog_level(self.mec.l_c, cfg)
        o[:, 11] = backlog_level(self.mec.l_s, cfg)
        return o

    def current_heads(self, i: int) -> dict:
        return {"resource": int(self.res_index[i]), "rc": int(self.rc_idx[i]),
                "keep": int(self.keep_idx[i])}

    def _build_masks(self):
        masks, frozen = [], []
        for i in range(self.n):
            if self.reselect[i]:
                cand = self.grid.candidate_set(i, self.slot - 1) if self.slot > 0 else np.arange(self.cfg.n_resources)
                m = mac.build_mask(self.cfg, cand, True)
            else:
                m = mac.build_mask(self.cfg, None, False, self.current_heads(i))
            masks.append(m)
            frozen.append(np.array([m.frozen[h] for h in mac.HEADS]))
        return masks, frozen

    # ----------------------------------------------------------------- step
    def apply_actions(self, actions) -> None:
        cfg = self.cfg
        acts = [a if isinstance(a, ActionVector) else ActionVector.from_array(a) for a in actions]
        if len(acts) != self.n:
            raise ValueError(f"expected {self.n} actions, got {len(acts)}")
        for i, a in enumerate(acts):
            d = decode_action(a, self.masks[i], cfg)
            if self.reselect[i]:
                self.res_index[i] = d["resource"]
                self.rc_idx[i] = a.rc
                self.rc_remaining[i] = d["rc"]
                self.keep_idx[i] = a.keep
                self.reselect[i] = False
            self.n_s[i], self.n_c[i], self.n_o[i] = d["n_s"], d["n_c"], d["n_o"]
            self.m_s[i], self.eta_c[i], self.eta_s[i] = d["m_s"], d["eta_c"], d["eta_s"]

    def step_epoch(self, actions) -> EpochResult:
        cfg = self.cfg
        self.apply_actions(actions)
        n, T = self.n, cfg.epoch_slots
        self.offset, self.subch = mac.resource_offset_subch(self.res_index, cfg)
        self.fsens = sensing.FleetSensing(cfg, self.n_s, self.m_s)
        self.v_s = self.fsens.workload.astype(float)
        self.e_sens = compute.sensing_energy(self.m_s, self.n_s, cfg)
        self.channels.new_epoch(n)
        costs = np.zeros((n, T))
        ep = {k: 0.0 for k in ("prr_sum", "prr_n", "cbr", "e2e", "energy", "c7", "c8", "c9")}
        acc_ov_c = np.zeros(n)
        acc_ov_s = np.zeros(n)
        acc_g = np.zeros(n)
        for k in range(T):
            st = self._run_slot()
            costs[:, k] = st["cost"]
            acc_ov_c += st["ov_c"]
            acc_ov_s += st["ov_s"]
            acc_g += st["g_rsu"]
            ep["prr_sum"] += st["prr_sum"]
            ep["prr_n"] += st["prr_n"]
            ep["cbr"] += self.cbr_now.mean()
            ep["e2e"] += st["t_e2e"].mean()
            ep["energy"] += st["e_tot"].mean()
            ep["c7"] += st["c7"]
            ep["c8"] += st["c8"]
            ep["c9"] += st["c9"]
        self._obs_extra = {"v_s": self.v_s.copy(), "ov_c": acc_ov_c / T, "ov_s": acc_ov_s / T,
                           "g_rsu": acc_g / T}
        reward = -float(costs.mean())
        self._end_epoch()
        self.epoch += 1
        done = self.epoch >= cfg.steps
        crlb = self.fsens.ref_root_crlb_range
        diag = {
            "episode": self.episode, "epoch": self.epoch - 1, "reward": reward,
            "mean_prr": ep["prr_sum"] / ep["prr_n"] if ep["prr_n"] else float("nan"),
            "mean_cbr": ep["cbr"] / T,
            "mean_crlb_range": float(np.nanmean(crlb)) if np.any(np.isfinite(crlb)) else float("nan"),
            "mec_lc": self.mec.l_c, "mec_ls": self.mec.l_s,
            "mean_e2e_ms": 1e3 * ep["e2e"] / T, "mean_energy_mj": 1e3 * ep["energy"] / T,
            "c7_violations": int(ep["c7"]), "c8_violations": int(ep["c8"]),
            "c9_violations": int(ep["c9"]),
        }
        if self._epoch_fh is not None:
            self._epoch_fh.write(json.dumps(diag, sort_keys=False) + "\n")
            if done:
                self._epoch_fh.close()
                self._epoch_fh = None
        if done and self._mac_trace is not None:
            self._mac_trace.close()
            self._mac_trace = None
        if done:
            self.channels.close()
        return EpochResult(costs, reward, self.observe(), self.masks, self.frozen, done, diag)

    def _end_epoch(self) -> None:
        """Reservation bookkeeping at the RRI boundary, then new masks."""
        cfg = self.cfg
        now = self.slot - 1
        for i in range(self.n):
            res = mac.Reservation(int(self.res_index[i]), int(self.rc_remaining[i]),
                                  cfg.keep_prob_set[self.keep_idx[i]], cfg.rri_ms)
            event, res2 = mac.tick_reservation(res, self.rng_mac, cfg)
            if event == "keep":
                self.rc_idx[i] = cfg.rc_set.index(res2.rc_remaining)
            self.rc_remaining[i] = res2.rc_remaining
            if event == "none" and mac.own_resource_busy(self.grid, i, int(self.res_index[i]), now):
                event = "reevaluate"
            if event in ("reselect", "reevaluate"):
                self.reselect[i] = True
                self.rc_remaining[i] = 0
            self.last_event[i] = event
            if self._mac_trace is not None:
                self._mac_trace.log(self.epoch, i, res2, event)
        self.masks, self.frozen = self._build_masks()

    # ------------------------------------------------------------ slot loop
    def _phase(self, name: str) -> None:
        if self.trace_phases:
            self.phase_log.append((self.slot, name))

    def _run_slot(self) -> dict:
        cfg = self.cfg
        n = self.n
        t = self.slot
        # environment evolution for this slot
        if t > 0:
            self.fleet = channel.advance_mobility(self.fleet, cfg.slot_s)
        dx = channel.ring_offsets(self.fleet)
        dist = channel.pairwise_distance(self.fleet, cfg, dx)
        snap = self.channels.sample_channels(t, self.fleet, dist)

        self._phase("apply_decisions")  # committed once per epoch in apply_actions

        self._phase("sensing")
        eps_raw, eps_norm, n_det = self.fsens.penalties(dist)

        self._phase("arrivals")
        A = comm.arrivals(n, self.rng_trf, cfg)
        self.cum["arrivals_bits"] += A.sum()

        self._phase("tx_outcomes")
        q0 = self.queue
        delivered, prr_sum, prr_n = self._transmissions(t, dist, snap, q0)

        self._phase("queue_update")
        self.queue, served = comm.update_queue(q0, delivered, A)
        self.cum["served_bits"] += served.sum()

        self._phase("utility")
        _, phi = comm.comm_utility(self.prr, self.rate_eff, cfg)
        t_sl = comm.sl_delay(q0, self.rate_eff, cfg)

        self._phase("comm_workload")
        v_c = cfg.kappa_c_cycles_per_bit * A

        self._phase("local_schedule")
        loc = compute.local_schedule(v_c, self.v_s, cfg)

        self._phase("overflow")
        ov_c, ov_s = loc.ov_c, loc.ov_s

        self._phase("offload")
        off = compute.offload_slot(self.buffers, loc, self.eta_c, self.eta_s, self.n_o,
                                   snap.v2i_gain, cfg)
        dropped = np.where(self.eta_c == 1, 0.0, ov_c).sum() + np.where(self.eta_s > 0, 0.0, ov_s).sum()
        self.cum["dropped_ov_cycles"] += dropped
        arr_c, arr_s = off["mec_arrive_c"], off["mec_arrive_s"]
        if self.forced_offloaders:
            arr_s += self.forced_offloaders * self.forced_cycles

        self._phase("mec_update")
        prev = self.mec
        self.mec = compute.step_mec(prev, arr_c, arr_s, cfg)
        self._check_priority(prev, self.mec)
        self.cum["mec_arr_c"] += arr_c
        self.cum["mec_arr_s"] += arr_s
        self.cum["mec_srv_c"] += self.mec.served_c
        self.cum["mec_srv_s"] += self.mec.served_s

        self._phase("completion")
        t_rem_c, t_rem_s = compute.remote_delays(self.eta_c, self.eta_s, off["t_tx_c"], off["t_tx_s"],
                                                 np.where(off["d_off_c"] > 0, ov_c, 0.0),
                                                 np.where(off["d_off_s"] > 0, ov_s, 0.0),
                                                 self.mec, cfg)
        # remote branches only exist for slots that actually produced overflow
        t_rem_c = np.where(off["d_off_c"] > 0, t_rem_c, 0.0)
        t_rem_s = np.where(off["d_off_s"] > 0, t_rem_s, 0.0)
        out = compute.completion(loc, t_rem_c, t_rem_s, off["e_tx_c"], off["e_tx_s"], self.e_sens,
                                 t_sl, cfg, off["d_off_c"], off["d_off_s"], off["sinr"], off["rate"],
                                 off["t_tx_c"], off["t_tx_s"])

        self._phase("cost")
        ell = cost(eps_norm, phi, out.psi_comp, cfg)

        self.cbr_now = self.grid.cbr(None, t)
        c7 = int(np.sum(out.t_e2e_c > cfg.delta_c_s))
        c8 = int(np.sum(out.t_comp_s > cfg.delta_s_s))
        c9 = int(np.sum(out.e_tot > cfg.e_max_j_per_slot))
        self._accumulate_kpi(out, ell, prr_sum, prr_n, c7, c8, c9)
        if self.record:
            self.recorded.append(self._slot_record(t, q0, t_sl, loc, out, eps_raw, eps_norm, phi, ell))
        self.slot += 1
        return {"cost": ell, "ov_c": ov_c, "ov_s": ov_s, "g_rsu": snap.v2i_gain,
                "prr_sum": prr_sum, "prr_n": prr_n, "t_e2e": out.t_e2e_c, "e_tot": out.e_tot,
                "c7": c7, "c8": c8, "c9": c9}

    def _check_priority(self, prev: compute.MecState, new: compute.MecState) -> None:
        self.prio_slots += 1
        C = self.cfg.c_mec_cycles_per_slot
        ok = new.served_c + new.served_s <= C and (new.served_s == 0 or new.served_c == prev.l_c)
        self.prio_ok += int(ok)

    def _transmissions(self, t: int, dist: np.ndarray, snap, q0: np.ndarray):
        """Sidelink transmissions in slot t; updates held PRR/rate and the
        sensing grids. Returns per-vehicle delivered bits and PRR stats."""
        cfg = self.cfg
        n = self.n
        o = t % cfg.rri_slots
        at_slot = self.offset == o
        has_data = q0 > 0
        comm_tx = at_slot & has_data & (self.n_c > 0)
        tx = at_slot & ((self.n_s > 0) | comm_tx)
        starved = at_slot & has_data & (self.n_c == 0)
        delivered = np.zeros(n)
        prr_sum = 0.0
        prr_n = 0
        if starved.any():
            self.prr[starved] = 0.0
            self.rate[starved] = 0.0
            self.rate_eff[starved] = 0.0
            self._ema(starved)
        if not tx.any():
            self.grid.record_observation(t)
            return delivered, prr_sum, prr_n
        T = np.flatnonzero(tx)
        g = snap.v2v_rows(T)  # (T, N)
        p = cfg.tx_power_w
        rx = p * g
        sub = self.subch[T]
        same = sub[:, None] == sub[None, :]
        prb_comm = np.where(comm_tx[T], self.n_c[T], 0)
        occ = self.n_s[T] + prb_comm
        noise = comm.noise_power_w(np.maximum(occ, 1), cfg)
        sinr = comm.sinr_matrix(p, g, same, noise)
        # half duplex: a vehicle transmitting in this slot hears nothing
        sinr[:, tx] = 0.0
        sinr[np.arange(T.size), T] = 0.0
        # grid observations at every vehicle
        n_sub = cfg.n_subchannels
        pw = np.zeros((n, n_sub))
        busy = np.zeros((n, n_sub), dtype=np.int64)
        sci = np.zeros((n, n_sub), dtype=bool)
        dec_all = sinr >= cfg.snr_threshold_lin
        for k, i in enumerate(T):
            s = sub[k]
            pw[:, s] += rx[k]
            busy[:, s] = np.maximum(busy[:, s], occ[k])
            sci[:, s] |= dec_all[k]
        pw[T, :] = 0.0
        with np.errstate(divide="ignore"):
            rsrp = 10.0 * np.log10(pw) + 30.0
        self.grid.record_observation(t, sci, rsrp, busy, blind=tx)
        # communication outcomes
        ci = np.flatnonzero(comm_tx[T])
        for k in ci:
            i = T[k]
            d = dist[i]
            rec = (d <= cfg.awareness_range_m)
            rec[i] = False
            rset = np.flatnonzero(rec)
            out = comm.tx_outcome(sinr[k, rset], int(self.n_c[i]), cfg, q0[i], rset)
            delivered[i] = out.delivered_bits
            self.prr[i] = out.prr
            self.rate[i] = out.rate_bps
            self.rate_eff[i] = out.rate_eff_bps
            self.gbar[i] = out.avg_sinr
            prr_sum += out.prr
            prr_n += 1
            far = np.flatnonzero(d <= cfg.prr_max_distance_m + 0.5 * cfg.prr_bin_m)
            far = far[far != i]
            self.kpi.bins.add(d[far], dec_all[k, far])
        if ci.size:
            m = np.zeros(n, dtype=bool)
            m[T[ci]] = True
            self._ema(m)
        return delivered, prr_sum, prr_n

    def _ema(self, m: np.ndarray) -> None:
        a = self.cfg.ema_coef
        self.prr_ema[m] = (1 - a) * self.prr_ema[m] + a * self.prr[m]
        self.rate_eff_ema[m] = (1 - a) * self.rate_eff_ema[m] + a * self.rate_eff[m]
        self.gbar_ema[m] = (1 - a) * self.gbar_ema[m] + a * self.gbar[m]

    def _accumulate_kpi(self, out, ell, prr_sum, prr_n, c7, c8, c9) -> None:
        s = self.kpi.sums
        n = self.n
        s["rate_eff_bps"] += self.rate_eff.sum()
        s["cbr"] += self.cbr_now.sum()
        s["t_e2e_s"] += out.t_e2e_c.sum()
        s["e_tot_j"] += out.e_tot.sum()
        s["t_comp_c_s"] += out.t_comp_c.sum()
        s["t_comp_s_s"] += out.t_comp_s.sum()
        s["vehicle_slots"] += n
        s["mec_delay_s"] += 0.5 * (self.mec.que_delay_c + self.mec.que_delay_s)
        s["slots"] += 1
        cr = self.fsens.ref_root_crlb_range
        ok = np.isfinite(cr)
        s["crlb_range"] += cr[ok].sum()
        s["crlb_vel"] += self.fsens.ref_root_crlb_vel[ok].sum()
        s["crlb_n"] += ok.sum()
        s["prr_sum"] += prr_sum
        s["prr_n"] += prr_n
        s["cost"] += float(np.sum(ell))
        s["c7"] += c7
        s["c8"] += c8
        s["c9"] += c9

    def _slot_record(self, t, q0, t_sl, loc, out, eps_raw, eps_norm, phi, ell) -> dict:
        return {
            "slot": t, "prr": self.prr.copy(), "rate_bps": self.rate.copy(),
            "rate_eff_bps": self.rate_eff.copy(), "cbr": self.cbr_now.copy(),
            "queue_bits": q0.copy(), "sl_delay_s": np.asarray(t_sl).copy(),
            "ov_c": loc.ov_c.copy(), "ov_s": loc.ov_s.copy(), "eta_c": self.eta_c.copy(),
            "eta_s": self.eta_s.copy(), "t_comp_c_s": out.t_comp_c.copy(),
            "t_comp_s_s": out.t_comp_s.copy(), "t_e2e_s": out.t_e2e_c.copy(),
            "e_tot_j": out.e_tot.copy(), "mec_lc": self.mec.l_c, "mec_ls": self.mec.l_s,
            "mec_delay_s": 0.5 * (self.mec.que_delay_c + self.mec.que_delay_s),
            "crlb_range_m": self.fsens.ref_root_crlb_range.copy(),
            "crlb_vel_mps": self.fsens.ref_root_crlb_vel.copy(),
            "eps_raw": eps_raw, "eps_norm": eps_norm, "phi": np.asarray(phi).copy(),
            "psi": out.psi_comp.copy(), "cost": np.asarray(ell).copy(),
        }

    # ------------------------------------------------------- greedy support
    def lookahead(self):
        """Snapshot of per-vehicle quantities a one-epoch predictor may use."""
        cfg = self.cfg
        dist = channel.pairwise_distance(self.fleet, cfg)
        g = channel.pathloss_gain(channel.rsu_distance(self.fleet, cfg), cfg)
        return {
            "dist": dist, "g_rsu_mean": g, "prr": self.prr.copy(), "gbar": self.gbar.copy(),
            "queue": self.queue.copy(), "mec_l_c": self.mec.l_c, "mec_l_s": self.mec.l_s,
            "n_offloaders": int(np.sum((self.n_o > 0) & (self.buffers.total() > 0))),
            "offload_backlog": self.buffers.total().copy(),
        }
