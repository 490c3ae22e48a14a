"""Evaluation runs, parameter sweeps, KPI aggregation and CSV output."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .config import SimConfig, config_hash
from .env import IsccEnv
from .policies import POLICIES, make_policy

SWEEPS = ("density", "distance-bins", "offloaders")

KPI_FIELDS = ("crlb_range_m", "crlb_vel_mps", "prr", "throughput_mbps", "cbr", "d_max_m",
              "latency_ms", "t_comp_c_ms", "t_comp_s_ms", "mec_delay_ms", "energy_mj",
              "prr_at_ref_m", "mean_cost", "c7", "c8", "c9")

COMM_CSV = ("slot", "vehicle", "prr", "rate_bps", "rate_eff_bps", "cbr", "queue_bits", "sl_delay_s")
COMP_CSV = ("slot", "vehicle", "ov_c", "ov_s", "eta_c", "eta_s", "t_comp_c_ms", "t_comp_s_ms",
            "e_tot_mj", "mec_lc", "mec_ls")

# table columns: (label, kpi key, scale)
TABLE_COLUMNS = (
    ("range_root_crlb_m", "crlb_range_m", 1.0),
    ("velocity_root_crlb_mps", "crlb_vel_mps", 1.0),
    ("prr_pct", "prr_at_ref_m", 100.0),
    ("throughput_mbps", "throughput_mbps", 1.0),
    ("cbr_pct", "cbr", 100.0),
    ("max_reliable_distance_m", "d_max_m", 1.0),
    ("computation_latency_ms", "comp_latency_ms", 1.0),
    ("mec_queueing_delay_ms", "mec_delay_ms", 1.0),
    ("energy_mj_per_slot", "energy_mj", 1.0),
)

# named recipes for every figure axis: sweep kind, default values, plotted KPIs
RECIPES = {
    "fig3": ("training", None, ("mean_reward", "prr", "crlb_range", "mec_delay_ms")),
    "fig4": ("density", (20, 40, 60, 80, 100), ("crlb_range_m",)),
    "fig5": ("density", (20, 40, 60, 80, 100), ("crlb_vel_mps",)),
    "fig6": ("crlb-distance", (20, 40, 60, 80, 100, 120, 150), ("root_crlb_range_m",)),
    "fig7": ("distance-bins", None, ("prr",)),
    "fig8": ("density", (20, 40, 60, 80, 100), ("throughput_mbps",)),
    "fig9": ("density", (20, 40, 60, 80, 100), ("cbr",)),
    "fig10": ("density", (20, 40, 60, 80, 100), ("d_max_m",)),
    "fig11": ("density", (20, 40, 60, 80, 100), ("latency_ms",)),
    "fig12": ("offloaders", (5, 10, 15, 20, 25), ("mec_delay_ms",)),
    "fig13": ("density", (20, 40, 60, 80, 100), ("energy_mj",)),
    "table4": ("table", None, tuple(c[0] for c in TABLE_COLUMNS)),
}


@dataclass
class ExperimentSpec:
    name: str
    policy: str
    sweep: str
    values: tuple
    seeds: tuple
    out_dir: str
    episodes: int = 1
    checkpoint: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}; choose from {', '.join(POLICIES)}")
        if self.sweep not in SWEEPS:
            raise ValueError(f"unknown sweep {self.sweep!r}; choose from {', '.join(SWEEPS)}")
        if self.sweep != "distance-bins" and not self.values:
            raise ValueError("sweep needs at least one value")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        for v in self.values:
            if self.sweep == "density" and not v > 0:
                raise ValueError(f"invalid density {v}")
            if self.sweep == "offloaders" and (v < 0 or int(v) != v):
                raise ValueError(f"invalid offloader count {v}")


def mean_ci(values, level: float = 0.95):
    """Mean and Student-t half-width across seeds (nan half-width for one value)."""
    x = np.asarray([v for v in values if v is not None], dtype=float)
    x = x[np.isfinite(x)]
    if x.size == 0:
        return float("nan"), float("nan")
    m = float(x.mean())
    if x.size < 2:
        return m, float("nan")
    h = float(stats.t.ppf(0.5 + level / 2, x.size - 1) * x.std(ddof=1) / math.sqrt(x.size))
    return m, h


def checkpoint_for(checkpoint, seed: int):
    if checkpoint is None:
        return None
    d = Path(checkpoint)
    if (d / "manifest.json").exists():
        return d
    sd = d / f"seed_{seed}"
    if (sd / "manifest.json").exists():
        return sd
    raise FileNotFoundError(f"no checkpoint for seed {seed} under {d}")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


class SlotRecorder:
    """Writes the per-slot communication and compute CSVs of one run."""

    def __init__(self, comm_path, comp_path, cfg: SimConfig):
        self.fc = open(comm_path, "w", newline="")
        self.fp = open(comp_path, "w", newline="")
        tag = f"# config_hash={config_hash(cfg)}\n"
        self.fc.write(tag)
        self.fp.write(tag)
        self.wc = csv.writer(self.fc)
        self.wp = csv.writer(self.fp)
        self.wc.writerow(COMM_CSV)
        self.wp.writerow(COMP_CSV)
        self.slot_base = 0

    def write(self, records) -> None:
        for r in records:
            t = r["slot"] + self.slot_base
            for i in range(r["prr"].size):
                self.wc.writerow([t, i, _fmt(r["prr"][i]), _fmt(r["rate_bps"][i]), _fmt(r["rate_eff_bps"][i]),
                                  _fmt(r["cbr"][i]), _fmt(r["queue_bits"][i]), _fmt(r["sl_delay_s"][i])])
                self.wp.writerow([t, i, _fmt(r["ov_c"][i]), _fmt(r["ov_s"][i]), int(r["eta_c"][i]),
                                  int(r["eta_s"][i]), _fmt(1e3 * r["t_comp_c_s"][i]),
                                  _fmt(1e3 * r["t_comp_s_s"][i]), _fmt(1e3 * r["e_tot_j"][i]),
                                  _fmt(r["mec_lc"]), _fmt(r["mec_ls"])])
        if records:
            self.slot_base += records[-1]["slot"] + 1

    def close(self) -> None:
        self.fc.close()
        self.fp.close()


def evaluate_seed(cfg: SimConfig, policy: str, seed: int, episodes: int = 1, checkpoint=None,
                  forced_offloaders: int = 0, record_dir=None, epoch_log=None) -> dict:
    """Run ``episodes`` evaluation episodes for one seed and pool the KPIs."""
    pol = make_policy(policy, cfg, seed, checkpoint_for(checkpoint, seed))
    env = IsccEnv(cfg, record=record_dir is not None, forced_offloaders=forced_offloaders,
                  epoch_log=epoch_log)
    rec = None
    if record_dir is not None:
        d = Path(record_dir)
        d.mkdir(parents=True, exist_ok=True)
        rec = SlotRecorder(d / f"comm_seed{seed}.csv", d / f"compute_seed{seed}.csv", cfg)
    for ep in range(episodes):
        obs, _ = env.reset(seed, ep, keep_kpi=ep > 0)
        done = False
        while not done:
            res = env.step_epoch(pol.act(env, obs))
            obs, done = res.obs_raw, res.done
        if rec is not None:
            rec.write(env.recorded)
            env.recorded = []
    if rec is not None:
        rec.close()
    k = env.kpi.as_dict()
    k["comp_latency_ms"] = 0.5 * (k["t_comp_c_ms"] + k["t_comp_s_ms"])
    k["seed"] = seed
    k["policy"] = policy
    return k


def kpi_from_slot_csvs(comm_path, comp_path) -> dict:
    """Recompute slot-averaged KPIs from the raw per-slot CSVs."""
    def load(p):
        with open(p) as fh:
            rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
        head, body = rows[0], rows[1:]
        return {h: np.array([float(r[k]) for r in body]) for k, h in enumerate(head)}

    c = load(comm_path)
    p = load(comp_path)
    return {
        "throughput_mbps": float(np.mean(c["rate_eff_bps"])) / 1e6,
        "cbr": float(np.mean(c["cbr"])),
        "energy_mj": float(np.mean(p["e_tot_mj"])),
        "t_comp_c_ms": float(np.mean(p["t_comp_c_ms"])),
        "t_comp_s_ms": float(np.mean(p["t_comp_s_ms"])),
    }


def sweep_configs(base: SimConfig, sweep: str, values):
    """(value, config, forced offloaders) per sweep point."""
    out = []
    if sweep == "density":
        for v in values:
            out.append((v, base.replace(density_veh_per_km=float(v), n_vehicles=0), 0))
    elif sweep == "offloaders":
        for v in values:
            if int(v) > base.vehicle_count():
                raise ValueError(f"offloader count {v} exceeds the {base.vehicle_count()} vehicles")
            out.append((int(v), base, int(v)))
    elif sweep == "distance-bins":
        out.append((None, base, 0))
    else:
        raise ValueError(f"unknown sweep {sweep!r}")
    return out


def run(spec: ExperimentSpec, cfg: SimConfig, plot: bool = True) -> Path:
    """Execute a sweep; writes points CSV, aggregate CSV and an SVG chart."""
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    points = sweep_configs(cfg, spec.sweep, spec.values)
    tag = f"# config_hash={config_hash(cfg)}\n"
    per = []
    for value, c, forced in points:
        for s in spec.seeds:
            k = evaluate_seed(c, spec.policy, s, spec.episodes, spec.checkpoint, forced)
            per.append((value, s, k))
    if spec.sweep == "distance-bins":
        _write_distance(out, spec, per, tag)
        fields = ("prr",)
        xcol = "distance_m"
    else:
        fields = KPI_FIELDS + ("comp_latency_ms",)
        xcol = spec.sweep
        with open(out / "points.csv", "w", newline="") as fh:
            fh.write(tag)
            w = csv.writer(fh)
            w.writerow(("policy", spec.sweep, "seed") + fields)
            for value, s, k in per:
                w.writerow([spec.policy, _fmt(value), s] + [_fmt(k[f]) for f in fields])
        with open(out / "aggregate.csv", "w", newline="") as fh:
            fh.write(tag)
            w = csv.writer(fh)
            w.writerow(("policy", spec.sweep, "n_seeds") + tuple(x for f in fields for x in (f, f + "_ci")))
            for value, _, _ in points:
                ks = [k for v, _, k in per if v == value]
                row = [spec.policy, _fmt(value), len(ks)]
                for f in fields:
                    m, h = mean_ci([k[f] for k in ks])
                    row += [_fmt(m), _fmt(h)]
                w.writerow(row)
    if plot:
        from .plotting import plot_csv
        y = {"density": "cbr", "offloaders": "mec_delay_ms", "distance-bins": "prr"}[spec.sweep]
        plot_csv(out / "aggregate.csv", "line", xcol, y, out / f"{spec.name}.svg")
    return out


def _write_distance(out: Path, spec: ExperimentSpec, per, tag: str) -> None:
    with open(out / "points.csv", "w", newline="") as fh:
        fh.write(tag)
        w = csv.writer(fh)
        w.writerow(("policy", "seed", "distance_m", "success", "total", "prr"))
        for _, s, k in per:
            for b, (ok, tot) in enumerate(zip(k["bin_success"], k["bin_total"])):
                d = b * k["bin_width"]
                w.writerow([spec.policy, s, _fmt(d), _fmt(ok), _fmt(tot),
                            _fmt(ok / tot) if tot > 0 else "nan"])
    with open(out / "aggregate.csv", "w", newline="") as fh:
        fh.write(tag)
        w = csv.writer(fh)
        w.writerow(("policy", "distance_m", "n_seeds", "prr", "prr_ci"))
        k0 = per[0][2]
        for b in range(len(k0["bin_total"])):
            vals = [k["bin_success"][b] / k["bin_total"][b] for _, _, k in per if k["bin_total"][b] > 0]
            m, h = mean_ci(vals)
            w.writerow([spec.policy, _fmt(b * k0["bin_width"]), len(vals), _fmt(m), _fmt(h)])


def prr_curve(kpis) -> tuple:
    """Seed-averaged PRR per distance bin: (midpoints, mean PRR)."""
    w = kpis[0]["bin_width"]
    nb = len(kpis[0]["bin_total"])
    means = []
    for b in range(nb):
        vals = [k["bin_success"][b] / k["bin_total"][b] for k in kpis if k["bin_total"][b] > 0]
        means.append(float(np.mean(vals)) if vals else float("nan"))
    return np.arange(nb) * w, np.asarray(means)


# --------------------------------------------------------------------- table

def table_config(base: SimConfig) -> SimConfig:
    """Operating point of the KPI table: 80 veh/km on the base road, 80 m
    reference distance."""
    return base.replace(density_veh_per_km=80.0, n_vehicles=0, ref_distance_m=80.0)


def kpi_table(results: dict) -> list:
    """One row per policy with mean and CI of every table column.

    ``results`` maps policy -> list of per-seed KPI dicts; the MEC delay is
    taken from ``kpi['mec_delay_at_25_ms']`` when present."""
    if not results:
        raise ValueError("no results to tabulate")
    rows = []
    for pol, ks in results.items():
        if not ks:
            raise ValueError(f"policy {pol} has no results")
        row = {"policy": pol, "n_seeds": len(ks)}
        for label, key, scale in TABLE_COLUMNS:
            src = "mec_delay_at_25_ms" if key == "mec_delay_ms" and "mec_delay_at_25_ms" in ks[0] else key
            missing = [k for k in ks if src not in k]
            if missing:
                raise ValueError(f"policy {pol} lacks KPI {src!r}")
            m, h = mean_ci([scale * k[src] for k in ks])
            row[label] = m
            row[label + "_ci"] = h
        rows.append(row)
    return rows


def write_table(rows, out_dir, cfg: SimConfig) -> tuple:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["policy", "n_seeds"] + [x for c in TABLE_COLUMNS for x in (c[0], c[0] + "_ci")]
    with open(out / "table4.csv", "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash(cfg)}\n")
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r["policy"], r["n_seeds"]] + [_fmt(r[c]) for c in cols[2:]])
    text = render_table(rows)
    (out / "table4.txt").write_text(text)
    return out / "table4.csv", out / "table4.txt"


def render_table(rows) -> str:
    heads = ["metric"] + [r["policy"] for r in rows]
    lines = []
    for label, _, _ in TABLE_COLUMNS:
        cells = [label]
        for r in rows:
            m, h = r[label], r[label + "_ci"]
            cells.append(f"{m:.4g}" + ("" if not np.isfinite(h) else f" ± {h:.2g}"))
        lines.append(cells)
    widths = [max(len(x[k]) for x in [heads] + lines) for k in range(len(heads))]
    fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([fmt(heads), fmt(["-" * w for w in widths])] + [fmt(c) for c in lines]) + "\n"


def table_results(cfg: SimConfig, policies, seeds, episodes: int = 1, checkpoints=None,
                  forced: int = 25) -> dict:
    """Evaluate each policy at the table operating point. The MEC delay
    column comes from a second run with ``forced`` forced offloaders."""
    checkpoints = checkpoints or {}
    tc = table_config(cfg)
    res = {}
    for pol in policies:
        ks = []
        for s in seeds:
            k = evaluate_seed(tc, pol, s, episodes, checkpoints.get(pol))
            if forced:
                kf = evaluate_seed(tc, pol, s, episodes, checkpoints.get(pol), forced_offloaders=forced)
                k["mec_delay_at_25_ms"] = kf["mec_delay_ms"]
            ks.append(k)
        res[pol] = ks
    return res
