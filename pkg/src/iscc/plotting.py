"""Self-contained SVG charts from result CSVs."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

UNITS = {
    "density": "veh/km", "offloaders": "count", "distance_m": "m", "episode": "index",
    "prr": "ratio", "cbr": "ratio", "crlb_range_m": "m", "crlb_vel_mps": "m/s",
    "throughput_mbps": "Mbps", "d_max_m": "m", "latency_ms": "ms", "mec_delay_ms": "ms",
    "energy_mj": "mJ/slot", "mean_reward": "reward", "crlb_range": "m",
}


def read_csv(path) -> tuple:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    head = rows[0]
    body = [r for r in rows[1:] if r]
    if any(len(r) != len(head) for r in body):
        raise ValueError(f"{path}: malformed CSV (ragged rows)")
    return head, body


def _label(col: str) -> str:
    return f"{col} [{UNITS.get(col, '-')}]"


def plot_csv(path, kind: str, x: str, y: str, out, group: str = "policy") -> Path:
    """Line or bar chart of column ``y`` against ``x``, one series per
    ``group`` value."""
    if kind not in ("line", "bar"):
        raise ValueError(f"unknown plot kind {kind!r}; use line or bar")
    head, body = read_csv(path)
    for col in (x, y):
        if col not in head:
            raise ValueError(f"{path}: missing column {col!r}")
    xi, yi = head.index(x), head.index(y)
    gi = head.index(group) if group in head else None
    series = {}
    for r in body:
        key = r[gi] if gi is not None else y
        series.setdefault(key, []).append((float(r[xi]), float(r[yi])))
    plt.rcParams["svg.hashsalt"] = "iscc"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    n = len(series)
    for k, (name, pts) in enumerate(sorted(series.items())):
        pts.sort()
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        if kind == "bar":
            width = 0.8 / max(n, 1)
            ax.bar([v + (k - (n - 1) / 2) * width for v in range(len(xs))], ys, width, label=name)
            ax.set_xticks(range(len(xs)), [f"{v:g}" for v in xs])
        elif len(xs) == 1:
            ax.plot(xs, ys, "o", label=name)
        else:
            ax.plot(xs, ys, "-o", ms=3, label=name)
    ax.set_xlabel(_label(x))
    ax.set_ylabel(_label(y))
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    out = Path(out)
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out
