"""OFDM radar sensing quality.

Monostatic link budget, effective SNR with residual self-interference,
range/velocity Cramer-Rao bounds, the vehicle-level weighted penalty and a
signal-level range-Doppler map used to validate the bounds.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .config import SimConfig

C0 = 299792458.0
BOLTZMANN = 1.380649e-23


class CrlbUndefined(ValueError):
    """CRLB needs at least two subcarriers and two symbols."""


@dataclass(frozen=True)
class SensingAlloc:
    n_s_prb: int
    m_s_sym: int
    p_tx_w: float = 0.1995

    def __post_init__(self):
        if self.n_s_prb < 0:
            raise ValueError("n_s_prb must be >= 0")
        if not 1 <= self.m_s_sym <= 14:
            raise ValueError("m_s_sym must lie in 1..14")

    @property
    def n_sc(self) -> int:
        return 12 * self.n_s_prb

    def b_s_hz(self, cfg: SimConfig) -> float:
        return 12 * self.n_s_prb * cfg.scs_hz


@dataclass
class TargetEcho:
    target_id: int
    range_m: float
    radial_velocity_mps: float
    reflect_power: float
    snr_linear: float
    wavelength_m: float = C0 / 5.9e9

    @property
    def tau_s(self) -> float:
        return 2.0 * self.range_m / C0

    @property
    def doppler_hz(self) -> float:
        return 2.0 * self.radial_velocity_mps / self.wavelength_m


@dataclass
class SensingReport:
    detected: list
    crlb_range_m2: np.ndarray
    crlb_vel_m2s2: np.ndarray
    weights: np.ndarray
    penalty: float
    penalty_norm: float
    data_bits: int
    workload_cycles: int
    in_range: list = field(default_factory=list)


# link budget ----------------------------------------------------------------

def reflection_power(range_m, cfg: SimConfig, antenna_gain_lin: float | None = None):
    """Two-way radar equation |zeta|^2 = Gt Gr lambda^2 sigma / ((4 pi)^3 r^4)."""
    r = np.asarray(range_m, dtype=float)
    if np.any(r <= 0):
        raise ValueError("range must be positive")
    g = cfg.antenna_gain_lin if antenna_gain_lin is None else antenna_gain_lin
    sigma = 10 ** (cfg.rcs_dbsm / 10)
    lam = cfg.wavelength_m
    out = g * g * lam * lam * sigma / ((4 * np.pi) ** 3 * r ** 4)
    return float(out) if out.ndim == 0 else out


def noise_power_w(n_s_prb, cfg: SimConfig):
    """Thermal noise over the sensing bandwidth, kT B NF."""
    return cfg.noise_psd_w_per_hz * 12 * np.asarray(n_s_prb) * cfg.scs_hz


def snr_from_power(reflect_power, n_s_prb, cfg: SimConfig, p_tx_w=None, rho_si=None):
    p = cfg.tx_power_w if p_tx_w is None else p_tx_w
    rho = cfg.rho_si if rho_si is None else rho_si
    return p * reflect_power / (noise_power_w(n_s_prb, cfg) + rho * p)


def sensing_snr(echo: TargetEcho | float, alloc: SensingAlloc, cfg: SimConfig,
                noise_w: float | None = None, rho_si: float | None = None) -> float:
    """Effective per-sample SNR p|zeta|^2 / (sigma_z^2 + rho_SI p)."""
    zeta2 = echo.reflect_power if isinstance(echo, TargetEcho) else float(echo)
    p = alloc.p_tx_w
    rho = cfg.rho_si if rho_si is None else rho_si
    nz = noise_power_w(alloc.n_s_prb, cfg) if noise_w is None else noise_w
    return float(p * zeta2 / (nz + rho * p))


# CRLB -------------------------------------------------------------------------

def crlb_coefficients(n_sc, m_sym, cfg: SimConfig):
    """Return (K_r, K_v) such that var_r = K_r / snr and var_v = K_v / snr.

    Invalid allocations (n_sc < 2 or m_sym < 2) give NaN.
    """
    n = np.asarray(n_sc, dtype=float)
    m = np.asarray(m_sym, dtype=float)
    ok = (n >= 2) & (m >= 2)
    n_ = np.where(ok, n, 2.0)
    m_ = np.where(ok, m, 2.0)
    base = 3.0 * C0 ** 2 / (8.0 * np.pi ** 2 * m_ * n_)
    kr = base / ((n_ ** 2 - 1.0) * cfg.scs_hz ** 2)
    kv = base / (cfg.carrier_freq_hz ** 2 * (m_ ** 2 - 1.0) * cfg.sym_s ** 2)
    kr = np.where(ok, kr, np.nan)
    kv = np.where(ok, kv, np.nan)
    return kr, kv


def crlb(alloc: SensingAlloc, snr_linear: float, cfg: SimConfig) -> tuple[float, float]:
    """Range (m^2) and radial-velocity ((m/s)^2) Cramer-Rao bounds."""
    n, m = alloc.n_sc, alloc.m_s_sym
    if n < 2 or m < 2:
        raise CrlbUndefined(f"CRLB undefined for n_sc={n}, m_s_sym={m}")
    if snr_linear < 0:
        raise ValueError("snr must be non-negative")
    if snr_linear == 0:
        return float("inf"), float("inf")
    kr, kv = crlb_coefficients(n, m, cfg)
    return float(kr) / snr_linear, float(kv) / snr_linear


def penalty_reference(cfg: SimConfig) -> float:
    """Weighted CRLB of a single target sitting exactly at the detection limit
    with the smallest valid allocation (2 PRBs, 2 symbols)."""
    n_sc, m = 24, 2
    snr = cfg.gamma_det_lin / (n_sc * m)
    kr, kv = crlb_coefficients(n_sc, m, cfg)
    br, bv = cfg.crlb_weights
    return float(br * kr / snr + bv * kv / snr)


def sensing_data_bits(n_s_prb, m_s_sym, cfg: SimConfig):
    """Raw I/Q payload 2 * N_sc * M * b (integer)."""
    return 2 * 12 * np.asarray(n_s_prb, dtype=np.int64) * np.asarray(m_s_sym, dtype=np.int64) * int(cfg.b_quant_bits)


def inverse_distance_weights(ranges) -> np.ndarray:
    r = np.asarray(ranges, dtype=float)
    if r.size == 0:
        return r
    w = 1.0 / np.maximum(r, 1e-9)
    return w / w.sum()


def build_report(ranges_m, alloc: SensingAlloc, cfg: SimConfig,
                 velocities_mps=None) -> SensingReport:
    """Sensing report of one vehicle against targets at the given ranges.

    A target is detected when it is within the sensing range and its
    coherently integrated SNR (N_sc * M * gamma) reaches the detection
    threshold; the penalty averages the weighted CRLB over detected targets.
    ``penalty_norm`` is the bounded score used in the cost, where targets in
    range but missed count as a full unit penalty.
    """
    r = np.maximum(np.asarray(ranges_m, dtype=float).ravel(), 1.0)
    d_bits = int(sensing_data_bits(alloc.n_s_prb, alloc.m_s_sym, cfg))
    v_cyc = int(cfg.kappa_s_cycles_per_bit * d_bits)
    in_range = np.flatnonzero(r <= cfg.r_sens_m)
    valid = alloc.n_sc >= 2 and alloc.m_s_sym >= 2
    zeta2 = reflection_power(r, cfg) if r.size else r
    snr = snr_from_power(zeta2, alloc.n_s_prb, cfg, p_tx_w=alloc.p_tx_w) if r.size else r
    if valid:
        det_mask = np.zeros(r.size, dtype=bool)
        det_mask[in_range] = alloc.n_sc * alloc.m_s_sym * snr[in_range] >= cfg.gamma_det_lin
    else:
        det_mask = np.zeros(r.size, dtype=bool)
    det = np.flatnonzero(det_mask)
    br, bv = cfg.crlb_weights
    if det.size:
        kr, kv = crlb_coefficients(alloc.n_sc, alloc.m_s_sym, cfg)
        cr = float(kr) / snr[det]
        cv = float(kv) / snr[det]
        w = inverse_distance_weights(r[det])
        pen = float(np.sum(w * (br * cr + bv * cv)))
    else:
        cr = cv = w = np.zeros(0)
        pen = 0.0
    eps_ref = penalty_reference(cfg)
    if in_range.size:
        w_all = inverse_distance_weights(r[in_range])
        score = np.ones(in_range.size)
        if det.size:
            pos = np.searchsorted(in_range, det)
            score[pos] = np.minimum((br * cr + bv * cv) / eps_ref, 1.0)
        pen_norm = float(np.sum(w_all * score))
    else:
        pen_norm = 0.0
    return SensingReport(det.tolist(), cr, cv, w, pen, pen_norm, d_bits, v_cyc, in_range.tolist())


# vectorised per-slot evaluation ---------------------------------------------

class FleetSensing:
    """Per-epoch constants for fast per-slot penalties of all vehicles.

    For vehicle i with allocation (N_sc, M) the SNR against a target at range
    r is C_i / r^4 and the weighted CRLB is Q_i * r^4, so detection reduces to
    a per-vehicle radius test.
    """

    def __init__(self, cfg: SimConfig, n_s_prb, m_s_sym):
        self.cfg = cfg
        n_s = np.asarray(n_s_prb, dtype=np.int64)
        m_s = np.asarray(m_s_sym, dtype=np.int64)
        self.n_sc = 12 * n_s
        self.m_s = m_s
        self.valid = (self.n_sc >= 2) & (m_s >= 2)
        a = reflection_power(1.0, cfg)  # |zeta|^2 at 1 m
        p = cfg.tx_power_w
        self.snr_c = p * a / (noise_power_w(n_s, cfg) + cfg.rho_si * p)
        kr, kv = crlb_coefficients(self.n_sc, m_s, cfg)
        self.kr = kr
        self.kv = kv
        br, bv = cfg.crlb_weights
        with np.errstate(invalid="ignore"):
            self.q = np.where(self.valid, (br * kr + bv * kv) / self.snr_c, np.nan)
        self._q0 = np.nan_to_num(self.q)
        # detection radius^4
        self.det_r4 = np.where(self.valid, self.n_sc * m_s * self.snr_c / cfg.gamma_det_lin, 0.0)
        self.eps_ref = penalty_reference(cfg)
        self.data_bits = sensing_data_bits(n_s, m_s, cfg)
        self.workload = self.data_bits * int(cfg.kappa_s_cycles_per_bit)
        r4 = cfg.ref_distance_m ** 4
        with np.errstate(invalid="ignore"):
            self.ref_root_crlb_range = np.sqrt(kr * r4 / self.snr_c)
            self.ref_root_crlb_vel = np.sqrt(kv * r4 / self.snr_c)

    def penalties(self, dist: np.ndarray, self_col=None):
        """Raw and normalised penalties for a (rows, N) distance matrix.

        Row k belongs to the vehicle whose own column is ``self_col[k]``
        (default: the diagonal of a square matrix)."""
        n = dist.shape[0]
        r = np.maximum(dist, 1.0)
        in_range = r <= self.cfg.r_sens_m
        cols = np.arange(n) if self_col is None else np.asarray(self_col)
        in_range[np.arange(n), cols] = False
        r2 = r * r
        r4 = r2 * r2
        det = in_range & (r4 <= self.det_r4[:, None])
        inv = np.where(in_range, 1.0 / r, 0.0)
        s_all = inv.sum(axis=1)
        inv_det = np.where(det, inv, 0.0)
        s_det = inv_det.sum(axis=1)
        eps_l = np.where(det, self._q0[:, None] * r4, 0.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            raw = np.where(s_det > 0, (inv_det * eps_l).sum(axis=1) / s_det, 0.0)
            score = np.where(det, np.minimum(eps_l / self.eps_ref, 1.0), 1.0)
            norm = np.where(s_all > 0, (inv * score).sum(axis=1) / s_all, 0.0)
        return raw, norm, det.sum(axis=1)


# range-Doppler map oracle --------------------------------------------------

def synthesize_echo(n_sc: int, m_sym: int, delay_bins: float, doppler_bins: float,
                    snr_linear: float, rng: np.random.Generator, amplitude_phase: float = 0.0,
                    noise: bool = True) -> np.ndarray:
    """Symbol-domain echo y[n, m] after removing the known data symbols.

    Delay and Doppler are given in DFT-bin units of the n_sc x m_sym grid.
    The per-sample SNR is |a|^2 / sigma^2 with unit noise variance.
    """
    n = np.arange(n_sc)[:, None]
    m = np.arange(m_sym)[None, :]
    a = np.sqrt(snr_linear) * np.exp(1j * amplitude_phase)
    y = a * np.exp(-2j * np.pi * n * delay_bins / n_sc) * np.exp(2j * np.pi * m * doppler_bins / m_sym)
    if noise:
        y = y + (rng.standard_normal((n_sc, m_sym)) + 1j * rng.standard_normal((n_sc, m_sym))) / np.sqrt(2)
    return y


def rd_map(y: np.ndarray, pad: int = 1, window: str | None = None) -> np.ndarray:
    """|2-D DFT|^2: IDFT over subcarriers (range), DFT over symbols (Doppler)."""
    n_sc, m_sym = y.shape
    if window == "hann":
        y = y * np.hanning(n_sc + 2)[1:-1, None] * np.hanning(m_sym + 2)[None, 1:-1]
    elif window is not None:
        raise ValueError(f"unknown window {window!r}")
    # unnormalised IDFT so that the peak scales with N*M like the DFT
    z = np.fft.ifft(y, n=pad * n_sc, axis=0) * (pad * n_sc)
    z = np.fft.fft(z, n=pad * m_sym, axis=1)
    return np.abs(z) ** 2


def rd_map_oracle(alloc: SensingAlloc, echo: TargetEcho | None, noise_snr: float | None,
                  rng: np.random.Generator, cfg: SimConfig, pad: int = 1,
                  window: str | None = None):
    """Synthesize an echo for ``echo`` and return (range_bin, doppler_bin, map).

    ``noise_snr`` is the per-sample SNR; None uses ``echo.snr_linear``. With
    echo None the map contains noise only.
    """
    n_sc, m = alloc.n_sc, alloc.m_s_sym
    if echo is None:
        y = synthesize_echo(n_sc, m, 0.0, 0.0, 0.0, rng)
    else:
        snr = echo.snr_linear if noise_snr is None else noise_snr
        dr = C0 / (2.0 * n_sc * cfg.scs_hz)
        dv = cfg.wavelength_m / (2.0 * m * cfg.sym_s)
        y = synthesize_echo(n_sc, m, echo.range_m / dr, echo.radial_velocity_mps / dv, snr, rng,
                            noise=np.isfinite(snr) and noise_snr != np.inf)
    mp = rd_map(y, pad=pad, window=window)
    k = int(np.argmax(mp))
    kr, kd = np.unravel_index(k, mp.shape)
    return int(kr), int(kd), mp


def _window(n: int, window: str | None) -> np.ndarray:
    if window is None:
        return np.ones(n)
    if window == "hann":
        return np.hanning(n + 2)[1:-1]
    raise ValueError(f"unknown window {window!r}")


def estimate_delay_doppler(y: np.ndarray, pad: int = 8, window: str | None = "hann"):
    """Fractional (range_bin, doppler_bin) estimate.

    Coarse search on the zero-padded RD map, then a local continuous
    maximisation of the same windowed 2-D periodogram around the coarse peak.
    """
    from scipy.optimize import minimize

    n_sc, m_sym = y.shape
    mp = rd_map(y, pad=pad, window=window)
    kr, kd = np.unravel_index(int(np.argmax(mp)), mp.shape)
    yw = y * _window(n_sc, window)[:, None] * _window(m_sym, window)[None, :]
    n = np.arange(n_sc)
    m = np.arange(m_sym)

    def neg_power(x):
        en = np.exp(2j * np.pi * n * x[0] / n_sc)
        em = np.exp(-2j * np.pi * m * x[1] / m_sym)
        return -abs(en @ yw @ em) ** 2

    x0 = np.array([kr / pad, kd / pad])
    res = minimize(neg_power, x0, method="Nelder-Mead",
                   options={"xatol": 1e-9, "fatol": 1e-12 * abs(neg_power(x0)) + 1e-300,
                            "initial_simplex": np.array([x0, x0 + [0.5 / pad, 0], x0 + [0, 0.5 / pad]])})
    p, q = res.x
    # map to the symmetric intervals of both axes
    p = (p + n_sc / 2) % n_sc - n_sc / 2
    q = (q + m_sym / 2) % m_sym - m_sym / 2
    return float(p), float(q)


def estimate_range_bin(y: np.ndarray, pad: int = 8, window: str | None = "hann") -> float:
    return estimate_delay_doppler(y, pad=pad, window=window)[0]


def crlb_sweep_rows(distances_m, n_s_list, m_s_list, cfg: SimConfig):
    rows = []
    for d in distances_m:
        for ns in n_s_list:
            for ms in m_s_list:
                al = SensingAlloc(int(ns), int(ms), cfg.tx_power_w)
                g = sensing_snr(reflection_power(float(d), cfg), al, cfg)
                try:
                    vr, vv = crlb(al, g, cfg)
                    rows.append((float(d), int(ns), int(ms), float(np.sqrt(vr)), float(np.sqrt(vv))))
                except CrlbUndefined:
                    continue
    return rows


def write_crlb_sweep(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["distance_m", "n_s_prb", "m_s_sym", "root_crlb_range_m", "root_crlb_vel_mps"])
        for r in rows:
            w.writerow([repr(r[0]), r[1], r[2], repr(r[3]), repr(r[4])])
