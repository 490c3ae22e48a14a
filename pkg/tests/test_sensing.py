import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from iscc import sensing
from iscc.config import SimConfig
from iscc.sensing import C0, CrlbUndefined, SensingAlloc


def test_alloc_bandwidth(cfg):
    a = SensingAlloc(4, 4)
    assert a.n_sc == 48
    assert a.b_s_hz(cfg) == 12 * 4 * 15e3
    with pytest.raises(ValueError):
        SensingAlloc(2, 15)
    with pytest.raises(ValueError):
        SensingAlloc(-1, 2)


def test_echo_geometry():
    e = sensing.TargetEcho(0, 150.0, 10.0, 1.0, 1.0)
    assert e.tau_s == 2 * 150.0 / C0
    assert e.doppler_hz == 2 * 10.0 / (C0 / 5.9e9)


def test_reflection_power_oracle(cfg):
    # G = 3 dB, lambda = c/5.9 GHz, sigma = 10 m^2, r = 50 m
    z = sensing.reflection_power(50.0, cfg)
    assert z == pytest.approx(8.3e-12, rel=0.01)
    assert z == pytest.approx(8.287580753467908e-12, rel=1e-12)
    assert sensing.reflection_power(100.0, cfg) == pytest.approx(z / 16, rel=1e-12)
    assert sensing.reflection_power(50.0, cfg.replace(rcs_dbsm=20.0)) == pytest.approx(10 * z, rel=1e-12)
    with pytest.raises(ValueError):
        sensing.reflection_power(0.0, cfg)


def test_sensing_snr_cases(cfg):
    a = SensingAlloc(4, 4)
    z = 1e-9
    p = a.p_tx_w
    assert sensing.sensing_snr(z, a, cfg, noise_w=p * z, rho_si=0.0) == pytest.approx(1.0, rel=1e-15)
    assert cfg.rho_si * cfg.tx_power_w == pytest.approx(1.995e-8, rel=1e-12)
    g = sensing.sensing_snr(sensing.reflection_power(50.0, cfg), a, cfg)
    assert g == pytest.approx(8.3e-5, rel=0.01)
    assert g == pytest.approx(8.287571240891643e-05, rel=1e-12)


def test_crlb_oracle(cfg):
    vr, vv = sensing.crlb(SensingAlloc(4, 4), 3162.0, cfg)
    assert vr == pytest.approx(1.087e-2, rel=2e-3)
    assert np.sqrt(vr) == pytest.approx(0.104, abs=1e-3)
    assert vr == pytest.approx(0.010855088731793049, rel=1e-12)
    assert vv == pytest.approx(0.002423801610283049, rel=1e-12)


def test_crlb_scaling_and_errors(cfg):
    a = SensingAlloc(4, 4)
    vr, vv = sensing.crlb(a, 100.0, cfg)
    vr2, vv2 = sensing.crlb(a, 200.0, cfg)
    assert vr2 == pytest.approx(vr / 2, rel=1e-14) and vv2 == pytest.approx(vv / 2, rel=1e-14)
    with pytest.raises(CrlbUndefined):
        sensing.crlb(SensingAlloc(4, 1), 100.0, cfg)
    with pytest.raises(CrlbUndefined):
        sensing.crlb(SensingAlloc(0, 4), 100.0, cfg)
    assert sensing.crlb(a, 0.0, cfg) == (float("inf"), float("inf"))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 11), st.integers(2, 13), st.floats(1e-3, 1e6))
def test_crlb_strictly_decreasing(n, m, g):
    cfg = SimConfig()
    base = sensing.crlb(SensingAlloc(n, m), g, cfg)
    for other in (sensing.crlb(SensingAlloc(n + 1, m), g, cfg), sensing.crlb(SensingAlloc(n, m + 1), g, cfg),
                  sensing.crlb(SensingAlloc(n, m), 2 * g, cfg)):
        assert other[0] < base[0] and other[1] < base[1]


def test_report_empty_and_weights(cfg):
    a = SensingAlloc(12, 14)
    r = sensing.build_report([], a, cfg)
    assert r.detected == [] and r.penalty == 0.0 and r.penalty_norm == 0.0
    assert np.allclose(sensing.inverse_distance_weights([10.0, 30.0]), [0.75, 0.25])
    r = sensing.build_report([5.0, 15.0], a, cfg)
    assert r.detected == [0, 1]
    assert np.allclose(r.weights, [0.75, 0.25])
    assert np.isclose(r.weights.sum(), 1.0) and np.all(r.weights >= 0)


def test_report_single_target_equals_weighted_crlb(cfg):
    a = SensingAlloc(12, 14)
    r = sensing.build_report([12.0], a, cfg)
    assert r.detected == [0]
    g = sensing.sensing_snr(sensing.reflection_power(12.0, cfg), a, cfg)
    vr, vv = sensing.crlb(a, g, cfg)
    assert r.penalty == pytest.approx(0.5 * vr + 0.5 * vv, rel=1e-12)


def test_data_bits_and_workload(cfg):
    r = sensing.build_report([], SensingAlloc(4, 4), cfg)
    assert r.data_bits == 3072 and r.workload_cycles == 3072 * 500
    assert isinstance(r.data_bits, int)
    assert sensing.sensing_data_bits(np.array([4, 12]), np.array([4, 14]), cfg).dtype == np.int64


def test_out_of_range_not_detected(cfg):
    r = sensing.build_report([151.0, 400.0], SensingAlloc(12, 14), cfg)
    assert r.detected == [] and r.in_range == []


def test_fleet_penalties_match_reports(cfg):
    rng = np.random.default_rng(0)
    n = 7
    d = rng.uniform(1.0, 200.0, size=(n, n))
    d = (d + d.T) / 2
    np.fill_diagonal(d, 0.0)
    n_s = rng.integers(0, 13, size=n)
    m_s = rng.integers(1, 15, size=n)
    raw, norm, ndet = sensing.FleetSensing(cfg, n_s, m_s).penalties(d)
    for i in range(n):
        others = np.delete(d[i], i)
        rep = sensing.build_report(others, SensingAlloc(int(n_s[i]), int(m_s[i])), cfg)
        assert raw[i] == pytest.approx(rep.penalty, rel=1e-10, abs=1e-300)
        assert norm[i] == pytest.approx(rep.penalty_norm, rel=1e-10, abs=1e-15)
        assert ndet[i] == len(rep.detected)
        assert 0.0 <= norm[i] <= 1.0


def test_penalty_reference_is_unit_score(cfg):
    # a target exactly at the detection limit with the minimum allocation
    assert cfg.crlb_weights == (0.5, 0.5)
    assert sensing.penalty_reference(cfg) > 0


def test_rd_map_peak_on_bin(cfg):
    a = SensingAlloc(4, 8)
    dr = C0 / (2 * a.n_sc * cfg.scs_hz)
    e = sensing.TargetEcho(0, 2 * dr, 0.0, 1.0, 1000.0)
    kr, kd, mp = sensing.rd_map_oracle(a, e, None, np.random.default_rng(0), cfg)
    assert (kr, kd) == (2, 0)
    assert mp.shape == (48, 8)


def test_rd_map_noise_mean(cfg):
    a = SensingAlloc(4, 8)
    rng = np.random.default_rng(1)
    means = [sensing.rd_map_oracle(a, None, None, rng, cfg)[2].mean() for _ in range(200)]
    assert np.mean(means) == pytest.approx(48 * 8, rel=0.05)


def test_rd_map_doppler_symmetry():
    y = sensing.synthesize_echo(24, 8, 3.0, 0.0, 100.0, np.random.default_rng(0), noise=False)
    mp = sensing.rd_map(y)
    assert np.allclose(mp[:, 1:], mp[:, 1:][:, ::-1], rtol=1e-9, atol=1e-6 * mp.max())


@settings(max_examples=20, deadline=None)
@given(st.floats(-10, 10), st.floats(-3, 3))
def test_fractional_estimator_noiseless(p, q):
    assume(abs(p) < 10 and abs(q) < 3)
    y = sensing.synthesize_echo(24, 8, p, q, 100.0, np.random.default_rng(0), noise=False)
    ep, eq = sensing.estimate_delay_doppler(y)
    assert ep == pytest.approx(p, abs=1e-4) and eq == pytest.approx(q, abs=1e-4)


def test_crlb_sweep_csv(tmp_path, cfg):
    rows = sensing.crlb_sweep_rows([20.0, 80.0], [0, 4], [1, 4], cfg)
    assert len(rows) == 2  # only the (4, 4) allocation is valid
    sensing.write_crlb_sweep(tmp_path / "s.csv", rows)
    head = (tmp_path / "s.csv").read_text().splitlines()[0]
    assert head == "distance_m,n_s_prb,m_s_sym,root_crlb_range_m,root_crlb_vel_mps"
