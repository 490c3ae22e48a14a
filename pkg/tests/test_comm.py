import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iscc import comm
from iscc.config import SimConfig


def test_arrival_statistics(cfg):
    a = comm.arrivals(100_000, np.random.default_rng(0), cfg)
    assert set(np.unique(a)) <= {0.0, 1520.0}
    assert abs((a > 0).mean() - 0.01) < 0.002
    assert not comm.arrivals(1000, np.random.default_rng(0), cfg.replace(msg_rate_hz=0.0)).any()


def test_sinr_cases():
    g = np.array([[0.0, 1e-9, 1e-9], [1e-9, 0.0, 1e-9]])
    noise = np.array([1e-15, 1e-15])
    s = comm.sinr_matrix(0.2, g[:1], np.array([[True]]), noise[:1])
    assert s[0, 1] == pytest.approx(0.2 * 1e-9 / 1e-15, rel=1e-12)
    same = np.ones((2, 2), dtype=bool)
    s = comm.sinr_matrix(0.2, g, same, noise)
    assert s[0, 2] == pytest.approx(1.0, rel=1e-5)
    diff = np.eye(2, dtype=bool)
    s2 = comm.sinr_matrix(0.2, g, diff, noise)
    assert s2[0, 2] == pytest.approx(0.2 * 1e-9 / 1e-15, rel=1e-12)


def test_tx_outcome_examples(cfg):
    db = np.array([10.0, 9.0, 5.0])
    out = comm.tx_outcome(10 ** (db / 10), 4, cfg)
    assert out.prr == pytest.approx(2 / 3)
    assert out.decoded.tolist() == [True, True, False]
    assert comm.shannon_rate(4, 15.0, cfg) == pytest.approx(720e3 * 4, rel=1e-12)
    z = comm.tx_outcome([0.1, 0.2], 4, cfg, queue_bits=3000.0)
    assert z.prr == 0 and z.rate_eff_bps == 0 and z.delivered_bits == 0
    assert z.sl_delay_s == cfg.delay_cap_s
    e = comm.tx_outcome([], 4, cfg)
    assert e.prr == 1.0 and e.delivered_bits == pytest.approx(cfg.slot_s * e.rate_bps)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1e4), min_size=1, max_size=20), st.integers(1, 12))
def test_tx_outcome_invariants(sinrs, n_c):
    cfg = SimConfig()
    o = comm.tx_outcome(sinrs, n_c, cfg)
    assert 0.0 <= o.prr <= 1.0
    assert o.rate_eff_bps <= o.rate_bps + 1e-9
    assert o.delivered_bits == pytest.approx(cfg.slot_s * o.rate_eff_bps)
    assert np.array_equal(o.decoded, np.asarray(sinrs) >= cfg.snr_threshold_lin)
    hi = comm.tx_outcome(sinrs, n_c, cfg.replace(snr_decode_threshold_db=12.0))
    assert hi.prr <= o.prr


def test_update_queue_examples():
    assert comm.update_queue(5000.0, 3000.0, 1520.0) == (3520.0, 3000.0)
    assert comm.update_queue(0.0, 3000.0, 0.0) == (0.0, 0.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 5000), st.sampled_from([0.0, 1520.0])), min_size=1, max_size=50))
def test_queue_conservation(trace):
    q = q0 = 0.0
    served_tot = arr_tot = 0.0
    for dlv, a in trace:
        q, s = comm.update_queue(q, dlv, a)
        assert q >= 0 and s <= dlv
        served_tot += s
        arr_tot += a
    assert arr_tot == served_tot + q - q0


def test_utility_examples(cfg):
    assert comm.comm_utility(1.0, cfg.min_rate_bps, cfg) == (1.0, 0.0)
    assert comm.comm_utility(0.0, 0.0, cfg) == (0.0, 1.0)
    u, phi = comm.comm_utility(0.8, 0.5 * cfg.min_rate_bps, cfg)
    assert u == pytest.approx(0.65) and phi == pytest.approx(0.35)


def test_min_prb_demand(cfg):
    # per-PRB payload 1e-3 * 0.95 * 180e3 * log2(16) = 684 bits
    assert comm.min_prb_demand(0.95, 15.0, cfg) == 3
    assert comm.min_prb_demand(0.0, 15.0, cfg) == comm.INFEASIBLE
    assert comm.min_prb_demand(0.9, 0.0, cfg) == comm.INFEASIBLE
    assert comm.min_prb_demand(0.5, 3.0, cfg, d_min_bits=0) == 0


def test_max_reliable_distance():
    assert comm.max_reliable_distance({50: 0.95, 100: 0.9, 150: 0.7}, 0.8) == 100.0
    assert comm.max_reliable_distance({50: 0.5, 100: 0.4}, 0.8) == 0.0
    assert comm.max_reliable_distance({50: 0.95, 100: 0.9}, 0.8) == 100.0
    with pytest.raises(ValueError):
        comm.max_reliable_distance({}, 0.8)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1e6), st.floats(0, 1e7), st.floats(0, 1e7))
def test_delay_decreasing_in_rate(q, r1, r2):
    cfg = SimConfig()
    lo, hi = sorted((r1, r2))
    assert comm.sl_delay(q, hi, cfg) <= comm.sl_delay(q, lo, cfg)
    assert np.isfinite(comm.sl_delay(q, 0.0, cfg))


def test_distance_bins(cfg):
    b = comm.DistanceBins(cfg)
    # bins are centred on multiples of 20 m
    b.add(np.array([9.0, 11.0, 29.0, 305.0, 400.0]), np.array([True, False, True, True, True]))
    assert b.total[0] == 1 and b.total[1] == 2 and b.success[1] == 1
    assert b.total[-1] == 1  # 305 m lands in the 300 m bin, 400 m is dropped
    assert b.table()[20.0] == 0.5
