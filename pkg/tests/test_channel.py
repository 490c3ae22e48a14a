import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iscc import channel
from iscc.config import RngStreams


def test_wrap():
    f = channel.Fleet(np.array([999.0]), np.array([0]), np.array([20.0]), np.array([1.0]), 1000.0)
    assert channel.advance_mobility(f, 0.1).position_m[0] == pytest.approx(1.0, abs=1e-9)


def test_zero_speed_stays():
    f = channel.Fleet(np.array([12.5]), np.array([0]), np.array([0.0]), np.array([-1.0]), 1000.0)
    assert channel.advance_mobility(f, 0.1).position_m[0] == 12.5


def test_dt_must_be_positive():
    f = channel.Fleet(np.array([1.0]), np.array([0]), np.array([1.0]), np.array([1.0]), 10.0)
    with pytest.raises(ValueError):
        channel.advance_mobility(f, 0.0)


def test_placement_invariants(cfg):
    f = channel.place_vehicles(cfg, RngStreams(0).stream("mobility", 0))
    assert f.n == 80
    assert np.all((f.position_m >= 0) & (f.position_m < 1000.0))
    assert np.all((f.speed_mps >= 0) & (f.speed_mps <= 70 / 3.6 + 1e-12))


def test_same_seed_same_trajectory(cfg):
    def run():
        f = channel.place_vehicles(cfg, RngStreams(5).stream("mobility", 0))
        for _ in range(50):
            f = channel.advance_mobility(f, cfg.slot_s)
        return f.position_m
    assert np.array_equal(run(), run())


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 999.999), st.floats(0, 19.44), st.sampled_from([-1.0, 1.0]), st.floats(1e-4, 1.0))
def test_positions_stay_on_ring(x, v, h, dt):
    f = channel.Fleet(np.array([x]), np.array([0]), np.array([v]), np.array([h]), 1000.0)
    p = channel.advance_mobility(f, dt).position_m[0]
    assert 0.0 <= p < 1000.0


def test_pathloss_oracle():
    # free space at 1 m for 5.9 GHz
    pl0 = 20 * np.log10(4 * np.pi * 5.9e9 / 299792458.0)
    assert pl0 == pytest.approx(47.86, abs=5e-3)
    assert channel.pathloss_db(1.0) == pytest.approx(47.86482345472626, rel=1e-12)
    assert channel.pathloss_db(100.0) == pytest.approx(pl0 + 55.0, rel=1e-12)
    assert channel.pathloss_db(0.1) == channel.pathloss_db(1.0)


def test_gain_decreases_with_distance(cfg):
    d = np.linspace(1.0, 500.0, 200)
    g = channel.pathloss_gain(d, cfg)
    assert np.all(np.diff(g) < 0)


def test_v2i_fading_mean(cfg):
    x = channel.draw_v2i_fading(100_000, cfg, np.random.default_rng(0))
    assert abs(x.mean() - 1.0) < 0.02


def test_fading_disabled_gives_pathloss(cfg):
    c = cfg.replace(fading=False)
    f = channel.place_vehicles(c, np.random.default_rng(0), n=6)
    d = channel.pairwise_distance(f, c)
    m = channel.ChannelModel(c, np.random.default_rng(1))
    snap = m.sample_channels(0, f, d)
    assert np.allclose(snap.v2v_gain, channel.pathloss_gain(d, c), rtol=1e-14)
    assert np.allclose(snap.v2i_gain, channel.pathloss_gain(channel.rsu_distance(f, c), c), rtol=1e-14)


def test_snapshot_quasi_static_and_symmetric(cfg):
    f = channel.place_vehicles(cfg, np.random.default_rng(0), n=10)
    d = channel.pairwise_distance(f, cfg)
    m = channel.ChannelModel(cfg, np.random.default_rng(1))
    a = m.sample_channels(3, f, d)
    b = m.sample_channels(3, f, d)
    assert a is b
    g = a.v2v_gain
    assert np.allclose(g, g.T) and np.all(g > 0) and np.all(np.isfinite(g))
    c = m.sample_channels(4, f, d)
    assert not np.array_equal(a.v2i_gain, c.v2i_gain)
    # V2V fading is held for the epoch
    assert np.array_equal(a.v2v_gain, c.v2v_gain)


def test_channel_trace(tmp_path, cfg):
    f = channel.place_vehicles(cfg, np.random.default_rng(0), n=3)
    m = channel.ChannelModel(cfg, np.random.default_rng(1), trace_path=tmp_path / "ch.csv")
    m.sample_channels(0, f, channel.pairwise_distance(f, cfg))
    m.close()
    lines = (tmp_path / "ch.csv").read_text().splitlines()
    assert lines[0] == "slot,i,j,gain_db"
    assert len(lines) == 1 + 3 * 2 + 3


def test_ring_offsets_wrapped():
    f = channel.Fleet(np.array([10.0, 990.0]), np.array([0, 0]), np.zeros(2), np.ones(2), 1000.0)
    dx = channel.ring_offsets(f)
    assert dx[0, 1] == pytest.approx(-20.0) and dx[1, 0] == pytest.approx(20.0)
