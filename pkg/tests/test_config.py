import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iscc.config import ConfigError, RngStreams, SimConfig, config_hash, load_config, save_config, stream


def test_derived_numerology(cfg):
    assert cfg.scs_hz == 15e3
    assert cfg.slot_s == 1e-3
    assert cfg.sym_s == pytest.approx(1 / 15e3, rel=1e-12)
    # 10e6 / 180e3 = 55.5 usable, minus the 3.5 PRB guard
    assert cfg.n_prb_pool == 52
    assert cfg.rri_slots == 100 and cfg.epoch_slots == 100
    assert cfg.n_subchannels == 4 and cfg.n_resources == 400


def test_numerology_one_halves_the_slot():
    c = SimConfig(numerology_mu=1)
    assert c.slot_s == 0.5e-3 and c.scs_hz == 30e3


def test_weights_accepted_and_sum(cfg):
    assert cfg.weights == (0.30, 0.35, 0.35)
    assert sum(cfg.weights) == pytest.approx(1.0, abs=1e-12)


def test_weights_must_sum_to_one():
    with pytest.raises(ConfigError, match="weights must sum to 1"):
        SimConfig(weights=(0.5, 0.5, 0.5))


@pytest.mark.parametrize("field,value", [("tx_power_w", 0.0), ("carrier_freq_hz", -1.0),
                                         ("delta_c_s", 0.0), ("n_o_max_prb", -1),
                                         ("n_sl_prb_per_vehicle", 60)])
def test_invalid_values_name_the_field(field, value):
    with pytest.raises(ConfigError, match=field):
        SimConfig(**{field: value})


def test_zero_message_rate_is_allowed():
    assert SimConfig(msg_rate_hz=0.0).msg_rate_hz == 0.0


def test_toml_roundtrip(tmp_path, cfg):
    p = tmp_path / "c.toml"
    save_config(cfg.replace(density_veh_per_km=60.0, seed=3), p)
    back = load_config(p, env={})
    assert back == cfg.replace(density_veh_per_km=60.0, seed=3)


def test_json_roundtrip(tmp_path, cfg):
    p = tmp_path / "c.json"
    save_config(cfg, p)
    assert load_config(p, env={}) == cfg


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("bogus_key = 1\n")
    with pytest.raises(ConfigError, match="bogus_key"):
        load_config(p, env={})


def test_parse_error(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("this is = = not toml")
    with pytest.raises(ConfigError, match="cannot parse"):
        load_config(p, env={})


def test_env_seed_override(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 1}))
    assert load_config(p, env={"ISCC_SEED": "9"}).seed == 9
    assert load_config(p, env={}).seed == 1


def test_replace_recomputes_derived():
    c = SimConfig().replace(bandwidth_hz=20e6)
    assert c.n_prb_pool == int(20e6 / 180e3 - 3.5)


def test_config_hash_changes_with_content(cfg):
    assert config_hash(cfg) == config_hash(SimConfig())
    assert config_hash(cfg) != config_hash(cfg.replace(seed=1))


def test_stream_determinism_and_separation():
    rs = RngStreams(7)
    a = stream(rs, "fading", 3).random(16)
    b = stream(rs, "fading", 3).random(16)
    c = stream(rs, "fading", 4).random(16)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_unknown_stream():
    with pytest.raises(KeyError, match="unknown stream"):
        RngStreams(7).stream("x", 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(RngStreams(0).names),
       st.tuples(st.integers(0, 1000), st.integers(0, 1000)))
def test_streams_keyed_by_all_words(seed, name, ent):
    rs = RngStreams(seed)
    x = rs.stream(name, ent).integers(0, 2**62, size=4)
    assert np.array_equal(x, rs.stream(name, ent).integers(0, 2**62, size=4))
    other = RngStreams(seed + 1).stream(name, ent).integers(0, 2**62, size=4)
    assert not np.array_equal(x, other)


def test_replace_keeps_explicit_derived_override():
    c = SimConfig(n_prb_pool=16, n_sl_prb_per_vehicle=4)
    assert c.replace(entropy_coef=0.0).n_prb_pool == 16
