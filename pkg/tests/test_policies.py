import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iscc import mac
from iscc.config import SimConfig
from iscc.env import IsccEnv
from iscc.policies import LearnedPolicy, make_policy
from iscc.policies.mappo import (ActorSet, Critic, MarlAgent, actor_loss_and_grad, critic_loss_and_grad, gae,
                                 head_layout, load_checkpoint, mask_vector, ppo_clip_grad, ppo_clip_loss,
                                 save_checkpoint, train)
from iscc.policies.nn import Adam, Mlp, clip_grads, heads_logp_entropy, masked_log_softmax

SMALL = SimConfig(n_prb_pool=16, n_sl_prb_per_vehicle=4, rri_ms=2.0, t_sen_ms=4.0, t_sel_ms=2.0,
                  rc_set=(1, 2), keep_prob_set=(0.0, 0.5), n_o_max_prb=1)


def numgrad(f, net, h=1e-6):
    v = net.flat()
    g = np.zeros_like(v)
    for k in range(v.size):
        e = v.copy()
        e[k] += h
        net.set_flat(e)
        fp = f()
        e[k] -= 2 * h
        net.set_flat(e)
        fm = f()
        g[k] = (fp - fm) / (2 * h)
    net.set_flat(v)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def test_mlp_backward_matches_finite_differences():
    rng = np.random.default_rng(0)
    net = Mlp([16, 8, 4], rng, out_scale=1.0)
    x = rng.normal(size=(5, 16))
    w = rng.normal(size=(5, 4))
    out, cache = net.forward(x)
    ana = np.concatenate([g.ravel() for g in net.backward(cache, w)])
    num = numgrad(lambda: float(np.sum(w * net(x))), net)
    assert rel_err(ana, num) < 1e-6


def _actor_batch(rng, cfg=SMALL, B=6):
    lay = head_layout(cfg)
    acts, eff, persist = [], [], []
    cand = np.arange(cfg.n_resources)[:5]
    for b in range(B):
        resel = b % 2 == 0
        m = mac.build_mask(cfg, cand, resel, None if resel else {"resource": 2, "rc": 1, "keep": 0})
        a = {}
        for h in mac.HEADS:
            dom = m.n_c_mask(a["n_s"]) if h == "n_c" else m.heads[h]
            a[h] = int(rng.choice(np.flatnonzero(dom)))
        acts.append([a[h] for h in mac.HEADS])
        eff.append(mask_vector(m, lay, a["n_s"]))
        persist.append([0.0 if m.frozen[h] else 1.0 for h in mac.HEADS])
    return np.array(acts), np.array(eff), np.array(persist)


@pytest.mark.parametrize("algo", ["mappo", "a2c"])
def test_actor_gradient_check(algo):
    rng = np.random.default_rng(1)
    actors = ActorSet(SMALL, 1, rng, hidden=(8,), shared=False, obs_dim=16)
    for w in actors.nets[0].W:
        w *= 50  # make the output layer non-trivial
    acts, eff, persist = _actor_batch(rng)
    x = rng.normal(size=(6, 16))
    adv = rng.normal(size=6)
    logp0, _, _, _ = actors.evaluate(0, x, eff, acts, persist)
    old = logp0 + rng.uniform(-0.05, 0.05, size=6)  # ratios strictly inside the clip band
    loss, grads, _ = actor_loss_and_grad(actors, 0, x, eff, acts, persist, adv, old, SMALL, algo)
    ana = np.concatenate([g.ravel() for g in grads])
    num = numgrad(lambda: actor_loss_and_grad(actors, 0, x, eff, acts, persist, adv, old, SMALL, algo)[0],
                  actors.nets[0])
    assert rel_err(ana, num) < 1e-5


def test_critic_gradient_check():
    rng = np.random.default_rng(2)
    critic = Critic(16, SMALL, rng, hidden=(8, 4))
    s = rng.normal(size=(7, 16))
    tgt = rng.normal(size=7)
    _, grads = critic_loss_and_grad(critic, s, tgt, SMALL)
    ana = np.concatenate([g.ravel() for g in grads])
    num = numgrad(lambda: critic_loss_and_grad(critic, s, tgt, SMALL)[0], critic.net)
    assert rel_err(ana, num) < 1e-6


def test_mappo_reduces_to_a2c_without_clipping():
    rng = np.random.default_rng(3)
    actors = ActorSet(SMALL, 1, rng, hidden=(8,), shared=False, obs_dim=16)
    acts, eff, persist = _actor_batch(rng)
    x = rng.normal(size=(6, 16))
    adv = rng.normal(size=6)
    old, _, _, _ = actors.evaluate(0, x, eff, acts, persist)
    _, g1, _ = actor_loss_and_grad(actors, 0, x, eff, acts, persist, adv, old, SMALL, "mappo", clip_eps=np.inf)
    _, g2, _ = actor_loss_and_grad(actors, 0, x, eff, acts, persist, adv, old, SMALL, "a2c")
    for a, b in zip(g1, g2):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)


def test_zero_advantage_only_entropy_gradient():
    rng = np.random.default_rng(4)
    cfg = SMALL.replace(entropy_coef=0.0)
    actors = ActorSet(cfg, 1, rng, hidden=(8,), shared=False, obs_dim=16)
    acts, eff, persist = _actor_batch(rng)
    x = rng.normal(size=(6, 16))
    old, _, _, _ = actors.evaluate(0, x, eff, acts, persist)
    for algo in ("mappo", "a2c"):
        _, g, _ = actor_loss_and_grad(actors, 0, x, eff, acts, persist, np.zeros(6), old, cfg, algo)
        assert all(np.all(gi == 0) for gi in g)


def test_gae_examples():
    _, adv, tgt = gae([0.5], [0.0], 0.99, 0.95)
    assert adv[0] == pytest.approx(0.5)
    _, adv, _ = gae([0.5, 1.0], [0.0, 0.0], 0.99, 0.95)
    assert adv[0] == pytest.approx(0.5 + 0.9405 * 1.0)
    r = np.array([0.1, -0.2, 0.3])
    v = np.array([0.5, 0.4, -0.1])
    _, a1, _ = gae(r, v, 0.9, 1.0)
    mc = np.array([sum(0.9 ** j * r[k + j] for j in range(3 - k)) for k in range(3)])
    np.testing.assert_allclose(a1, mc - v, atol=1e-14)
    d, a0, t0 = gae(r, v, 0.9, 0.0)
    np.testing.assert_allclose(a0, d, atol=1e-15)
    np.testing.assert_allclose(t0, r + 0.9 * np.append(v[1:], 0.0), atol=1e-15)


def test_ppo_clip_examples():
    assert ppo_clip_loss(1.5, 1.0, 0.2) == pytest.approx(1.2)
    assert ppo_clip_loss(0.5, -1.0, 0.2) == pytest.approx(-0.8)
    assert ppo_clip_loss(1.0, 0.7, 0.2) == pytest.approx(0.7)
    assert ppo_clip_grad(1.5, 1.0, 0.2) == 0.0
    assert ppo_clip_grad(1.1, 1.0, 0.2) == 1.0
    with pytest.raises(ValueError):
        ppo_clip_loss(0.0, 1.0, 0.2)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-3, 10), st.floats(-5, 5), st.floats(0.01, 0.5))
def test_ppo_clip_bounded_by_unclipped(rho, a, eps):
    assert ppo_clip_loss(rho, a, eps) <= rho * a + 1e-12


def test_masked_softmax():
    z = np.array([[1.0, 2.0, 3.0]])
    m = np.array([[True, False, True]])
    lp = masked_log_softmax(z, m)
    assert np.exp(lp[0, 1]) == 0.0
    assert np.exp(lp).sum() == pytest.approx(1.0)
    with pytest.raises(AssertionError, match="all-masked"):
        masked_log_softmax(z, np.zeros_like(m))


def test_frozen_heads_contribute_nothing():
    lay = head_layout(SMALL)
    rng = np.random.default_rng(5)
    z = rng.normal(size=(1, lay.total))
    m = mac.build_mask(SMALL, [0, 1], False, {"resource": 2, "rc": 1, "keep": 0})
    eff = mask_vector(m, lay, 0)[None]
    acts = np.array([[2, 1, 0, 0, 0, 0, 0, 0, 0]])
    pers = np.array([[0.0 if m.frozen[h] else 1.0 for h in mac.HEADS]])
    lp, ent, _ = heads_logp_entropy(z, eff, acts, pers, lay)
    only_mac = pers.copy()
    only_mac[:] = 0
    lp0, ent0, _ = heads_logp_entropy(z, eff, acts, only_mac, lay)
    assert lp0[0] == 0 and ent0[0] == 0
    # frozen heads have one admissible value, so log-prob would be 0 anyway
    full, _, _ = heads_logp_entropy(z, eff, acts, np.ones_like(pers), lay)
    assert full[0] == pytest.approx(lp[0])


def test_sampling_respects_masks_and_is_uniform_on_two_choices():
    rng = np.random.default_rng(6)
    actors = ActorSet(SMALL, 1, rng, hidden=(8,), shared=False, obs_dim=16)
    for w in actors.nets[0].W + actors.nets[0].b:
        w[...] = 0.0  # uniform logits
    m = mac.build_mask(SMALL, [3, 6], True)
    counts = np.zeros(SMALL.n_resources)
    srng = np.random.default_rng(7)
    obs = np.zeros((1, 16))
    for _ in range(4000):
        a, lp, eff, pers = actors.sample(obs, [m], srng)
        assert m.admits(dict(zip(mac.HEADS, a[0])))
        counts[a[0, 0]] += 1
        l2, _, _ = heads_logp_entropy(actors.logits(obs), eff, a, pers, actors.layout)
        assert lp[0] == pytest.approx(l2[0], abs=1e-12)
    assert counts[[3, 6]].sum() == 4000
    assert 0.46 < counts[3] / 4000 < 0.54


def test_adam_and_clip():
    p = [np.array([1.0, -1.0])]
    opt = Adam(p, lr=0.1)
    opt.step([np.array([2.0, -0.5])])
    np.testing.assert_allclose(p[0], [0.9, -0.9], atol=1e-6)
    g, n = clip_grads([np.array([3.0, 4.0])], 1.0)
    assert n == pytest.approx(5.0)
    assert np.linalg.norm(g[0]) == pytest.approx(1.0)


@pytest.fixture
def tiny_cfg():
    return SimConfig(density_veh_per_km=40, n_vehicles=8, steps=3, slots_per_epoch=5,
                     actor_hidden=(16,), critic_hidden=(16,))


def test_training_runs_and_checkpoint_roundtrip(tmp_path, tiny_cfg):
    agent, rows = train(tiny_cfg, "mappo", seed=0, episodes=2, curves_path=tmp_path / "c.csv")
    assert len(rows) == 2 and all(np.isfinite(r["mean_reward"]) for r in rows)
    assert (tmp_path / "c.csv").read_text().startswith("# config_hash=")
    save_checkpoint(tmp_path / "ck", agent)
    back = load_checkpoint(tmp_path / "ck", tiny_cfg)
    for a, b in zip(agent.actors.nets + [agent.critic.net], back.actors.nets + [back.critic.net]):
        assert np.array_equal(a.flat(), b.flat())
    assert np.array_equal(agent.norm.mean, back.norm.mean)
    pol = make_policy("mappo", tiny_cfg, 0, tmp_path / "ck")
    assert isinstance(pol, LearnedPolicy)
    env = IsccEnv(tiny_cfg)
    obs, masks = env.reset(9)
    acts = pol.act(env, obs)
    assert all(m.admits(a.as_dict()) for m, a in zip(masks, acts))
    with pytest.raises(ValueError, match="not ma-a2c"):
        make_policy("ma-a2c", tiny_cfg, 0, tmp_path / "ck")
    with pytest.raises(ValueError, match="head sizes"):
        load_checkpoint(tmp_path / "ck", SMALL)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope", tiny_cfg)


def test_training_is_deterministic(tiny_cfg):
    _, r1 = train(tiny_cfg, "a2c", seed=1, episodes=2)
    _, r2 = train(tiny_cfg, "a2c", seed=1, episodes=2)
    assert repr(r1) == repr(r2)


def test_shared_actor_one_hot(tiny_cfg):
    a = ActorSet(tiny_cfg, 4, np.random.default_rng(0), shared=True)
    x = a.inputs(np.zeros((2, a.obs_dim)), [1, 3])
    assert np.array_equal(x[:, -4:], [[0, 1, 0, 0], [0, 0, 0, 1]])
    with pytest.raises(ValueError):
        MarlAgent(tiny_cfg, 4, np.random.default_rng(0), algo="dqn")
    with pytest.raises(ValueError):
        make_policy("random", tiny_cfg, 0)
