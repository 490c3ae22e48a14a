"""Centralised-critic multi-agent PPO and the advantage actor-critic baseline.

Actors see only their local observation and act through nine masked
categorical heads; the critic sees the concatenated normalised observations
plus the MEC backlogs. Both algorithms share the rollout and critic code and
differ only in the actor loss and the number of update passes.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import mac
from ..config import RngStreams, SimConfig, config_hash
from ..env import OBS_DIM, ActionVector, IsccEnv, ObsNormalizer, encode_obs, global_state
from .nn import Adam, HeadLayout, Mlp, clip_grads, heads_logit_grad, heads_logp_entropy


def gae(rewards, values, gamma: float, lam: float, last_value: float = 0.0):
    """Generalised advantage estimates for one episode.

    Returns (delta, advantage, value_target)."""
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    v_next = np.append(v[1:], last_value)
    delta = r + gamma * v_next - v
    adv = np.zeros_like(delta)
    acc = 0.0
    for k in range(delta.size - 1, -1, -1):
        acc = delta[k] + gamma * lam * acc
        adv[k] = acc
    return delta, adv, adv + v


def ppo_clip_loss(ratio, advantage, epsilon: float):
    """Clipped surrogate min(rho A, clip(rho, 1 - eps, 1 + eps) A)."""
    rho = np.asarray(ratio, dtype=float)
    if np.any(rho <= 0):
        raise ValueError("probability ratios must be positive")
    a = np.asarray(advantage, dtype=float)
    out = np.minimum(rho * a, np.clip(rho, 1.0 - epsilon, 1.0 + epsilon) * a)
    return float(out) if out.ndim == 0 else out


def ppo_clip_grad(ratio, advantage, epsilon: float):
    """d/d(rho) of the clipped surrogate: A where the unclipped branch is
    the minimum, else 0."""
    rho = np.asarray(ratio, dtype=float)
    a = np.asarray(advantage, dtype=float)
    unclipped = rho * a <= np.clip(rho, 1.0 - epsilon, 1.0 + epsilon) * a
    return np.where(unclipped, a, 0.0)


# --------------------------------------------------------------------- actors

def head_layout(cfg: SimConfig) -> HeadLayout:
    sizes = mac.head_sizes(cfg)
    return HeadLayout(mac.HEADS, [sizes[h] for h in mac.HEADS])


def mask_vector(m: mac.ActionMask, layout: HeadLayout, n_s: int | None = None) -> np.ndarray:
    """Concatenated boolean mask; the N_c head is conditioned on ``n_s``."""
    parts = []
    for h in layout.names:
        if h == "n_c" and n_s is not None:
            parts.append(m.n_c_mask(n_s))
        else:
            parts.append(m.heads[h])
    return np.concatenate(parts)


class ActorSet:
    """Per-agent actors, or one shared actor with a one-hot agent id."""

    def __init__(self, cfg: SimConfig, n_agents: int, rng: np.random.Generator,
                 hidden=None, shared: bool | None = None, obs_dim: int = OBS_DIM):
        self.cfg = cfg
        self.n = n_agents
        self.layout = head_layout(cfg)
        if shared is None:
            shared = cfg.share_actor or n_agents > cfg.max_separate_actors
        self.shared = bool(shared)
        self.obs_dim = obs_dim
        self.in_dim = obs_dim + (n_agents if self.shared else 0)
        hidden = tuple(cfg.actor_hidden if hidden is None else hidden)
        dims = [self.in_dim, *hidden, self.layout.total]
        k = 1 if self.shared else n_agents
        self.nets = [Mlp(dims, rng) for _ in range(k)]

    def net_of(self, agent: int) -> int:
        return 0 if self.shared else agent

    def inputs(self, obs: np.ndarray, agents) -> np.ndarray:
        obs = np.atleast_2d(obs)
        if not self.shared:
            return obs
        eye = np.zeros((obs.shape[0], self.n))
        eye[np.arange(obs.shape[0]), np.asarray(agents)] = 1.0
        return np.hstack([obs, eye])

    def logits(self, obs: np.ndarray) -> np.ndarray:
        """(N, total) logits for every agent's current observation."""
        agents = np.arange(self.n)
        x = self.inputs(obs, agents)
        if self.shared:
            return self.nets[0](x)
        return np.vstack([self.nets[i](x[i:i + 1]) for i in range(self.n)])

    def sample(self, obs: np.ndarray, masks, rng: np.random.Generator, greedy: bool = False):
        """Sample one action per agent.

        Returns (actions (N, H), logp (N,), effective masks (N, total),
        persistence (N, H))."""
        L = self.layout
        z = self.logits(obs)
        N = self.n
        H = len(L.names)
        acts = np.zeros((N, H), dtype=np.int64)
        persist = np.ones((N, H))
        eff = np.zeros((N, L.total), dtype=bool)
        u = rng.random((N, H))
        for i, m in enumerate(masks):
            for k, h in enumerate(L.names):
                if h == "n_c":
                    mk = m.n_c_mask(int(acts[i, L.names.index("n_s")]))
                else:
                    mk = m.heads[h]
                eff[i, L.sl(k)] = mk
                if m.frozen.get(h, False):
                    persist[i, k] = 0.0
        logp, _, probs = heads_logp_entropy(z, eff, np.zeros((N, H), dtype=np.int64), persist, L)
        # the N_c mask depends on the sampled N_s, so heads are drawn in order
        for k, h in enumerate(L.names):
            s = L.sl(k)
            if h == "n_c":
                for i, m in enumerate(masks):
                    eff[i, s] = m.n_c_mask(int(acts[i, L.names.index("n_s")]))
                _, _, pr = heads_logp_entropy(z[:, s], eff[:, s], np.zeros((N, 1), dtype=np.int64),
                                              np.ones((N, 1)), HeadLayout([h], [L.sizes[k]]))
                p = pr[0]
            else:
                p = probs[k]
            if greedy:
                acts[:, k] = np.argmax(p, axis=1)
            else:
                c = np.cumsum(p, axis=1)
                c[:, -1] = np.inf
                idx = (c <= u[:, k:k + 1]).sum(axis=1)
                # guard against landing on a zero-probability tail entry
                bad = ~eff[np.arange(N), L.offsets[k] + idx]
                if bad.any():
                    idx[bad] = np.argmax(p[bad], axis=1)
                acts[:, k] = idx
        logp, _, _ = heads_logp_entropy(z, eff, acts, persist, L)
        return acts, logp, eff, persist

    def evaluate(self, net: int, x: np.ndarray, eff, acts, persist):
        out, cache = self.nets[net].forward(x)
        logp, ent, probs = heads_logp_entropy(out, eff, acts, persist, self.layout)
        return logp, ent, probs, cache


class Critic:
    def __init__(self, in_dim: int, cfg: SimConfig, rng: np.random.Generator, hidden=None):
        hidden = tuple(cfg.critic_hidden if hidden is None else hidden)
        self.net = Mlp([in_dim, *hidden, 1], rng, out_scale=1.0)

    def __call__(self, s: np.ndarray) -> np.ndarray:
        return self.net(np.atleast_2d(s))[:, 0]


# --------------------------------------------------------------------- losses

def actor_loss_and_grad(actors: ActorSet, net: int, x, eff, acts, persist, adv, old_logp,
                        cfg: SimConfig, algo: str, clip_eps: float | None = None):
    """Loss to minimise and its parameter gradients for one actor network."""
    logp, ent, probs, cache = actors.evaluate(net, x, eff, acts, persist)
    B = x.shape[0]
    c_e = cfg.entropy_coef
    if algo == "mappo":
        eps = cfg.clip_eps if clip_eps is None else clip_eps
        ratio = np.exp(logp - old_logp)
        obj = ppo_clip_loss(ratio, adv, eps)
        d_ratio = ppo_clip_grad(ratio, adv, eps)
        d_logp = -(d_ratio * ratio) / B
    elif algo == "a2c":
        obj = logp * adv
        d_logp = -adv / B
    else:
        raise ValueError(f"unknown algorithm {algo!r}")
    loss = -float(np.mean(obj)) - c_e * float(np.mean(ent))
    d_ent = np.full(B, -c_e / B)
    g_logits = heads_logit_grad(probs, acts, persist, actors.layout, d_logp, d_ent)
    grads = actors.nets[net].backward(cache, g_logits)
    return loss, grads, float(np.mean(ent))


def critic_loss_and_grad(critic: Critic, s, target, cfg: SimConfig):
    out, cache = critic.net.forward(s)
    v = out[:, 0]
    err = v - target
    loss = cfg.value_coef * float(np.mean(err ** 2))
    d = (2.0 * cfg.value_coef / v.size) * err
    return loss, critic.net.backward(cache, d[:, None])


# -------------------------------------------------------------------- rollout

@dataclass
class TrajectoryBatch:
    obs: np.ndarray        # (T, N, D) normalised
    state: np.ndarray      # (T, S)
    actions: np.ndarray    # (T, N, H)
    logp: np.ndarray       # (T, N)
    masks: np.ndarray      # (T, N, total)
    persist: np.ndarray    # (T, N, H)
    reward: np.ndarray     # (T,)
    value: np.ndarray      # (T,)
    done: np.ndarray       # (T,)
    kpi: dict = field(default_factory=dict)


class MarlAgent:
    """Actors, critic, optimisers and the observation normaliser."""

    def __init__(self, cfg: SimConfig, n_agents: int, rng: np.random.Generator, algo: str = "mappo",
                 actor_hidden=None, critic_hidden=None, shared=None):
        if algo not in ("mappo", "a2c"):
            raise ValueError(f"unknown algorithm {algo!r}")
        self.cfg = cfg
        self.algo = algo
        self.n = n_agents
        self.rng = rng
        self.actors = ActorSet(cfg, n_agents, rng, actor_hidden, shared)
        self.state_dim = n_agents * OBS_DIM + 3
        self.critic = Critic(self.state_dim, cfg, rng, critic_hidden)
        self.norm = ObsNormalizer()
        self.actor_opts = [Adam(net.params, cfg.actor_lr) for net in self.actors.nets]
        self.critic_opt = Adam(self.critic.net.params, cfg.critic_lr)

    def act(self, env: IsccEnv, obs_raw: np.ndarray, update_norm: bool = False, greedy: bool = False):
        o = encode_obs(obs_raw, self.norm, update=update_norm)
        acts, logp, eff, persist = self.actors.sample(o, env.masks, self.rng, greedy)
        return o, acts, logp, eff, persist

    def collect(self, env: IsccEnv, seed: int, episode: int) -> TrajectoryBatch:
        obs_raw, _ = env.reset(seed, episode)
        rec = {k: [] for k in ("obs", "state", "actions", "logp", "masks", "persist", "reward", "value", "done")}
        done = False
        while not done:
            o, acts, logp, eff, persist = self.act(env, obs_raw, update_norm=True)
            s = global_state(o, env.mec.l_c, env.mec.l_s, self.cfg, env.epoch)
            v = float(self.critic(s)[0])
            res = env.step_epoch([ActionVector.from_array(a) for a in acts])
            for k, x in (("obs", o), ("state", s), ("actions", acts), ("logp", logp), ("masks", eff),
                         ("persist", persist), ("reward", res.reward), ("value", v), ("done", res.done)):
                rec[k].append(x)
            obs_raw = res.obs_raw
            done = res.done
        return TrajectoryBatch(**{k: np.asarray(v) for k, v in rec.items()}, kpi=env.kpi.as_dict())

    def update(self, batch: TrajectoryBatch) -> dict:
        cfg = self.cfg
        _, adv, target = gae(batch.reward, batch.value, cfg.gamma, cfg.gae_lambda, 0.0)
        std = adv.std()
        adv_n = (adv - adv.mean()) / (std + 1e-8) if adv.size > 1 else adv - adv.mean()
        T, N = batch.logp.shape
        passes = cfg.ppo_epochs if self.algo == "mappo" else 1
        stats = {"actor_loss": 0.0, "critic_loss": 0.0, "entropy": 0.0}
        groups = ([(0, np.arange(N))] if self.actors.shared
                  else [(i, np.array([i])) for i in range(N)])
        data = []
        for net, agents in groups:
            x = np.concatenate([self.actors.inputs(batch.obs[:, a], np.full(T, a)) for a in agents])
            sel = lambda arr: np.concatenate([arr[:, a] for a in agents])
            data.append((net, x, sel(batch.masks), sel(batch.actions), sel(batch.persist),
                         np.tile(adv_n, agents.size), sel(batch.logp)))
        for _ in range(passes):
            for net, x, eff, acts, persist, a, old in data:
                loss, grads, ent = actor_loss_and_grad(self.actors, net, x, eff, acts, persist, a, old,
                                                       cfg, self.algo)
                _guard(loss, grads, "actor")
                grads, _ = clip_grads(grads, cfg.grad_clip)
                self.actor_opts[net].step(grads)
                stats["actor_loss"] += loss / (passes * len(data))
                stats["entropy"] += ent / (passes * len(data))
            closs, cgrads = critic_loss_and_grad(self.critic, batch.state, target, cfg)
            _guard(closs, cgrads, "critic")
            cgrads, _ = clip_grads(cgrads, cfg.grad_clip)
            self.critic_opt.step(cgrads)
            stats["critic_loss"] += closs / passes
        for net in self.actors.nets + [self.critic.net]:
            if not all(np.all(np.isfinite(p)) for p in net.params):
                raise FloatingPointError("non-finite parameters after update")
        return stats


def _guard(loss, grads, name):
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
        bad = [i for i, g in enumerate(grads) if not np.all(np.isfinite(g))]
        raise FloatingPointError(f"non-finite {name} loss {loss} (bad gradient blocks {bad})")


CURVE_FIELDS = ("episode", "mean_reward", "prr", "crlb_range", "mec_delay_ms")


def train(cfg: SimConfig, algo: str = "mappo", seed: int | None = None, episodes: int | None = None,
          env_factory=None, curves_path=None, progress=None):
    """Train for ``episodes`` episodes. Returns (agent, curve rows)."""
    seed = cfg.seed if seed is None else int(seed)
    episodes = cfg.episodes if episodes is None else int(episodes)
    env = env_factory(cfg) if env_factory is not None else IsccEnv(cfg)
    rng = RngStreams(seed).stream("policy", (0,))
    agent = MarlAgent(cfg, env.n, rng, algo)
    rows = []
    for ep in range(episodes):
        batch = agent.collect(env, seed, ep)
        agent.update(batch)
        k = batch.kpi
        rows.append({"episode": ep, "mean_reward": float(batch.reward.mean()), "prr": k["prr"],
                     "crlb_range": k["crlb_range_m"], "mec_delay_ms": k["mec_delay_ms"]})
        if progress is not None:
            progress(rows[-1])
    if curves_path is not None:
        write_curves(curves_path, rows, cfg)
    return agent, rows


def train_mappo(env_factory, cfg: SimConfig, **kw):
    return train(cfg, "mappo", env_factory=env_factory, **kw)


def train_ma_a2c(env_factory, cfg: SimConfig, **kw):
    return train(cfg, "a2c", env_factory=env_factory, **kw)


def write_curves(path, rows, cfg: SimConfig) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash(cfg)}\n")
        w = csv.writer(fh)
        w.writerow(CURVE_FIELDS)
        for r in rows:
            w.writerow([r["episode"]] + [repr(float(r[k])) for k in CURVE_FIELDS[1:]])


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, agent: MarlAgent) -> None:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    nets = {f"actor_{i}": n for i, n in enumerate(agent.actors.nets)}
    nets["critic"] = agent.critic.net
    manifest = {
        "algo": agent.algo,
        "n_agents": agent.n,
        "shared_actor": agent.actors.shared,
        "head_names": list(agent.actors.layout.names),
        "head_sizes": list(agent.actors.layout.sizes),
        "networks": {k: {"dims": n.dims, "file": f"{k}.bin"} for k, n in nets.items()},
        "normalizer": agent.norm.state(),
        "config_hash": config_hash(agent.cfg),
        "config": agent.cfg.to_dict(),
    }
    for k, n in nets.items():
        (d / f"{k}.bin").write_bytes(n.flat().astype("<f8").tobytes())
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path, cfg: SimConfig, rng: np.random.Generator | None = None) -> MarlAgent:
    d = Path(path)
    mf = d / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"missing checkpoint manifest {mf}")
    man = json.loads(mf.read_text())
    lay = head_layout(cfg)
    if list(lay.sizes) != man["head_sizes"]:
        raise ValueError("checkpoint head sizes do not match the configuration")
    rng = rng if rng is not None else np.random.default_rng(0)
    nets = man["networks"]
    actor_hidden = nets["actor_0"]["dims"][1:-1]
    critic_hidden = nets["critic"]["dims"][1:-1]
    agent = MarlAgent(cfg, man["n_agents"], rng, man["algo"], actor_hidden, critic_hidden,
                      man["shared_actor"])
    for k, spec in nets.items():
        net = agent.critic.net if k == "critic" else agent.actors.nets[int(k.split("_")[1])]
        if list(net.dims) != spec["dims"]:
            raise ValueError(f"network {k} dims mismatch")
        net.set_flat(np.frombuffer((d / spec["file"]).read_bytes(), dtype="<f8"))
    agent.norm.load(man["normalizer"])
    agent.norm.frozen = True
    return agent
