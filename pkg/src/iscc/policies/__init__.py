"""Scheduling policies: learned actor-critic agents and greedy baselines."""
from __future__ import annotations


from ..config import RngStreams, SimConfig
from ..env import ActionVector, IsccEnv
from .greedy import GreedyPolicy
from .mappo import MarlAgent, load_checkpoint

POLICIES = ("mappo", "ma-a2c", "scg", "ccg")


class LearnedPolicy:
    """Evaluation wrapper: frozen normaliser, stochastic masked sampling."""

    def __init__(self, agent: MarlAgent):
        self.agent = agent
        agent.norm.frozen = True

    def act(self, env: IsccEnv, obs_raw) -> list:
        _, acts, _, _, _ = self.agent.act(env, obs_raw)
        return [ActionVector.from_array(a) for a in acts]


def make_policy(name: str, cfg: SimConfig, seed: int, checkpoint=None):
    if name not in POLICIES:
        raise ValueError(f"unknown policy {name!r}; choose from {', '.join(POLICIES)}")
    rng = RngStreams(seed).stream("policy", (1,))
    if name in ("scg", "ccg"):
        return GreedyPolicy(name, rng)
    if checkpoint is None:
        raise FileNotFoundError(f"policy {name!r} needs a checkpoint directory")
    agent = load_checkpoint(checkpoint, cfg, rng)
    expected = "mappo" if name == "mappo" else "a2c"
    if agent.algo != expected:
        raise ValueError(f"checkpoint holds a {agent.algo} agent, not {name}")
    return LearnedPolicy(agent)


__all__ = ["POLICIES", "GreedyPolicy", "LearnedPolicy", "MarlAgent", "make_policy"]
