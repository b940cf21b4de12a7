"""Importance explainers: the learned masking scores, three baselines, and
a brute-force Monte-Carlo counterfactual oracle.

The oracle measures directly how the remaining episode reward moves when a
single agent's actions are randomized from the queried step onward. It is
far too slow to be the product, but at desk scale it doubles as both a
baseline and the independent ground truth for tests.

Access discipline: emai / random / mc_oracle touch the target only through
act(); value- and gradient-based baselines need the privileged accessor and
therefore a learned target.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .ctde import argmax_low, one_hot
from .envs import make_env, random_action
from .masking import MaskingPolicy
from .nn import Tensor
from .rng import stream
from .rollout import greedy_actions, replay_prefix
from .target import TargetPolicy, privileged_q_network


@dataclass
class ExplainContext:
    """Everything an explainer may consult about the queried time-step."""

    observations: np.ndarray
    state: np.ndarray
    t: int
    env_name: str = ""
    env_params: dict = field(default_factory=dict)
    episode_seed: int = 0
    prefix_actions: list = field(default_factory=list)  # executed joint actions before t

    @property
    def n_agents(self) -> int:
        return len(self.observations)


class Explainer:
    kind: str = ""
    access: str = "black-box"

    def scores(self, ctx: ExplainContext) -> np.ndarray:
        raise NotImplementedError

    def most_critical(self, ctx: ExplainContext) -> int:
        return argmax_low(self.scores(ctx))


class EmaiExplainer(Explainer):
    """Keep-minus-mask value gap from a trained masking policy."""

    kind = "emai"

    def __init__(self, policy: MaskingPolicy):
        self.policy = policy

    def scores(self, ctx: ExplainContext) -> np.ndarray:
        return self.policy.importance_vector(ctx.observations)


class RandomExplainer(Explainer):
    """Uniform random scores; the normalization reference for RRD."""

    kind = "random"

    def __init__(self, seed: int = 0):
        self._rng = stream(seed, "random-explainer")

    def scores(self, ctx: ExplainContext) -> np.ndarray:
        return self._rng.random(ctx.n_agents)


class ValueBasedExplainer(Explainer):
    """Per-agent best utility-head value, read from the target's network."""

    kind = "value"
    access = "white-box"

    def __init__(self, target: TargetPolicy):
        self._qnet = privileged_q_network(target)

    def scores(self, ctx: ExplainContext) -> np.ndarray:
        q = self._qnet.q_all_agents(ctx.observations)
        return q.max(axis=1)


class GradientBasedExplainer(Explainer):
    """Saliency of the chosen action's log-probability w.r.t. the observation.

    p is the softmax of the target's Q values at temperature 1; the score is
    the L1 (or L2) norm of d log p(chosen) / d obs per agent.
    """

    kind = "gradient"
    access = "white-box"

    def __init__(self, target: TargetPolicy, norm: str = "l1"):
        if norm not in ("l1", "l2"):
            raise ValueError("norm must be 'l1' or 'l2'")
        self._qnet = privileged_q_network(target)
        self.norm = norm

    def scores(self, ctx: ExplainContext) -> np.ndarray:
        out = np.zeros(ctx.n_agents)
        for i in range(ctx.n_agents):
            obs = np.asarray(ctx.observations[i], dtype=np.float64)
            x = Tensor(np.concatenate([obs, one_hot(np.array([i]), self._qnet.n_agents)[0]]),
                       requires_grad=True)
            q = self._qnet.mlp.forward(x)
            chosen = argmax_low(q.numpy())
            shift = float(q.numpy().max())
            log_z = (q - shift).exp().sum().log() + shift
            pick = np.zeros(self._qnet.n_actions)
            pick[chosen] = 1.0
            log_p = (q * Tensor(pick)).sum() - log_z
            log_p.backward()
            grad = x.grad[: self._qnet.obs_dim]
            out[i] = np.abs(grad).sum() if self.norm == "l1" else np.sqrt((grad ** 2).sum())
        return out


def _suffix_return(env, target) -> float:
    total = 0.0
    done = env.done
    obs = env.observations()
    while not done:
        result = env.step(greedy_actions(target, obs))
        total += result.reward
        obs, done = result.observations, result.done
    return total


def _randomized_suffix_return(env, target, agent: int, rng: np.random.Generator) -> float:
    total = 0.0
    done = env.done
    obs = env.observations()
    space = env.spec.action_space
    while not done:
        actions = greedy_actions(target, obs)
        actions[agent] = random_action(space, rng)
        result = env.step(actions)
        total += result.reward
        obs, done = result.observations, result.done
    return total


def mc_counterfactual_oracle(target, env, episode_seed: int, prefix_actions,
                             rollouts: int, seed: int = 0
                             ) -> tuple[np.ndarray, np.ndarray]:
    """Per-agent |change in remaining episode reward| when that agent alone
    acts randomly from here on; returns (scores, standard errors)."""
    if rollouts < 1:
        raise ValueError("rollouts must be >= 1")
    replay_prefix(env, episode_seed, prefix_actions)
    base_env = env
    n = env.spec.n_agents
    t = len(prefix_actions)
    unmasked = _suffix_return(copy.deepcopy(base_env), target)
    scores = np.zeros(n)
    stderr = np.zeros(n)
    for i in range(n):
        returns = np.empty(rollouts)
        for k in range(rollouts):
            rng = stream(seed, "mc-oracle", episode_seed, t, i, k)
            returns[k] = _randomized_suffix_return(copy.deepcopy(base_env), target, i, rng)
        scores[i] = abs(returns.mean() - unmasked)
        stderr[i] = returns.std(ddof=1) / np.sqrt(rollouts) if rollouts > 1 else 0.0
    return scores, stderr


class McOracleExplainer(Explainer):
    """Monte-Carlo counterfactual randomization oracle (black-box, slow)."""

    kind = "mc_oracle"

    def __init__(self, target: TargetPolicy, rollouts: int = 64, seed: int = 0):
        if rollouts < 1:
            raise ValueError("rollouts must be >= 1")
        self.target = target
        self.rollouts = int(rollouts)
        self.seed = int(seed)

    def scores(self, ctx: ExplainContext) -> np.ndarray:
        return self.scores_with_stderr(ctx)[0]

    def scores_with_stderr(self, ctx: ExplainContext) -> tuple[np.ndarray, np.ndarray]:
        if not ctx.env_name:
            raise ValueError("the oracle needs a replayable context (env_name/seed/prefix)")
        env = make_env(ctx.env_name, **ctx.env_params)
        return mc_counterfactual_oracle(self.target, env, ctx.episode_seed,
                                        ctx.prefix_actions, self.rollouts, self.seed)


def explain(explainer: Explainer, observations, state, time_t: int,
            **context) -> np.ndarray:
    """Score every agent at one time-step; higher means more important."""
    ctx = ExplainContext(np.asarray(observations), np.asarray(state), int(time_t),
                         **context)
    out = np.asarray(explainer.scores(ctx), dtype=np.float64)
    if out.shape != (ctx.n_agents,):
        raise nn.ShapeError(f"explainer returned shape {out.shape} for {ctx.n_agents} agents")
    if not np.all(np.isfinite(out)):
        raise nn.NumericsError(f"explainer {explainer.kind!r} produced non-finite scores")
    return out


def make_explainer(kind: str, target: TargetPolicy | None = None,
                   masking_policy: MaskingPolicy | None = None, seed: int = 0,
                   rollouts: int = 64) -> Explainer:
    """Factory used by the CLI; raises CapabilityError for bad pairings."""
    if kind == "emai":
        if masking_policy is None:
            raise ValueError("emai explainer needs a trained masking checkpoint")
        return EmaiExplainer(masking_policy)
    if kind == "random":
        return RandomExplainer(seed)
    if kind == "value":
        return ValueBasedExplainer(target)
    if kind == "gradient":
        return GradientBasedExplainer(target)
    if kind == "mc_oracle":
        return McOracleExplainer(target, rollouts=rollouts, seed=seed)
    raise ValueError(f"unknown explainer kind {kind!r}")
