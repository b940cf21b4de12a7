"""Masking agents: learned per-agent, per-step keep-or-randomize decisions.

Each target agent gets a masking agent choosing between KEEP (0) and MASK
(1, replace the target's action with a uniform random one). The masking
team trains with the shared CTDE machinery on the masked process's reward
plus a sparsity bonus for masked agents, with an extra difference loss that
ties the discounted team value to the target policy's frozen Monte-Carlo
return. An agent whose masking would cost a lot of value is important; the
keep-minus-mask value gap is the canonical importance score.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import ctde
from .ctde import AgentQNet, Episode, QLearner, epsilon_greedy, linear_epsilon
from .envs import ActionSpace, random_action
from .nn import Tensor
from .rng import episode_seed, stream
from .rollout import greedy_actions, run_batch

KEEP, MASK = 0, 1


class IncompatibilityError(RuntimeError):
    """Target, environment and explainer artifacts do not fit together."""


def apply_mask(action, mask_bit: int, space: ActionSpace, rng: np.random.Generator):
    """Final action: keep the target's choice, or draw uniformly at random."""
    if mask_bit not in (KEEP, MASK):
        raise ValueError(f"mask bit must be 0 or 1, got {mask_bit!r}")
    return action if mask_bit == KEEP else random_action(space, rng)


def masking_reward(mask_action, beta: float) -> float:
    """Sparsity bonus: beta times the number of masked agents."""
    bits = np.asarray(mask_action)
    if not np.all((bits == 0) | (bits == 1)):
        raise ValueError("mask action must be a 0/1 vector")
    return float(beta) * float(bits.sum())


@dataclass(frozen=True)
class ImportanceScore:
    agent: int
    gap: float        # Q(keep) - Q(mask); higher = more important
    mask_prob: float  # Boltzmann probability of MASK at temperature 1


def _mask_probability(gap: np.ndarray) -> np.ndarray:
    # softmax([q_keep, q_mask])[MASK] == sigmoid(-gap); clamped into (0, 1)
    p = np.exp(-np.logaddexp(0.0, np.asarray(gap, dtype=np.float64)))
    tiny = np.finfo(np.float64).tiny
    return np.clip(p, tiny, 1.0 - 2.3e-16)


@dataclass(frozen=True)
class BaselineEstimate:
    """Frozen Monte-Carlo estimate of the target policy's expected return."""

    j_pi: float
    stderr: float
    reward_scale: float  # mean |step reward|, used to scale the sparsity weight
    episodes: int
    gamma: float


def _baseline_episode(payload) -> tuple[float, float, int]:
    env, target, ep_seed, gamma = payload
    state, obs = env.reset(ep_seed)
    disc, abs_sum, steps = 0.0, 0.0, 0
    done = False
    while not done:
        result = env.step(greedy_actions(target, obs))
        disc += (gamma ** steps) * result.reward
        abs_sum += abs(result.reward)
        steps += 1
        obs, done = result.observations, result.done
    return disc, abs_sum, steps


def estimate_baseline_return(target, env, episodes: int = 500, gamma: float = 0.99,
                             seed: int = 0, workers: int = 1) -> BaselineEstimate:
    """Mean discounted return of the greedy target over seeded episodes."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    _check_compat(target, env)
    payloads = [(env, target, episode_seed(seed, "baseline", i), gamma)
                for i in range(episodes)]
    rows = run_batch(_baseline_episode, payloads, workers)
    returns = np.array([r[0] for r in rows])
    abs_total = sum(r[1] for r in rows)
    step_total = sum(r[2] for r in rows)
    stderr = float(returns.std(ddof=1) / np.sqrt(episodes)) if episodes > 1 else 0.0
    return BaselineEstimate(float(returns.mean()), stderr,
                            float(abs_total / max(1, step_total)), episodes, gamma)


def diff_loss(batch: list[Episode], net: AgentQNet, mixer, j_pi: float, gamma: float,
              beta: float, mode: str = "qtot") -> tuple[Tensor, dict]:
    """Squared gap between J(pi) and the discounted per-episode value sum.

    Per episode: D = J(pi) - sum_t gamma^t (Q_tot(o_t, a^m_t) - R^m_t);
    the loss is the batch mean of D^2. mode="realized" swaps Q_tot - R^m
    for the realized environment reward, which measures the same gap but
    carries no gradient (diagnostic only).
    """
    obs, _, states, _, actions, rewards, _, ep_idx, t_idx = ctde._flatten_batch(batch)
    n_eps = len(batch)
    weights = gamma ** t_idx.astype(np.float64)
    r_mask = float(beta) * actions.sum(axis=1)
    if mode == "qtot":
        q_tot = mixer.mix(ctde.chosen_q_tensor(net, obs, actions), states)
        weighted = (q_tot - Tensor(r_mask)) * Tensor(weights)
        member = np.zeros((len(ep_idx), n_eps))
        member[np.arange(len(ep_idx)), ep_idx] = 1.0
        per_episode = (weighted.reshape(1, -1) @ Tensor(member)).reshape(n_eps)
        d = Tensor(np.full(n_eps, float(j_pi))) - per_episode
    elif mode == "realized":
        disc = np.zeros(n_eps)
        np.add.at(disc, ep_idx, weights * rewards)
        d = Tensor(float(j_pi) - disc)
    else:
        raise ValueError(f"unknown diff loss mode {mode!r}")
    loss = (d * d).mean()
    return loss, {"loss_d": loss.item()}


class MaskingPolicy:
    """Trained masking team plus everything needed to score importance."""

    def __init__(self, qnet: AgentQNet, mixer, beta: float, lam: float, gamma: float,
                 j_pi: float, j_pi_stderr: float, target_checksum: str = ""):
        if qnet.n_actions != 2:
            raise ValueError("masking policy needs exactly the actions {keep, mask}")
        if beta < 0 or lam < 0:
            raise ValueError("beta and lambda must be >= 0")
        self.qnet = qnet
        self.mixer = mixer
        self.beta = float(beta)
        self.lam = float(lam)
        self.gamma = float(gamma)
        self.j_pi = float(j_pi)
        self.j_pi_stderr = float(j_pi_stderr)
        self.target_checksum = target_checksum

    @property
    def n_agents(self) -> int:
        return self.qnet.n_agents

    def mask_q(self, observations: np.ndarray) -> np.ndarray:
        """(n_agents, 2) matrix of keep/mask values, graph-free."""
        return self.qnet.q_all_agents(np.asarray(observations))

    def importance(self, observations: np.ndarray) -> list[ImportanceScore]:
        q = self.mask_q(observations)
        gaps = q[:, KEEP] - q[:, MASK]
        probs = _mask_probability(gaps)
        return [ImportanceScore(i, float(g), float(p))
                for i, (g, p) in enumerate(zip(gaps, probs))]

    def importance_vector(self, observations: np.ndarray) -> np.ndarray:
        q = self.mask_q(observations)
        return q[:, KEEP] - q[:, MASK]

    def most_critical(self, observations: np.ndarray) -> int:
        return ctde.argmax_low(self.importance_vector(observations))

    def greedy_mask_bits(self, observations: np.ndarray) -> np.ndarray:
        """Per-agent argmax over {keep, mask}; keep wins ties."""
        q = self.mask_q(observations)
        return (q[:, MASK] > q[:, KEEP]).astype(np.int64)

    def to_doc(self, env=None, training_step: int = 0) -> dict:
        return {
            "format": "masking-checkpoint", "v": 1,
            "beta": self.beta, "lambda": self.lam, "gamma": self.gamma,
            "j_pi": self.j_pi, "j_pi_stderr": self.j_pi_stderr,
            "target_checksum": self.target_checksum,
            "ctde": {
                "format": "ctde-checkpoint", "v": 1,
                "env": getattr(env, "name", ""),
                "env_params": getattr(env, "params", {}),
                "n_agents": self.qnet.n_agents, "n_actions": 2,
                "mixer_kind": getattr(self.mixer, "kind", "none"),
                "training_step": int(training_step),
                "agent_net": self.qnet.to_doc(),
                "mixer": self.mixer.to_doc(),
            },
        }

    def save(self, path, env=None, training_step: int = 0) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_doc(env, training_step), fh, sort_keys=True)

    @classmethod
    def from_doc(cls, doc: dict) -> "MaskingPolicy":
        if doc.get("format") != "masking-checkpoint" or doc.get("v") != 1:
            raise ValueError("not a v1 masking checkpoint")
        inner = doc["ctde"]
        qnet = AgentQNet.from_doc(inner["agent_net"])
        mixer_doc = inner.get("mixer")
        if inner.get("mixer_kind") == "monotonic":
            mixer = ctde.MonotonicMixer.from_doc(mixer_doc)
        else:
            mixer = ctde.VdnMixer()
        return cls(qnet, mixer, doc["beta"], doc["lambda"], doc["gamma"],
                   doc["j_pi"], doc["j_pi_stderr"], doc.get("target_checksum", ""))

    @classmethod
    def load(cls, path) -> "MaskingPolicy":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_doc(json.load(fh))


def _check_compat(target, env) -> None:
    spec = env.spec
    if target.obs_dim != spec.obs_dim or target.n_agents != spec.n_agents:
        raise IncompatibilityError(
            f"target ({target.n_agents} agents, obs_dim {target.obs_dim}) does not match "
            f"env {env.name!r} ({spec.n_agents} agents, obs_dim {spec.obs_dim})")


DEFAULTS = {
    "steps": 150_000,
    "beta": None,           # None -> beta_scale * mean |step reward| of the baseline
    "beta_scale": 0.02,
    "lambda": 1.0,
    "gamma": 0.99,
    "baseline_episodes": 500,
    "diff_loss_mode": "qtot",
}


def train_emai(target, env, config: dict | None = None, seed: int = 0,
               baseline: BaselineEstimate | None = None, progress=None):
    """Train the masking team against a fixed black-box target.

    Per step: query the target's actions, pick mask actions epsilon-greedily
    from the masking net, compose the final joint action, and bank the
    whole episode; after each episode apply one optimizer step on
    L_total = L_e + lambda * L_d. Returns (MaskingPolicy, curve_rows).
    """
    cfg = dict(DEFAULTS)
    cfg.update(config or {})
    _check_compat(target, env)
    spec = env.spec
    gamma = float(cfg["gamma"])
    if baseline is None:
        baseline = estimate_baseline_return(target, env, int(cfg["baseline_episodes"]),
                                            gamma, seed=seed,
                                            workers=int(cfg.get("workers", 1)))
    beta = cfg["beta"]
    if beta is None:
        beta = float(cfg["beta_scale"]) * baseline.reward_scale
    beta = float(beta)
    lam = float(cfg["lambda"])
    mode = cfg.get("diff_loss_mode", "qtot")

    learner = QLearner(
        obs_dim=spec.obs_dim, state_dim=spec.state_dim, n_agents=spec.n_agents,
        n_actions=2, seed=seed,
        mixer_kind=cfg.get("mixer", "monotonic"),
        hidden=tuple(cfg.get("hidden", (64, 64))),
        embed_dim=cfg.get("mix_embed", 32),
        lr=cfg.get("lr", 5e-4),
        buffer_episodes=cfg.get("buffer_episodes", 2000),
        batch_episodes=cfg.get("batch_episodes", 32),
        stale_interval=cfg.get("stale_interval", 200),
        gamma=gamma)

    def reward_fn(rewards, actions):
        return rewards + beta * actions.sum(axis=1)

    def extra_loss(batch):
        loss_d, stats = diff_loss(batch, learner.net, learner.mixer,
                                  baseline.j_pi, gamma, beta, mode)
        return loss_d * lam, stats

    budget = int(cfg["steps"])
    eps_cfg = (cfg.get("epsilon_start", 1.0), cfg.get("epsilon_end", 0.05),
               cfg.get("epsilon_anneal_steps", 50_000))
    explore_rng = stream(seed, "emai-explore")
    mask_rng = stream(seed, "emai-mask-actions")
    space = spec.action_space
    curves: list[dict] = []
    env_step, episode_idx = 0, 0
    window: dict[str, list[float]] = {"loss_e": [], "loss_d": [], "loss_total": [],
                                      "mask_rate": [], "episode_reward": []}
    while env_step < budget:
        ep_seed = episode_seed(seed, "emai-episode", episode_idx)
        state, obs = env.reset(ep_seed)
        obs_seq, state_seq, act_seq, rew_seq = [obs], [state], [], []
        done = False
        masked_steps = 0
        while not done and env_step < budget:
            eps = linear_epsilon(env_step, *eps_cfg)
            target_actions = greedy_actions(target, obs)
            q = learner.net.q_all_agents(obs)
            bits = [epsilon_greedy(q[i], eps, explore_rng) for i in range(spec.n_agents)]
            final = [apply_mask(a, b, space, mask_rng) for a, b in zip(target_actions, bits)]
            result = env.step(final)
            obs_seq.append(result.observations)
            state_seq.append(result.next_state)
            act_seq.append(bits)
            rew_seq.append(result.reward)
            masked_steps += sum(bits)
            obs, state, done = result.observations, result.next_state, result.done
            env_step += 1
            learner.stale.maybe_refresh(env_step)
        if not act_seq:
            break
        learner.buffer.add(Episode(np.stack(obs_seq), np.stack(state_seq),
                                   np.array(act_seq, dtype=np.int64), np.array(rew_seq)))
        window["mask_rate"].append(masked_steps / (len(act_seq) * spec.n_agents))
        window["episode_reward"].append(float(np.sum(rew_seq)))
        episode_idx += 1
        if len(learner.buffer) >= learner.batch_episodes:
            stats = learner.td_train_step(reward_fn=reward_fn,
                                          extra_loss_fn=extra_loss if lam > 0 else None)
            for key in ("loss_e", "loss_d", "loss_total"):
                if key in stats:
                    window[key].append(stats[key])
        if episode_idx % 50 == 0:
            curves.append({"env_steps": env_step, "episodes": episode_idx,
                           "epsilon": linear_epsilon(env_step, *eps_cfg),
                           **{k: (float(np.mean(v)) if v else float("nan"))
                              for k, v in window.items()}})
            for v in window.values():
                v.clear()
            if progress is not None:
                progress(curves[-1])
    policy = MaskingPolicy(learner.net, learner.mixer, beta, lam, gamma,
                           baseline.j_pi, baseline.stderr, target.checksum())
    return policy, curves
