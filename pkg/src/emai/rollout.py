"""Episode execution primitives shared by training, explainers and evaluation.

Every rollout is a pure function of (environment, seed, policies, explicit
rng streams), so batches replay bitwise and can safely fan out across
processes with results merged in fixed seed order.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .envs import random_action


def greedy_actions(target, observations: np.ndarray) -> list[int]:
    return [target.act(observations[i], i) for i in range(len(observations))]


@dataclass
class Step:
    t: int
    state: np.ndarray
    observations: np.ndarray
    target_actions: list[int]
    mask_actions: list[int] | None
    final_actions: list[int]
    reward: float
    importance: np.ndarray | None = None


@dataclass
class Trace:
    seed: int
    steps: list[Step] = field(default_factory=list)

    @property
    def episode_reward(self) -> float:
        return float(sum(s.reward for s in self.steps))

    def discounted_return(self, gamma: float) -> float:
        return float(sum((gamma ** s.t) * s.reward for s in self.steps))


def run_target_episode(env, seed: int, target, record: bool = False) -> Trace:
    """One unmasked greedy episode of the target policy."""
    state, obs = env.reset(seed)
    trace = Trace(seed)
    t = 0
    done = False
    while not done:
        actions = greedy_actions(target, obs)
        result = env.step(actions)
        trace.steps.append(Step(t, state, obs, actions, None, list(actions), result.reward))
        state, obs, done = result.next_state, result.observations, result.done
        t += 1
    return trace


def masked_episode(env, seed: int, target, mask_fn, mask_rng: np.random.Generator) -> Trace:
    """Episode where mask_fn(t, obs, state) chooses which agents to randomize.

    A random replacement action is drawn only for agents whose mask bit is
    set, so an all-zero mask consumes no randomness and reproduces the
    unmasked trajectory bitwise.
    """
    state, obs = env.reset(seed)
    space = env.spec.action_space
    trace = Trace(seed)
    t = 0
    done = False
    while not done:
        actions = greedy_actions(target, obs)
        bits = [int(b) for b in mask_fn(t, obs, state)]
        final = [random_action(space, mask_rng) if b else a for a, b in zip(actions, bits)]
        result = env.step(final)
        trace.steps.append(Step(t, state, obs, actions, bits, final, result.reward))
        state, obs, done = result.next_state, result.observations, result.done
        t += 1
    return trace


def replay_prefix(env, seed: int, prefix_actions) -> tuple[np.ndarray, np.ndarray, bool]:
    """Reset and re-apply a joint-action prefix; returns (state, obs, done)."""
    state, obs = env.reset(seed)
    done = False
    for joint in prefix_actions:
        if done:
            raise ValueError("prefix extends past episode termination")
        result = env.step(list(joint))
        state, obs, done = result.next_state, result.observations, result.done
    return state, obs, done


def run_batch(fn, payloads: list, workers: int = 1) -> list:
    """Map fn over payloads; results always in payload order."""
    if workers <= 1:
        return [fn(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, payloads, chunksize=max(1, len(payloads) // (workers * 4))))
