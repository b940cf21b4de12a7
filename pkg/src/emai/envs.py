"""Desk-scale cooperative gridworlds with a shared episodic interface.

All three environments expose reset(seed) / step(joint_action), per-agent
observations normalized to [-1, 1], a team reward, and a flat global state
vector. Transitions are deterministic; the only randomness is the seeded
initial placement, so trajectories replay bitwise from (seed, actions).

Movement is simultaneous: every agent moves based on positions at time t,
moves into walls, grid edges or a closed door are no-ops, and agents may
share a cell (Spread penalizes sharing through the reward only).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

# action indices, fixed across all environments
STAY, UP, DOWN, LEFT, RIGHT = range(5)
DELTAS = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1))  # (drow, dcol)
ACTION_NAMES = ("stay", "up", "down", "left", "right")


class EnvError(ValueError):
    """Invalid interaction with an environment (bad action, step after done)."""


@dataclass(frozen=True)
class Discrete:
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("Discrete action space needs n >= 2")


@dataclass(frozen=True)
class Continuous:
    lb: tuple[float, ...]
    ub: tuple[float, ...]

    def __post_init__(self):
        if len(self.lb) != len(self.ub) or any(l >= u for l, u in zip(self.lb, self.ub)):
            raise ValueError("Continuous bounds need lb < ub element-wise")


ActionSpace = Union[Discrete, Continuous]


def random_action(space: ActionSpace, rng: np.random.Generator):
    """Uniform draw over the space; Discrete may return any index."""
    if isinstance(space, Discrete):
        return int(rng.integers(0, space.n))
    return rng.uniform(np.asarray(space.lb), np.asarray(space.ub))


@dataclass(frozen=True)
class EnvSpec:
    n_agents: int
    obs_dim: int
    state_dim: int
    action_space: ActionSpace
    horizon: int
    gamma: float = 0.99

    def __post_init__(self):
        if self.n_agents < 2:
            raise ValueError("n_agents must be >= 2")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must lie in (0, 1]")


@dataclass
class StepResult:
    next_state: np.ndarray
    observations: np.ndarray  # (n_agents, obs_dim)
    reward: float
    done: bool


class _GridEnv:
    """Shared movement/bookkeeping for the built-in gridworlds."""

    spec: EnvSpec
    name: str = ""

    def __init__(self):
        self.t = 0
        self.done = True
        self.positions: list[tuple[int, int]] = []

    # subclasses: _rows, _cols, _walls(), _passable hook, _observe, _state, _reward
    def _wall_cells(self) -> frozenset[tuple[int, int]]:
        return frozenset()

    def _passable(self, cell: tuple[int, int]) -> bool:
        r, c = cell
        if not (0 <= r < self._rows and 0 <= c < self._cols):
            return False
        return cell not in self._wall_cells()

    def _validate_actions(self, joint_action) -> list[int]:
        if self.done:
            raise EnvError("step() called on a terminated episode; call reset() first")
        if len(joint_action) != self.spec.n_agents:
            raise EnvError(
                f"joint action needs {self.spec.n_agents} entries, got {len(joint_action)}")
        acts = []
        for i, a in enumerate(joint_action):
            a = int(a)
            if not (0 <= a < self.spec.action_space.n):
                raise EnvError(f"agent {i}: action index {a} outside [0, {self.spec.action_space.n})")
            acts.append(a)
        return acts

    def _move_all(self, actions: list[int]) -> None:
        old = list(self.positions)
        new = []
        for pos, a in zip(old, actions):
            dr, dc = DELTAS[a]
            cand = (pos[0] + dr, pos[1] + dc)
            new.append(cand if self._passable(cand) else pos)
        self.positions = new

    def observations(self) -> np.ndarray:
        return np.stack([self._observe(i) for i in range(self.spec.n_agents)])

    def reset(self, seed: int) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def step(self, joint_action) -> StepResult:
        raise NotImplementedError


def _norm_pos(pos: tuple[int, int], rows: int, cols: int) -> tuple[float, float]:
    return (2.0 * pos[0] / (rows - 1) - 1.0, 2.0 * pos[1] / (cols - 1) - 1.0)


def _rel(a: tuple[int, int], b: tuple[int, int], rows: int, cols: int) -> tuple[float, float]:
    return ((b[0] - a[0]) / (rows - 1), (b[1] - a[1]) / (cols - 1))


class Spread(_GridEnv):
    """n agents cover n landmarks on a grid; closer and un-stacked is better.

    reward_t = -(1/(n*grid)) * sum over landmarks of min_i manhattan(agent_i, lm)
               - 0.05 * (# agent pairs sharing a cell)

    Observation: own position ++ relative landmark positions ++ relative
    positions of the other agents, all in fixed index order.
    """

    name = "spread"

    def __init__(self, n_agents: int = 3, grid: int = 8, horizon: int = 25):
        super().__init__()
        if grid < 2:
            raise ValueError("grid must be >= 2")
        self.n = int(n_agents)
        self.grid = int(grid)
        self._rows = self._cols = self.grid
        obs_dim = 2 + 2 * self.n + 2 * (self.n - 1)
        self.spec = EnvSpec(self.n, obs_dim, 4 * self.n, Discrete(5), int(horizon))
        self.landmarks: list[tuple[int, int]] = []

    @property
    def params(self) -> dict:
        return {"n_agents": self.n, "grid": self.grid, "horizon": self.spec.horizon}

    def reset(self, seed: int) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), 0x51]))
        cells = self.grid * self.grid
        agent_idx = rng.choice(cells, size=self.n, replace=False)
        lm_idx = rng.choice(cells, size=self.n, replace=False)
        self.positions = [(int(i) // self.grid, int(i) % self.grid) for i in agent_idx]
        self.landmarks = [(int(i) // self.grid, int(i) % self.grid) for i in lm_idx]
        self.t = 0
        self.done = False
        return self._state(), self.observations()

    def _observe(self, i: int) -> np.ndarray:
        own = self.positions[i]
        parts = list(_norm_pos(own, self.grid, self.grid))
        for lm in self.landmarks:
            parts.extend(_rel(own, lm, self.grid, self.grid))
        for j in range(self.n):
            if j != i:
                parts.extend(_rel(own, self.positions[j], self.grid, self.grid))
        return np.array(parts)

    def _state(self) -> np.ndarray:
        parts = []
        for p in self.positions:
            parts.extend(_norm_pos(p, self.grid, self.grid))
        for lm in self.landmarks:
            parts.extend(_norm_pos(lm, self.grid, self.grid))
        return np.array(parts)

    def _reward(self) -> float:
        return spread_reward(self.positions, self.landmarks, self.n, self.grid)

    def step(self, joint_action) -> StepResult:
        acts = self._validate_actions(joint_action)
        self._move_all(acts)
        self.t += 1
        self.done = self.t >= self.spec.horizon
        return StepResult(self._state(), self.observations(), self._reward(), self.done)


def spread_reward(positions, landmarks, n: int, grid: int) -> float:
    """The Spread team reward for a given configuration (pure helper)."""
    dist_sum = 0
    for lm in landmarks:
        dist_sum += min(abs(p[0] - lm[0]) + abs(p[1] - lm[1]) for p in positions)
    shared = 0
    for i in range(len(positions)):
        for j in range(i + 1, len(positions)):
            if positions[i] == positions[j]:
                shared += 1
    return -(1.0 / (n * grid)) * dist_sum - 0.05 * shared


class KeyCorridor(_GridEnv):
    """Three agents, a switch-operated door, and a goal column.

    5x7 cells (rows x cols). A serpentine of walls puts the switch at the
    dead end of a corridor next to agent 0's start zone; agents 1 and 2
    start by the door on the other side of the maze. Any agent standing on
    the switch opens the door permanently. reward_t = 0.1 * (# agents in
    the goal column) - 0.01, horizon 30.
    """

    name = "keycorridor"

    ROWS, COLS = 5, 7
    WALLS = frozenset({(1, 0), (1, 1), (1, 2), (1, 3),
                       (3, 1), (3, 2), (3, 3), (3, 4),
                       (0, 5), (1, 5), (3, 5), (4, 5)})
    DOOR = (2, 5)
    SWITCH = (4, 4)
    GOAL_COL = 6
    GOAL_ANCHOR = (2, 6)
    START_ZONES = (((4, 0), (4, 1), (4, 2), (4, 3)),
                   ((0, 0), (0, 1)),
                   ((0, 3), (0, 4)))

    def __init__(self, horizon: int = 30):
        super().__init__()
        self.n = 3
        self._rows, self._cols = self.ROWS, self.COLS
        # own pos, door flag, rel switch, rel door, rel goal, rel two others
        self.spec = EnvSpec(self.n, 13, 2 * self.n + 1, Discrete(5), int(horizon))
        self.door_open = False

    @property
    def params(self) -> dict:
        return {"horizon": self.spec.horizon}

    def _wall_cells(self) -> frozenset[tuple[int, int]]:
        return self.WALLS

    def _passable(self, cell: tuple[int, int]) -> bool:
        if cell == self.DOOR:
            return self.door_open
        return super()._passable(cell)

    def reset(self, seed: int) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), 0x52]))
        self.positions = [zone[int(rng.integers(0, len(zone)))] for zone in self.START_ZONES]
        self.door_open = False
        self.t = 0
        self.done = False
        return self._state(), self.observations()

    def _observe(self, i: int) -> np.ndarray:
        own = self.positions[i]
        parts = list(_norm_pos(own, self.ROWS, self.COLS))
        parts.append(1.0 if self.door_open else -1.0)
        for anchor in (self.SWITCH, self.DOOR, self.GOAL_ANCHOR):
            parts.extend(_rel(own, anchor, self.ROWS, self.COLS))
        for j in range(self.n):
            if j != i:
                parts.extend(_rel(own, self.positions[j], self.ROWS, self.COLS))
        return np.array(parts)

    def _state(self) -> np.ndarray:
        parts = []
        for p in self.positions:
            parts.extend(_norm_pos(p, self.ROWS, self.COLS))
        parts.append(1.0 if self.door_open else -1.0)
        return np.array(parts)

    def step(self, joint_action) -> StepResult:
        acts = self._validate_actions(joint_action)
        self._move_all(acts)
        if any(p == self.SWITCH for p in self.positions):
            self.door_open = True  # permanent within the episode
        in_goal = sum(1 for p in self.positions if p[1] == self.GOAL_COL)
        reward = 0.1 * in_goal - 0.01
        self.t += 1
        self.done = self.t >= self.spec.horizon
        return StepResult(self._state(), self.observations(), reward, self.done)


class Diagnostic(_GridEnv):
    """Instrumented gridworld for explainer sanity checks.

    Optional zero reward (sparsity-pressure experiments) and optional inert
    agents whose actions never move them, so their actions provably cannot
    influence transitions or reward.
    """

    name = "diagnostic"

    def __init__(self, n_agents: int = 3, grid: int = 6, horizon: int = 15,
                 zero_reward: bool = False, inert: tuple[int, ...] = ()):
        super().__init__()
        self.n = int(n_agents)
        self.grid = int(grid)
        self._rows = self._cols = self.grid
        self.zero_reward = bool(zero_reward)
        self.inert = tuple(sorted(int(i) for i in inert))
        if any(i < 0 or i >= self.n for i in self.inert):
            raise ValueError("inert agent ids must be valid agent indices")
        obs_dim = 2 + 2 + 2 * (self.n - 1)
        self.spec = EnvSpec(self.n, obs_dim, 2 * self.n + 2, Discrete(5), int(horizon))
        self.landmark: tuple[int, int] = (0, 0)

    @property
    def params(self) -> dict:
        return {"n_agents": self.n, "grid": self.grid, "horizon": self.spec.horizon,
                "zero_reward": self.zero_reward, "inert": list(self.inert)}

    def reset(self, seed: int) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), 0x53]))
        cells = self.grid * self.grid
        idx = rng.choice(cells, size=self.n + 1, replace=False)
        self.positions = [(int(i) // self.grid, int(i) % self.grid) for i in idx[:-1]]
        self.landmark = (int(idx[-1]) // self.grid, int(idx[-1]) % self.grid)
        self.t = 0
        self.done = False
        return self._state(), self.observations()

    def _move_all(self, actions: list[int]) -> None:
        actions = [STAY if i in self.inert else a for i, a in enumerate(actions)]
        super()._move_all(actions)

    def _observe(self, i: int) -> np.ndarray:
        own = self.positions[i]
        parts = list(_norm_pos(own, self.grid, self.grid))
        parts.extend(_rel(own, self.landmark, self.grid, self.grid))
        for j in range(self.n):
            if j != i:
                parts.extend(_rel(own, self.positions[j], self.grid, self.grid))
        return np.array(parts)

    def _state(self) -> np.ndarray:
        parts = []
        for p in self.positions:
            parts.extend(_norm_pos(p, self.grid, self.grid))
        parts.extend(_norm_pos(self.landmark, self.grid, self.grid))
        return np.array(parts)

    def step(self, joint_action) -> StepResult:
        acts = self._validate_actions(joint_action)
        self._move_all(acts)
        if self.zero_reward:
            reward = 0.0
        else:
            active = [p for i, p in enumerate(self.positions) if i not in self.inert]
            dist = sum(abs(p[0] - self.landmark[0]) + abs(p[1] - self.landmark[1])
                       for p in active)
            reward = -dist / (max(1, len(active)) * self.grid)
        self.t += 1
        self.done = self.t >= self.spec.horizon
        return StepResult(self._state(), self.observations(), reward, self.done)


_REGISTRY = {
    "spread": Spread,
    "keycorridor": KeyCorridor,
    "diagnostic": Diagnostic,
}


def make_env(name: str, **params) -> _GridEnv:
    """Instantiate a built-in environment by name."""
    key = name.lower()
    if key not in _REGISTRY:
        raise EnvError(f"unknown environment {name!r}; known: {sorted(_REGISTRY)}")
    return _REGISTRY[key](**params)


def env_names() -> list[str]:
    return sorted(_REGISTRY)
