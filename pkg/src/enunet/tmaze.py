"""T-maze foraging environment: food and poison arms, energy decay, switching.

The maze is a T: a stem from the start tile up to a junction, and two arms
whose end tiles hold food (always shown green) and poison (always shown red).
Eating food rewards +1, refills energy and teleports the agent back to the
start; poison rewards -1 and teleports without refilling. After enough food
eats, a seeded coin may swap the two sides. Energy drops by one every step;
at zero the agent dies and freezes, though the episode keeps counting steps
so traces stay aligned.

Everything is a pure function of (config, seed, action sequence);
:class:`TMazeVec` is the array-of-agents variant used by the batched
evaluator and reproduces the scalar environment draw for draw.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .units import _norm_seed


class Action(IntEnum):
    FORWARD = 0
    LEFT = 1
    RIGHT = 2
    NOOP = 3


class Observation(IntEnum):
    EMPTY = 0
    WALL = 1
    GREEN = 2
    RED = 3


# Detector index per observation: wall, green, red sensors. EMPTY lights none.
DETECTOR_INDEX = {Observation.WALL: 0, Observation.GREEN: 1, Observation.RED: 2}

LEFT_SIDE = 0
RIGHT_SIDE = 1

# Headings: 0 north (+y, toward junction), 1 east, 2 south, 3 west.
HEADING_DX = np.array([0, 1, 0, -1])
HEADING_DY = np.array([1, 0, -1, 0])

# Reward-signal channels on the reward node.
REWARD_POS_CHANNEL = 1
REWARD_NEG_CHANNEL = 2


@dataclass(frozen=True)
class MazeConfig:
    stem_len: int = 3
    arm_len: int = 3
    food_reward: float = 1.0
    poison_reward: float = -1.0
    energy_init: int = 40
    switch_after_eats: int = 3
    switch_prob: float = 0.25
    max_steps: int = 400

    def __post_init__(self):
        if self.stem_len < 1 or self.arm_len < 1:
            raise ValueError("stem_len and arm_len must be >= 1")
        if self.energy_init < 1 or self.max_steps < 1:
            raise ValueError("energy_init and max_steps must be >= 1")
        if not 0.0 <= self.switch_prob <= 1.0:
            raise ValueError("switch_prob must lie in [0, 1]")


@dataclass
class EnvState:
    cfg: MazeConfig
    x: int = 0
    y: int = 0
    heading: int = 0
    energy: int = 0
    food_side: int = LEFT_SIDE
    eats_since_switch: int = 0
    alive: bool = True
    step_count: int = 0
    done: bool = False
    rng: np.random.Generator = None


def _is_tile(cfg: MazeConfig, x: int, y: int) -> bool:
    if x == 0 and 0 <= y <= cfg.stem_len:
        return True
    return y == cfg.stem_len and abs(x) <= cfg.arm_len


def food_position(cfg: MazeConfig, food_side: int):
    x = -cfg.arm_len if food_side == LEFT_SIDE else cfg.arm_len
    return x, cfg.stem_len


def poison_position(cfg: MazeConfig, food_side: int):
    return food_position(cfg, 1 - food_side)


def env_reset(cfg: MazeConfig, seed: int):
    """Fresh episode: agent at the stem base facing the junction. Returns (state, obs)."""
    rng = np.random.default_rng(_norm_seed(seed))
    food_side = LEFT_SIDE if rng.random() < 0.5 else RIGHT_SIDE
    state = EnvState(cfg=cfg, energy=cfg.energy_init, food_side=food_side, rng=rng)
    return state, observe(state)


def observe(state: EnvState) -> Observation:
    """Content of the tile directly ahead: wall, green (food), red (poison), empty."""
    cfg = state.cfg
    ax = state.x + int(HEADING_DX[state.heading])
    ay = state.y + int(HEADING_DY[state.heading])
    if not _is_tile(cfg, ax, ay):
        return Observation.WALL
    if (ax, ay) == food_position(cfg, state.food_side):
        return Observation.GREEN
    if (ax, ay) == poison_position(cfg, state.food_side):
        return Observation.RED
    return Observation.EMPTY


def env_step(state: EnvState, action: Action):
    """Advance one step in place. Returns (state, obs, reward, done).

    Turning rotates in place; forward moves one tile unless blocked by a wall.
    Landing on food or poison rewards and teleports back to the start pose;
    food also refills energy and may trigger a side switch. Energy then drops
    by one and the agent dies at zero. Dead or finished agents ignore actions.
    """
    cfg = state.cfg
    reward = 0.0
    if state.done:
        return state, observe(state), reward, True
    if state.alive:
        if action == Action.LEFT:
            state.heading = (state.heading - 1) % 4
        elif action == Action.RIGHT:
            state.heading = (state.heading + 1) % 4
        elif action == Action.FORWARD:
            nx = state.x + int(HEADING_DX[state.heading])
            ny = state.y + int(HEADING_DY[state.heading])
            if _is_tile(cfg, nx, ny):
                state.x, state.y = nx, ny
        if (state.x, state.y) == food_position(cfg, state.food_side):
            reward = cfg.food_reward
            state.energy = cfg.energy_init
            state.eats_since_switch += 1
            state.x, state.y, state.heading = 0, 0, 0
            if state.eats_since_switch > cfg.switch_after_eats:
                if state.rng.random() < cfg.switch_prob:
                    state.food_side = 1 - state.food_side
                    state.eats_since_switch = 0
        elif (state.x, state.y) == poison_position(cfg, state.food_side):
            reward = cfg.poison_reward
            state.x, state.y, state.heading = 0, 0, 0
        state.energy -= 1
        if state.energy <= 0:
            state.energy = 0
            state.alive = False
    state.step_count += 1
    state.done = state.step_count >= cfg.max_steps
    return state, observe(state), reward, state.done


def encode_observation(
    obs: Observation, reward_prev: float, sensory_perm, n_channels: int = 16
):
    """Map (observation, previous reward) to node signals for the unit network.

    Returns ``(sensory, reward)``: sensory is (3, n_channels) with 1.0 on
    channel 0 of the permuted detector node (all zero for EMPTY); reward is
    (n_channels,) carrying |reward| on channel 1 if positive, channel 2 if
    negative.
    """
    sensory = np.zeros((3, n_channels))
    if obs != Observation.EMPTY:
        sensory[int(sensory_perm[DETECTOR_INDEX[Observation(obs)]]), 0] = 1.0
    reward_sig = np.zeros(n_channels)
    if reward_prev > 0:
        reward_sig[REWARD_POS_CHANNEL] = reward_prev
    elif reward_prev < 0:
        reward_sig[REWARD_NEG_CHANNEL] = -reward_prev
    return sensory, reward_sig


@dataclass
class EnvTrace:
    """Per-step environment record for CSV export."""

    rows: list = field(default_factory=list)

    def add(self, step, state: EnvState, action, obs, reward):
        self.rows.append(
            (
                step,
                state.x,
                state.y,
                state.heading,
                int(action),
                int(obs),
                float(reward),
                state.energy,
                state.food_side,
            )
        )

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(
                ["step", "x", "y", "heading", "action", "obs", "reward", "energy", "food_side"]
            )
            for row in self.rows:
                w.writerow(row)


class TMazeVec:
    """A fixed array of agents stepped in lockstep, one seeded stream per agent.

    Agents with equal seeds replay identical coin streams, so every offspring
    sees the same m environments. ``compact(keep)`` drops finished agents;
    bookkeeping of who maps where is the caller's job.
    """

    def __init__(self, cfg: MazeConfig, seeds):
        self.cfg = cfg
        n = len(seeds)
        self.rngs = [np.random.default_rng(_norm_seed(s)) for s in seeds]
        self.x = np.zeros(n, dtype=np.int64)
        self.y = np.zeros(n, dtype=np.int64)
        self.heading = np.zeros(n, dtype=np.int64)
        self.energy = np.full(n, cfg.energy_init, dtype=np.int64)
        self.food_side = np.array(
            [LEFT_SIDE if r.random() < 0.5 else RIGHT_SIDE for r in self.rngs], dtype=np.int64
        )
        self.eats = np.zeros(n, dtype=np.int64)
        self.alive = np.ones(n, dtype=bool)
        self.step_count = 0

    @property
    def n(self) -> int:
        return self.x.size

    def observe_codes(self) -> np.ndarray:
        """Observation enum values for every agent, vectorized."""
        cfg = self.cfg
        ax = self.x + HEADING_DX[self.heading]
        ay = self.y + HEADING_DY[self.heading]
        on_stem = (ax == 0) & (ay >= 0) & (ay <= cfg.stem_len)
        on_bar = (ay == cfg.stem_len) & (np.abs(ax) <= cfg.arm_len)
        is_tile = on_stem | on_bar
        food_x = np.where(self.food_side == LEFT_SIDE, -cfg.arm_len, cfg.arm_len)
        obs = np.full(self.n, int(Observation.EMPTY), dtype=np.int64)
        obs[~is_tile] = int(Observation.WALL)
        at_end = is_tile & (ay == cfg.stem_len) & (np.abs(ax) == cfg.arm_len)
        obs[at_end & (ax == food_x)] = int(Observation.GREEN)
        obs[at_end & (ax == -food_x)] = int(Observation.RED)
        return obs

    def step(self, actions: np.ndarray) -> np.ndarray:
        """Advance every agent one step; returns per-agent rewards."""
        cfg = self.cfg
        act = np.asarray(actions)
        live = self.alive
        rewards = np.zeros(self.n)

        turn_l = live & (act == int(Action.LEFT))
        turn_r = live & (act == int(Action.RIGHT))
        self.heading[turn_l] = (self.heading[turn_l] - 1) % 4
        self.heading[turn_r] = (self.heading[turn_r] + 1) % 4

        fwd = live & (act == int(Action.FORWARD))
        nx = self.x + HEADING_DX[self.heading]
        ny = self.y + HEADING_DY[self.heading]
        on_stem = (nx == 0) & (ny >= 0) & (ny <= cfg.stem_len)
        on_bar = (ny == cfg.stem_len) & (np.abs(nx) <= cfg.arm_len)
        can_move = fwd & (on_stem | on_bar)
        self.x[can_move] = nx[can_move]
        self.y[can_move] = ny[can_move]

        food_x = np.where(self.food_side == LEFT_SIDE, -cfg.arm_len, cfg.arm_len)
        at_food = live & (self.y == cfg.stem_len) & (self.x == food_x)
        at_poison = live & (self.y == cfg.stem_len) & (self.x == -food_x) & (self.x != 0)

        rewards[at_food] = cfg.food_reward
        self.energy[at_food] = cfg.energy_init
        self.eats[at_food] += 1
        rewards[at_poison] = cfg.poison_reward
        teleport = at_food | at_poison
        self.x[teleport] = 0
        self.y[teleport] = 0
        self.heading[teleport] = 0
        # Switch coins are rare; drawing per eater keeps parity with EnvState.
        for i in np.flatnonzero(at_food & (self.eats > cfg.switch_after_eats)):
            if self.rngs[i].random() < cfg.switch_prob:
                self.food_side[i] = 1 - self.food_side[i]
                self.eats[i] = 0

        self.energy[live] -= 1
        died = live & (self.energy <= 0)
        self.energy[died] = 0
        self.alive[died] = False
        self.step_count += 1
        return rewards

    def compact(self, keep: np.ndarray) -> None:
        """Keep only the agents at the given indices (in order)."""
        self.rngs = [self.rngs[i] for i in keep]
        for name in ("x", "y", "heading", "energy", "food_side", "eats", "alive"):
            setattr(self, name, getattr(self, name)[keep])


def random_action_baseline(cfg: MazeConfig, n_episodes: int, seed: int) -> np.ndarray:
    """Cumulative rewards of a uniform-random-action agent over seeded episodes.

    One env step per action; used as the reference distribution the evolved
    population must beat.
    """
    totals = np.empty(n_episodes)
    for ep in range(n_episodes):
        state, _ = env_reset(cfg, np.random.default_rng((_norm_seed(seed), ep, 1)).integers(2**63))
        act_rng = np.random.default_rng((_norm_seed(seed), ep, 2))
        total = 0.0
        done = False
        while not done:
            action = Action(int(act_rng.integers(0, 4)))
            _, _, reward, done = env_step(state, action)
            total += reward
        totals[ep] = total
    return totals
