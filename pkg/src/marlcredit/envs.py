"""Toy episodic cooperative environments with terminal-only team reward.

Both environments run for a fixed horizon, pay exactly zero before the
final step, and expose per-step global states for the reward model's
outcome encoder. A privileged debug event log records dense events (key
picked, door opened, switch pressed) for analysis only; it is never fed
to training.
"""
from __future__ import annotations

import numpy as np


class EpisodeDone(RuntimeError):
    """Raised when step() is called after the episode terminated."""


class EnvBase:
    """Uniform interface: reset/step/global_state plus static dimensions."""

    n_agents: int
    n_actions: int
    obs_dim: int
    state_dim: int
    horizon: int

    def reset(self, seed: int):
        raise NotImplementedError

    def step(self, joint_action):
        raise NotImplementedError

    def global_state(self) -> np.ndarray:
        raise NotImplementedError

    def final_global_state(self) -> np.ndarray:
        if not self._done:
            raise RuntimeError("episode still running; final state unavailable")
        return self.global_state()

    def active_mask(self) -> np.ndarray:
        return np.ones(self.n_agents, dtype=bool)

    def _check_actions(self, joint_action) -> np.ndarray:
        if self._done:
            raise EpisodeDone("step() called after the episode terminated")
        acts = np.asarray(joint_action, dtype=np.int64)
        if acts.shape != (self.n_agents,):
            raise ValueError(f"expected {self.n_agents} actions, got shape {acts.shape}")
        if (acts < 0).any() or (acts >= self.n_actions).any():
            raise ValueError(f"action index out of range [0, {self.n_actions})")
        return acts


class KeyTreasureEnv(EnvBase):
    """Two agents on a 7-cell corridor: fetch the key, open the door, reach
    the treasure.

    Layout: key at cell 1, door at cell 5, treasure at cell 6. Cells 5..6
    cannot be entered while the door is closed; interacting on the door
    cell opens it once any agent has picked up the key. The terminal reward
    grades partial progress: key 0.3, door 0.6, treasure 1.0.
    """

    LEFT, RIGHT, STAY, INTERACT = 0, 1, 2, 3

    n_agents = 2
    n_actions = 4
    n_cells = 7
    key_cell = 1
    door_cell = 5
    treasure_cell = 6
    horizon = 20
    start_cells = (0, 3)

    # obs: own position one-hot + [carries_key, door_open, treasure_reached]
    obs_dim = n_cells + 3
    # state: both position one-hots + [key_held, door_open, treasure_reached]
    state_dim = 2 * n_cells + 3

    def __init__(self):
        self._done = True
        self.events: list[dict] = []

    def reset(self, seed: int):
        del seed  # fixed starts; signature kept uniform across envs
        self.pos = np.array(self.start_cells, dtype=np.int64)
        self.key_held = False
        self.key_carrier = -1
        self.door_open = False
        self.treasure_reached = False
        self.t = 0
        self._done = False
        self.events = []
        return self._observations(), self.active_mask()

    def _observations(self) -> list[np.ndarray]:
        obs = []
        for i in range(self.n_agents):
            o = np.zeros(self.obs_dim)
            o[self.pos[i]] = 1.0
            o[self.n_cells + 0] = 1.0 if self.key_carrier == i else 0.0
            o[self.n_cells + 1] = 1.0 if self.door_open else 0.0
            o[self.n_cells + 2] = 1.0 if self.treasure_reached else 0.0
            obs.append(o)
        return obs

    def global_state(self) -> np.ndarray:
        s = np.zeros(self.state_dim)
        for i in range(self.n_agents):
            s[i * self.n_cells + self.pos[i]] = 1.0
        s[2 * self.n_cells + 0] = 1.0 if self.key_held else 0.0
        s[2 * self.n_cells + 1] = 1.0 if self.door_open else 0.0
        s[2 * self.n_cells + 2] = 1.0 if self.treasure_reached else 0.0
        return s

    def step(self, joint_action):
        acts = self._check_actions(joint_action)
        # movements first, then interactions (key pickups before the door,
        # so a same-step pickup already enables a door interact)
        for i, a in enumerate(acts):
            if a == self.LEFT:
                target = self.pos[i] - 1
            elif a == self.RIGHT:
                target = self.pos[i] + 1
            else:
                continue
            if target < 0 or target >= self.n_cells:
                continue
            if target == self.treasure_cell and not self.door_open:
                continue
            self.pos[i] = target
        for i, a in enumerate(acts):
            if a == self.INTERACT and self.pos[i] == self.key_cell and not self.key_held:
                self.key_held = True
                self.key_carrier = i
                self.events.append({"t": self.t, "event": "key_picked", "agent": i})
        for i, a in enumerate(acts):
            if a == self.INTERACT and self.pos[i] == self.door_cell and self.key_held:
                if not self.door_open:
                    self.events.append({"t": self.t, "event": "door_opened", "agent": i})
                self.door_open = True
        for i in range(self.n_agents):
            if self.pos[i] == self.treasure_cell and self.door_open:
                if not self.treasure_reached:
                    self.events.append({"t": self.t, "event": "treasure_reached", "agent": i})
                self.treasure_reached = True

        self.t += 1
        done = self.t >= self.horizon
        reward = self._terminal_reward() if done else 0.0
        if done:
            self._done = True
        return self._observations(), done, reward

    def _terminal_reward(self) -> float:
        if self.treasure_reached:
            return 1.0
        if self.door_open:
            return 0.6
        if self.key_held:
            return 0.3
        return 0.0


class SwitchesEnv(EnvBase):
    """Three agents on a 5x5 grid must press their own switches in index
    order.

    Switch i responds only to agent i interacting on its cell after all
    lower-indexed switches are already pressed. Terminal reward is 1.0 for
    the full ordered sequence, else 0.25 per pressed switch.
    """

    UP, DOWN, LEFT, RIGHT, STAY, INTERACT = 0, 1, 2, 3, 4, 5

    n_agents = 3
    n_actions = 6
    grid = 5
    horizon = 25
    switch_cells = ((0, 0), (2, 2), (4, 4))
    start_choices = (
        ((4, 0), (3, 1)),
        ((0, 4), (1, 3)),
        ((4, 3), (3, 4)),
    )

    obs_dim = grid * grid + 3
    state_dim = 3 * grid * grid + 3

    def __init__(self):
        self._done = True
        self.events: list[dict] = []

    def reset(self, seed: int):
        rng = np.random.default_rng(seed)
        self.pos = np.array(
            [self.start_choices[i][rng.integers(len(self.start_choices[i]))] for i in range(3)],
            dtype=np.int64,
        )
        self.pressed = np.zeros(3, dtype=bool)
        self.t = 0
        self._done = False
        self.events = []
        return self._observations(), self.active_mask()

    def _cell_index(self, rc) -> int:
        return int(rc[0]) * self.grid + int(rc[1])

    def _observations(self) -> list[np.ndarray]:
        obs = []
        for i in range(self.n_agents):
            o = np.zeros(self.obs_dim)
            o[self._cell_index(self.pos[i])] = 1.0
            o[self.grid * self.grid :] = self.pressed.astype(float)
            obs.append(o)
        return obs

    def global_state(self) -> np.ndarray:
        s = np.zeros(self.state_dim)
        for i in range(self.n_agents):
            s[i * self.grid * self.grid + self._cell_index(self.pos[i])] = 1.0
        s[3 * self.grid * self.grid :] = self.pressed.astype(float)
        return s

    def step(self, joint_action):
        acts = self._check_actions(joint_action)
        moves = {self.UP: (-1, 0), self.DOWN: (1, 0), self.LEFT: (0, -1), self.RIGHT: (0, 1)}
        for i, a in enumerate(acts):
            if a in moves:
                dr, dc = moves[a]
                r = min(max(self.pos[i, 0] + dr, 0), self.grid - 1)
                c = min(max(self.pos[i, 1] + dc, 0), self.grid - 1)
                self.pos[i] = (r, c)
        pressed_before = self.pressed.copy()  # ordering checks see the pre-step state
        for i, a in enumerate(acts):
            if (
                a == self.INTERACT
                and not self.pressed[i]
                and tuple(self.pos[i]) == self.switch_cells[i]
                and pressed_before[:i].all()
            ):
                self.pressed[i] = True
                self.events.append({"t": self.t, "event": "switch_pressed", "agent": i})

        self.t += 1
        done = self.t >= self.horizon
        reward = self._terminal_reward() if done else 0.0
        if done:
            self._done = True
        return self._observations(), done, reward

    def _terminal_reward(self) -> float:
        n = int(self.pressed.sum())
        return 1.0 if n == 3 else 0.25 * n


ENV_REGISTRY = {"keytreasure": KeyTreasureEnv, "switches": SwitchesEnv}


def make_env(name: str) -> EnvBase:
    try:
        return ENV_REGISTRY[name]()
    except KeyError:
        raise ValueError(f"unknown environment '{name}'; choose from {sorted(ENV_REGISTRY)}")
