"""Multi-embodiment block-pushing grid world.

The agent occupies ``width`` adjacent cells of one row and pushes blocks
upward into a goal zone made of the top ``goal_depth`` rows. Ground-truth
reward is the fraction of blocks currently inside the zone.

Internally a state is a flat int64 vector ``[agent_row, agent_col, gripped,
r0, c0, r1, c1, ...]`` (``gripped`` is -1 when nothing is held); the
transition kernel works on that form so the same code runs under numba and
as plain Python.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Optional, Sequence

import numpy as np

from ._jit import njit
from .errors import ConfigError, UsageError


class Kind(enum.IntEnum):
    SHORTSTICK = 0
    MEDIUMSTICK = 1
    LONGSTICK = 2
    GRIPPER = 3

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value) -> "Kind":
        if isinstance(value, Kind):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        key = str(value).strip().lower().replace("-", "").replace("_", "")
        for k in cls:
            if k.label == key:
                return k
        raise UsageError(f"unknown embodiment {value!r}")


class Action(enum.IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3
    TOGGLE_GRIP = 4


_WIDTHS = {Kind.SHORTSTICK: 1, Kind.MEDIUMSTICK: 2, Kind.LONGSTICK: 3, Kind.GRIPPER: 1}
DEFAULT_MAX_STEPS = MappingProxyType(
    {Kind.SHORTSTICK: 80, Kind.MEDIUMSTICK: 80, Kind.LONGSTICK: 48, Kind.GRIPPER: 80}
)


@dataclass(frozen=True)
class Embodiment:
    kind: Kind
    width: int
    has_grip: bool
    max_steps: int

    @property
    def num_actions(self) -> int:
        return 5 if self.has_grip else 4

    @property
    def actions(self) -> tuple:
        return tuple(Action(a) for a in range(self.num_actions))


@dataclass(frozen=True)
class EnvConfig:
    """Grid geometry, block count and start-layout pool.

    ``layout_pool`` > 0 restricts resets to that many seeded start layouts
    (drawn once from ``seed``); 0 draws a fresh layout per episode seed.
    """

    width: int = 9
    height: int = 9
    goal_depth: int = 2
    num_blocks: int = 3
    seed: int = 0
    max_steps: Mapping = field(default_factory=lambda: dict(DEFAULT_MAX_STEPS))
    layout_pool: int = 2

    def __post_init__(self):
        object.__setattr__(
            self, "max_steps",
            MappingProxyType({Kind.parse(k): int(v) for k, v in dict(self.max_steps).items()}),
        )

    def __hash__(self):
        return hash(self.key())

    def __reduce__(self):
        return (EnvConfig.from_dict, (self.to_dict(),))

    def __eq__(self, other):
        return isinstance(other, EnvConfig) and self.key() == other.key()

    def key(self) -> tuple:
        steps = tuple(int(self.max_steps[k]) for k in Kind)
        return (self.width, self.height, self.goal_depth, self.num_blocks,
                int(self.seed), steps, self.layout_pool)

    def validate(self) -> "EnvConfig":
        W, H, G, B = self.width, self.height, self.goal_depth, self.num_blocks
        if G < 1:
            raise ConfigError(f"goal_depth must be >= 1, got {G}")
        if B < 1:
            raise ConfigError(f"num_blocks must be >= 1, got {B}")
        if W < 3 * B:
            raise ConfigError(f"width {W} < 3 * num_blocks ({3 * B})")
        if H <= G + 2:
            raise ConfigError(f"height {H} must exceed goal_depth + 2 ({G + 2})")
        if H // 2 < G:
            raise ConfigError("bottom half of the grid overlaps the goal zone")
        if self.layout_pool < 0:
            raise ConfigError("layout_pool must be >= 0")
        missing = [k.label for k in Kind if k not in self.max_steps]
        if missing:
            raise ConfigError(f"max_steps missing for {missing}")
        if any(v < 1 for v in self.max_steps.values()):
            raise ConfigError("max_steps entries must be positive")
        return self

    @property
    def frame_size(self) -> int:
        return 3 * self.width * self.height

    def embodiment(self, kind) -> Embodiment:
        kind = Kind.parse(kind)
        return Embodiment(kind, _WIDTHS[kind], kind == Kind.GRIPPER, int(self.max_steps[kind]))

    def to_dict(self) -> dict:
        return {
            "width": self.width, "height": self.height, "goal_depth": self.goal_depth,
            "num_blocks": self.num_blocks, "seed": int(self.seed),
            "max_steps": {k.label: int(v) for k, v in self.max_steps.items()},
            "layout_pool": self.layout_pool,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EnvConfig":
        d = dict(d)
        if "max_steps" in d:
            d["max_steps"] = {Kind.parse(k): v for k, v in d["max_steps"].items()}
        return cls(**d)


@dataclass(frozen=True)
class EnvState:
    config: EnvConfig
    embodiment: Embodiment
    agent_row: int
    agent_col: int
    block_positions: tuple
    gripped_block: Optional[int] = None
    step_count: int = 0
    terminal: bool = False

    def to_array(self) -> np.ndarray:
        return pack_state(self.agent_row, self.agent_col, self.gripped_block, self.block_positions)

    @property
    def blocks_in_zone(self) -> int:
        return sum(1 for r, _ in self.block_positions if r < self.config.goal_depth)


def pack_state(agent_row, agent_col, gripped, blocks) -> np.ndarray:
    s = np.empty(3 + 2 * len(blocks), dtype=np.int64)
    s[0], s[1] = agent_row, agent_col
    s[2] = -1 if gripped is None else gripped
    for k, (r, c) in enumerate(blocks):
        s[3 + 2 * k], s[4 + 2 * k] = r, c
    return s


# ---------------------------------------------------------------- kernels

@njit
def _block_at(s, r, c):
    nb = (s.shape[0] - 3) // 2
    for k in range(nb):
        if s[3 + 2 * k] == r and s[4 + 2 * k] == c:
            return k
    return -1


@njit
def apply_action(s, action, W, H, width):
    """Return the successor of flat state ``s``; illegal moves are no-ops."""
    out = s.copy()
    ar, ac, held = s[0], s[1], s[2]
    nb = (s.shape[0] - 3) // 2
    if action == 4:
        if held >= 0:
            out[2] = -1
        else:
            out[2] = _block_at(s, ar - 1, ac)
        return out
    if action == 0:
        if ar == 0:
            return out
        for c in range(ac, ac + width):
            k = _block_at(s, ar - 1, c)
            if k >= 0:
                if ar - 2 < 0 or _block_at(s, ar - 2, c) >= 0:
                    return out
                out[3 + 2 * k] = ar - 2
        out[0] = ar - 1
        return out
    nr, nc = ar, ac
    if action == 1:
        nr = ar + 1
    elif action == 2:
        nc = ac - 1
    else:
        nc = ac + 1
    if nr >= H or nc < 0 or nc + width > W:
        return out
    for k in range(nb):
        if k == held:
            continue
        br, bc = s[3 + 2 * k], s[4 + 2 * k]
        if br == nr and nc <= bc < nc + width:
            return out
    if held >= 0:
        dr, dc = nr - 1, nc
        for k in range(nb):
            if k != held and s[3 + 2 * k] == dr and s[4 + 2 * k] == dc:
                return out
        out[3 + 2 * held] = dr
        out[4 + 2 * held] = dc
    out[0] = nr
    out[1] = nc
    return out


@njit
def count_in_zone(s, G):
    nb = (s.shape[0] - 3) // 2
    n = 0
    for k in range(nb):
        if s[3 + 2 * k] < G:
            n += 1
    return n


# ---------------------------------------------------------------- layouts

def _draw_layout(rng: np.random.Generator, config: EnvConfig) -> tuple:
    W, H, B = config.width, config.height, config.num_blocks
    cols = np.sort(rng.choice(W, size=B, replace=False))
    rows = rng.integers(H // 2, H - 1, size=B)
    agent_col = int(rng.integers(0, W - 2))
    return agent_col, tuple((int(r), int(c)) for r, c in zip(rows, cols))


_POOL_CACHE: dict = {}


def layout_pool(config: EnvConfig) -> list:
    """The seeded pool of distinct start layouts (empty when unrestricted)."""
    key = config.key()
    if key not in _POOL_CACHE:
        pool, seen = [], set()
        W, H, B = config.width, config.height, config.num_blocks
        n_rows = H - 1 - H // 2
        n_total = (W - 2) * int(np.prod([n_rows] * B)) * _comb(W, B)
        target = min(config.layout_pool, n_total)
        rng = np.random.default_rng([int(config.seed) & 0xFFFFFFFF, 0x5EED])
        while len(pool) < target:
            lay = _draw_layout(rng, config)
            if lay not in seen:
                seen.add(lay)
                pool.append(lay)
        _POOL_CACHE[key] = pool
    return _POOL_CACHE[key]


def _comb(n, k):
    from math import comb
    return comb(n, k)


_M64 = 0xFFFFFFFFFFFFFFFF


def mix64(x):
    """splitmix64 finalizer; works on Python ints and uint64 arrays."""
    if isinstance(x, np.ndarray):
        with np.errstate(over="ignore"):
            z = x.astype(np.uint64) + np.uint64(0x9E3779B97F4A7C15)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            return z ^ (z >> np.uint64(31))
    z = (int(x) + 0x9E3779B97F4A7C15) & _M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31)


def pool_index(config: EnvConfig, episode_seeds):
    """Index into the layout pool selected by each episode seed."""
    salt = mix64(int(config.seed) & _M64)
    seeds = np.asarray(episode_seeds, dtype=np.uint64) ^ np.uint64(salt)
    return (mix64(seeds) % np.uint64(len(layout_pool(config)))).astype(np.int64)


def start_layout(config: EnvConfig, episode_seed: int) -> tuple:
    if config.layout_pool:
        pool = layout_pool(config)
        return pool[int(pool_index(config, [int(episode_seed) & _M64])[0])]
    rng = np.random.default_rng([int(config.seed) & 0xFFFFFFFF, int(episode_seed) & _M64, 2])
    return _draw_layout(rng, config)


# ---------------------------------------------------------------- API

def reset(config: EnvConfig, embodiment, episode_seed: int) -> EnvState:
    config.validate()
    if not isinstance(embodiment, Embodiment):
        embodiment = config.embodiment(embodiment)
    agent_col, blocks = start_layout(config, episode_seed)
    agent_col = min(agent_col, config.width - embodiment.width)
    return EnvState(config, embodiment, config.height - 1, agent_col, blocks)


def state_from_array(s: np.ndarray, template: EnvState, step_count: int, terminal: bool) -> EnvState:
    nb = (len(s) - 3) // 2
    blocks = tuple((int(s[3 + 2 * k]), int(s[4 + 2 * k])) for k in range(nb))
    held = None if s[2] < 0 else int(s[2])
    return EnvState(template.config, template.embodiment, int(s[0]), int(s[1]),
                    blocks, held, step_count, terminal)


def is_done(s: np.ndarray, step_count: int, config: EnvConfig, embodiment: Embodiment) -> bool:
    return step_count >= embodiment.max_steps or count_in_zone(s, config.goal_depth) == config.num_blocks


def step(state: EnvState, action) -> tuple:
    """Advance one step; returns ``(next_state, frame, reward)``."""
    if state.terminal:
        raise UsageError("cannot step a terminal state")
    a = int(action)
    emb, cfg = state.embodiment, state.config
    if not 0 <= a < emb.num_actions:
        raise UsageError(f"action {action!r} is not legal for {emb.kind.label}")
    s = apply_action(state.to_array(), a, cfg.width, cfg.height, emb.width)
    n = state.step_count + 1
    nxt = state_from_array(s, state, n, is_done(s, n, cfg, emb))
    reward = count_in_zone(s, cfg.goal_depth) / cfg.num_blocks
    return nxt, render_frame(nxt, cfg), reward


def render_arrays(states: np.ndarray, config: EnvConfig, width: int) -> np.ndarray:
    """Rasterize a stack of flat states into uint8 frames of length 3*W*H."""
    states = np.atleast_2d(states)
    W, H, G = config.width, config.height, config.goal_depth
    n = states.shape[0]
    hw = W * H
    frames = np.zeros((n, 3 * hw), dtype=np.uint8)
    rows = np.arange(n)
    base = states[:, 0] * W + states[:, 1]
    for d in range(width):
        frames[rows, base + d] = 1
    nb = (states.shape[1] - 3) // 2
    for k in range(nb):
        frames[rows, hw + states[:, 3 + 2 * k] * W + states[:, 4 + 2 * k]] = 1
    frames[:, 2 * hw:2 * hw + G * W] = 1
    return frames


def render_frame(state: EnvState, config: Optional[EnvConfig] = None) -> np.ndarray:
    config = config or state.config
    return render_arrays(state.to_array()[None], config, state.embodiment.width)[0]


def padded_sum(per_step: Sequence[float], horizon: int, success: bool) -> float:
    """Sum over an episode whose success state is absorbing until ``horizon``.

    A successful episode stops early; its final value is credited for the
    remaining ``horizon - len(per_step)`` steps.
    """
    per_step = np.asarray(per_step, dtype=np.float64)
    total = float(per_step.sum())
    if success and len(per_step) < horizon:
        total += float(per_step[-1]) * (horizon - len(per_step))
    return total


def gt_return(traj) -> float:
    """Cumulative ground-truth reward (success state absorbing to the horizon)."""
    if traj.length == 0:
        raise UsageError("empty trajectory")
    return padded_sum(traj.gt_rewards, traj.horizon, traj.success)


def gt_step_mean(traj) -> float:
    """Per-step mean ground-truth reward over the episode horizon."""
    return gt_return(traj) / max(traj.length, traj.horizon if traj.success else traj.length)
