"""Tabular RL on the held-out embodiment.

The reachable state space of an (EnvConfig, embodiment) pair is enumerated
once into a deterministic transition table. Q-learning, greedy evaluation
and value iteration then run as array kernels over that table. Success is
an absorbing state: it keeps paying its arrival reward for the rest of the
horizon (undiscounted evaluation) or forever (discounted bootstrapping).
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels as K
from .errors import ResourceError, UsageError
from .sim import EnvConfig, Kind, layout_pool, pool_index, render_arrays, reset

DEFAULT_KEY_BUDGET = 2_000_000


@dataclass(frozen=True)
class RlSpec:
    total_steps: int = 100_000
    eval_every: int = 5_000
    eval_episodes: int = 50
    gamma: float = 0.99
    alpha: float = 1.0
    eps_start: float = 1.0
    eps_end: float = 0.05
    anneal_fraction: float = 0.5
    seeds: tuple = (0, 1, 2, 3, 4)
    optimistic: bool = True
    optimism_quantile: float = 0.9995
    replay_every: int = 1_000
    replay_sweeps: int = 1
    key_budget: int = DEFAULT_KEY_BUDGET

    def __post_init__(self):
        if self.eval_every < 1 or self.eval_episodes < 1:
            raise UsageError("eval_every and eval_episodes must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise UsageError("gamma must lie in [0, 1)")
        if not 0.0 <= self.optimism_quantile <= 1.0:
            raise UsageError("optimism_quantile must lie in [0, 1]")


@dataclass
class TabularMDP:
    config: EnvConfig
    kind: Kind
    states: np.ndarray      # (S, 3 + 2B) flat states
    nxt: np.ndarray         # (S, A) successor indices
    success: np.ndarray     # (S,) bool
    gt: np.ndarray          # (S,) ground-truth reward of each state
    keys: dict = field(repr=False, default_factory=dict)

    @property
    def n_states(self) -> int:
        return int(self.nxt.shape[0])

    @property
    def n_actions(self) -> int:
        return int(self.nxt.shape[1])

    @property
    def max_steps(self) -> int:
        return self.config.embodiment(self.kind).max_steps

    def frames(self) -> np.ndarray:
        return render_arrays(self.states, self.config, self.config.embodiment(self.kind).width)

    def index_of(self, state_array: np.ndarray) -> int:
        cfg = self.config
        return self.keys[int(K.state_key(state_array, cfg.width, cfg.height))]

    def start_indices(self, episode_seeds) -> np.ndarray:
        """State indices of ``reset(config, kind, seed)`` for each seed."""
        seeds = np.asarray(episode_seeds, dtype=np.uint64)
        if self.config.layout_pool:
            return self._pool_starts[pool_index(self.config, seeds)]
        return np.array([self.index_of(reset(self.config, self.kind, int(s)).to_array()) for s in seeds],
                        dtype=np.int64)

    @functools.cached_property
    def _pool_starts(self) -> np.ndarray:
        emb = self.config.embodiment(self.kind)
        out = []
        for agent_col, blocks in layout_pool(self.config):
            s = np.array([self.config.height - 1, min(agent_col, self.config.width - emb.width), -1]
                         + [v for rc in blocks for v in rc], dtype=np.int64)
            out.append(self.index_of(s))
        return np.asarray(out, dtype=np.int64)


@dataclass
class QTable:
    mdp: TabularMDP
    q: np.ndarray
    visits: np.ndarray

    def value(self, state_array: np.ndarray, action: int) -> float:
        return float(self.q[self.mdp.index_of(state_array), int(action)])


@dataclass
class LearningCurve:
    steps: np.ndarray
    returns: np.ndarray     # (n_seeds, n_points)
    seeds: tuple

    @property
    def mean(self) -> np.ndarray:
        return self.returns.mean(axis=0)

    @property
    def stderr(self) -> np.ndarray:
        n = self.returns.shape[0]
        if n < 2:
            return np.zeros(self.returns.shape[1])
        return self.returns.std(axis=0) / np.sqrt(n)


_MDP_CACHE: dict = {}


def tabulate(config: EnvConfig, kind, key_budget: int = DEFAULT_KEY_BUDGET) -> TabularMDP:
    """Enumerate the MDP reachable from every start layout (memoized)."""
    config.validate()
    kind = Kind.parse(kind)
    cache_key = (config.key(), kind, key_budget)
    if cache_key in _MDP_CACHE:
        return _MDP_CACHE[cache_key]
    if not config.layout_pool:
        raise ResourceError("unrestricted start layouts cannot be enumerated; set layout_pool > 0")
    emb = config.embodiment(kind)
    starts = np.stack([
        np.array([config.height - 1, min(ac, config.width - emb.width), -1] + [v for rc in blocks for v in rc],
                 dtype=np.int64)
        for ac, blocks in layout_pool(config)])
    states, nxt, n = K.tabulate_kernel(starts, config.width, config.height, config.goal_depth,
                                       emb.width, emb.num_actions, key_budget)
    if n < 0:
        raise ResourceError(
            f"{kind.label}: more than {key_budget} reachable states; use a smaller EnvConfig "
            "(fewer blocks, a smaller grid or a smaller layout pool)")
    nb = config.num_blocks
    counts = (states[:, 3::2][:, :nb] < config.goal_depth).sum(axis=1)
    keys = {int(K.state_key(s, config.width, config.height)): i for i, s in enumerate(states)}
    mdp = TabularMDP(config, kind, states, nxt, counts == nb, counts / nb, keys)
    _MDP_CACHE[cache_key] = mdp
    return mdp


def reward_table(mdp: TabularMDP, reward_model=None) -> np.ndarray:
    """Per-state reward; ``None`` means the ground-truth reward."""
    if reward_model is None:
        return mdp.gt.copy()
    from .reward import cached_state_rewards
    return cached_state_rewards(reward_model, mdp)


def _eval_randomness(rng: np.random.Generator, mdp: TabularMDP, episodes: int):
    seeds = rng.integers(0, 1 << 62, size=episodes, dtype=np.int64)
    return mdp.start_indices(seeds.astype(np.uint64)), rng.random((episodes, mdp.max_steps))


def q_learning_train(config: EnvConfig, embodiment, reward_model=None, spec: RlSpec = RlSpec(),
                     seed: int = 0, mdp: Optional[TabularMDP] = None, rewards: Optional[np.ndarray] = None):
    """Train one seed; returns ``(QTable, LearningCurve)`` of ground-truth returns."""
    mdp = mdp or tabulate(config, embodiment, spec.key_budget)
    r = reward_table(mdp, reward_model) if rewards is None else rewards
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0xB1])
    n = spec.total_steps
    coins = rng.random(n)
    randacts = rng.integers(0, 1 << 30, size=n)
    ties = rng.random(n)
    starts = mdp.start_indices(rng.integers(0, 1 << 62, size=max(1, n // 2 + 1)).astype(np.uint64))
    n_evals = n // spec.eval_every
    ev = [_eval_randomness(rng, mdp, spec.eval_episodes) for _ in range(n_evals)]
    eval_starts = np.stack([e[0] for e in ev]) if ev else np.zeros((0, spec.eval_episodes), np.int64)
    eval_ties = np.stack([e[1] for e in ev]) if ev else np.zeros((0, spec.eval_episodes, mdp.max_steps))
    r = np.ascontiguousarray(r, dtype=np.float64)
    # optimistic start at a high reward quantile held forever; the top sliver of
    # states is trimmed so a learned reward's isolated spikes do not set it
    level = float(np.quantile(r, spec.optimism_quantile)) if spec.optimistic else 0.0
    q = np.full((mdp.n_states, mdp.n_actions), level / (1.0 - spec.gamma))
    visits = np.zeros((mdp.n_states, mdp.n_actions), dtype=np.int64)
    curve = K.q_learning_kernel(q, mdp.nxt, r, mdp.gt,
                                mdp.success, starts, mdp.max_steps, spec.gamma, spec.alpha,
                                spec.eps_start, spec.eps_end, int(spec.anneal_fraction * n),
                                coins, randacts, ties, spec.eval_every, eval_starts, eval_ties, visits,
                                int(spec.replay_every), int(spec.replay_sweeps))
    steps = spec.eval_every * np.arange(1, n_evals + 1)
    return QTable(mdp, q, visits), LearningCurve(steps, curve[None, :], (seed,))


def _seed_job(args):
    config, kind, spec, seed, rewards = args
    return q_learning_train(config, kind, None, spec, seed, rewards=rewards)[1]


def train_seeds(config: EnvConfig, embodiment, reward_model=None, spec: RlSpec = RlSpec(),
                workers: int = 1, rewards: Optional[np.ndarray] = None) -> LearningCurve:
    """One independent Q-learning run per seed; ``workers`` > 1 runs seeds in processes.

    Each seed owns its table and randomness, so the curve does not depend on
    the worker count.
    """
    mdp = tabulate(config, embodiment, spec.key_budget)
    r = reward_table(mdp, reward_model) if rewards is None else rewards
    jobs = [(config, mdp.kind, spec, s, r) for s in spec.seeds]
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            curves = list(pool.map(_seed_job, jobs))
    else:
        curves = [q_learning_train(config, embodiment, None, spec, s, mdp=mdp, rewards=r)[1] for s in spec.seeds]
    return LearningCurve(curves[0].steps, np.concatenate([c.returns for c in curves]), tuple(spec.seeds))


def episode_returns(table: QTable, episodes: int, seed: int) -> np.ndarray:
    mdp = table.mdp
    starts, ties = _eval_randomness(np.random.default_rng([int(seed) & 0xFFFFFFFF, 0xE7]), mdp, episodes)
    return K.evaluate_kernel(table.q, mdp.nxt, mdp.gt, mdp.success, starts, mdp.max_steps, ties)


def evaluate_policy(table: QTable, config: EnvConfig = None, embodiment=None,
                    episodes: int = 50, seed: int = 0) -> float:
    """Mean ground-truth return of the greedy policy over seeded resets.

    States the table has never updated keep all-zero values, so greedy
    tie-breaking makes the policy uniformly random there.
    """
    if table.q.size == 0:
        raise UsageError("empty Q-table")
    if config is not None and config != table.mdp.config:
        raise UsageError("Q-table was trained on a different EnvConfig")
    if embodiment is not None and Kind.parse(getattr(embodiment, "kind", embodiment)) != table.mdp.kind:
        raise UsageError("Q-table was trained on a different embodiment")
    return float(episode_returns(table, episodes, seed).mean())


@dataclass
class ValueIterationResult:
    mdp: TabularMDP
    values: np.ndarray
    q: np.ndarray
    residuals: np.ndarray
    optimal_return: float


def value_iteration(config: EnvConfig, embodiment, reward: Optional[np.ndarray] = None, gamma: float = 0.99,
                    tol: float = 1e-8, max_sweeps: int = 100_000, key_budget: int = DEFAULT_KEY_BUDGET,
                    mdp: Optional[TabularMDP] = None) -> ValueIterationResult:
    """Exact Bellman optimality on the tabulated MDP.

    ``optimal_return`` is the mean undiscounted ground-truth return of the
    resulting greedy policy over every start layout (uniform weights).
    """
    mdp = mdp or tabulate(config, embodiment, key_budget)
    r = mdp.gt if reward is None else np.asarray(reward, dtype=np.float64)
    v, res = K.value_iteration_kernel(mdp.nxt, r, mdp.success, float(gamma), float(tol), int(max_sweeps))
    s2 = mdp.nxt
    absorb = 1.0 / (1.0 - gamma)
    q = np.where(mdp.success[s2], r[s2] * absorb, r[s2] + gamma * v[s2])
    # break exact ties deterministically toward the lowest action index
    greedy = np.full_like(q, -np.inf)
    greedy[np.arange(q.shape[0]), q.argmax(axis=1)] = 0.0
    starts = mdp._pool_starts
    ret = K.evaluate_kernel(greedy, mdp.nxt, mdp.gt, mdp.success, starts, mdp.max_steps,
                            np.zeros((len(starts), mdp.max_steps)))
    return ValueIterationResult(mdp, v, q, res, float(ret.mean()))


def greedy_table(vi: ValueIterationResult) -> QTable:
    """A Q-table whose greedy policy is the value-iteration optimum."""
    q = np.full_like(vi.q, -1.0)
    q[np.arange(q.shape[0]), vi.q.argmax(axis=1)] = 0.0
    return QTable(vi.mdp, q, np.zeros(q.shape, dtype=np.int64))


def write_curve(curve: LearningCurve, path, header: str = "") -> None:
    """Text table: step, per-seed returns, mean, stderr."""
    cols = ["step"] + [f"seed{s}" for s in curve.seeds] + ["mean", "stderr"]
    lines = []
    if header:
        lines.append("# " + header)
    lines.append("\t".join(cols))
    mean, se = curve.mean, curve.stderr
    for i, st in enumerate(curve.steps):
        vals = [repr(float(x)) for x in curve.returns[:, i]] + [repr(float(mean[i])), repr(float(se[i]))]
        lines.append("\t".join([str(int(st))] + vals))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_curve(path) -> LearningCurve:
    rows = []
    cols = None
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if cols is None:
                cols = parts
                continue
            rows.append([float(x) for x in parts])
    arr = np.asarray(rows)
    seeds = tuple(int(c[4:]) for c in cols[1:-2])
    return LearningCurve(arr[:, 0].astype(np.int64), arr[:, 1:-2].T.copy(), seeds)
