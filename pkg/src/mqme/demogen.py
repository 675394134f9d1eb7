"""Mixed-quality, mixed-embodiment demonstration data.

Scripted oracles per embodiment are degraded with epsilon-random actions,
rolled out, and rejection-sampled into train/test splits that hold the same
number of trajectories for every outcome class (blocks pushed in).
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import _kernels as K
from .errors import FormatError, GenerationError, UsageError
from .sim import (EnvConfig, EnvState, Kind, Embodiment, apply_action, gt_return,
                  gt_step_mean, padded_sum, render_arrays, reset)

DEFAULT_NOISE_SCHEDULE = (0.0, 0.15, 0.3, 0.45, 0.6, 0.8)
MAGIC = b"XMQME1"
_TAG_TRAJ, _TAG_GOAL = 0x54, 0x47  # 'T', 'G'


@dataclass(eq=False)
class Trajectory:
    """One episode as seen by the learners.

    ``frames[0]`` is the start observation and ``frames[t]`` follows action
    ``t - 1``; ``zone_counts[t]`` is the number of blocks in the goal zone
    in ``frames[t]``. ``horizon`` is the episode length in frames had the
    episode run to the embodiment's step limit.
    """

    embodiment: Kind
    frames: np.ndarray
    zone_counts: np.ndarray
    num_blocks: int
    horizon: int
    actions: Optional[np.ndarray] = None
    episode_seed: int = 0
    epsilon: float = 0.0

    def __post_init__(self):
        self.embodiment = Kind.parse(self.embodiment)
        self.frames = np.ascontiguousarray(self.frames, dtype=np.uint8)
        self.zone_counts = np.asarray(self.zone_counts, dtype=np.uint8)
        if self.actions is not None:
            self.actions = np.asarray(self.actions, dtype=np.uint8)

    @classmethod
    def from_rewards(cls, rewards: Sequence[float], num_blocks: int = 3, horizon=None,
                     embodiment=Kind.SHORTSTICK, frame_size: int = 243) -> "Trajectory":
        """A frameless stand-in built from per-step fractions (tests, examples)."""
        counts = np.rint(np.asarray(rewards, dtype=float) * num_blocks).astype(np.uint8)
        n = len(counts)
        return cls(embodiment, np.zeros((n, frame_size), np.uint8), counts, num_blocks,
                   horizon if horizon is not None else n)

    @property
    def length(self) -> int:
        return int(self.zone_counts.shape[0])

    @property
    def gt_rewards(self) -> np.ndarray:
        return self.zone_counts.astype(np.float64) / self.num_blocks

    @property
    def blocks_final(self) -> int:
        return int(self.zone_counts[-1])

    @property
    def success(self) -> bool:
        return self.blocks_final == self.num_blocks

    def validate(self) -> None:
        L = self.length
        if L < 1 or self.frames.shape[0] != L:
            raise UsageError(f"trajectory has {self.frames.shape[0]} frames and {L} rewards")
        if self.blocks_final != round(self.num_blocks * float(self.gt_rewards[-1])):
            raise UsageError("blocks_final disagrees with the final reward")
        if L > self.horizon:
            raise UsageError(f"trajectory length {L} exceeds horizon {self.horizon}")
        if L < self.horizon and not self.success:
            raise UsageError("a trajectory may end early only on full success")
        if self.actions is not None and len(self.actions) != L - 1:
            raise UsageError("expected one action per transition")

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        same_actions = (self.actions is None and other.actions is None) or (
            self.actions is not None and other.actions is not None
            and np.array_equal(self.actions, other.actions))
        return (self.embodiment == other.embodiment and self.num_blocks == other.num_blocks
                and self.horizon == other.horizon and self.episode_seed == other.episode_seed
                and self.epsilon == other.epsilon and same_actions
                and np.array_equal(self.frames, other.frames)
                and np.array_equal(self.zone_counts, other.zone_counts))


@dataclass(eq=False)
class GoalSet:
    frames: np.ndarray

    def __len__(self):
        return int(self.frames.shape[0])

    def __eq__(self, other):
        return isinstance(other, GoalSet) and np.array_equal(self.frames, other.frames)


@dataclass(eq=False)
class MqmeDataset:
    config: EnvConfig
    train: Dict[Kind, List[Trajectory]]
    test: Dict[Kind, List[Trajectory]]
    provenance: dict = field(default_factory=dict)
    goal_set: Optional[GoalSet] = None

    @property
    def embodiments(self) -> list:
        return sorted(set(self.train) | set(self.test))

    def split(self, name: str) -> Dict[Kind, List[Trajectory]]:
        if name not in ("train", "test"):
            raise UsageError(f"unknown split {name!r}")
        return self.train if name == "train" else self.test

    def validate(self) -> None:
        for split in (self.train, self.test):
            for trajs in split.values():
                for t in trajs:
                    t.validate()

    def __eq__(self, other):
        if not isinstance(other, MqmeDataset):
            return NotImplemented
        return (self.config == other.config and self.provenance == other.provenance
                and self.goal_set == other.goal_set
                and _splits_equal(self.train, other.train) and _splits_equal(self.test, other.test))


def _splits_equal(a, b):
    return set(a) == set(b) and all(len(a[k]) == len(b[k]) and all(x == y for x, y in zip(a[k], b[k])) for k in a)


# ---------------------------------------------------------------- policies

Policy = Callable[[np.ndarray, EnvConfig, Embodiment, float, int], int]


def oracle_action(state: EnvState, embodiment: Optional[Embodiment] = None):
    """The scripted oracle's action for ``state``."""
    if state.terminal:
        raise UsageError("oracle queried on a terminal state")
    emb = embodiment or state.embodiment
    cfg = state.config
    from .sim import Action
    return Action(int(K.oracle_action(state.to_array(), cfg.width, cfg.height, cfg.goal_depth,
                                      emb.width, emb.has_grip)))


@dataclass(frozen=True)
class DegradedOracle:
    """With probability ``epsilon`` a uniformly random legal action, else the oracle's."""

    epsilon: float

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise UsageError(f"epsilon must lie in [0, 1], got {self.epsilon}")

    def act(self, s: np.ndarray, config: EnvConfig, emb: Embodiment, coin: float, randint: int) -> int:
        if coin < self.epsilon:
            return int(randint % emb.num_actions)
        return int(K.oracle_action(s, config.width, config.height, config.goal_depth, emb.width, emb.has_grip))


def degrade(epsilon: float) -> DegradedOracle:
    return DegradedOracle(float(epsilon))


def _noise(episode_seed: int, max_steps: int):
    rng = np.random.default_rng([int(episode_seed) & 0xFFFFFFFFFFFFFFFF, 7])
    return rng.random(max_steps), rng.integers(0, 1 << 30, size=max_steps)


def rollout(policy, config: EnvConfig, embodiment, episode_seed: int) -> Trajectory:
    """Run ``policy`` from ``reset(config, embodiment, episode_seed)`` to termination."""
    state = reset(config, embodiment, episode_seed)
    emb = state.embodiment
    coins, randacts = _noise(episode_seed, emb.max_steps)
    s0 = state.to_array()
    if isinstance(policy, DegradedOracle):
        states, actions, n = K.rollout_kernel(
            s0, config.width, config.height, config.goal_depth, emb.width, emb.has_grip,
            emb.num_actions, emb.max_steps, policy.epsilon, coins, randacts)
        states, actions = states[:n + 1], actions[:n]
        eps = policy.epsilon
    else:
        rows, acts = [s0], []
        s = s0
        for t in range(emb.max_steps):
            a = int(policy(s, config, emb, coins[t], int(randacts[t])))
            if not 0 <= a < emb.num_actions:
                raise UsageError(f"policy emitted illegal action {a}")
            s = apply_action(s, a, config.width, config.height, emb.width)
            rows.append(s)
            acts.append(a)
            if K.count_in_zone(s, config.goal_depth) == config.num_blocks:
                break
        states, actions = np.stack(rows), np.asarray(acts, dtype=np.int64)
        eps = float("nan")
    return _to_trajectory(states, actions, config, emb, episode_seed, eps)


def _to_trajectory(states, actions, config, emb, episode_seed, eps) -> Trajectory:
    nb = config.num_blocks
    rows = states[:, 3::2][:, :nb]
    counts = (rows < config.goal_depth).sum(axis=1).astype(np.uint8)
    frames = render_arrays(states, config, emb.width)
    return Trajectory(emb.kind, frames, counts, nb, emb.max_steps + 1,
                      actions.astype(np.uint8), int(episode_seed), float(eps))


# ---------------------------------------------------------------- datasets

def _episode_seed(master_seed: int, kind: Kind, attempt: int) -> int:
    return (int(master_seed) & 0xFFFFFFFF) << 32 | (int(kind) << 28) | attempt


def build_dataset(config: EnvConfig, noise_schedule: Sequence[float] = DEFAULT_NOISE_SCHEDULE,
                  quotas=(200, 400), master_seed: int = 0,
                  embodiments: Optional[Iterable] = None, attempt_budget: Optional[int] = None,
                  classes: Optional[Sequence[int]] = None) -> MqmeDataset:
    """Rejection-sample stratified train/test splits per embodiment.

    ``quotas`` are (train, test) sizes per embodiment; each must split evenly
    across the outcome classes (blocks pushed in, all of ``0..B`` unless
    ``classes`` narrows it).
    """
    config.validate()
    B = config.num_blocks
    classes = list(range(B + 1)) if classes is None else sorted(set(int(c) for c in classes))
    n_cls = len(classes)
    q_train, q_test = (int(q) for q in quotas)
    if q_train % n_cls or q_test % n_cls:
        raise UsageError(f"quotas {quotas} are not divisible by {n_cls} outcome classes")
    schedule = [float(e) for e in noise_schedule]
    for e in schedule:
        degrade(e)
    kinds = [Kind.parse(k) for k in (embodiments if embodiments is not None else list(Kind))]
    per_cls = {"train": q_train // n_cls, "test": q_test // n_cls}
    budget = attempt_budget or 200 * max(1, q_train + q_test)
    train, test = {}, {}
    for kind in kinds:
        emb = config.embodiment(kind)
        filled = {"train": {c: [] for c in classes}, "test": {c: [] for c in classes}}
        pick = np.random.default_rng([int(master_seed) & 0xFFFFFFFF, int(kind), 11])
        need = q_train + q_test
        attempt = 0
        while need:
            if attempt >= budget:
                starved = [(split, c) for split in filled for c in classes
                           if len(filled[split][c]) < per_cls[split]]
                raise GenerationError(
                    f"{kind.label}: attempt budget {budget} exhausted; starved (split, class): {starved}")
            eps = schedule[int(pick.integers(len(schedule)))]
            seed = _episode_seed(master_seed, kind, attempt)
            attempt += 1
            traj = rollout(DegradedOracle(eps), config, emb, seed)
            c = traj.blocks_final
            if c not in filled["train"]:
                continue
            for split in ("train", "test"):
                if len(filled[split][c]) < per_cls[split]:
                    filled[split][c].append(traj)
                    need -= 1
                    break
        train[kind] = [t for c in classes for t in filled["train"][c]]
        test[kind] = [t for c in classes for t in filled["test"][c]]
    prov = {"noise_schedule": tuple(schedule), "quotas": (q_train, q_test),
            "master_seed": int(master_seed), "classes": tuple(classes)}
    return MqmeDataset(config, train, test, prov)


def class_histogram(trajs: Sequence[Trajectory], num_blocks: int) -> list:
    hist = [0] * (num_blocks + 1)
    for t in trajs:
        hist[t.blocks_final] += 1
    return hist


def extract_goal_set(source, n: int = 16, seed: int = 0, embodiments: Optional[Iterable] = None) -> GoalSet:
    """Synthesize ``n`` distinct full-success frames.

    Blocks keep the columns of the start layouts (any column set when the
    layout pool is unrestricted) and sit at random rows inside the zone; the
    agent is placed at a random free position below the zone.
    """
    config = source.config if isinstance(source, MqmeDataset) else source
    if n < 1:
        raise UsageError("goal set size must be >= 1")
    from .sim import layout_pool
    W, H, G, B = config.width, config.height, config.goal_depth, config.num_blocks
    kinds = [Kind.parse(k) for k in (embodiments if embodiments is not None else list(Kind))]
    widths = sorted({config.embodiment(k).width for k in kinds})
    pool = layout_pool(config)
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x60A1])
    frames, seen = [], set()
    attempts = 0
    while len(frames) < n:
        if attempts > 200 * n + 1000:
            raise GenerationError(f"could not find {n} distinct success states")
        attempts += 1
        if pool:
            cols = [c for _, c in pool[int(rng.integers(len(pool)))][1]]
        else:
            cols = sorted(rng.choice(W, size=B, replace=False).tolist())
        rows = rng.integers(0, G, size=B)
        w = widths[int(rng.integers(len(widths)))]
        ar = int(rng.integers(G, H))
        ac = int(rng.integers(0, W - w + 1))
        s = np.array([ar, ac, -1] + [v for rc in zip(rows, cols) for v in rc], dtype=np.int64)
        f = render_arrays(s[None], config, w)[0]
        key = f.tobytes()
        if key not in seen:
            seen.add(key)
            frames.append(f)
    return GoalSet(np.stack(frames))


def success_state_count(config: EnvConfig, width: int = 1) -> int:
    """Number of distinct full-success frames for a given agent width."""
    from math import comb
    W, H, G, B = config.width, config.height, config.goal_depth, config.num_blocks
    # blocks anywhere in the zone (distinct cells), agent anywhere below it
    return comb(W * G, B) * (H - G) * (W - width + 1)


# ---------------------------------------------------------------- file format

_HDR = struct.Struct("<HHHHQHHHHI")  # W H G B seed max_steps*4 layout_pool


def _pack_frames(frames: np.ndarray) -> bytes:
    return np.packbits(frames.astype(np.uint8).ravel(), bitorder="little").tobytes()


def _unpack_frames(buf: bytes, n: int, size: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little", count=n * size)
    return bits.reshape(n, size)


def dumps_dataset(ds: MqmeDataset) -> bytes:
    cfg = ds.config
    prov = ds.provenance
    header = bytearray(MAGIC)
    header += _HDR.pack(cfg.width, cfg.height, cfg.goal_depth, cfg.num_blocks,
                        int(cfg.seed) & 0xFFFFFFFFFFFFFFFF,
                        *(int(cfg.max_steps[k]) for k in Kind), cfg.layout_pool)
    sched = prov.get("noise_schedule", ())
    classes = prov.get("classes", tuple(range(cfg.num_blocks + 1)))
    qt, qv = prov.get("quotas", (0, 0))
    header += struct.pack("<H", len(sched)) + struct.pack(f"<{len(sched)}d", *sched)
    header += struct.pack("<H", len(classes)) + bytes(int(c) for c in classes)
    header += struct.pack("<QII", int(prov.get("master_seed", 0)) & 0xFFFFFFFFFFFFFFFF, qt, qv)
    for k in Kind:
        header += struct.pack("<II", len(ds.train.get(k, ())), len(ds.test.get(k, ())))
    header += struct.pack("<I", len(ds.goal_set) if ds.goal_set is not None else 0)

    body = bytearray()
    size = cfg.frame_size
    for split_id, split in ((0, ds.train), (1, ds.test)):
        for k in Kind:
            for t in split.get(k, ()):
                has_actions = t.actions is not None
                body += struct.pack("<BBBQdIB", _TAG_TRAJ, split_id, int(t.embodiment),
                                    int(t.episode_seed) & 0xFFFFFFFFFFFFFFFF, float(t.epsilon),
                                    t.length, int(has_actions))
                body += _pack_frames(t.frames)
                body += t.zone_counts.tobytes()
                if has_actions:
                    body += t.actions.astype(np.uint8).tobytes()
    if ds.goal_set is not None:
        body += struct.pack("<BI", _TAG_GOAL, len(ds.goal_set))
        body += _pack_frames(ds.goal_set.frames)
    return bytes(header) + bytes(body) + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, buf: bytes, offset: int = 0, end: Optional[int] = None):
        self.buf, self.pos = buf, offset
        self.end = len(buf) if end is None else end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise FormatError(f"truncated: wanted {n} bytes", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


class VersionError(FormatError):
    pass


def loads_dataset(buf: bytes) -> MqmeDataset:
    if buf[:len(MAGIC)] != MAGIC:
        raise VersionError(f"bad magic {bytes(buf[:len(MAGIC)])!r}, expected {MAGIC!r}", 0)
    r = _Reader(buf, len(MAGIC))
    W, H, G, B, seed, s0, s1, s2, s3, pool = r.unpack(_HDR.format)
    cfg = EnvConfig(W, H, G, B, seed, dict(zip(Kind, (s0, s1, s2, s3))), pool)
    (n_sched,) = r.unpack("<H")
    sched = r.unpack(f"<{n_sched}d")
    (n_cls,) = r.unpack("<H")
    classes = tuple(r.take(n_cls))
    master, qt, qv = r.unpack("<QII")
    counts = {k: r.unpack("<II") for k in Kind}
    (n_goal,) = r.unpack("<I")
    body_start = r.pos
    if len(buf) - 4 < body_start:
        raise FormatError("truncated: missing body or checksum", len(buf))
    (crc,) = struct.unpack("<I", buf[-4:])
    body = buf[body_start:-4]
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError("checksum failure in body", body_start)
    r = _Reader(buf, body_start, len(buf) - 4)
    size = 3 * W * H
    train = {k: [] for k in Kind if counts[k][0]}
    test = {k: [] for k in Kind if counts[k][1]}
    n_traj = sum(a + b for a, b in counts.values())
    for _ in range(n_traj):
        at = r.pos
        tag, split_id, kind, ep_seed, eps, L, has_actions = r.unpack("<BBBQdIB")
        if tag != _TAG_TRAJ:
            raise FormatError(f"expected trajectory record, found tag {tag:#x}", at)
        frames = _unpack_frames(r.take((L * size + 7) // 8), L, size)
        zone = np.frombuffer(r.take(L), dtype=np.uint8).copy()
        actions = np.frombuffer(r.take(L - 1), dtype=np.uint8).copy() if has_actions else None
        kind = Kind(kind)
        t = Trajectory(kind, frames, zone, B, cfg.max_steps[kind] + 1, actions, ep_seed, eps)
        (train if split_id == 0 else test).setdefault(kind, []).append(t)
    goal = None
    if n_goal:
        at = r.pos
        tag, n = r.unpack("<BI")
        if tag != _TAG_GOAL or n != n_goal:
            raise FormatError("malformed goal section", at)
        goal = GoalSet(_unpack_frames(r.take((n * size + 7) // 8), n, size))
    if r.pos != r.end:
        raise FormatError("trailing bytes after last record", r.pos)
    prov = {"noise_schedule": tuple(sched), "quotas": (qt, qv), "master_seed": master, "classes": classes}
    return MqmeDataset(cfg, train, test, prov, goal)


def save_dataset(ds: MqmeDataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_dataset(ds))


def load_dataset(path) -> MqmeDataset:
    with open(path, "rb") as fh:
        return loads_dataset(fh.read())


def dataset_hash(ds: MqmeDataset) -> str:
    """Short content hash of the serialized dataset (provenance stamps)."""
    import hashlib
    return hashlib.sha256(dumps_dataset(ds)).hexdigest()[:16]
