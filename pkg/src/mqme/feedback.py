"""Synthetic labelers: preferences, ranked triplets and ordinal buckets.

Every label is derived from the per-step mean ground-truth reward of the
referenced trajectories.  Trajectories are referenced by (embodiment,
split, index), never by content, so labels survive encoder retraining.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence

import numpy as np

from .demogen import MqmeDataset, Trajectory
from .errors import FormatError, GenerationError, UsageError
from .sim import Kind, gt_step_mean


class TrajRef(NamedTuple):
    kind: Kind
    split: str
    index: int

    def __str__(self):
        return f"{self.kind.label}:{self.split}:{self.index}"

    @classmethod
    def parse(cls, text: str) -> "TrajRef":
        try:
            emb, split, idx = text.split(":")
            return cls(Kind.parse(emb), split, int(idx))
        except (ValueError, KeyError) as exc:
            raise FormatError(f"bad trajectory reference {text!r}") from exc

    def resolve(self, dataset: MqmeDataset) -> Trajectory:
        return dataset.split(self.split)[self.kind][self.index]


@dataclass(frozen=True)
class PreferenceLabel:
    i: TrajRef
    j: TrajRef
    mu: tuple

    def __post_init__(self):
        if self.i == self.j:
            raise UsageError("a preference needs two distinct trajectories")
        if tuple(self.mu) not in ((1, 0), (0, 1)):
            raise UsageError(f"mu must be one-hot, got {self.mu}")

    @property
    def preferred(self) -> TrajRef:
        return self.i if self.mu == (1, 0) else self.j

    def swapped(self) -> "PreferenceLabel":
        return PreferenceLabel(self.j, self.i, (self.mu[1], self.mu[0]))


@dataclass(frozen=True)
class TripletLabel:
    anchor: TrajRef
    positive: TrajRef
    negative: TrajRef

    def __post_init__(self):
        if len({self.anchor, self.positive, self.negative}) != 3:
            raise UsageError("a triplet needs three distinct trajectories")


@dataclass
class BucketAssignment:
    buckets: List[List[TrajRef]]
    bucket_size: int

    def bucket_of(self) -> Dict[TrajRef, int]:
        return {r: k for k, b in enumerate(self.buckets) for r in b}


def oracle_score(traj: Trajectory) -> float:
    """Per-step mean ground-truth reward over the episode horizon."""
    return gt_step_mean(traj)


def pooled_refs(dataset: MqmeDataset, split: str = "train",
                embodiments: Optional[Iterable] = None) -> List[TrajRef]:
    groups = dataset.split(split)
    kinds = sorted(Kind.parse(k) for k in embodiments) if embodiments is not None else sorted(groups)
    return [TrajRef(k, split, i) for k in kinds for i in range(len(groups[k]))]


def _scores(dataset: MqmeDataset, refs: Sequence[TrajRef]) -> np.ndarray:
    return np.array([oracle_score(r.resolve(dataset)) for r in refs])


def _pool(dataset, split, embodiments):
    refs = pooled_refs(dataset, split, embodiments)
    if not refs:
        raise UsageError("no trajectories to label")
    return refs, _scores(dataset, refs)


def sample_preferences(dataset: MqmeDataset, n: int, seed: int = 0, split: str = "train",
                       embodiments: Optional[Iterable] = None,
                       max_attempts: Optional[int] = None) -> List[PreferenceLabel]:
    """Uniform pairs from the pooled split, labeled by oracle score; ties redrawn."""
    if n < 1:
        raise UsageError("n must be >= 1")
    refs, score = _pool(dataset, split, embodiments)
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x9F])
    budget = max_attempts or 100 * n
    out, attempts = [], 0
    while len(out) < n:
        if attempts >= budget:
            raise GenerationError(f"only {len(out)} of {n} untied preference pairs after {budget} draws")
        attempts += 1
        a, b = rng.integers(len(refs), size=2)
        if a == b or score[a] == score[b]:
            continue
        out.append(PreferenceLabel(refs[a], refs[b], (1, 0) if score[a] > score[b] else (0, 1)))
    return out


def sample_triplets(dataset: MqmeDataset, n: int, seed: int = 0, split: str = "train",
                    embodiments: Optional[Iterable] = None,
                    max_attempts: Optional[int] = None) -> List[TripletLabel]:
    """Three draws with replacement; kept when all distinct with strictly ordered scores."""
    if n < 1:
        raise UsageError("n must be >= 1")
    refs, score = _pool(dataset, split, embodiments)
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x7A])
    budget = max_attempts or 100 * n
    out, attempts = [], 0
    while len(out) < n:
        if attempts >= budget:
            raise GenerationError(f"only {len(out)} of {n} strictly ordered triplets after {budget} draws")
        attempts += 1
        idx = rng.integers(len(refs), size=3)
        s = score[idx]
        if len(set(s.tolist())) < 3:
            continue
        a, p, q = idx[np.argsort(-s, kind="stable")]
        out.append(TripletLabel(refs[a], refs[p], refs[q]))
    return out


def bucketize(dataset: MqmeDataset, num_buckets: int, seed: int = 0, bucket_size: Optional[int] = None,
              split: str = "train", embodiments: Optional[Iterable] = None) -> BucketAssignment:
    """Sort by oracle score and slice into equal contiguous buckets.

    Ties are ordered by a seeded shuffle. Surplus trajectories are dropped
    from the middle of the largest groups of tied scores, so removal never
    moves a bucket boundary across distinct scores it would otherwise keep.
    """
    if num_buckets < 1:
        raise UsageError("num_buckets must be >= 1")
    refs, score = _pool(dataset, split, embodiments)
    size = bucket_size if bucket_size is not None else len(refs) // num_buckets
    if size < 1 or size * num_buckets > len(refs):
        raise UsageError(f"{num_buckets} buckets of {size} exceed the {len(refs)} pooled trajectories")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0xB0C])
    order = np.lexsort((rng.permutation(len(refs)), score))
    surplus = len(refs) - size * num_buckets
    drop = np.zeros(len(refs), dtype=bool)
    if surplus:
        s_sorted = score[order]
        starts = np.flatnonzero(np.r_[True, s_sorted[1:] != s_sorted[:-1]])
        ends = np.r_[starts[1:], len(order)]
        groups = sorted(zip(ends - starts, starts), key=lambda g: (-g[0], g[1]))
        for length, start in groups:
            if not surplus:
                break
            k = min(int(length), surplus)
            mid = start + (length - k) // 2
            drop[mid:mid + k] = True
            surplus -= k
    kept = order[~drop]
    buckets = [[refs[i] for i in kept[b * size:(b + 1) * size]] for b in range(num_buckets)]
    return BucketAssignment(buckets, size)


# ---------------------------------------------------------------- file format

@dataclass
class FeedbackSet:
    preferences: List[PreferenceLabel] = field(default_factory=list)
    triplets: List[TripletLabel] = field(default_factory=list)
    buckets: Optional[BucketAssignment] = None
    header: str = ""


def dumps_feedback(fb: FeedbackSet) -> str:
    lines = []
    if fb.header:
        lines += ["# " + h for h in fb.header.splitlines()]
    lines += [f"P {p.i} {p.j} {p.mu[0]} {p.mu[1]}" for p in fb.preferences]
    lines += [f"T {t.anchor} {t.positive} {t.negative}" for t in fb.triplets]
    if fb.buckets is not None:
        lines += [f"B {k} {r}" for k, b in enumerate(fb.buckets.buckets) for r in b]
    return "\n".join(lines) + "\n"


def loads_feedback(text: str) -> FeedbackSet:
    fb = FeedbackSet()
    header, buckets = [], {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            header.append(line[2:] if line.startswith("# ") else line[1:])
            continue
        parts = line.split()
        try:
            if parts[0] == "P" and len(parts) == 5:
                fb.preferences.append(PreferenceLabel(TrajRef.parse(parts[1]), TrajRef.parse(parts[2]),
                                                      (int(parts[3]), int(parts[4]))))
            elif parts[0] == "T" and len(parts) == 4:
                fb.triplets.append(TripletLabel(*(TrajRef.parse(p) for p in parts[1:])))
            elif parts[0] == "B" and len(parts) == 3:
                buckets.setdefault(int(parts[1]), []).append(TrajRef.parse(parts[2]))
            else:
                raise ValueError(line)
        except (ValueError, UsageError, FormatError) as exc:
            raise FormatError(f"malformed feedback record on line {lineno}: {line!r}") from exc
    if buckets:
        ks = sorted(buckets)
        if ks != list(range(len(ks))):
            raise FormatError("bucket indices are not contiguous from 0")
        sizes = {len(buckets[k]) for k in ks}
        if len(sizes) != 1:
            raise FormatError("buckets have unequal sizes")
        fb.buckets = BucketAssignment([buckets[k] for k in ks], sizes.pop())
    fb.header = "\n".join(header)
    return fb


def save_feedback(fb: FeedbackSet, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_feedback(fb))


def load_feedback(path) -> FeedbackSet:
    with open(path) as fh:
        return loads_feedback(fh.read())
