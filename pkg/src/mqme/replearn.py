"""Representation and reward learning objectives and their training loops.

Losses are written once on :mod:`diffnet` tensors; the plain-array entry
points (``tcc_pair_loss``, ``rlhf_pref_prob`` ...) evaluate the same graphs
without recording gradients.
"""
from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import diffnet as D
from .demogen import GoalSet, MqmeDataset, Trajectory
from .errors import UsageError
from .feedback import BucketAssignment, PreferenceLabel, TrajRef, TripletLabel, pooled_refs


class Method(str, enum.Enum):
    TCC = "tcc"
    TCC_BUCKETS = "tcc_buckets"
    XRLHF = "xrlhf"
    XPREFS_STATIC = "xprefs_static"
    XPREFS_DYNAMIC = "xprefs_dynamic"
    XTRIPLETS = "xtriplets"
    GOAL_CLASSIFIER = "goal_classifier"

    @classmethod
    def parse(cls, value) -> "Method":
        if isinstance(value, Method):
            return value
        key = str(value).strip().lower().replace("-", "_")
        for m in cls:
            if key in (m.value, m.name.lower()):
                return m
        raise UsageError(f"unknown method {value!r}; expected one of {[m.value for m in cls]}")

    @property
    def has_head(self) -> bool:
        return self in (Method.XRLHF, Method.GOAL_CLASSIFIER)


REPRESENTATION_METHODS = (Method.TCC, Method.TCC_BUCKETS, Method.XPREFS_STATIC,
                          Method.XPREFS_DYNAMIC, Method.XTRIPLETS)

# desk-scale iteration counts; the full-scale triplet run used 4000
DESK_ITERATIONS = {
    Method.TCC: 1000, Method.TCC_BUCKETS: 1000, Method.XRLHF: 1000, Method.XPREFS_STATIC: 1000,
    Method.XPREFS_DYNAMIC: 1000, Method.XTRIPLETS: 1000, Method.GOAL_CLASSIFIER: 1000,
}
PAPER_ITERATIONS = {m: 4000 for m in Method}


@dataclass(frozen=True)
class TrainSpec:
    method: Method = Method.TCC
    iterations: int = 1000
    batch_size: int = 32
    frames_per_video: int = 20
    temperature: float = 0.1
    seed: int = 0
    lr: float = D.DESK_LR
    refresh_period: Optional[int] = None
    hidden: tuple = D.HIDDEN
    latent: int = D.LATENT_DIM

    def __post_init__(self):
        object.__setattr__(self, "method", Method.parse(self.method))
        if self.iterations < 0 or self.batch_size < 1 or self.frames_per_video < 1:
            raise UsageError("iterations, batch_size and frames_per_video must be positive")
        if self.temperature <= 0:
            raise UsageError("temperature must be positive")
        if self.method is Method.XPREFS_DYNAMIC and (self.refresh_period is None or self.refresh_period < 1):
            raise UsageError("dynamic XPrefs needs refresh_period >= 1")

    @classmethod
    def for_method(cls, method, **kw) -> "TrainSpec":
        method = Method.parse(method)
        kw.setdefault("iterations", DESK_ITERATIONS[method])
        if method is Method.XPREFS_DYNAMIC:
            kw.setdefault("refresh_period", 1000)
        return cls(method=method, **kw)


@dataclass
class LossReport:
    losses: np.ndarray
    refresh_steps: List[int] = field(default_factory=list)
    wall_clock: float = 0.0
    batches: List[tuple] = field(default_factory=list, repr=False)
    # goal latent the XPrefs objective was scoring against when training stopped
    goal: Optional[np.ndarray] = field(default=None, repr=False)

    def window_means(self, width: int) -> np.ndarray:
        n = len(self.losses) // width
        return self.losses[:n * width].reshape(n, width).mean(axis=1)

    def dumps(self) -> str:
        """Two-column table; a refresh is marked on the row where it happened.

        Wall-clock time is kept out of the file so reruns are byte-identical.
        """
        marks = set(self.refresh_steps)
        lines = ["iteration\tloss"]
        for i, v in enumerate(self.losses):
            lines.append(f"{i}\t{float(v)!r}" + ("\t# refresh" if i in marks else ""))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "LossReport":
        losses, refresh = [], []
        for line in text.splitlines()[1:]:
            if not line.strip():
                continue
            parts = line.split("\t")
            losses.append(float(parts[1]))
            if len(parts) > 2 and "refresh" in parts[2]:
                refresh.append(int(parts[0]))
        return cls(np.asarray(losses), refresh)


# ---------------------------------------------------------------- frame weights

def sum_weights(traj: Trajectory) -> np.ndarray:
    """Per-frame weights of a trajectory sum with the success state absorbing.

    A successful episode that ended early counts its final frame once for
    every remaining step of the horizon, as the ground-truth return does.
    """
    w = np.ones(traj.length)
    if traj.success and traj.length < traj.horizon:
        w[-1] += traj.horizon - traj.length
    return w


# ---------------------------------------------------------------- soft nearest neighbour / TCC

def soft_nearest_neighbor(query, frames, temperature: float):
    """Softmax weights over ``frames`` by negative squared distance, and the blend."""
    if temperature <= 0:
        raise UsageError("temperature must be positive")
    q = np.asarray(query, dtype=np.float64)
    V = np.asarray(frames, dtype=np.float64)
    if V.ndim == 1:
        V = V[:, None]
        q = np.atleast_1d(q)
    logits = -((V - q) ** 2).sum(axis=-1) / temperature
    logits -= logits.max()
    alpha = np.exp(logits)
    alpha /= alpha.sum()
    return alpha, alpha @ V


def _tcc_core(U, Vj, q, idx_j, t_hat, temperature):
    """Cycle-back regression loss, batched over P pairs.

    U: (P, Fi, D) frames of the video searched for the soft neighbour.
    Vj: (P, Fj, D) frames of the query video; q: (P, D) query latents.
    idx_j: (P, Fj) normalized frame indices of Vj; t_hat: (P,) target index.
    """
    P, _, Dm = U.shape
    d1 = D.sum(D.square(D.sub(U, D.reshape(q, (P, 1, Dm)))), axis=-1)
    alpha = D.softmax(D.mul(d1, -1.0 / temperature), axis=-1)
    vt = D.sum(D.mul(D.reshape(alpha, alpha.shape + (1,)), U), axis=1)
    d2 = D.sum(D.square(D.sub(Vj, D.reshape(vt, (P, 1, Dm)))), axis=-1)
    beta = D.softmax(D.mul(d2, -1.0 / temperature), axis=-1)
    t_pred = D.sum(D.mul(beta, idx_j), axis=-1)
    return D.mean(D.square(D.sub(t_pred, t_hat)))


def normalized_index(L: int) -> np.ndarray:
    return np.arange(L) / (L - 1) if L > 1 else np.zeros(1)


def tcc_pair_loss(V_i, V_j, t: int, temperature: float = 0.1) -> float:
    """(t' - t)^2 on normalized indices for query frame ``t`` of ``V_j``."""
    Vi = np.asarray(V_i, dtype=np.float64)
    Vj = np.asarray(V_j, dtype=np.float64)
    if Vi.ndim == 1:
        Vi, Vj = Vi[:, None], Vj[:, None]
    if not 0 <= t < len(Vj):
        raise UsageError(f"frame index {t} outside video of length {len(Vj)}")
    idx = normalized_index(len(Vj))
    loss = _tcc_core(D.Tensor(Vi[None]), D.Tensor(Vj[None]), D.Tensor(Vj[t][None]),
                     D.Tensor(idx[None]), D.Tensor([idx[t]]), temperature)
    return float(loss.value)


def tcc_batch_loss(E, norm_idx: np.ndarray, pairs_i: np.ndarray, pairs_j: np.ndarray,
                   t: np.ndarray, temperature: float):
    """TCC over ordered pairs of subsampled videos ``E`` (B, F, D)."""
    E = D._t(E)
    U = D.take(E, pairs_i)
    Vj = D.take(E, pairs_j)
    q = D.take(E, (pairs_j, t))
    return _tcc_core(U, Vj, q, norm_idx[pairs_j], norm_idx[pairs_j, t], temperature)


# ---------------------------------------------------------------- Bradley-Terry

def rlhf_pref_prob(rewards_i, rewards_j, weights_i=None, weights_j=None) -> float:
    """P(v_i > v_j) = exp(S_i) / (exp(S_i) + exp(S_j)) over summed frame rewards."""
    ri = np.asarray(rewards_i, dtype=np.float64)
    rj = np.asarray(rewards_j, dtype=np.float64)
    if ri.size == 0 or rj.size == 0:
        raise UsageError("reward sequences must be nonempty")
    si = float(np.sum(ri if weights_i is None else ri * weights_i))
    sj = float(np.sum(rj if weights_j is None else rj * weights_j))
    m = max(si, sj)
    return float(np.exp(si - m - np.log(np.exp(si - m) + np.exp(sj - m))))


def _bt_loss(s_i, s_j, mu):
    """Cross-entropy of one-hot labels against the Bradley-Terry probability."""
    d = D.sub(s_i, s_j)
    mu = np.asarray(mu, dtype=np.float64)
    return D.mean(D.add(D.mul(D.softplus(D.mul(d, -1.0)), mu[:, 0]), D.mul(D.softplus(d), mu[:, 1])))


def rlhf_loss_from_sums(s_i, s_j, mu):
    return _bt_loss(s_i, s_j, mu)


def rlhf_loss(rewards_i: Sequence, rewards_j: Sequence, mu, weights_i=None, weights_j=None) -> float:
    """Batch-mean cross-entropy from per-frame reward arrays (no gradients)."""
    si = [np.sum(r if w is None else np.asarray(r) * w) for r, w in
          zip(rewards_i, weights_i or [None] * len(rewards_i))]
    sj = [np.sum(r if w is None else np.asarray(r) * w) for r, w in
          zip(rewards_j, weights_j or [None] * len(rewards_j))]
    return float(_bt_loss(D.Tensor(si), D.Tensor(sj), np.atleast_2d(mu)).value)


def goal_scores(V, g) -> np.ndarray:
    """Per-frame -||phi(s) - g||^2."""
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    return -np.sum((V - np.asarray(g, dtype=np.float64)) ** 2, axis=-1)


def xprefs_prob(V_i, V_j, g, weights_i=None, weights_j=None) -> float:
    """Bradley-Terry over summed negative squared distances to the goal."""
    Vi = np.atleast_2d(np.asarray(V_i, dtype=np.float64))
    Vj = np.atleast_2d(np.asarray(V_j, dtype=np.float64))
    g = np.asarray(g, dtype=np.float64)
    if Vi.shape[-1] != g.shape[-1] or Vj.shape[-1] != g.shape[-1]:
        raise UsageError("latent dimensions disagree")
    di = np.sum((Vi - g) ** 2, axis=-1)
    dj = np.sum((Vj - g) ** 2, axis=-1)
    ci = float(np.sum(di if weights_i is None else di * weights_i))
    cj = float(np.sum(dj if weights_j is None else dj * weights_j))
    m = min(ci, cj)
    ei, ej = np.exp(m - ci), np.exp(m - cj)
    return float(ei / (ei + ej))


# ---------------------------------------------------------------- triplets / classifier

def _triplet_core(a, p, n):
    """-log P(a closer to p than to n) with squared distance between mean latents."""
    dap = D.sum(D.square(D.sub(a, p)), axis=-1)
    dan = D.sum(D.square(D.sub(a, n)), axis=-1)
    return D.mean(D.softplus(D.sub(dap, dan)))


def triplet_loss(anchor, positive, negative) -> float:
    a, p, n = (np.atleast_2d(np.asarray(x, dtype=np.float64)).mean(axis=0) for x in (anchor, positive, negative))
    return float(_triplet_core(D.Tensor(a[None]), D.Tensor(p[None]), D.Tensor(n[None])).value)


def bce_logits(logits, labels):
    y = np.asarray(labels, dtype=np.float64)
    return D.mean(D.sub(D.softplus(logits), D.mul(logits, y)))


def classifier_loss(logits, labels) -> float:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 labels."""
    return float(bce_logits(D.Tensor(np.asarray(logits, dtype=np.float64)), labels).value)


# ---------------------------------------------------------------- training data

class VideoBank:
    """Frames of the referenced trajectories stacked for fast batching."""

    def __init__(self, dataset: MqmeDataset, refs: Sequence[TrajRef]):
        self.refs = list(refs)
        self.index = {r: k for k, r in enumerate(self.refs)}
        trajs = [r.resolve(dataset) for r in self.refs]
        self.lengths = np.array([t.length for t in trajs])
        self.offsets = np.concatenate([[0], np.cumsum(self.lengths)])
        self.frames = np.concatenate([t.frames for t in trajs]).astype(np.float64)
        self.weights = [sum_weights(t) for t in trajs]
        self.start_frames = self.frames[self.offsets[:-1]]

    def __len__(self):
        return len(self.refs)

    def video(self, k: int) -> np.ndarray:
        return self.frames[self.offsets[k]:self.offsets[k + 1]]

    def rows(self, ids: Sequence[int]):
        """Stacked frame rows of videos ``ids`` and a (len(ids), rows) weighted-sum matrix."""
        parts = [np.arange(self.offsets[k], self.offsets[k + 1]) for k in ids]
        rows = np.concatenate(parts)
        S = np.zeros((len(ids), len(rows)))
        at = 0
        for n, (k, p) in enumerate(zip(ids, parts)):
            S[n, at:at + len(p)] = self.weights[k]
            at += len(p)
        return rows, S

    def subsample(self, ids: Sequence[int], F: int, rng: np.random.Generator):
        """F sorted frame rows per video and their normalized indices."""
        rows = np.empty((len(ids), F), dtype=np.int64)
        norm = np.empty((len(ids), F))
        for n, k in enumerate(ids):
            L = int(self.lengths[k])
            pick = np.sort(rng.choice(L, size=F, replace=L < F))
            rows[n] = self.offsets[k] + pick
            norm[n] = pick / (L - 1) if L > 1 else 0.0
        return rows, norm


@dataclass
class Corpus:
    """Everything a training loop may consume."""

    dataset: MqmeDataset
    embodiments: tuple
    preferences: List[PreferenceLabel] = field(default_factory=list)
    triplets: List[TripletLabel] = field(default_factory=list)
    buckets: Optional[BucketAssignment] = None
    goal_set: Optional[GoalSet] = None

    def bank(self) -> VideoBank:
        refs = pooled_refs(self.dataset, "train", self.embodiments)
        extra = [r for r in self._label_refs() if r.split != "train" or r.kind not in self.embodiments]
        return VideoBank(self.dataset, refs + sorted(set(extra)))

    def _label_refs(self):
        for p in self.preferences:
            yield p.i
            yield p.j
        for t in self.triplets:
            yield t.anchor
            yield t.positive
            yield t.negative
        if self.buckets is not None:
            for b in self.buckets.buckets:
                yield from b


# ---------------------------------------------------------------- training loops

def _encode_rows(leaves, frames, n_layers):
    return D.forward(leaves, frames, n_layers)


def _goal_latent(params: D.EncoderParams, goal_set: GoalSet) -> np.ndarray:
    return D.encode(params, goal_set.frames).mean(axis=0)


def _batch_tcc(bank, ids, spec, rng, leaves, n_layers):
    rows, norm = bank.subsample(ids, spec.frames_per_video, rng)
    B, F = rows.shape
    E = _encode_rows(leaves, bank.frames[rows.ravel()], n_layers)
    E = D.reshape(E, (B, F, E.shape[-1]))
    ii, jj = np.nonzero(~np.eye(B, dtype=bool))
    t = rng.integers(F, size=len(ii))
    return tcc_batch_loss(E, norm, ii, jj, t, spec.temperature)


def _pair_batch(bank, prefs, rng, batch):
    pick = rng.integers(len(prefs), size=batch)
    ids_i = [bank.index[prefs[p].i] for p in pick]
    ids_j = [bank.index[prefs[p].j] for p in pick]
    mu = np.array([prefs[p].mu for p in pick], dtype=np.float64)
    rows, S = bank.rows(ids_i + ids_j)
    return rows, S, mu, len(pick)


def _score_sums(scores, S, n):
    sums = D.matmul(D.Tensor(S), D.reshape(scores, (scores.shape[0], 1)))
    sums = D.reshape(sums, (2 * n,))
    return D.take(sums, slice(0, n)), D.take(sums, slice(n, 2 * n))


def _method_loss(m, corpus, bank, spec, rng, L, n_layers, g, n_train):
    """One batch of ``m``'s objective as a scalar Tensor, and the bucket record if any."""
    rec = None
    if m is Method.TCC:
        ids = rng.choice(n_train, size=min(spec.batch_size, n_train), replace=False)
        loss = _batch_tcc(bank, ids, spec, rng, L, n_layers)
    elif m is Method.TCC_BUCKETS:
        b = int(rng.integers(len(corpus.buckets.buckets)))
        ids = np.array([bank.index[r] for r in corpus.buckets.buckets[b]])
        loss = _batch_tcc(bank, ids, spec, rng, L, n_layers)
        rec = (b, tuple(ids.tolist()))
    elif m is Method.XTRIPLETS:
        pick = rng.integers(len(corpus.triplets), size=spec.batch_size)
        trip = [corpus.triplets[p] for p in pick]
        ids = np.array([[bank.index[t.anchor], bank.index[t.positive], bank.index[t.negative]]
                        for t in trip]).ravel()
        rows, _ = bank.subsample(ids, spec.frames_per_video, rng)
        E = _encode_rows(L, bank.frames[rows.ravel()], n_layers)
        E = D.mean(D.reshape(E, (len(trip), 3, rows.shape[1], E.shape[-1])), axis=2)
        loss = _triplet_core(D.take(E, (slice(None), 0)), D.take(E, (slice(None), 1)),
                             D.take(E, (slice(None), 2)))
    elif m in (Method.XPREFS_STATIC, Method.XPREFS_DYNAMIC, Method.XRLHF):
        rows, S, mu, n = _pair_batch(bank, corpus.preferences, rng, spec.batch_size)
        z = _encode_rows(L, bank.frames[rows], n_layers)
        if m is Method.XRLHF:
            scores = D.head_forward(L, z, n_layers)
        else:
            scores = D.mul(D.sum(D.square(D.sub(z, g)), axis=-1), -1.0)
        s_i, s_j = _score_sums(scores, S, n)
        loss = _bt_loss(s_i, s_j, mu)
    elif m is Method.GOAL_CLASSIFIER:
        half = spec.batch_size
        pos = corpus.goal_set.frames[rng.integers(len(corpus.goal_set), size=half)].astype(np.float64)
        neg = bank.frames[rng.integers(bank.offsets[n_train], size=half)]
        z = _encode_rows(L, np.concatenate([pos, neg]), n_layers)
        logits = D.head_forward(L, z, n_layers)
        loss = bce_logits(logits, np.r_[np.ones(half), np.zeros(half)])
    else:  # pragma: no cover - guarded by _check_inputs
        raise UsageError(f"unsupported method {m}")
    return loss, rec


def batch_objective(corpus: Corpus, spec: TrainSpec, params: D.EncoderParams, batch_seed: int):
    """``leaves -> loss`` for one fixed batch of ``spec.method``'s training objective.

    The batch is redrawn from ``batch_seed`` on every call, so repeated
    evaluations (finite differences) see identical data. XPrefs scores
    against the goal latent of ``params``, held constant.
    """
    m = spec.method
    _check_inputs(corpus, m)
    bank = corpus.bank()
    n_layers = len(params.weights)
    n_train = len(pooled_refs(corpus.dataset, "train", corpus.embodiments))
    g = _goal_latent(params, corpus.goal_set) if m in (Method.XPREFS_STATIC, Method.XPREFS_DYNAMIC) else None

    def loss_fn(leaves):
        rng = np.random.default_rng([int(batch_seed) & 0xFFFFFFFF, 0xFD])
        return _method_loss(m, corpus, bank, spec, rng, leaves, n_layers, g, n_train)[0]
    return loss_fn


def train_representation(corpus: Corpus, spec: TrainSpec, params: Optional[D.EncoderParams] = None):
    """Train an encoder (or encoder + head) with ``spec.method``.

    Returns ``(params, LossReport)``; ``report.batches`` holds the bank
    indices of each gradient batch.
    """
    m = spec.method
    _check_inputs(corpus, m)
    bank = corpus.bank()
    input_dim = bank.frames.shape[1]
    params = params.copy() if params is not None else D.init_encoder(
        input_dim, spec.seed, spec.hidden, spec.latent, head=m.has_head)
    n_layers = len(params.weights)
    arrays = params.arrays()
    opt = D.OptimState.for_params(arrays, lr=spec.lr)
    rng = np.random.default_rng([int(spec.seed) & 0xFFFFFFFF, 0x7EA1])
    losses = np.zeros(spec.iterations)
    refresh, batches = [], []
    g = None
    if m in (Method.XPREFS_STATIC, Method.XPREFS_DYNAMIC):
        g = _goal_latent(params, corpus.goal_set)
    tic = time.perf_counter()
    n_train = len(pooled_refs(corpus.dataset, "train", corpus.embodiments))
    for it in range(spec.iterations):
        if m is Method.XPREFS_DYNAMIC and it > 0 and it % spec.refresh_period == 0:
            g = _goal_latent(params.with_arrays(arrays), corpus.goal_set)
            refresh.append(it)
        tape = D.GradTape(arrays)
        loss, rec = _method_loss(m, corpus, bank, spec, rng, tape.leaves, n_layers, g, n_train)
        if rec is not None:
            batches.append(rec)
        losses[it] = float(loss.value)
        grads = tape.gradient(loss)
        arrays = D.adam_step(arrays, grads, opt)
    out = params.with_arrays(arrays)
    report = LossReport(losses, refresh, time.perf_counter() - tic, batches, g)
    return out, report


def _check_inputs(corpus: Corpus, m: Method) -> None:
    need = {
        Method.TCC_BUCKETS: ("buckets", corpus.buckets is not None),
        Method.XTRIPLETS: ("triplets", bool(corpus.triplets)),
        Method.XRLHF: ("preferences", bool(corpus.preferences)),
        Method.XPREFS_STATIC: ("preferences and goal_set", bool(corpus.preferences) and corpus.goal_set is not None),
        Method.XPREFS_DYNAMIC: ("preferences and goal_set", bool(corpus.preferences) and corpus.goal_set is not None),
        Method.GOAL_CLASSIFIER: ("goal_set", corpus.goal_set is not None),
    }
    if m in need and not need[m][1]:
        raise UsageError(f"method {m.value} needs {need[m][0]}")


def train_reward_model(corpus: Corpus, spec: TrainSpec, params: Optional[D.EncoderParams] = None):
    """End-to-end scalar reward net from preferences (encoder + head)."""
    if spec.method is not Method.XRLHF:
        raise UsageError("train_reward_model expects the xrlhf method")
    return train_representation(corpus, spec, params)


def preference_accuracy(params: D.EncoderParams, corpus: Corpus, prefs: Sequence[PreferenceLabel]) -> float:
    """Fraction of labels whose preferred trajectory has the larger summed head output."""
    bank = corpus.bank()
    r = D.head_output(params, D.encode(params, bank.frames))
    sums = np.array([np.dot(r[bank.offsets[k]:bank.offsets[k + 1]], bank.weights[k]) for k in range(len(bank))])
    hits = [(sums[bank.index[p.i]] > sums[bank.index[p.j]]) == (p.mu == (1, 0)) for p in prefs]
    return float(np.mean(hits))
