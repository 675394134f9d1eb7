"""Reward functions built from learned artifacts.

DistanceToGoal rewards are ``-(1/kappa) * ||phi(frame) - g||^2``; DirectNet
and Classifier models read the scalar head (raw and through a sigmoid).
GroundTruth reads the block channel of the frame and exists so the same
evaluation and RL code can run on the true reward.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import diffnet as D
from .demogen import GoalSet, MqmeDataset, Trajectory
from .errors import CalibrationError, FormatError, UsageError
from .sim import EnvConfig, Kind

DISTANCE, DIRECT, CLASSIFIER, GROUND_TRUTH = "distance", "direct", "classifier", "ground_truth"
_VARIANTS = (DISTANCE, DIRECT, CLASSIFIER, GROUND_TRUTH)


@dataclass
class GoalEmbedding:
    g: np.ndarray
    provenance: str = "goal_set"
    encoder_id: str = ""


@dataclass
class RewardModel:
    variant: str
    encoder: Optional[D.EncoderParams] = None
    g: Optional[np.ndarray] = None
    kappa: float = 1.0
    config: Optional[EnvConfig] = None
    label: str = ""

    def __post_init__(self):
        if self.variant not in _VARIANTS:
            raise UsageError(f"unknown reward variant {self.variant!r}")
        if self.variant == DISTANCE:
            if self.encoder is None or self.g is None:
                raise UsageError("distance reward needs an encoder and a goal embedding")
            self.g = np.asarray(self.g, dtype=np.float64)
            if self.g.shape != (self.encoder.latent_dim,):
                raise UsageError(f"goal has shape {self.g.shape}, encoder latent is {self.encoder.latent_dim}")
            if not self.kappa > 0:
                raise UsageError("kappa must be positive")
        elif self.variant in (DIRECT, CLASSIFIER):
            if self.encoder is None or not self.encoder.has_head:
                raise UsageError(f"{self.variant} reward needs an encoder with a scalar head")
        elif self.config is None:
            raise UsageError("ground-truth reward needs the EnvConfig")

    @classmethod
    def ground_truth(cls, config: EnvConfig) -> "RewardModel":
        return cls(GROUND_TRUTH, config=config, label="gt")


def _frames_of(source) -> np.ndarray:
    if isinstance(source, GoalSet):
        return source.frames
    if isinstance(source, np.ndarray):
        return np.atleast_2d(source)
    trajs = list(source)
    if trajs and isinstance(trajs[0], Trajectory):
        return np.stack([t.frames[-1] for t in trajs])
    return np.atleast_2d(np.asarray(trajs))


def compute_goal_embedding(encoder: D.EncoderParams, source, provenance: Optional[str] = None) -> GoalEmbedding:
    """Mean latent of goal frames, or of the final frames of trajectories."""
    frames = _frames_of(source)
    if frames.shape[0] == 0:
        raise UsageError("goal source is empty")
    if provenance is None:
        provenance = "goal_set" if isinstance(source, GoalSet) else "final_frames"
    return GoalEmbedding(D.encode(encoder, frames).mean(axis=0), provenance)


def rewards_of_frames(model: RewardModel, frames) -> np.ndarray:
    """Per-frame rewards; each row's value is independent of the batch."""
    X = np.atleast_2d(np.asarray(frames))
    if model.variant == GROUND_TRUTH:
        cfg = model.config
        if X.shape[1] != cfg.frame_size:
            raise UsageError(f"frame length {X.shape[1]} does not match config {cfg.frame_size}")
        cells = cfg.width * cfg.height
        blocks = X[:, cells:2 * cells].reshape(-1, cfg.height, cfg.width)
        return blocks[:, :cfg.goal_depth].sum(axis=(1, 2)) / cfg.num_blocks
    z = D.encode(model.encoder, X)
    if model.variant == DISTANCE:
        return -np.sum((z - model.g) ** 2, axis=1) / model.kappa
    out = D.head_output(model.encoder, z)
    if model.variant == CLASSIFIER:
        return D._sigmoid(out)
    return out


def reward_of_frame(model: RewardModel, frame) -> float:
    f = np.asarray(frame)
    if f.ndim != 1:
        raise UsageError("reward_of_frame takes a single frame")
    return float(rewards_of_frames(model, f[None])[0])


def calibrate_kappa(encoder: D.EncoderParams, g, dataset, embodiments: Optional[Iterable] = None) -> float:
    """Mean squared start-frame distance to ``g`` over training trajectories."""
    if isinstance(dataset, MqmeDataset):
        kinds = [Kind.parse(k) for k in embodiments] if embodiments is not None else sorted(dataset.train)
        starts = np.stack([t.frames[0] for k in kinds for t in dataset.train[k]]) if kinds else np.zeros((0, 0))
    else:
        starts = _frames_of(dataset)
    if starts.shape[0] == 0:
        raise UsageError("no start frames to calibrate on")
    gv = g.g if isinstance(g, GoalEmbedding) else np.asarray(g, dtype=np.float64)
    kappa = float(np.mean(np.sum((D.encode(encoder, starts) - gv) ** 2, axis=1)))
    if not kappa > 0:
        raise CalibrationError("start frames sit exactly at the goal embedding; kappa would be 0")
    return kappa


def distance_model(encoder: D.EncoderParams, goal_source, dataset, embodiments=None, label: str = "") -> RewardModel:
    """Distance-to-goal reward; ``goal_source`` may be a precomputed GoalEmbedding."""
    goal = goal_source if isinstance(goal_source, GoalEmbedding) else compute_goal_embedding(encoder, goal_source)
    kappa = calibrate_kappa(encoder, goal, dataset, embodiments)
    return RewardModel(DISTANCE, encoder, goal.g, kappa, label=label)


def trajectory_return(model: RewardModel, traj: Trajectory, weights: Optional[np.ndarray] = None) -> float:
    """Summed learned reward with the success state absorbing to the horizon."""
    from .replearn import sum_weights
    r = rewards_of_frames(model, traj.frames)
    w = sum_weights(traj) if weights is None else weights
    return float(np.dot(r, w))


def cached_state_rewards(model: RewardModel, mdp, chunk: int = 8192) -> np.ndarray:
    """Reward of every tabulated state, one evaluation per StateKey."""
    n = mdp.n_states
    out = np.empty(n)
    emb = mdp.config.embodiment(mdp.kind)
    from .sim import render_arrays
    for lo in range(0, n, chunk):
        frames = render_arrays(mdp.states[lo:lo + chunk], mdp.config, emb.width)
        out[lo:lo + chunk] = rewards_of_frames(model, frames)
    return out


# ---------------------------------------------------------------- file format

RWD_MAGIC = b"XRWD1"
_TAGS = {v: i for i, v in enumerate(_VARIANTS)}


def dumps_reward(model: RewardModel) -> bytes:
    """Variant tag, kappa, goal vector, label, embedded encoder checkpoint, CRC-32."""
    if model.variant == GROUND_TRUTH:
        raise UsageError("the ground-truth reward has no learned artifact to save")
    g = np.zeros(0) if model.g is None else np.asarray(model.g, dtype="<f8")
    enc = D.dumps_encoder(model.encoder)
    label = model.label.encode()
    body = (struct.pack("<BdI", _TAGS[model.variant], float(model.kappa), g.size) + g.tobytes()
            + struct.pack("<H", len(label)) + label + struct.pack("<I", len(enc)) + enc)
    return RWD_MAGIC + body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def loads_reward(buf: bytes) -> RewardModel:
    if buf[:len(RWD_MAGIC)] != RWD_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:len(RWD_MAGIC)])!r}, expected {RWD_MAGIC!r}", 0)
    body = buf[len(RWD_MAGIC):-4]
    if len(body) < 13:
        raise FormatError("truncated reward header", len(buf))
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError("reward checksum mismatch", len(buf) - 4)
    tag, kappa, n_g = struct.unpack_from("<BdI", body, 0)
    off = 13
    g = np.frombuffer(body, dtype="<f8", count=n_g, offset=off).astype(np.float64)
    off += 8 * n_g
    (n_label,) = struct.unpack_from("<H", body, off)
    label = body[off + 2:off + 2 + n_label].decode()
    off += 2 + n_label
    (n_enc,) = struct.unpack_from("<I", body, off)
    enc = D.loads_encoder(body[off + 4:off + 4 + n_enc])
    variant = _VARIANTS[tag]
    return RewardModel(variant, enc, g if variant == DISTANCE else None, kappa, label=label)


def save_reward(model: RewardModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_reward(model))


def load_reward(path) -> RewardModel:
    with open(path, "rb") as fh:
        return loads_reward(fh.read())
