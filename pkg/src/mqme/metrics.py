"""Reward-alignment metrics and report tables.

Pairs tied in ground-truth return are excluded from both metrics; a pair
tied in learned return counts as discordant (tau) and incorrect (accuracy).
On tie-free data, accuracy = (tau + 1) / 2.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .demogen import MqmeDataset
from .errors import UndefinedMetricError, UsageError
from .reward import RewardModel, trajectory_return
from .rl import LearningCurve
from .sim import Kind, gt_return


@dataclass(frozen=True)
class EvalPair:
    r: float
    r_hat: float
    ref: str = ""


def score_test_set(model: RewardModel, dataset: MqmeDataset, embodiment) -> List[EvalPair]:
    kind = Kind.parse(embodiment)
    trajs = dataset.test.get(kind, [])
    if not trajs:
        raise UsageError(f"no test trajectories for {kind.label}")
    return [EvalPair(gt_return(t), trajectory_return(model, t), f"{kind.label}:test:{i}")
            for i, t in enumerate(trajs)]


def _arrays(pairs):
    if len(pairs) < 2:
        raise UsageError("need at least two pairs")
    r = np.array([p.r for p in pairs], dtype=np.float64)
    rh = np.array([p.r_hat for p in pairs], dtype=np.float64)
    return r, rh


def _signs(pairs):
    r, rh = _arrays(pairs)
    iu, ju = np.triu_indices(len(r), k=1)
    return np.sign(r[iu] - r[ju]), np.sign(rh[iu] - rh[ju])


def kendalls_tau(pairs: Sequence[EvalPair]) -> float:
    """(concordant - discordant) / (concordant + discordant) over gt-untied pairs."""
    sr, sh = _signs(pairs)
    keep = sr != 0
    if not keep.any():
        raise UndefinedMetricError("every pair is tied in ground-truth return")
    conc = int(np.sum(sr[keep] == sh[keep]))
    disc = int(keep.sum()) - conc
    return (conc - disc) / (conc + disc)


def pairwise_accuracy(pairs: Sequence[EvalPair]) -> float:
    sr, sh = _signs(pairs)
    keep = sr != 0
    if not keep.any():
        raise UndefinedMetricError("no pair is strictly ordered by ground-truth return")
    return float(np.mean(sr[keep] == sh[keep]))


def normalized_r_hat(pairs: Sequence[EvalPair]) -> np.ndarray:
    """Min-max map of r_hat onto [min r, max r]; a constant r_hat maps to the midpoint."""
    r, rh = _arrays(pairs) if len(pairs) > 1 else (np.array([pairs[0].r]), np.array([pairs[0].r_hat]))
    lo, hi = r.min(), r.max()
    span = rh.max() - rh.min()
    if span == 0:
        return np.full(len(rh), (lo + hi) / 2.0)
    return lo + (rh - rh.min()) / span * (hi - lo)


def report_header(method: str, embodiment: str, dataset_hash: str, extra: str = "") -> str:
    head = f"# method={method}\tembodiment={embodiment}\tdataset={dataset_hash}"
    return head + (f"\t{extra}" if extra else "")


def export_correlation(pairs: Sequence[EvalPair], path, method: str = "", embodiment: str = "",
                       dataset_hash: str = "") -> None:
    if not pairs:
        raise UsageError("nothing to export")
    norm = normalized_r_hat(pairs)
    lines = [report_header(method, embodiment, dataset_hash), "r\tr_hat_normalized"]
    lines += [f"{p.r!r}\t{float(v)!r}" for p, v in zip(pairs, norm)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_correlation(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("r\t") or not line.strip():
                continue
            rows.append([float(x) for x in line.split("\t")])
    return np.asarray(rows)


@dataclass
class CurveSummary:
    steps: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    n: int


def aggregate_curves(curves: Sequence[LearningCurve]) -> CurveSummary:
    """Pointwise mean and sigma/sqrt(n) across every seed of every curve."""
    if not curves:
        raise UsageError("no curves to aggregate")
    lengths = {c.returns.shape[1] for c in curves}
    if len(lengths) != 1:
        raise UsageError(f"curves have ragged lengths {sorted(lengths)}")
    R = np.concatenate([c.returns for c in curves])
    n = R.shape[0]
    se = R.std(axis=0) / np.sqrt(n)
    return CurveSummary(curves[0].steps, R.mean(axis=0), se, n)


def write_tsv(path, header: str, columns: Sequence[str], rows: Sequence[Sequence]) -> None:
    lines = [header, "\t".join(columns)]
    for row in rows:
        lines.append("\t".join(v if isinstance(v, str) else repr(float(v)) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_tsv(path):
    """Returns (header line, column names, rows as lists of strings)."""
    with open(path) as fh:
        lines = [l.rstrip("\n") for l in fh if l.strip()]
    return lines[0], lines[1].split("\t"), [l.split("\t") for l in lines[2:]]
