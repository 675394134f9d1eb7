"""Experiment configuration, run directories and the stages behind the CLI.

A run directory is ``<out>/run-<config hash>-seed<seed>/`` with fixed
subdirectories. Every artifact gets a ``.meta.json`` sidecar recording the
config hash, seed, producing stage and the content hash of each input it
read, so reports can refuse inputs from different configurations.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import demogen, feedback as FB, metrics as M, replearn as R, reward as RW, rl
from . import diffnet as D
from .errors import ConfigError, DependencyError, ProvenanceError, UsageError
from .sim import DEFAULT_MAX_STEPS, EnvConfig, Kind

SUBDIRS = ("dataset", "feedback", "checkpoints", "curves", "reports")

PIPELINES = ("gt_rl", "xirl_success", "xirl_mixed", "xirl_buckets", "xtriplets",
             "xprefs_static", "xprefs_dynamic", "xrlhf", "goal_classifier")
FIG1_PIPELINES = ("gt_rl", "xirl_success", "xirl_mixed", "goal_classifier", "xrlhf", "xtriplets", "xirl_buckets")
TABLE1_PIPELINES = ("xirl_success", "xirl_mixed", "xirl_buckets", "xtriplets", "xprefs_static",
                    "xrlhf", "goal_classifier")
APPENDIX_A_PIPELINES = ("xprefs_static", "xprefs_dynamic", "xrlhf")

_TRAIN_METHOD = {
    "xirl_success": R.Method.TCC, "xirl_mixed": R.Method.TCC, "xirl_buckets": R.Method.TCC_BUCKETS,
    "xtriplets": R.Method.XTRIPLETS, "xprefs_static": R.Method.XPREFS_STATIC,
    "xprefs_dynamic": R.Method.XPREFS_DYNAMIC, "xrlhf": R.Method.XRLHF,
    "goal_classifier": R.Method.GOAL_CLASSIFIER,
}
_NEEDS_FEEDBACK = {"xirl_buckets", "xtriplets", "xprefs_static", "xprefs_dynamic", "xrlhf"}

# section -> key -> (desk default, published full-scale value or None when there is no counterpart)
SCHEMA: Dict[str, Dict[str, tuple]] = {
    "env": {
        "width": (9, None), "height": (9, None), "goal_depth": (2, None), "num_blocks": (3, 3),
        "seed": (0, None), "max_steps": ({k.label: v for k, v in DEFAULT_MAX_STEPS.items()}, None),
        "layout_pool": (0, None),
    },
    "roles": {
        "train_embodiments": (["shortstick", "longstick", "gripper"], ["shortstick", "longstick", "gripper"]),
        "held_out": ("mediumstick", "mediumstick"),
    },
    "data": {
        "train_per_embodiment": (200, 200), "test_per_embodiment": (400, 400),
        "noise_schedule": (list(demogen.DEFAULT_NOISE_SCHEDULE), None), "goal_set_size": (16, None),
    },
    "feedback": {
        "num_preferences": (5000, 5000), "num_triplets": (5000, None),
        "num_buckets": (18, 18), "bucket_size": (32, 32),
    },
    "train": {
        "iterations": (1000, 4000), "appendix_a_iterations": (4000, 4000),
        "batch_size": (32, 32), "frames_per_video": (20, None),
        "temperature": (0.1, None), "lr": (D.DESK_LR, D.PAPER_LR), "refresh_period": (1000, 1000),
        "hidden": (list(D.HIDDEN), None), "latent": (D.LATENT_DIM, D.LATENT_DIM),
    },
    "rl": {
        "total_steps": (100_000, 250_000), "eval_every": (5000, 5000), "eval_episodes": (50, 50),
        "gamma": (0.99, 0.99), "alpha": (1.0, None), "eps_start": (1.0, None), "eps_end": (0.05, None),
        "anneal_fraction": (0.5, None), "seeds": ([0, 1, 2, 3, 4], [0, 1, 2, 3, 4]),
        "optimism_quantile": (0.9995, None), "replay_every": (1000, None), "replay_sweeps": (1, None),
        "layout_pool": (2, None),
    },
}


def default_tree(paper_scale: bool = False) -> dict:
    tree = {}
    for sec, keys in SCHEMA.items():
        tree[sec] = {k: copy.deepcopy(p if paper_scale and p is not None else d) for k, (d, p) in keys.items()}
    return tree


def _coerce(sec: str, key: str, value):
    desk = SCHEMA[sec][key][0]
    if isinstance(value, dict) and "value" in value and not isinstance(desk, dict):
        value = value["value"]
    try:
        if isinstance(desk, bool):
            return bool(value)
        if isinstance(desk, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(desk, float):
            return float(value)
        if isinstance(desk, list):
            return list(value)
        if isinstance(desk, dict):
            if "value" in value and isinstance(value["value"], dict):
                value = value["value"]
            return {str(k): int(v) for k, v in value.items()}
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{sec}.{key}: cannot use {value!r}") from exc


def merge_tree(base: dict, overrides: dict) -> dict:
    out = copy.deepcopy(base)
    for sec, keys in (overrides or {}).items():
        if sec in ("method", "seed", "paper_scale"):
            continue
        if sec not in SCHEMA:
            raise ConfigError(f"unknown config section {sec!r}")
        if not isinstance(keys, dict):
            raise ConfigError(f"config section {sec!r} must be a table")
        for k, v in keys.items():
            if k not in SCHEMA[sec]:
                raise ConfigError(f"unknown config key {sec}.{k}")
            out[sec][k] = _coerce(sec, k, v)
    return out


def load_config_file(path) -> dict:
    """JSON key/value tree; values may be plain or ``{"value": ..., ...}`` as written to runs."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return data


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


@dataclass(frozen=True)
class ExperimentConfig:
    tree: dict
    method: str = "xrlhf"
    seed: int = 0
    out: str = "runs"
    paper_scale: bool = False

    def __post_init__(self):
        if self.method not in PIPELINES:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(PIPELINES)}")
        if int(self.seed) < 0 or int(self.seed) >= 1 << 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.validate()

    @classmethod
    def build(cls, file_tree: Optional[dict] = None, method: Optional[str] = None, seed: Optional[int] = None,
              out: Optional[str] = None, held_out: Optional[str] = None, paper_scale: bool = False,
              overrides: Optional[dict] = None) -> "ExperimentConfig":
        """Defaults, then the config file, then explicit overrides and flags."""
        file_tree = file_tree or {}
        tree = merge_tree(default_tree(paper_scale), file_tree)
        tree = merge_tree(tree, overrides or {})
        if held_out is not None:
            tree["roles"]["held_out"] = Kind.parse(held_out).label
        method = method or file_tree.get("method") or "xrlhf"
        seed = int(seed if seed is not None else file_tree.get("seed", 0))
        return cls(tree, method, seed, out or "runs", paper_scale)

    # ---------------------------------------------------------------- views
    @property
    def env(self) -> EnvConfig:
        e = dict(self.tree["env"])
        return EnvConfig.from_dict(e)

    @property
    def rl_env(self) -> EnvConfig:
        return dataclasses.replace(self.env, layout_pool=int(self.tree["rl"]["layout_pool"]))

    @property
    def train_embodiments(self) -> tuple:
        return tuple(Kind.parse(k) for k in self.tree["roles"]["train_embodiments"])

    @property
    def held_out(self) -> Kind:
        return Kind.parse(self.tree["roles"]["held_out"])

    def validate(self) -> None:
        try:
            env = self.env.validate()
            self.rl_env.validate()
            train = self.train_embodiments
            held = self.held_out
        except (UsageError, KeyError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if not train or len(set(train)) != len(train):
            raise ConfigError("train_embodiments must be a non-empty list of distinct embodiments")
        if held in train:
            raise ConfigError(f"held-out embodiment {held.label} is also a training embodiment")
        if self.tree["rl"]["layout_pool"] < 1:
            raise ConfigError("rl.layout_pool must be >= 1 so the held-out MDP can be enumerated")
        d, f = self.tree["data"], self.tree["feedback"]
        n_cls = env.num_blocks + 1
        if d["train_per_embodiment"] % n_cls or d["test_per_embodiment"] % n_cls:
            raise ConfigError(f"per-embodiment quotas must divide evenly into {n_cls} outcome classes")
        if f["num_buckets"] * f["bucket_size"] > d["train_per_embodiment"] * len(train):
            raise ConfigError("num_buckets * bucket_size exceeds the pooled training trajectories")

    def config_hash(self) -> str:
        return hashlib.sha256(_canonical(self.tree).encode()).hexdigest()[:12]

    def rl_spec(self) -> rl.RlSpec:
        r = dict(self.tree["rl"])
        r.pop("layout_pool")
        # seeds are offset by the master seed so runs with different seeds stay independent
        r["seeds"] = tuple(int(self.seed) * 1000 + int(s) for s in r["seeds"])
        return rl.RlSpec(**r)

    def train_spec(self, method: str) -> R.TrainSpec:
        t = self.tree["train"]
        m = _TRAIN_METHOD[method]
        return R.TrainSpec(
            method=m, iterations=int(t["iterations"]),
            batch_size=t["batch_size"], frames_per_video=t["frames_per_video"], temperature=t["temperature"],
            seed=int(self.seed) & 0xFFFFFFFF, lr=t["lr"],
            refresh_period=t["refresh_period"] if m is R.Method.XPREFS_DYNAMIC else None,
            hidden=tuple(t["hidden"]), latent=t["latent"])

    def annotated_tree(self) -> dict:
        """Every value beside its desk default and full-scale value."""
        out = {"method": self.method, "seed": int(self.seed), "paper_scale": self.paper_scale}
        for sec, keys in SCHEMA.items():
            out[sec] = {k: {"value": self.tree[sec][k], "desk": d, "paper": p} for k, (d, p) in keys.items()}
        return out


def threads() -> int:
    raw = os.environ.get("MQME_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MQME_THREADS must be a positive integer, got {raw!r}")
    if n < 1:
        raise ConfigError(f"MQME_THREADS must be a positive integer, got {raw!r}")
    return n


# ---------------------------------------------------------------- run directory

class Run:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.hash = cfg.config_hash()
        self.root = Path(cfg.out) / f"run-{self.hash}-seed{int(cfg.seed)}"

    def prepare(self) -> "Run":
        for sub in SUBDIRS:
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        text = json.dumps(self.cfg.annotated_tree(), indent=2, sort_keys=True) + "\n"
        cfg_path = self.root / "config.json"
        if not cfg_path.exists() or cfg_path.read_text() != text:
            cfg_path.write_text(text)
        return self

    def path(self, sub: str, name: str) -> Path:
        return self.root / sub / name

    def rel(self, path: Path) -> str:
        return str(Path(path).relative_to(self.root))

    def require(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise DependencyError(f"missing {self.rel(path)} in {self.root}; run `{stage}` first")
        return path

    def record(self, path: Path, stage: str, method: str = "", inputs: Sequence[Path] = ()) -> None:
        meta = {"config_hash": self.hash, "seed": int(self.cfg.seed), "stage": stage, "method": method,
                "sha256": _file_hash(path),
                "inputs": {self.rel(p): _file_hash(p) for p in inputs}}
        Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    def is_fresh(self, path: Path) -> bool:
        """True when ``path`` and a sidecar matching its content and this config exist."""
        meta_path = Path(str(path) + ".meta.json")
        if not path.exists() or not meta_path.exists():
            return False
        meta = json.loads(meta_path.read_text())
        if meta.get("config_hash") != self.hash or meta.get("sha256") != _file_hash(path):
            return False
        return all((self.root / p).exists() and _file_hash(self.root / p) == h
                   for p, h in meta.get("inputs", {}).items())


def read_meta(path) -> dict:
    meta_path = Path(str(path) + ".meta.json")
    if not meta_path.exists():
        raise ProvenanceError(f"{path} has no provenance sidecar")
    return json.loads(meta_path.read_text())


# ---------------------------------------------------------------- stages

def _dataset_paths(run: Run):
    return run.path("dataset", "mqme.xmq"), run.path("dataset", "success.xmq")


def gen_data(cfg: ExperimentConfig) -> List[Path]:
    """Mixed-quality dataset with its goal set, and the success-only (epsilon = 0) dataset."""
    run = Run(cfg).prepare()
    d = cfg.tree["data"]
    env = cfg.env
    quotas = (d["train_per_embodiment"], d["test_per_embodiment"])
    ds = demogen.build_dataset(env, tuple(d["noise_schedule"]), quotas, master_seed=cfg.seed)
    ds.goal_set = demogen.extract_goal_set(env, d["goal_set_size"], seed=cfg.seed)
    succ = demogen.build_dataset(env, (0.0,), (d["train_per_embodiment"], 0), master_seed=cfg.seed,
                                 embodiments=cfg.train_embodiments, classes=[env.num_blocks])
    p_mix, p_succ = _dataset_paths(run)
    demogen.save_dataset(ds, p_mix)
    demogen.save_dataset(succ, p_succ)
    run.record(p_mix, "gen-data")
    run.record(p_succ, "gen-data")
    return [p_mix, p_succ]


def _load_mixed(run: Run):
    p_mix, _ = _dataset_paths(run)
    return demogen.load_dataset(run.require(p_mix, "gen-data")), p_mix


def gen_feedback(cfg: ExperimentConfig) -> Path:
    run = Run(cfg).prepare()
    ds, p_mix = _load_mixed(run)
    f = cfg.tree["feedback"]
    train = cfg.train_embodiments
    fb = FB.FeedbackSet(
        FB.sample_preferences(ds, f["num_preferences"], cfg.seed, embodiments=train),
        FB.sample_triplets(ds, f["num_triplets"], cfg.seed, embodiments=train),
        FB.bucketize(ds, f["num_buckets"], cfg.seed, bucket_size=f["bucket_size"], embodiments=train),
        header=f"config={run.hash} seed={cfg.seed} dataset={demogen.dataset_hash(ds)}")
    out = run.path("feedback", "labels.txt")
    FB.save_feedback(fb, out)
    run.record(out, "gen-feedback", inputs=[p_mix])
    return out


def _check_learned(method: str) -> None:
    if method == "gt_rl":
        raise UsageError("gt_rl trains no representation or reward; run train-rl directly")


def _corpus(cfg: ExperimentConfig, run: Run, method: str):
    train = cfg.train_embodiments
    inputs = []
    if method == "xirl_success":
        _, p_succ = _dataset_paths(run)
        ds = demogen.load_dataset(run.require(p_succ, "gen-data"))
        return R.Corpus(ds, train), [p_succ]
    ds, p_mix = _load_mixed(run)
    inputs.append(p_mix)
    fb = FB.FeedbackSet()
    if method in _NEEDS_FEEDBACK:
        p_fb = run.require(run.path("feedback", "labels.txt"), "gen-feedback")
        fb = FB.load_feedback(p_fb)
        inputs.append(p_fb)
    return R.Corpus(ds, train, fb.preferences, fb.triplets, fb.buckets, ds.goal_set), inputs


def _ckpt(run: Run, method: str, suffix: str) -> Path:
    return run.path("checkpoints", f"{method}{suffix}")


def train_rep(cfg: ExperimentConfig, method: Optional[str] = None) -> Path:
    method = method or cfg.method
    _check_learned(method)
    run = Run(cfg).prepare()
    corpus, inputs = _corpus(cfg, run, method)
    params, rep = R.train_representation(corpus, cfg.train_spec(method))
    out = _ckpt(run, method, ".xenc")
    D.save_encoder(params, out)
    loss = run.path("curves", f"{method}_loss.tsv")
    loss.write_text(rep.dumps())
    run.record(out, "train-rep", method, inputs)
    run.record(loss, "train-rep", method, inputs)
    if rep.goal is not None:
        goal = _ckpt(run, method, ".goal")
        write_goal(rep.goal, goal)
        run.record(goal, "train-rep", method, inputs)
    return out


def write_goal(g: np.ndarray, path) -> None:
    Path(path).write_text("".join(f"{float(v)!r}\n" for v in np.asarray(g, dtype=np.float64)))


def read_goal(path) -> np.ndarray:
    return np.array([float(v) for v in Path(path).read_text().split()])


def train_reward(cfg: ExperimentConfig, method: Optional[str] = None) -> Path:
    method = method or cfg.method
    _check_learned(method)
    run = Run(cfg).prepare()
    enc_path = run.require(_ckpt(run, method, ".xenc"), "train-rep")
    params = D.load_encoder(enc_path)
    corpus, inputs = _corpus(cfg, run, method)
    m = _TRAIN_METHOD[method]
    train = cfg.train_embodiments
    if m is R.Method.XRLHF:
        model = RW.RewardModel(RW.DIRECT, params, label=method)
    elif m is R.Method.GOAL_CLASSIFIER:
        model = RW.RewardModel(RW.CLASSIFIER, params, label=method)
    else:
        if method == "xirl_success":
            goal_source = [t for k in train for t in corpus.dataset.train[k]]
        elif m in (R.Method.XPREFS_STATIC, R.Method.XPREFS_DYNAMIC):
            # the goal the preference loss was fitted against, not a fresh recompute
            goal_path = run.require(_ckpt(run, method, ".goal"), "train-rep")
            goal_source = RW.GoalEmbedding(read_goal(goal_path), "goal_set")
            inputs.append(goal_path)
        else:
            goal_source = corpus.goal_set
        model = RW.distance_model(params, goal_source, corpus.dataset, train, label=method)
    out = _ckpt(run, method, ".xrwd")
    RW.save_reward(model, out)
    run.record(out, "train-reward", method, [enc_path] + inputs)
    return out


def _reward_model(cfg: ExperimentConfig, run: Run, method: str):
    if method == "gt_rl":
        return None, []
    p = run.require(_ckpt(run, method, ".xrwd"), "train-reward")
    return RW.load_reward(p), [p]


def train_rl(cfg: ExperimentConfig, method: Optional[str] = None) -> Path:
    method = method or cfg.method
    run = Run(cfg).prepare()
    model, inputs = _reward_model(cfg, run, method)
    curve = rl.train_seeds(cfg.rl_env, cfg.held_out, model, cfg.rl_spec(), workers=threads())
    out = run.path("curves", f"{method}_rl.tsv")
    rl.write_curve(curve, out, header=f"method={method}\tembodiment={cfg.held_out.label}\tconfig={run.hash}")
    run.record(out, "train-rl", method, inputs)
    return out


def eval_reward(cfg: ExperimentConfig, method: Optional[str] = None) -> Path:
    """Tau and pairwise accuracy on every embodiment's test split, plus correlation exports."""
    method = method or cfg.method
    run = Run(cfg).prepare()
    ds, p_mix = _load_mixed(run)
    model, inputs = _reward_model(cfg, run, method)
    if model is None:
        model = RW.RewardModel.ground_truth(ds.config)
    dh = demogen.dataset_hash(ds)
    rows = []
    for kind in Kind:
        pairs = M.score_test_set(model, ds, kind)
        corr = run.path("reports", f"corr_{method}_{kind.label}.tsv")
        M.export_correlation(pairs, corr, method, kind.label, dh)
        run.record(corr, "eval-reward", method, inputs + [p_mix])
        role = "held_out" if kind == cfg.held_out else ("train" if kind in cfg.train_embodiments else "unused")
        rows.append([kind.label, role, M.kendalls_tau(pairs), M.pairwise_accuracy(pairs), str(len(pairs))])
    out = run.path("reports", f"eval_{method}.tsv")
    M.write_tsv(out, M.report_header(method, "all", dh, f"config={run.hash}"),
                ["embodiment", "role", "tau", "accuracy", "pairs"], rows)
    run.record(out, "eval-reward", method, inputs + [p_mix])
    return out


# ---------------------------------------------------------------- reports

def _collect(roots: Sequence[Path], pattern: str):
    found = {}
    for root in roots:
        for p in sorted(Path(root).glob(pattern)):
            found.setdefault(p.name, []).append(p)
    return found


def _check_provenance(paths: Sequence[Path]) -> str:
    hashes = {}
    for p in paths:
        meta = read_meta(p)
        if meta.get("sha256") != _file_hash(p):
            raise ProvenanceError(f"{p} was modified after it was written")
        hashes.setdefault(meta["config_hash"], []).append(str(p))
    if len(hashes) > 1:
        detail = "; ".join(f"{h}: {len(v)} files" for h, v in sorted(hashes.items()))
        raise ProvenanceError(f"report inputs come from different configurations ({detail})")
    if not hashes:
        raise DependencyError("no inputs to report on; run `eval-reward` or `train-rl` first")
    return next(iter(hashes))


def _ordered(methods):
    return sorted(methods, key=lambda m: PIPELINES.index(m) if m in PIPELINES else len(PIPELINES))


def report(cfg: ExperimentConfig, extra_runs: Sequence = ()) -> List[Path]:
    """Aggregate every eval table and RL curve of this run (and ``extra_runs``, e.g. other seeds)."""
    run = Run(cfg).prepare()
    roots = [run.root] + [Path(r) for r in extra_runs]
    evals = _collect(roots, "reports/eval_*.tsv")
    curves = _collect(roots, "curves/*_rl.tsv")
    all_inputs = [p for v in list(evals.values()) + list(curves.values()) for p in v]
    if not all_inputs:
        raise DependencyError(f"nothing to report in {run.root}; run `eval-reward` or `train-rl` first")
    _check_provenance(all_inputs)
    outputs = []
    if evals:
        outputs.append(_table1(run, evals))
    if curves:
        outputs += _fig1(run, curves)
    return outputs


def _table1(run: Run, evals) -> Path:
    per = {}
    for name, paths in evals.items():
        method = name[len("eval_"):-len(".tsv")]
        for p in paths:
            _, cols, rows = M.read_tsv(p)
            for row in rows:
                rec = dict(zip(cols, row))
                per.setdefault((method, rec["embodiment"]), []).append((float(rec["tau"]), float(rec["accuracy"])))
    methods = _ordered({m for m, _ in per})
    columns = ["metric"] + [f"{m}:{k.label}" for m in methods for k in Kind]
    table = []
    for label, idx in (("tau", 0), ("accuracy", 1)):
        mean_row, se_row = [label], [f"{label}_stderr"]
        for m in methods:
            for k in Kind:
                v = np.array([x[idx] for x in per.get((m, k.label), [])])
                mean_row.append(float(v.mean()) if v.size else float("nan"))
                se_row.append(float(v.std() / np.sqrt(v.size)) if v.size else float("nan"))
        table += [mean_row, se_row]
    n = max(len(v) for v in per.values())
    out = run.path("reports", "table1.tsv")
    M.write_tsv(out, f"# table=reward_alignment\tconfig={run.hash}\truns={n}", columns, table)
    run.record(out, "report", inputs=[p for v in evals.values() for p in v if Path(p).is_relative_to(run.root)])
    return out


def _fig1(run: Run, curves) -> List[Path]:
    summaries = {}
    for name, paths in curves.items():
        method = name[:-len("_rl.tsv")]
        summaries[method] = M.aggregate_curves([rl.read_curve(p) for p in paths])
    methods = _ordered(summaries)
    lengths = {len(s.steps) for s in summaries.values()}
    if len(lengths) != 1:
        raise UsageError("RL curves of different methods have different lengths")
    steps = summaries[methods[0]].steps
    cols = ["step"] + [f"{m}_{c}" for m in methods for c in ("mean", "stderr")]
    rows = [[str(int(st))] + [v for m in methods for v in (summaries[m].mean[i], summaries[m].stderr[i])]
            for i, st in enumerate(steps)]
    inputs = [p for v in curves.values() for p in v if Path(p).is_relative_to(run.root)]
    out = run.path("reports", "fig1.tsv")
    M.write_tsv(out, f"# figure=rl_transfer\tconfig={run.hash}", cols, rows)
    run.record(out, "report", inputs=inputs)
    fin = run.path("reports", "final_returns.tsv")
    M.write_tsv(fin, f"# final ground-truth return\tconfig={run.hash}", ["method", "mean", "stderr", "n"],
                [[m, summaries[m].mean[-1], summaries[m].stderr[-1], str(summaries[m].n)] for m in methods])
    run.record(fin, "report", inputs=inputs)
    return [out, fin]


# ---------------------------------------------------------------- composite pipelines

def _ensure(run: Run, path: Path, fn, *args):
    if not run.is_fresh(path):
        fn(*args)


def _ensure_data(cfg: ExperimentConfig, run: Run, need_feedback: bool) -> None:
    p_mix, p_succ = _dataset_paths(run)
    if not (run.is_fresh(p_mix) and run.is_fresh(p_succ)):
        gen_data(cfg)
    if need_feedback:
        _ensure(run, run.path("feedback", "labels.txt"), gen_feedback, cfg)


def _ensure_reward(cfg: ExperimentConfig, run: Run, method: str) -> None:
    if method == "gt_rl":
        return
    _ensure(run, _ckpt(run, method, ".xenc"), train_rep, cfg, method)
    _ensure(run, _ckpt(run, method, ".xrwd"), train_reward, cfg, method)


def repro_table1(cfg: ExperimentConfig, methods: Sequence[str] = TABLE1_PIPELINES) -> Path:
    run = Run(cfg).prepare()
    _ensure_data(cfg, run, any(m in _NEEDS_FEEDBACK for m in methods))
    for m in methods:
        _ensure_reward(cfg, run, m)
        _ensure(run, run.path("reports", f"eval_{m}.tsv"), eval_reward, cfg, m)
    evals = {f"eval_{m}.tsv": [run.path("reports", f"eval_{m}.tsv")] for m in methods}
    _check_provenance([p for v in evals.values() for p in v])
    return _table1(run, evals)


def repro_fig1(cfg: ExperimentConfig, methods: Sequence[str] = FIG1_PIPELINES) -> List[Path]:
    run = Run(cfg).prepare()
    _ensure_data(cfg, run, any(m in _NEEDS_FEEDBACK for m in methods))
    for m in methods:
        _ensure_reward(cfg, run, m)
        _ensure(run, run.path("curves", f"{m}_rl.tsv"), train_rl, cfg, m)
    curves = {f"{m}_rl.tsv": [run.path("curves", f"{m}_rl.tsv")] for m in methods}
    _check_provenance([p for v in curves.values() for p in v])
    return _fig1(run, curves)


@dataclass
class AppendixARow:
    method: str
    spike_fraction: float
    window_nonincreasing: float
    final_mean: float
    final_stderr: float
    held_out_accuracy: float


def loss_spike_fraction(rep: R.LossReport) -> float:
    """Share of refresh events whose loss exceeds the loss one step before; NaN without refreshes."""
    ev = [s for s in rep.refresh_steps if 0 < s < len(rep.losses)]
    if not ev:
        return float("nan")
    return float(np.mean([rep.losses[s] > rep.losses[s - 1] for s in ev]))


def window_nonincreasing(rep: R.LossReport, width: int = 500) -> float:
    """Share of consecutive ``width``-step window means that do not increase."""
    w = rep.window_means(width)
    if len(w) < 2:
        return float("nan")
    return float(np.mean(w[1:] <= w[:-1]))


def appendix_a_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """The same experiment trained for ``train.appendix_a_iterations``; it gets its own run directory."""
    tree = copy.deepcopy(cfg.tree)
    tree["train"]["iterations"] = tree["train"]["appendix_a_iterations"]
    return dataclasses.replace(cfg, tree=tree)


def repro_appendix_a(cfg: ExperimentConfig) -> Path:
    """Static vs dynamic goal embedding, both beside X-RLHF, at ``train.appendix_a_iterations``."""
    cfg = appendix_a_config(cfg)
    run = Run(cfg).prepare()
    _ensure_data(cfg, run, True)
    rows, inputs = [], []
    for m in APPENDIX_A_PIPELINES:
        _ensure_reward(cfg, run, m)
        loss_p, curve_p, eval_p = (run.path("curves", f"{m}_loss.tsv"), run.path("curves", f"{m}_rl.tsv"),
                                   run.path("reports", f"eval_{m}.tsv"))
        _ensure(run, curve_p, train_rl, cfg, m)
        _ensure(run, eval_p, eval_reward, cfg, m)
        rep = R.LossReport.loads(loss_p.read_text())
        curve = rl.read_curve(curve_p)
        _, cols, ev = M.read_tsv(eval_p)
        acc = next(float(dict(zip(cols, r))["accuracy"]) for r in ev if r[0] == cfg.held_out.label)
        rows.append(AppendixARow(m, loss_spike_fraction(rep), window_nonincreasing(rep),
                                 float(curve.mean[-1]), float(curve.stderr[-1]), acc))
        inputs += [loss_p, curve_p, eval_p]
    _check_provenance(inputs)
    out = run.path("reports", "appendix_a.tsv")
    M.write_tsv(out, f"# appendix=static_vs_dynamic_goal\tconfig={run.hash}\titerations={cfg.tree['train']['iterations']}",
                ["method", "spike_fraction", "window_nonincreasing", "final_mean", "final_stderr",
                 "held_out_accuracy"],
                [[r.method, r.spike_fraction, r.window_nonincreasing, r.final_mean, r.final_stderr,
                  r.held_out_accuracy] for r in rows])
    run.record(out, "repro-appendix-a", inputs=inputs)
    return out
