import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from mqme import cli, metrics as M, pipeline as P
from mqme.errors import ConfigError, DependencyError, ProvenanceError, UsageError

TINY = {
    "data": {"train_per_embodiment": 40, "test_per_embodiment": 40},
    "feedback": {"num_preferences": 200, "num_triplets": 200, "num_buckets": 4, "bucket_size": 8},
    "train": {"iterations": 20, "appendix_a_iterations": 40, "refresh_period": 10},
    "rl": {"total_steps": 10000, "eval_every": 5000, "seeds": [0, 1]},
}


@pytest.fixture
def tiny_file(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


def tiny(tmp_path, **kw):
    return P.ExperimentConfig.build(TINY, out=str(tmp_path / "runs"), **kw)


def test_precedence_and_annotations(tmp_path):
    cfg = P.ExperimentConfig.build(TINY, seed=3, held_out="longstick",
                                   overrides={"roles": {"train_embodiments": ["shortstick", "mediumstick"]}})
    assert cfg.tree["data"]["train_per_embodiment"] == 40
    assert cfg.tree["train"]["lr"] == P.SCHEMA["train"]["lr"][0]
    assert cfg.held_out.label == "longstick" and cfg.seed == 3
    ann = cfg.annotated_tree()
    assert ann["train"]["iterations"] == {"value": 20, "desk": 1000, "paper": 4000}
    paper = P.ExperimentConfig.build(paper_scale=True)
    assert paper.tree["train"]["lr"] == 1e-5 and paper.tree["rl"]["total_steps"] == 250_000


def test_run_config_file_round_trips_hash(tmp_path):
    cfg = tiny(tmp_path, seed=5)
    run = P.Run(cfg).prepare()
    again = P.ExperimentConfig.build(P.load_config_file(run.root / "config.json"), out=cfg.out)
    assert again.config_hash() == cfg.config_hash() and again.seed == 5


def test_seed_does_not_change_hash(tmp_path):
    assert tiny(tmp_path, seed=1).config_hash() == tiny(tmp_path, seed=2).config_hash()
    a, b = P.Run(tiny(tmp_path, seed=1)), P.Run(tiny(tmp_path, seed=2))
    assert a.root != b.root


@pytest.mark.parametrize("bad", [
    {"roles": {"held_out": "gripper"}},
    {"data": {"train_per_embodiment": 42}},
    {"feedback": {"num_buckets": 18, "bucket_size": 32}},
    {"env": {"width": 5}},
    {"train": {"iterations": "many"}},
    {"nonsense": {}},
    {"data": {"nonsense": 1}},
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        P.ExperimentConfig.build(TINY, overrides=bad)


def test_unknown_method():
    with pytest.raises(ConfigError):
        P.ExperimentConfig.build(TINY, method="sac")


def test_threads_env(monkeypatch):
    monkeypatch.delenv("MQME_THREADS", raising=False)
    assert P.threads() == 1
    monkeypatch.setenv("MQME_THREADS", "3")
    assert P.threads() == 3
    for bad in ("0", "x"):
        monkeypatch.setenv("MQME_THREADS", bad)
        with pytest.raises(ConfigError):
            P.threads()


def test_dependency_errors_name_the_prior_stage(tmp_path):
    cfg = tiny(tmp_path, method="xrlhf")
    with pytest.raises(DependencyError, match="gen-data"):
        P.gen_feedback(cfg)
    with pytest.raises(DependencyError, match="train-rep"):
        P.train_reward(cfg)
    with pytest.raises(DependencyError, match="train-reward"):
        P.train_rl(cfg)
    P.gen_data(cfg)
    with pytest.raises(DependencyError, match="gen-feedback"):
        P.train_rep(cfg)
    with pytest.raises(DependencyError):
        P.report(cfg)
    with pytest.raises(UsageError):
        P.train_rep(tiny(tmp_path, method="gt_rl"))


def test_stage_chain_and_layout(tmp_path):
    cfg = tiny(tmp_path, method="xprefs_static")
    P.gen_data(cfg)
    P.gen_feedback(cfg)
    P.train_rep(cfg)
    P.train_reward(cfg)
    rl_path = P.train_rl(cfg)
    ev = P.eval_reward(cfg)
    root = P.Run(cfg).root
    assert root.name == f"run-{cfg.config_hash()}-seed0"
    assert {p.name for p in root.iterdir() if p.is_dir()} == set(P.SUBDIRS)
    assert (root / "checkpoints" / "xprefs_static.goal").exists()
    meta = P.read_meta(rl_path)
    assert meta["config_hash"] == cfg.config_hash() and "checkpoints/xprefs_static.xrwd" in meta["inputs"]
    _, cols, rows = M.read_tsv(ev)
    assert cols == ["embodiment", "role", "tau", "accuracy", "pairs"]
    assert {r[1] for r in rows} == {"train", "held_out"}


def test_repro_table1_and_fig1_structure(tmp_path):
    cfg = tiny(tmp_path)
    t1 = P.repro_table1(cfg)
    _, cols, rows = M.read_tsv(t1)
    assert [r[0] for r in rows] == ["tau", "tau_stderr", "accuracy", "accuracy_stderr"]
    assert len(cols) == 1 + 4 * len(P.TABLE1_PIPELINES)
    fig, fin = P.repro_fig1(cfg)
    _, cols, rows = M.read_tsv(fin)
    assert {r[0] for r in rows} == set(P.FIG1_PIPELINES)
    _, cols, _ = M.read_tsv(fig)
    assert cols[0] == "step" and len(cols) == 1 + 2 * len(P.FIG1_PIPELINES)


def test_report_aggregates_seeds_and_refuses_mixed(tmp_path):
    a, b = tiny(tmp_path, seed=0), tiny(tmp_path, seed=1)
    for cfg in (a, b):
        P.gen_data(cfg)
        P.eval_reward(P.ExperimentConfig.build(TINY, method="gt_rl", seed=cfg.seed, out=cfg.out))
    (t1,) = P.report(a, [P.Run(b).root])
    assert "runs=2" in M.read_tsv(t1)[0]
    other = P.ExperimentConfig.build(TINY, overrides={"rl": {"total_steps": 5000}}, out=a.out, method="gt_rl")
    P.gen_data(other)
    P.eval_reward(other)
    with pytest.raises(ProvenanceError, match="different configurations"):
        P.report(a, [P.Run(other).root])


def test_report_detects_tampering(tmp_path):
    cfg = tiny(tmp_path, method="gt_rl")
    P.gen_data(cfg)
    ev = P.eval_reward(cfg)
    ev.write_text(ev.read_text() + "\n")
    with pytest.raises(ProvenanceError, match="modified"):
        P.report(cfg)


def _tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_cli_rerun_is_byte_identical(tmp_path, tiny_file, monkeypatch, capsys):
    outs = []
    for k, threads in enumerate(("1", "2")):
        monkeypatch.setenv("MQME_THREADS", threads)
        out = tmp_path / f"o{k}"
        for sub, method in [("gen-data", None), ("gen-feedback", None), ("train-rep", "xtriplets"),
                            ("train-reward", "xtriplets"), ("train-rl", "xtriplets"),
                            ("eval-reward", "xtriplets"), ("report", None)]:
            argv = [sub, "--config", str(tiny_file), "--out", str(out), "--seed", "7"]
            argv += ["--method", method] if method else []
            assert cli.main(argv) == 0
        outs.append(_tree_bytes(out))
    assert outs[0] == outs[1]
    assert any(k.endswith("xtriplets_rl.tsv") for k in outs[0])


def test_cli_reports_errors(tmp_path, tiny_file, capsys):
    code = cli.main(["train-rl", "--config", str(tiny_file), "--out", str(tmp_path), "--method", "xrlhf"])
    assert code == 2
    assert "DependencyError" in capsys.readouterr().err
    assert cli.main(["gen-data", "--config", str(tmp_path / "missing.json")]) == 2


def test_module_entry_point(tmp_path):
    env = dict(os.environ, MQME_THREADS="1")
    res = subprocess.run([sys.executable, "-m", "mqme", "report", "--out", str(tmp_path)],
                         capture_output=True, text=True, env=env)
    assert res.returncode == 2 and "run `eval-reward`" in res.stderr
