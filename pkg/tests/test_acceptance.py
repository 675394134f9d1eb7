"""Acceptance suite: one recorded PASS/FAIL line per criterion.

Directional claims "A above B" pass when mean(A) > mean(B) - tol, where tol
is the cross-seed standard error of the comparison (ddof=0, as in reports).
Run with ``pytest -v tests/test_acceptance.py``; the verdict lines are
printed in the terminal summary.
"""
import itertools
import time
from fractions import Fraction

import numpy as np
import pytest

from mqme import demogen, diffnet as D, feedback as FB, metrics as M, pipeline as P, replearn as R, rl
from mqme.metrics import EvalPair
from mqme.sim import EnvConfig, Kind

TRAIN = (Kind.SHORTSTICK, Kind.LONGSTICK, Kind.GRIPPER)
HELD = Kind.MEDIUMSTICK


def _default(tmp_path, seed=0):
    return P.ExperimentConfig.build(seed=seed, out=str(tmp_path))


def _se(x):
    x = np.asarray(x, dtype=np.float64)
    return float(x.std() / np.sqrt(x.size))


# ---------------------------------------------------------------- 1: gradients

@pytest.fixture(scope="module")
def fd_corpus():
    cfg = EnvConfig(layout_pool=0)
    ds = demogen.build_dataset(cfg, quotas=(24, 4))
    gs = demogen.extract_goal_set(cfg, 16)
    return R.Corpus(ds, TRAIN, FB.sample_preferences(ds, 500, embodiments=TRAIN),
                    FB.sample_triplets(ds, 200, embodiments=TRAIN), FB.bucketize(ds, 4, embodiments=TRAIN), gs)


def test_gradient_suite(fd_corpus, verdict):
    tic = time.perf_counter()
    methods = ("tcc", "tcc_buckets", "xrlhf", "xprefs_static", "xtriplets", "goal_classifier")
    worst, skipped, checked = {}, 0, 0
    for m in methods:
        spec = R.TrainSpec.for_method(m, batch_size=8, frames_per_video=10)
        params = D.init_encoder(fd_corpus.dataset.config.frame_size, 11, head=spec.method.has_head)
        errs = []
        for batch in range(5):
            fn = R.batch_objective(fd_corpus, spec, params, batch_seed=batch)
            rep = D.finite_diff_check(fn, params.arrays(), coords=10, seed=100 + batch)
            assert len(rep.coords) == 10
            errs.append(rep.max_rel_error)
            skipped += rep.skipped
            checked += len(rep.coords)
        worst[m] = max(errs)
    elapsed = time.perf_counter() - tic
    ok = all(e < 1e-4 for e in worst.values()) and elapsed < 60
    detail = ", ".join(f"{m} {e:.1e}" for m, e in worst.items())
    verdict(1, ok, f"max rel error {detail}; {checked} coordinates ({skipped} kink redraws); {elapsed:.0f}s (< 60s)")
    assert ok


# ---------------------------------------------------------------- 2: XPrefs as RLHF

def test_xprefs_is_rlhf_of_negative_distance(verdict):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        d = int(rng.integers(1, 9))
        Vi = rng.normal(size=(int(rng.integers(1, 12)), d))
        Vj = rng.normal(size=(int(rng.integers(1, 12)), d))
        g = rng.normal(size=d)
        wi = rng.integers(1, 4, size=len(Vi)).astype(float) if rng.random() < 0.5 else None
        wj = rng.integers(1, 4, size=len(Vj)).astype(float) if wi is not None else None
        p = R.xprefs_prob(Vi, Vj, g, wi, wj)
        q = R.rlhf_pref_prob(-np.sum((Vi - g) ** 2, axis=1), -np.sum((Vj - g) ** 2, axis=1), wi, wj)
        worst = max(worst, abs(p - q) / max(abs(q), 1e-300))
    verdict(2, worst < 1e-12, f"1000 instances, max relative gap {worst:.1e} (< 1e-12)")
    assert worst < 1e-12


# ---------------------------------------------------------------- 3: metric oracles

def _enumerate(r, rh):
    conc = disc = 0
    for a, b in itertools.combinations(range(len(r)), 2):
        if r[a] == r[b]:
            continue
        if (r[a] < r[b]) == (rh[a] < rh[b]) and rh[a] != rh[b]:
            conc += 1
        else:
            disc += 1
    return conc, disc


def test_metric_oracles(verdict):
    rng = np.random.default_rng(3)
    mismatches = identity_breaks = done = 0
    for k in range(200):
        n = int(rng.integers(2, 31))
        tie_free = k % 2 == 0
        if tie_free:
            r, rh = rng.permutation(n).astype(float), rng.permutation(n).astype(float)
        else:
            r, rh = rng.integers(0, 6, size=n).astype(float), rng.integers(0, 6, size=n).astype(float)
        conc, disc = _enumerate(r, rh)
        if conc + disc == 0:
            continue
        done += 1
        pairs = [EvalPair(a, b) for a, b in zip(r, rh)]
        tau, acc = M.kendalls_tau(pairs), M.pairwise_accuracy(pairs)
        # each metric must be the correctly rounded value of its exact ratio
        tau_q, acc_q = Fraction(conc - disc, conc + disc), Fraction(conc, conc + disc)
        mismatches += tau != float(tau_q) or acc != float(acc_q)
        if tie_free:
            identity_breaks += acc_q != (tau_q + 1) / 2
    ok = mismatches == 0 and identity_breaks == 0 and done >= 190
    verdict(3, ok, f"{done} instances, {mismatches} disagreements with enumeration, "
                   f"{identity_breaks} tie-free breaks of accuracy = (tau+1)/2 in exact arithmetic")
    assert ok


# ---------------------------------------------------------------- 4: RL sanity gate

def test_rl_sanity_gate(tmp_path, verdict):
    cfg = _default(tmp_path)
    tic = time.perf_counter()
    opt = rl.value_iteration(cfg.rl_env, cfg.held_out).optimal_return
    curve = rl.train_seeds(cfg.rl_env, cfg.held_out, None, cfg.rl_spec(), workers=P.threads())
    elapsed = time.perf_counter() - tic
    final = curve.returns[:, -1]
    ok = bool(np.all(final >= 0.9 * opt)) and int(curve.steps[-1]) <= 100_000 and elapsed < 300
    verdict(4, ok, f"final returns {np.round(final, 1).tolist()} vs 0.9 x optimum {0.9 * opt:.1f}; "
                   f"{elapsed:.0f}s (< 300s)")
    assert ok


# ---------------------------------------------------------------- 5: Table-1 direction

TABLE1_CHECK = ("xirl_success", "xirl_mixed", "xrlhf", "goal_classifier")


def _held_out_accuracy(cfg, method):
    _, cols, rows = M.read_tsv(P.Run(cfg).path("reports", f"eval_{method}.tsv"))
    return next(float(dict(zip(cols, r))["accuracy"]) for r in rows if r[0] == cfg.held_out.label)


def test_table1_direction(tmp_path, verdict):
    tic = time.perf_counter()
    acc = {m: [] for m in TABLE1_CHECK}
    cfgs = [_default(tmp_path, seed) for seed in range(5)]
    for cfg in cfgs:
        P.repro_table1(cfg, TABLE1_CHECK)
        for m in TABLE1_CHECK:
            acc[m].append(_held_out_accuracy(cfg, m))
    P.report(cfgs[0], [P.Run(c).root for c in cfgs[1:]])
    elapsed = time.perf_counter() - tic
    claims = [("xrlhf", "xirl_mixed"), ("xrlhf", "goal_classifier"), ("xirl_success", "xirl_mixed")]
    parts, ok = [], elapsed < 1200
    for a, b in claims:
        d = np.array(acc[a]) - np.array(acc[b])
        good = d.mean() > -_se(d)
        ok &= bool(good)
        parts.append(f"{a} {np.mean(acc[a]):.3f} vs {b} {np.mean(acc[b]):.3f} "
                     f"(diff {d.mean():+.3f}, se {_se(d):.3f}) {'ok' if good else 'reversed'}")
    verdict(5, ok, "; ".join(parts) + f"; {elapsed:.0f}s (< 1200s)")
    assert ok


# ---------------------------------------------------------------- 6: Fig-1 direction

def _final_returns(cfg):
    _, cols, rows = M.read_tsv(P.Run(cfg).path("reports", "final_returns.tsv"))
    return {r[0]: (float(r[1]), float(r[2])) for r in rows}


def test_fig1_direction(tmp_path, verdict):
    cfg = _default(tmp_path)
    tic = time.perf_counter()
    P.repro_fig1(cfg)
    elapsed = time.perf_counter() - tic
    fin = _final_returns(cfg)

    def tol(a, b):
        return float(np.hypot(fin[a][1], fin[b][1]))

    best = max(fin, key=lambda m: fin[m][0])
    top = {m: fin[m][0] >= fin[best][0] - tol(m, best) for m in ("gt_rl", "xirl_success")}
    above = {(a, b): fin[a][0] > fin[b][0] - tol(a, b)
             for a in ("xrlhf", "xirl_buckets") for b in ("xirl_mixed", "goal_classifier")}
    ranked = sorted(fin, key=lambda m: fin[m][0])
    low = min(fin, key=lambda m: fin[m][0])
    bottom = "xirl_mixed" in ranked[:2] or fin["xirl_mixed"][0] <= fin[low][0] + tol("xirl_mixed", low)
    ok = all(top.values()) and all(above.values()) and bottom and elapsed < 2700
    table = ", ".join(f"{m} {fin[m][0]:.1f}±{fin[m][1]:.1f}" for m in sorted(fin, key=lambda m: -fin[m][0]))
    fails = [f"{m} not top tier" for m, v in top.items() if not v]
    fails += [f"{a} not above {b}" for (a, b), v in above.items() if not v]
    fails += [] if bottom else ["xirl_mixed not near the bottom"]
    verdict(6, ok, f"{table}; {'; '.join(fails) or 'all orderings hold'}; {elapsed:.0f}s (< 2700s)")
    assert ok


# ---------------------------------------------------------------- 7: static vs dynamic goal

def test_appendix_a(tmp_path, verdict):
    cfg = _default(tmp_path)
    tic = time.perf_counter()
    path = P.repro_appendix_a(cfg)
    elapsed = time.perf_counter() - tic
    _, cols, rows = M.read_tsv(path)
    t = {r[0]: dict(zip(cols, r)) for r in rows}
    spikes = float(t["xprefs_dynamic"]["spike_fraction"])
    windows = float(t["xprefs_static"]["window_nonincreasing"])
    s_mean, s_se = float(t["xprefs_static"]["final_mean"]), float(t["xprefs_static"]["final_stderr"])
    x_mean, x_se = float(t["xrlhf"]["final_mean"]), float(t["xrlhf"]["final_stderr"])
    close = abs(s_mean - x_mean) <= np.hypot(s_se, x_se)
    ok = spikes > 0.5 and windows >= 0.8 and close and elapsed < 900
    verdict(7, ok, f"dynamic spike fraction {spikes:.2f} (> 0.5); static non-increasing windows {windows:.2f} "
                   f"(>= 0.8); static RL {s_mean:.1f}±{s_se:.1f} vs xrlhf {x_mean:.1f}±{x_se:.1f} "
                   f"{'within' if close else 'outside'} 1 stderr; {elapsed:.0f}s (< 900s)")
    assert ok


# ---------------------------------------------------------------- 8: determinism

SMALL = {
    "data": {"train_per_embodiment": 40, "test_per_embodiment": 40},
    "feedback": {"num_preferences": 300, "num_triplets": 300, "num_buckets": 4, "bucket_size": 8},
    "train": {"iterations": 30, "appendix_a_iterations": 40, "refresh_period": 10},
    "rl": {"total_steps": 10000, "eval_every": 5000, "seeds": [0, 1]},
}


def _run_everything(out, monkeypatch, threads):
    monkeypatch.setenv("MQME_THREADS", str(threads))
    cfg = P.ExperimentConfig.build(SMALL, seed=7, out=str(out))
    P.repro_table1(cfg, P.TABLE1_PIPELINES)
    P.repro_fig1(cfg, P.FIG1_PIPELINES)
    P.repro_appendix_a(cfg)
    return {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}


def test_determinism(tmp_path, monkeypatch, verdict):
    a = _run_everything(tmp_path / "a", monkeypatch, 1)
    b = _run_everything(tmp_path / "b", monkeypatch, 2)
    differ = sorted(str(k) for k in set(a) | set(b) if a.get(k) != b.get(k))
    ok = not differ and len(a) > 50
    verdict(8, ok, f"{len(a)} artifacts over every pipeline, {len(differ)} differ between reruns"
                   + (f" ({', '.join(differ[:5])})" if differ else ""))
    assert ok
