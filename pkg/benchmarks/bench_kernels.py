"""Time the numba kernels against the pure-numpy fallback.

Each path runs in its own interpreter because ``MQME_DISABLE_JIT`` is read
at import. The JIT timing excludes compilation (one warm-up call first), and
each workload's output digest must agree between the two paths.

    python benchmarks/bench_kernels.py [--repeat 3]
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import subprocess
import sys
import time

WORKLOADS = ("rollouts", "tabulate", "q_learning", "encode")


def _digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(a.tobytes())
    return h.hexdigest()[:12]


def _workloads():
    import numpy as np
    from mqme import demogen, diffnet as D, rl
    from mqme.sim import EnvConfig, Kind

    demo = EnvConfig(layout_pool=0)
    small = EnvConfig(layout_pool=1)

    def rollouts():
        ts = [demogen.rollout(demogen.DegradedOracle(0.3), demo, Kind.GRIPPER, s) for s in range(200)]
        return _digest(*(t.frames for t in ts))

    def tabulate():
        rl._MDP_CACHE.clear()
        mdp = rl.tabulate(small, Kind.LONGSTICK)
        return _digest(mdp.states, mdp.nxt)

    def q_learning():
        spec = rl.RlSpec(total_steps=20_000, eval_every=5_000, eval_episodes=20)
        table, curve = rl.q_learning_train(small, Kind.LONGSTICK, spec=spec)
        return _digest(table.q, curve.returns)

    def encode():
        p = D.init_encoder(243, seed=0)
        X = np.random.default_rng(0).integers(0, 2, size=(4000, 243))
        return _digest(D.encode(p, X))

    return {"rollouts": rollouts, "tabulate": tabulate, "q_learning": q_learning, "encode": encode}


def child(repeat: int) -> None:
    from mqme._jit import JIT_ENABLED
    work = _workloads()
    out = {"jit": JIT_ENABLED}
    for name in WORKLOADS:
        fn = work[name]
        digest = fn()  # warm-up compiles the kernels
        best = float("inf")
        for _ in range(repeat):
            tic = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - tic)
        out[name] = {"seconds": best, "digest": digest}
    print(json.dumps(out))


def run_path(disable: bool, repeat: int) -> dict:
    env = dict(os.environ, MQME_DISABLE_JIT="1" if disable else "0")
    res = subprocess.run([sys.executable, __file__, "--child", "--repeat", str(repeat)],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args(argv)
    if args.child:
        child(args.repeat)
        return 0
    jit, plain = run_path(False, args.repeat), run_path(True, args.repeat)
    if not jit["jit"]:
        print("numba unavailable: both columns use the fallback")
    print(f"{'workload':12s} {'numba s':>10s} {'numpy s':>10s} {'speedup':>8s}  outputs")
    ok = True
    for name in WORKLOADS:
        a, b = jit[name], plain[name]
        same = a["digest"] == b["digest"]
        ok &= same
        print(f"{name:12s} {a['seconds']:10.4f} {b['seconds']:10.4f} {b['seconds'] / a['seconds']:8.1f}x  "
              f"{'identical' if same else 'DIFFER'}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
