"""Compare the numba kernels with the numpy fallback.

Kernel micro-benchmarks import both backends directly. The end-to-end rollout
benchmark runs once per backend in a subprocess, since the backend is fixed at
import time by CLIC_NUMBA.

    python benchmarks/bench_kernels.py [--n 2000] [--repeat 5]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

ROLLOUT = """
import json, time, numpy as np
from clic import kernels
from clic.gen import GenConfig, generate_library
from clic.sim import ConstantPolicy, SimParams, rollout_batch
lib = generate_library(GenConfig(n_scenarios={n}, seed=0))
sim = SimParams()
pol = ConstantPolicy(0.05, 0.0)
idx = np.arange(len(lib))
rollout_batch(pol, lib.packed, idx[:8], sim)  # compile / warm up
best = float("inf")
for _ in range({repeat}):
    t = time.perf_counter()
    out = rollout_batch(pol, lib.packed, idx, sim)
    best = min(best, time.perf_counter() - t)
print(json.dumps({{"backend": kernels.BACKEND, "seconds": best, "steps": int(out.steps.sum())}}))
"""


def kernel_table(n, repeat):
    from clic.kernels import _numba, _numpy
    rng = np.random.default_rng(0)
    states = np.column_stack([rng.uniform(0, 200, n), rng.uniform(0, 9.6, n),
                              rng.uniform(0, 40, n), rng.uniform(-0.3, 0.3, n)])
    actions = rng.uniform(-0.2, 0.2, (n, 2))
    a = np.ascontiguousarray(states[:, [0, 1, 3]])
    b = np.ascontiguousarray(a + rng.normal(scale=3.0, size=a.shape))
    bvs = states[:, None, :] + rng.normal(scale=10.0, size=(n, 4, 4))
    present = np.ones((n, 4), dtype=bool)
    cases = {
        "kinematic_step": lambda m: m.kinematic_step(states, actions, 0.04, 40.0),
        "rects_overlap": lambda m: m.rects_overlap(a, b, 5.0, 1.8),
        "accident_codes": lambda m: m.accident_codes(states, bvs, present, 5.0, 1.8, 9.6),
        "best_lanes": lambda m: m.best_lanes(states, bvs, present, 3.2, 3),
    }
    rows = []
    for name, fn in cases.items():
        fn(_numba)  # compile
        t_nb = min(timeit.repeat(lambda: fn(_numba), number=20, repeat=repeat)) / 20
        t_np = min(timeit.repeat(lambda: fn(_numpy), number=20, repeat=repeat)) / 20
        rows.append((name, t_nb, t_np))
    return rows


def rollout_times(n, repeat):
    out = []
    for flag in ("1", "0"):
        env = dict(os.environ, CLIC_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", ROLLOUT.format(n=n, repeat=repeat)], env=env,
                             capture_output=True, text=True, check=True)
        out.append(json.loads(res.stdout.strip().splitlines()[-1]))
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=2000, help="batch size and library size")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"kernels, batch of {args.n} (best of {args.repeat})")
    print(f"{'kernel':<16}{'numba us':>12}{'numpy us':>12}{'speedup':>10}")
    for name, t_nb, t_np in kernel_table(args.n, args.repeat):
        print(f"{name:<16}{t_nb * 1e6:>12.1f}{t_np * 1e6:>12.1f}{t_np / t_nb:>10.1f}")
    print(f"\nfull-library rollout, {args.n} scenarios")
    res = rollout_times(args.n, args.repeat)
    for r in res:
        print(f"{r['backend']:<8}{r['seconds']:>9.3f} s  {r['steps'] / r['seconds']:>12.0f} steps/s")
    print(f"speedup {res[1]['seconds'] / res[0]['seconds']:.1f}x")


if __name__ == "__main__":
    main()
