"""Time the numba and numpy paths of every hot kernel, and optionally a full MH fit.

Usage::

    python benchmarks/bench_kernels.py            # kernels only
    python benchmarks/bench_kernels.py --fit      # plus one SPLSME fit per backend
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from mixedimpute import kernels


def kernel_cases(n_subj=20, per=30, n_nodes=400, seed=0):
    rng = np.random.default_rng(seed)
    n = n_subj * per
    subj = np.repeat(np.arange(n_subj), per)
    y = rng.standard_normal(n)
    mu = rng.standard_normal(n)
    lv = 0.3 * rng.standard_normal(n)
    use = rng.uniform(size=n) > 0.2
    m = (~use).astype(float)
    loc = rng.standard_normal(n_nodes)
    ls = 0.5 * rng.standard_normal(n_nodes)
    log_w = np.full(n_nodes, -np.log(n_nodes))
    steps = 200_000
    return {
        "normal_by_subject": (y, mu, lv, use, subj, n_subj),
        "bernoulli_logit_by_subject": (m, mu, subj, n_subj),
        "cs_marginal_by_subject": (y - mu, use, subj, n_subj, 0.1, 0.8),
        "node_marginal_by_subject": (y, mu, lv, use, subj, n_subj, loc, ls, log_w),
        "discrete_metropolis": (
            np.log(np.array([0.2, 0.3, 0.5])), 0, rng.integers(1, 3, size=steps), np.log(rng.uniform(size=steps)),
        ),
    }


def bench_kernels(repeat=5):
    print(f"{'kernel':30s} {'numpy (ms)':>12s} {'numba (ms)':>12s} {'speedup':>8s}")
    for name, args in kernel_cases().items():
        impls = kernels.implementations(name)
        impls["numba"](*args)  # compile
        times = {}
        for backend, fn in impls.items():
            t = timeit.Timer(lambda: fn(*args))
            number, _ = t.autorange()
            times[backend] = min(t.repeat(repeat, number)) / number * 1e3
        print(f"{name:30s} {times['numpy']:12.4f} {times['numba']:12.4f} {times['numpy'] / times['numba']:8.1f}x")


FIT_SNIPPET = """
import time
from mixedimpute import BACKEND
from mixedimpute.simulation import ScenarioConfig, generate, design_for
from mixedimpute.inference import McmcConfig, run_mh
sim = generate(ScenarioConfig.from_mapping({}), 0)
d = design_for(sim, "y")
run_mh("splsme", d, McmcConfig(warmup_iters=20, sampling_iters=20, seed=1))
t = time.perf_counter()
run_mh("splsme", d, McmcConfig(warmup_iters=1000, sampling_iters=1500, seed=1))
print(BACKEND, round(time.perf_counter() - t, 2))
"""


def bench_fit():
    for flag in ("0", "1"):
        env = dict(os.environ, MIXEDIMPUTE_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", FIT_SNIPPET], env=env, capture_output=True, text=True, check=True)
        backend, secs = out.stdout.split()
        print(f"SPLSME fit, 2 x (1000 + 1500) iterations, backend={backend}: {secs} s")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--fit", action="store_true", help="also time a full MH fit under each backend")
    args = ap.parse_args()
    bench_kernels()
    if args.fit:
        bench_fit()
