"""Compare the compiled and pure-Python likelihood-site kernels.

Times a fixed number of EP passes on the standard simulated setting with
each available backend and checks that both give the same posterior.

    python benchmarks/bench_backends.py --groups 100,400 --passes 5
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from epmixed import EPConfig, ModelSpec, PriorSpec, SimConfig, fit, kernels, simulate_dataset
from epmixed.reference import global_params, max_rel_diff


def run(likelihood, L, passes, backend, reps):
    data, _ = simulate_dataset(SimConfig.scalability_setting(likelihood, L, seed=L))
    spec = ModelSpec(data.likelihood, PriorSpec.default(data.likelihood, data.P, data.Q))
    cfg = EPConfig(min_passes=passes, max_passes=passes)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        post = fit(data, spec, cfg, backend=backend)
        times.append((time.perf_counter() - t0) / passes)
    return float(np.median(times)), global_params(post.theta, post.sigma)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--models", default="binomial,zip")
    p.add_argument("--groups", default="100,400")
    p.add_argument("--passes", type=int, default=5)
    p.add_argument("--reps", type=int, default=3)
    args = p.parse_args(argv)
    backends = kernels.available()
    print(f"backends: {', '.join(backends)}")
    print(f"{'model':<9}{'L':>6}" + "".join(f"{b + ' s/pass':>16}" for b in backends) + f"{'speedup':>10}{'max rel diff':>14}")
    for model in args.models.split(","):
        for L in map(int, args.groups.split(",")):
            res = {b: run(model, L, args.passes, b, args.reps) for b in backends}
            line = f"{model:<9}{L:>6}" + "".join(f"{res[b][0]:>16.4f}" for b in backends)
            if len(backends) == 2:
                line += f"{res['python'][0] / res['cython'][0]:>10.1f}"
                line += f"{max_rel_diff(res['cython'][1], res['python'][1]):>14.2e}"
            print(line)


if __name__ == "__main__":
    main()
