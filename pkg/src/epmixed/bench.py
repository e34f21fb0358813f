"""Run-time scaling of the sparse and dense implementations."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .ep import EPConfig, fit
from .model import ModelSpec, PriorSpec, SimConfig, simulate_dataset
from .reference import dense_ep_fit

METHODS = ("EP-S", "EP-NS")


@dataclass
class Timing:
    model: str
    method: str
    L: int
    rep: int
    passes: int
    seconds: float


def time_fit(method, likelihood, L, rep, passes, seed=0, schedule="sequential", backend=None) -> Timing:
    """Time one fit with exactly ``passes`` passes on the standard simulated setting."""
    data, _ = simulate_dataset(SimConfig.scalability_setting(likelihood, L, seed=seed * 1000 + rep))
    spec = ModelSpec(data.likelihood, PriorSpec.default(data.likelihood, data.P, data.Q))
    cfg = EPConfig(min_passes=passes, max_passes=passes, schedule=schedule)
    t0 = time.perf_counter()
    if method == "EP-S":
        post = fit(data, spec, cfg, backend=backend)
    elif method == "EP-NS":
        post = dense_ep_fit(data, spec, cfg)
    else:
        raise ValueError(f"method must be one of {METHODS}")
    return Timing(data.likelihood.value, method, L, rep, post.passes, time.perf_counter() - t0)


def run_bench(models, sparse_grid, dense_grid, reps=5, passes=10, dense_passes=1, seed=0, on_result=None):
    """Time both methods over their grids; returns a list of :class:`Timing`."""
    out = []
    for model in models:
        for method, grid, npass in (("EP-S", sparse_grid, passes), ("EP-NS", dense_grid, dense_passes)):
            for L in grid:
                for rep in range(reps):
                    t = time_fit(method, model, int(L), rep, npass, seed=seed)
                    out.append(t)
                    if on_result is not None:
                        on_result(t)
    return out


def aggregate(timings):
    """Mean and SD of per-pass seconds by ``(model, method, L)``."""
    groups = {}
    for t in timings:
        groups.setdefault((t.model, t.method, t.L), []).append(t.seconds / t.passes)
    rows = []
    for (model, method, L), v in sorted(groups.items()):
        v = np.asarray(v)
        rows.append({"model": model, "method": method, "L": L, "reps": v.size,
                     "mean_seconds_per_pass": float(v.mean()),
                     "sd_seconds_per_pass": float(v.std(ddof=1)) if v.size > 1 else 0.0})
    return rows


def linear_r2(x, y) -> float:
    """Coefficient of determination of the least-squares line through ``(x, y)``."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    A = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss = np.sum((y - y.mean()) ** 2)
    return float(1.0 - resid @ resid / ss) if ss > 0 else 1.0


def scaling_ratio(rows, model, method, L_hi=800, L_lo=400) -> float:
    m = {r["L"]: r["mean_seconds_per_pass"] for r in rows if r["model"] == model and r["method"] == method}
    return m[L_hi] / m[L_lo]
