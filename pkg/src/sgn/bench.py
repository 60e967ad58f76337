"""Wall-clock and memory scaling measurements behind ``sgn bench``.

Three sections:

* ``flow_T``: flow evaluation time against integration time at fixed ``d``.
* ``flow_d`` / ``jacobian_d``: flow time against ``d``, next to a surrogate
  baseline that pays for a dense Jacobian determinant at every step (central
  differences of the one-step map plus an LU log-determinant), which is what
  a likelihood would cost if volume preservation were not known a priori.
* ``peak_states``: states held by the stored and reversible backward passes
  as the step count grows.

Timings are the median of ``repeats`` runs after one warm-up. The default
batch is large enough that array arithmetic, not interpreter overhead,
dominates each step.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .core import Rng
from .integrator import FlowConfig, _step, flow_arrays
from .net import SeparableHamiltonianNet
from .train import flow_vjp_arrays

__all__ = ["BenchRow", "median_time", "loglog_slope", "jacobian_baseline", "run_bench"]


@dataclass
class BenchRow:
    section: str
    x: float
    seconds: float | None = None
    peak_states: int | None = None
    mode: str = ""


def median_time(fn, repeats: int) -> float:
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def jacobian_baseline(H, Z, dt: float, n_steps: int, h: float = 1e-5) -> np.ndarray:
    """Sum of per-step ``log|det|`` from dense central-difference Jacobians."""
    B, n = Z.shape
    d = n // 2
    E = h * np.eye(n)
    q, p = Z[:, :d], Z[:, d:]
    total = np.zeros(B)
    for _ in range(n_steps):
        z = np.concatenate([q, p], axis=1)
        P = np.concatenate([z[:, None, :] + E, z[:, None, :] - E], axis=1).reshape(-1, n)
        q2, p2, _ = _step(H, P[:, :d], P[:, d:], dt)
        Y = np.concatenate([q2, p2], axis=1).reshape(B, 2, n, n)
        J = (Y[:, 0] - Y[:, 1]).transpose(0, 2, 1) / (2 * h)
        total += np.linalg.slogdet(J)[1]
        q, p, _ = _step(H, q, p, dt)
    return total


def run_bench(
    dims=(2, 4, 8, 16),
    steps=(10, 100, 1000),
    times=(1.0, 2.0, 4.0, 8.0),
    repeats: int = 3,
    batch: int = 1024,
    dt: float = 0.02,
    hidden=(16, 16),
    seed: int = 0,
) -> tuple[list[BenchRow], dict]:
    """Run all sections single-threaded; returns rows and fitted slopes."""
    rows: list[BenchRow] = []
    with threadpool_limits(limits=1):
        d0 = dims[0]
        H = SeparableHamiltonianNet.init(d0, hidden, Rng(seed))
        Z = Rng(seed + 1).standard_normal((batch, 2 * d0))
        t_T = []
        for T in times:
            cfg = FlowConfig(T, dt, max_steps=10**7)
            t_T.append(median_time(lambda: flow_arrays(H, Z[:, :d0], Z[:, d0:], cfg), repeats))
            rows.append(BenchRow("flow_T", T, t_T[-1], mode=f"d={d0}"))

        t_flow, t_jac = [], []
        cfg = FlowConfig(1.0, dt)
        n_steps, step = cfg.fixed_steps()
        for d in dims:
            H = SeparableHamiltonianNet.init(d, hidden, Rng(seed + d))
            Z = Rng(seed + 1).standard_normal((batch, 2 * d))
            t_flow.append(median_time(lambda: flow_arrays(H, Z[:, :d], Z[:, d:], cfg), repeats))
            t_jac.append(median_time(lambda: jacobian_baseline(H, Z, step, n_steps), repeats))
            rows.append(BenchRow("flow_d", d, t_flow[-1]))
            rows.append(BenchRow("jacobian_d", d, t_jac[-1]))

        peaks = {"stored": [], "reversible": []}
        H = SeparableHamiltonianNet.init(1, hidden, Rng(seed))
        Z = Rng(seed + 2).standard_normal((4, 2))
        for N in steps:
            cfg = FlowConfig(N * 0.01, 0.01, max_steps=max(N, 1))
            for mode in ("stored", "reversible"):
                qT, pT, trace, states = flow_arrays(H, Z[:, :1], Z[:, 1:], cfg, store=1 if mode == "stored" else 0)
                res = flow_vjp_arrays(H, trace, qT, pT, np.ones_like(qT), np.ones_like(pT), mode, states)
                peaks[mode].append(res.peak_states)
                rows.append(BenchRow("peak_states", N, peak_states=res.peak_states, mode=mode))

    stored_slope = loglog_slope(steps, peaks["stored"]) if len(steps) > 1 else math.nan
    summary = {
        "flow_T_slope": loglog_slope(times, t_T),
        "flow_d_slope": loglog_slope(dims, t_flow),
        "jacobian_d_slope": loglog_slope(dims, t_jac),
        "reversible_peak_states": peaks["reversible"],
        "stored_peak_states": peaks["stored"],
        "stored_peak_slope": stored_slope,
        "batch": batch,
        "repeats": repeats,
    }
    summary["slope_gap"] = summary["jacobian_d_slope"] - summary["flow_d_slope"]
    return rows, summary
