"""Timing of the compiled fleet kernels against the numpy fallback."""

from __future__ import annotations

import time

import numpy as np

from . import kernels
from .fleet import FleetScenario, fast_forward, sample_fleet


def available_backends():
    names = ["python"]
    try:
        kernels.get_backend("cython")
        names.insert(0, "cython")
    except ImportError:
        pass
    return names


def _drive(fleet, n_steps, n_bins, u, backend):
    scratch = tuple(np.empty(len(fleet)) for _ in range(3))
    t = fleet.t
    for k in range(n_steps):
        kernels.broadcast(fleet.mode, fleet.soc, fleet.keys, u, n_bins, fleet.s_min,
                          fleet.s_max, k, backend=backend)
        kernels.step(fleet, t + k * fleet.dt_h, fleet.dt_h, fleet.s_min, fleet.s_max, scratch,
                     backend=backend)
    return fleet


def kernel_benchmark(n_ev=10000, n_steps=200, repeat=3, n_bins=3, seed=0, t0=18.0):
    """Best-of-``repeat`` wall time per backend on identical fleets.

    Each row also reports whether the final fleet state matches the first
    backend bit for bit.
    """
    base = sample_fleet(FleetScenario(n_ev=n_ev, seed=seed))
    fast_forward(base, t0)
    u = np.full(4 * n_bins + 2, 0.05)
    rows, ref = [], None
    for name in available_backends():
        best = np.inf
        for _ in range(repeat):
            f = base.copy()
            tic = time.perf_counter()
            _drive(f, n_steps, n_bins, u, name)
            best = min(best, time.perf_counter() - tic)
        state = (f.mode.copy(), f.soc.copy())
        if ref is None:
            ref = state
        same = bool(np.array_equal(ref[0], state[0]) and np.array_equal(ref[1], state[1]))
        rows.append({"backend": name, "n_ev": n_ev, "n_steps": n_steps, "seconds": best,
                     "ns_per_agent_step": 1e9 * best / (n_ev * n_steps), "identical": same})
    for r in rows:
        r["speedup_vs_python"] = rows[-1]["seconds"] / r["seconds"]
    return rows
