"""Excited-fleet data generation and prediction experiments."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .essm import FleetStats, fleet_state_vector, n_inputs
from .fleet import FleetScenario, fast_forward, inject_soc_noise, sample_fleet
from .metrics import mape


@dataclass
class DayRecord:
    """Aggregated data of one excited run: ``u[t]`` acts between ``p[t]`` and ``p[t+1]``."""

    u: np.ndarray         # (T, n_u)
    p: np.ndarray         # (T+1,) kW
    p_upper: np.ndarray   # (T+1,) IMM oracle flexibility
    p_lower: np.ndarray
    t0: float = 0.0       # hours
    dt: float = 15.0

    def to_csv(self, path):
        n_u = self.u.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k"] + [f"u_{j + 1}" for j in range(n_u)] + ["p_kw", "p_upper_kw", "p_lower_kw"])
            for k in range(self.p.size):
                us = [repr(float(v)) for v in self.u[k]] if k < self.u.shape[0] else [""] * n_u
                w.writerow([k] + us + [repr(float(self.p[k])), repr(float(self.p_upper[k])),
                                       repr(float(self.p_lower[k]))])

    @classmethod
    def from_csv(cls, path, t0=0.0, dt=15.0):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        p = np.array([float(r[-3]) for r in rows])
        up = np.array([float(r[-2]) for r in rows])
        lo = np.array([float(r[-1]) for r in rows])
        u = np.array([[float(v) for v in r[1:-3]] for r in rows[:-1]])
        return cls(u, p, up, lo, t0, dt)


def excitation(rng, n_steps, n_bins, hold=4, cap=0.3, discharge_cap=None):
    """Random broadcasts redrawn every ``hold`` steps.

    Entries are ``U(0, cap)``; the discharge-direction entries (``u_a``,
    ``u_b``, ``u_b_full``) use ``discharge_cap`` when given, which keeps the
    excited fleet on the charging side of its baseline.
    """
    n_u = n_inputs(n_bins)
    hi = np.full(n_u, float(cap))
    if discharge_cap is not None:
        hi[:2 * n_bins] = discharge_cap
        hi[4 * n_bins + 1] = discharge_cap
    draws = rng.uniform(0.0, 1.0, size=(-(-n_steps // hold), n_u)) * hi
    return np.repeat(draws, hold, axis=0)[:n_steps]


def day_seed(seed, day):
    return int(np.random.SeedSequence([seed, day]).generate_state(1, np.uint64)[0] >> 1)


def run_excited(fleet, U):
    """Drive ``fleet`` with inputs ``U``; returns power and oracle flexibility series."""
    T = U.shape[0]
    n_bins = (U.shape[1] - 2) // 4
    p = np.empty(T + 1)
    up = np.empty(T + 1)
    lo = np.empty(T + 1)
    rec = fleet.step()
    p[0], up[0], lo[0] = rec.p_kw, rec.p_upper_kw, rec.p_lower_kw
    for k in range(T):
        fleet.apply_broadcast(U[k], n_bins)
        rec = fleet.step()
        p[k + 1], up[k + 1], lo[k + 1] = rec.p_kw, rec.p_upper_kw, rec.p_lower_kw
    return p, up, lo


def simulate_day(scenario: FleetScenario, day, t0, n_steps, n_bins, hold=4, cap=0.3,
                 discharge_cap=None):
    """One independently sampled fleet driven by random excitation from clock ``t0``."""
    seed = day_seed(scenario.seed, day)
    fleet = sample_fleet(replace(scenario, seed=seed))
    fast_forward(fleet, t0)
    U = excitation(np.random.default_rng(seed), n_steps, n_bins, hold, cap, discharge_cap)
    p, up, lo = run_excited(fleet, U)
    return DayRecord(U, p, up, lo, t0, scenario.dt)


def simulate_history(scenario, n_days, t0, n_steps, n_bins, hold=4, cap=0.3, cache_dir=None,
                     first_day=1, discharge_cap=None):
    """``n_days`` historical days, optionally cached as CSV under ``cache_dir``."""
    days = []
    for d in range(first_day, first_day + n_days):
        path = None
        if cache_dir is not None:
            path = Path(cache_dir) / f"day_{d:04d}.csv"
            if path.exists():
                rec = DayRecord.from_csv(path, t0, scenario.dt)
                if rec.u.shape[0] >= n_steps:
                    days.append(rec)
                    continue
        rec = simulate_day(scenario, d, t0, n_steps, n_bins, hold, cap, discharge_cap)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            rec.to_csv(path)
        days.append(rec)
    return days


class FleetPlant:
    """Simulated fleet behind the broadcast channel.

    The regulation loop talks to it through :meth:`actuate` (payload in,
    aggregated record out). ``soc_noise`` corrupts the reported SOC after
    every step; only the state-feedback baseline reads it.
    """

    def __init__(self, fleet, n_bins, soc_noise=0.0, noise_seed=0):
        self.fleet = fleet
        self.n_bins = n_bins
        self.soc_noise = float(soc_noise)
        self._rng = np.random.default_rng(noise_seed)
        self._corrupt()

    def _corrupt(self):
        if self.soc_noise > 0:
            inject_soc_noise(self.fleet, self.soc_noise, self._rng)

    def actuate(self, payload):
        from .control import decode_broadcast
        u, _ = decode_broadcast(payload, self.n_bins)
        self.fleet.apply_broadcast(u, self.n_bins)
        rec = self.fleet.step()
        self._corrupt()
        return rec

    def probe(self, u):
        """Power after one step under ``u`` on a throwaway copy."""
        f = self.fleet.copy()
        f.apply_broadcast(u, self.n_bins)
        return f.step().p_kw

    def reported_state(self):
        return fleet_state_vector(self.fleet, self.n_bins, soc=self.fleet.soc_reported)

    def stats(self):
        return FleetStats.from_fleet(self.fleet)


@dataclass
class PredictionRun:
    """Sliding-window prediction of a recorded day."""

    k: np.ndarray          # step index of each predicted sample
    p_pred: np.ndarray     # kW
    p_upper: np.ndarray
    p_lower: np.ndarray
    p_true: np.ndarray
    fit_s: list = field(default_factory=list)
    min_eig: list = field(default_factory=list)
    iterations: list = field(default_factory=list)

    @property
    def mape(self):
        return mape(self.p_true, self.p_pred)

    def to_csv(self, path, oracle=None):
        """``k,p_pred_kw,p_upper_kw,p_lower_kw,p_imm_kw[,p_upper_imm_kw,p_lower_imm_kw]``."""
        cols = ["k", "p_pred_kw", "p_upper_kw", "p_lower_kw", "p_imm_kw"]
        data = [self.k, self.p_pred, self.p_upper, self.p_lower, self.p_true]
        if oracle is not None:
            cols += ["p_upper_imm_kw", "p_lower_imm_kw"]
            data += [oracle.p_upper[self.k], oracle.p_lower[self.k]]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in zip(*data):
                w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])


def sliding_prediction(history, live, n_bins, K=60, n_p=12, start=None, stop=None,
                       warm_iters=5, first_iters=100, seed=0, pe_threshold=1e-8, L=None):
    """Refit every ``n_p`` steps on the window ending at the current step and
    predict the next ``n_p`` powers of ``live`` from the filtered state.
    A warm refit rejected for lack of excitation keeps the previous model.
    """
    from . import bhmm
    from .ident import PersistentExcitationError, build_dataset, e_step, em_fit, init_params
    start = K if start is None else start
    stop = live.u.shape[0] if stop is None else min(stop, live.u.shape[0])
    rng = np.random.default_rng(seed)
    params = None
    ks, pp, pu, pl, fit_s, eigs, iters = [], [], [], [], [], [], []
    for end in range(start, stop, n_p):
        data = build_dataset(history, live, end, K, L=L, dt=live.dt)
        t = time.perf_counter()
        if params is None:
            params, rep, post = em_fit(data, init_params(data, n_bins, rng),
                                       n_iter_max=first_iters, pe_threshold=pe_threshold)
        else:
            try:
                params, rep, post = em_fit(data, params, n_iter_max=warm_iters,
                                           pe_threshold=pe_threshold)
            except PersistentExcitationError:
                # keep the previous model, refilter the new window
                rep, post = None, e_step(params, data)
        fit_s.append(time.perf_counter() - t)
        eigs.append(min(rep.min_eig) if rep and rep.min_eig else float("nan"))
        iters.append(rep.iterations if rep else 0)
        mu = post.mu[-1, -1]
        h = min(n_p, stop - end)
        ks.append(np.arange(end + 1, end + h + 1))
        pp.append(bhmm.mean_rollout(params, mu, live.u[end:end + h]))
        up, lo = bhmm.flexibility_rollout(params, mu, h)
        pu.append(up)
        pl.append(lo)
    k = np.concatenate(ks)
    return PredictionRun(k, np.concatenate(pp), np.concatenate(pu), np.concatenate(pl),
                         live.p[k], fit_s, eigs, iters)
