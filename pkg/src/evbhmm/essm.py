"""Bin-occupancy (eSSM) model of an aggregated fleet.

State layout for ``N`` SOC bins (0-based): ``[0, N)`` charging bins,
``[N, 2N)`` idle bins, ``[2N, 3N)`` discharging bins, then idle-empty,
idle-full and forced charging. Inputs follow
``[u_a(N), u_b(N), u_c(N), u_d(N), u_d_empty, u_b_full]``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .kernels import CM, DM, FCM, IM


def n_states(n_bins):
    return 3 * n_bins + 3


def n_inputs(n_bins):
    return 4 * n_bins + 2


def arrows(n_bins):
    """``(source, destination)`` state index of every input channel."""
    N = n_bins
    src, dst = [], []
    for j in range(N):
        src.append(j), dst.append(N + j)          # CM -> IM
    for j in range(N):
        src.append(N + j), dst.append(2 * N + j)  # IM -> DM
    for j in range(N):
        src.append(2 * N + j), dst.append(N + j)  # DM -> IM
    for j in range(N):
        src.append(N + j), dst.append(j)          # IM -> CM
    src.append(3 * N), dst.append(0)              # empty idle -> CM bin 1
    src.append(3 * N + 1), dst.append(3 * N - 1)  # full idle -> DM bin N
    return np.array(src), np.array(dst)


@dataclass
class FleetStats:
    """Averages over connected EVs used to parametrize the eSSM."""

    n_ev: float
    eta: float
    capacity: float
    p_ac: float
    p_ad: float

    @classmethod
    def from_fleet(cls, fleet):
        on = fleet.online
        if not on.any():
            raise ValueError("no connected EVs")
        return cls(n_ev=float(on.sum()), eta=float(fleet.eff[on].mean()),
                   capacity=float(fleet.capacity[on].mean()),
                   p_ac=float(fleet.p_rated[on].mean()), p_ad=float(fleet.p_rated[on].mean()))


@dataclass
class EssmModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    n_bins: int
    n_ev: float
    p_ac: float
    p_ad: float

    def to_csv(self, prefix):
        """Write ``<prefix>_A.csv`` etc. as ``i,j,value`` rows."""
        paths = []
        for name in ("A", "B", "C"):
            path = f"{prefix}_{name}.csv"
            write_matrix_csv(path, getattr(self, name))
            paths.append(path)
        return paths


def write_matrix_csv(path, M):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("i", "j", "value"))
        for i in range(M.shape[0]):
            for j in range(M.shape[1]):
                w.writerow((i, j, repr(float(M[i, j]))))


def read_matrix_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    shape = (max(int(r["i"]) for r in rows) + 1, max(int(r["j"]) for r in rows) + 1)
    M = np.zeros(shape)
    for r in rows:
        M[int(r["i"]), int(r["j"])] = float(r["value"])
    return M


def drift_probabilities(stats: FleetStats, n_bins, dt, s_min=0.0, s_max=1.0):
    """Per-step bin-advance probabilities ``(q_c, q_d)``."""
    width = (s_max - s_min) / n_bins
    dt_h = dt / 3600.0
    q_c = stats.p_ac * stats.eta * dt_h / stats.capacity / width
    q_d = stats.p_ad * dt_h / (stats.eta * stats.capacity) / width
    return q_c, q_d


def build_transition(n_bins, q_c, q_d):
    N = n_bins
    if not (0 <= q_c <= 1 and 0 <= q_d <= 1):
        raise ValueError("drift probability outside [0, 1]; dt too large for bin width")
    A = np.eye(3 * N + 3)
    for j in range(N):
        A[j, j] = 1 - q_c
        A[j + 1 if j < N - 1 else 3 * N + 1, j] = q_c
        d = 2 * N + j
        A[d, d] = 1 - q_d
        A[d - 1 if j > 0 else 3 * N, d] = q_d
    f = 3 * N + 2
    A[f, f] = 1 - q_c
    A[3 * N + 1, f] = q_c
    return A


def build_input_matrix(n_bins):
    src, dst = arrows(n_bins)
    B = np.zeros((n_states(n_bins), n_inputs(n_bins)))
    cols = np.arange(src.size)
    B[src, cols] = -1.0
    B[dst, cols] = 1.0
    return B


def output_rows(n_bins, n_ev, p_ac, p_ad):
    """3 x (3N+3) output matrix: power, upper and lower flexibility (kW)."""
    N = n_bins
    ones = np.ones(N)
    p = np.concatenate([-p_ac * ones, 0 * ones, p_ad * ones, [0.0, 0.0, -p_ac]])
    up = np.concatenate([p_ad * ones, p_ad * ones, p_ad * ones, [0.0, p_ad, -p_ac]])
    lo = np.concatenate([-p_ac * ones, -p_ac * ones, -p_ac * ones, [-p_ac, 0.0, -p_ac]])
    return n_ev * np.vstack([p, up, lo])


def build_essm(stats: FleetStats, n_bins, dt, s_min=0.0, s_max=1.0) -> EssmModel:
    q_c, q_d = drift_probabilities(stats, n_bins, dt, s_min, s_max)
    return EssmModel(A=build_transition(n_bins, q_c, q_d), B=build_input_matrix(n_bins),
                     C=output_rows(n_bins, stats.n_ev, stats.p_ac, stats.p_ad),
                     n_bins=n_bins, n_ev=stats.n_ev, p_ac=stats.p_ac, p_ad=stats.p_ad)


def essm_step(model: EssmModel, x, u_prime, tol=1e-12):
    """Noise-free ``A x + B u'``; ``u'`` must respect its source-mass bounds."""
    x = np.asarray(x, dtype=float)
    u_prime = np.asarray(u_prime, dtype=float)
    src, _ = arrows(model.n_bins)
    if np.any(u_prime < -tol):
        raise ValueError("negative switching mass")
    out = np.zeros_like(x)
    np.add.at(out, src, u_prime)
    if np.any(out > x + tol):
        raise ValueError("switching mass exceeds source-state occupancy")
    return model.A @ x + model.B @ u_prime


def essm_output(model: EssmModel, x):
    """``(p, p_upper, p_lower)`` in kW."""
    y = model.C @ np.asarray(x, dtype=float)
    return float(y[0]), float(y[1]), float(y[2])


def u_to_uprime(u, x, n_bins):
    src, _ = arrows(n_bins)
    return np.asarray(u, dtype=float) * np.asarray(x, dtype=float)[src]


def uprime_to_u(u_prime, x, n_bins):
    src, _ = arrows(n_bins)
    xs = np.asarray(x, dtype=float)[src]
    u_prime = np.asarray(u_prime, dtype=float)
    out = np.zeros_like(u_prime)
    pos = xs > 0
    out[pos] = u_prime[pos] / xs[pos]
    return out


def fleet_state_vector(fleet, n_bins, soc=None, normalize=True):
    """Occupancy vector of the online fleet, binned by ``soc`` (true SOC by default).

    Empty and fully-charged idle are operating states reported alongside the
    mode, so they follow the fleet's own status; ``soc`` only places agents
    in bins.
    """
    status = fleet.soc
    soc = status if soc is None else np.asarray(soc, dtype=float)
    mode = fleet.mode
    N = n_bins
    on = mode != 0
    if not on.any():
        raise ValueError("no online EVs")
    s_min, s_max = fleet.s_min, fleet.s_max
    width = (s_max - s_min) / N
    b = np.clip(((soc - s_min) / width).astype(np.int64), 0, N - 1)
    idx = np.full(mode.size, -1, dtype=np.int64)
    idx[mode == CM] = b[mode == CM]
    im = mode == IM
    idx[im] = N + b[im]
    idx[im & (status <= s_min)] = 3 * N
    idx[im & (status >= s_max)] = 3 * N + 1
    idx[mode == DM] = 2 * N + b[mode == DM]
    idx[mode == FCM] = 3 * N + 2
    counts = np.bincount(idx[on], minlength=3 * N + 3).astype(float)
    return counts / on.sum() if normalize else counts
