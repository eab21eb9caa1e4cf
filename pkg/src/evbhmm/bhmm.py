"""Bilinear hidden Markov model of the aggregated fleet.

Dynamics::

    x+ = A x + sum_j u_j V_j x + d_0 + sum_j u_j d_j + w
    y  = c0 + c1 x + v

``V_j`` moves mass from its source column to its destination row (zero
column sums for the physical template). The drifts ``d_j`` are the rows
contributed by the constant augmented coordinate; they are zero in the
template and learned during identification.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace

import numpy as np

from .essm import FleetStats, arrows, build_transition, drift_probabilities, n_inputs, n_states


def build_V(n_bins):
    """Structured switching matrices, shape ``(4N+2, 3N+3, 3N+3)``."""
    src, dst = arrows(n_bins)
    n = n_states(n_bins)
    V = np.zeros((src.size, n, n))
    j = np.arange(src.size)
    V[j, src, src] = -1.0
    V[j, dst, src] = 1.0
    return V


def upper_input(n_bins):
    """Extreme broadcast that pushes the fleet toward discharge."""
    N = n_bins
    u = np.zeros(n_inputs(N))
    u[:2 * N] = 1.0
    u[4 * N + 1] = 1.0
    return u


def lower_input(n_bins):
    """Extreme broadcast that pushes the fleet toward charge."""
    N = n_bins
    u = np.zeros(n_inputs(N))
    u[2 * N:4 * N] = 1.0
    u[4 * N] = 1.0
    return u


@dataclass
class ModelParams:
    A: np.ndarray
    V: np.ndarray
    c1: np.ndarray
    c0: float
    sigma_w: np.ndarray
    sigma_v: float
    mu0: np.ndarray
    sigma0: np.ndarray
    drift: np.ndarray = None  # (n_u + 1, n): constant drift then one row per input

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.V = np.asarray(self.V, dtype=float)
        self.c1 = np.asarray(self.c1, dtype=float).ravel()
        self.mu0 = np.asarray(self.mu0, dtype=float).ravel()
        self.sigma_w = np.asarray(self.sigma_w, dtype=float)
        self.sigma0 = np.asarray(self.sigma0, dtype=float)
        self.c0 = float(self.c0)
        self.sigma_v = float(self.sigma_v)
        if self.drift is None:
            self.drift = np.zeros((self.n_u + 1, self.n))
        self.drift = np.asarray(self.drift, dtype=float)
        n, nu = self.n, self.n_u
        if self.A.shape != (n, n) or self.V.shape != (nu, n, n) or self.drift.shape != (nu + 1, n):
            raise ValueError("inconsistent parameter dimensions")

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def n_u(self):
        return self.V.shape[0]

    @property
    def n_bins(self):
        return (self.n - 3) // 3

    def copy(self):
        return replace(self, A=self.A.copy(), V=self.V.copy(), c1=self.c1.copy(),
                       sigma_w=self.sigma_w.copy(), mu0=self.mu0.copy(),
                       sigma0=self.sigma0.copy(), drift=self.drift.copy())

    # regression form: block j of W is [d_j, V_j] with V_0 = A - I
    def to_regression(self):
        n = self.n
        blocks = [np.column_stack([self.drift[0], self.A - np.eye(n)])]
        blocks += [np.column_stack([self.drift[j + 1], self.V[j]]) for j in range(self.n_u)]
        return np.hstack(blocks)

    def with_regression(self, W):
        n, nu = self.n, self.n_u
        W = np.asarray(W).reshape(n, nu + 1, n + 1)
        out = self.copy()
        out.drift = W[:, :, 0].T.copy()
        out.A = W[:, 0, 1:] + np.eye(n)
        out.V = np.transpose(W[:, 1:, 1:], (1, 0, 2)).copy()
        return out

    def transform(self, T):
        """Parameters of the equivalent model in coordinates ``x' = T x``."""
        Ti = np.linalg.inv(T)
        return replace(self, A=T @ self.A @ Ti, V=np.einsum("ab,jbc,cd->jad", T, self.V, Ti),
                       c1=self.c1 @ Ti, sigma_w=T @ self.sigma_w @ T.T, mu0=T @ self.mu0,
                       sigma0=T @ self.sigma0 @ T.T, drift=self.drift @ T.T)

    # serialization: one CSV-ish text bundle, 17 significant digits
    def dumps(self):
        buf = io.StringIO()
        buf.write(f"# bhmm-params n_bins={self.n_bins} n={self.n} n_u={self.n_u}\n")
        for name, arr in self._fields():
            a = np.atleast_1d(np.asarray(arr, dtype=float))
            buf.write(f"{name},{','.join(str(d) for d in a.shape)}\n")
            buf.write(",".join(f"{v:.17g}" for v in a.ravel()) + "\n")
        return buf.getvalue()

    def _fields(self):
        return (("A", self.A), ("V", self.V), ("c1", self.c1), ("c0", self.c0),
                ("sigma_w", self.sigma_w), ("sigma_v", self.sigma_v), ("mu0", self.mu0),
                ("sigma0", self.sigma0), ("drift", self.drift))

    @classmethod
    def loads(cls, text):
        lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        vals = {}
        for head, body in zip(lines[0::2], lines[1::2]):
            name, *shape = head.split(",")
            arr = np.array([float(v) for v in body.split(",")]).reshape([int(s) for s in shape])
            vals[name] = arr
        vals["c0"] = float(vals["c0"][0])
        vals["sigma_v"] = float(vals["sigma_v"][0])
        return cls(**vals)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.loads(fh.read())


def template_params(stats: FleetStats, n_bins, dt, s_min=0.0, s_max=1.0, *,
                    sigma_w=0.0, sigma_v=0.0, mu0=None, sigma0=0.0):
    """Physical bHMM implied by the eSSM construction."""
    q_c, q_d = drift_probabilities(stats, n_bins, dt, s_min, s_max)
    n = n_states(n_bins)
    c1 = stats.n_ev * np.concatenate([-stats.p_ac * np.ones(n_bins), np.zeros(n_bins),
                                      stats.p_ad * np.ones(n_bins), [0.0, 0.0, -stats.p_ac]])
    mu0 = np.full(n, 1.0 / n) if mu0 is None else mu0
    return ModelParams(A=build_transition(n_bins, q_c, q_d), V=build_V(n_bins), c1=c1, c0=0.0,
                       sigma_w=sigma_w * np.eye(n), sigma_v=sigma_v, mu0=mu0,
                       sigma0=sigma0 * np.eye(n))


def augment(params: ModelParams, u):
    """LTV form ``x+ = a x + b`` for input ``u``."""
    u = np.asarray(u, dtype=float)
    a = params.A + np.tensordot(u, params.V, axes=1)
    b = params.drift[0] + u @ params.drift[1:]
    return a, b


def bhmm_step(params: ModelParams, x, u, w=None):
    a, b = augment(params, u)
    x = a @ np.asarray(x, dtype=float) + b
    return x if w is None else x + w


def output(params: ModelParams, x):
    return params.c0 + params.c1 @ np.asarray(x, dtype=float)


def admissible_input(params: ModelParams, u):
    """Largest input not exceeding ``u`` that keeps template dynamics nonnegative.

    A source state can only hand over the mass that its self-loop retains, so
    outgoing fractions from state ``i`` are scaled to sum to at most ``A_ii``.
    """
    u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
    src, _ = arrows(params.n_bins)
    keep = np.diag(params.A)[src]
    total = np.zeros(params.n)
    np.add.at(total, src, u)
    scale = np.ones(params.n)
    over = total > np.diag(params.A)
    scale[over] = np.diag(params.A)[over] / total[over]
    return np.minimum(u * scale[src], keep)


def mean_rollout(params: ModelParams, mu_start, u_sequence, return_states=False):
    """Noise-free prediction of power for each input in ``u_sequence``."""
    mu = np.asarray(mu_start, dtype=float)
    U = np.atleast_2d(np.asarray(u_sequence, dtype=float))
    if U.size == 0:
        return (np.zeros(0), np.zeros((0, params.n))) if return_states else np.zeros(0)
    p = np.empty(U.shape[0])
    xs = np.empty((U.shape[0], params.n))
    for k, u in enumerate(U):
        mu = bhmm_step(params, mu, u)
        xs[k] = mu
        p[k] = output(params, mu)
    return (p, xs) if return_states else p


def flexibility_rollout(params: ModelParams, mu_start, horizon):
    """Predicted ``(p_upper, p_lower)`` sequences under the extreme broadcasts."""
    if horizon <= 0:
        return np.zeros(0), np.zeros(0)
    up = mean_rollout(params, mu_start, np.tile(upper_input(params.n_bins), (horizon, 1)))
    lo = mean_rollout(params, mu_start, np.tile(lower_input(params.n_bins), (horizon, 1)))
    return up, lo
