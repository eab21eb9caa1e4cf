"""EM identification of the bilinear model from aggregated power only.

Trajectories are processed as a batch: every array carries a leading
trajectory axis ``L``. The state transition for input ``u`` is written in
regression form ``x+ - x = W (u~ kron z) + w`` with ``u~ = [1, u]`` and
``z = [1, x]``, which makes the M-step a single linear solve.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .bhmm import ModelParams, build_V
from .essm import FleetStats, build_transition, drift_probabilities, n_states

log = logging.getLogger(__name__)

LOG2PI = np.log(2.0 * np.pi)


class IdentificationError(RuntimeError):
    pass


class PersistentExcitationError(IdentificationError):
    def __init__(self, min_eig, threshold):
        super().__init__(f"information matrix not persistently exciting: "
                         f"min eigenvalue {min_eig:.3e} <= {threshold:.1e}")
        self.min_eig = min_eig


# --------------------------------------------------------------------------- data


@dataclass
class TrajectoryDataset:
    """``L`` windows of ``K`` inputs and ``K+1`` aggregated powers (kW)."""

    U: np.ndarray  # (L, K, n_u)
    Y: np.ndarray  # (L, K+1)
    t_start: np.ndarray = None  # (L,) seconds
    dt: float = 15.0

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=float)
        self.Y = np.asarray(self.Y, dtype=float)
        if self.U.ndim == 2:
            self.U = self.U[None]
        if self.Y.ndim == 1:
            self.Y = self.Y[None]
        L, K, _ = self.U.shape
        if L < 1 or self.Y.shape != (L, K + 1):
            raise ValueError("dataset needs L >= 1 and K+1 outputs per K inputs")
        if self.t_start is None:
            self.t_start = np.zeros(L)

    @property
    def L(self):
        return self.U.shape[0]

    @property
    def K(self):
        return self.U.shape[1]

    @property
    def n_u(self):
        return self.U.shape[2]

    def subset(self, idx):
        idx = np.atleast_1d(idx)
        return TrajectoryDataset(self.U[idx], self.Y[idx], self.t_start[idx], self.dt)

    def to_csv_dir(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        header = ["k"] + [f"u_{j + 1}" for j in range(self.n_u)] + ["p_kw"]
        for l in range(self.L):
            with open(d / f"traj_{l:04d}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(header)
                for k in range(self.K + 1):
                    us = [repr(float(v)) for v in self.U[l, k]] if k < self.K else [""] * self.n_u
                    w.writerow([k] + us + [repr(float(self.Y[l, k]))])

    @classmethod
    def from_csv_dir(cls, directory, dt=15.0):
        files = sorted(Path(directory).glob("traj_*.csv"))
        if not files:
            raise FileNotFoundError(f"no trajectory files in {directory}")
        Us, Ys = [], []
        for fp in files:
            with open(fp, newline="") as fh:
                rows = list(csv.reader(fh))
            body = rows[1:]
            Ys.append([float(r[-1]) for r in body])
            Us.append([[float(v) for v in r[1:-1]] for r in body[:-1]])
        return cls(np.array(Us), np.array(Ys), dt=dt)


def build_dataset(history, live, end, K, L=None, dt=15.0):
    """Windows ending at step ``end`` from historical days plus the live day.

    ``history`` and ``live`` are ``(u, p)`` pairs or objects with ``u`` and
    ``p`` arrays, where ``u[t]`` is applied between ``p[t]`` and ``p[t+1]``.
    The live window is the last trajectory.
    """
    days = list(history) + [live]
    if L is not None:
        if L > len(days):
            raise ValueError(f"need {L} trajectories, only {len(days)} days available")
        days = days[len(days) - L:]
    start = end - K
    if start < 0:
        raise ValueError("insufficient history for window")
    U, Y = [], []
    for d in days:
        u, p = (d.u, d.p) if hasattr(d, "u") else d
        if len(p) <= end:
            raise ValueError("insufficient history for window")
        U.append(u[start:end])
        Y.append(p[start:end + 1])
    return TrajectoryDataset(np.array(U), np.array(Y), np.full(len(days), start * dt), dt)


# --------------------------------------------------------------------------- E-step


@dataclass
class FilterResult:
    mu_f: np.ndarray     # (L, K+1, n)
    P_f: np.ndarray      # (L, K+1, n, n)
    mu_p: np.ndarray     # (L, K+1, n)   one-step predictions, [0] = prior
    P_p: np.ndarray      # (L, K+1, n, n)
    a: np.ndarray        # (L, K, n, n)
    b: np.ndarray        # (L, K, n)
    innov: np.ndarray    # (L, K+1)
    s: np.ndarray        # (L, K+1) innovation variances
    loglik: np.ndarray   # (L,)


@dataclass
class SmoothedPosterior:
    mu: np.ndarray       # (L, K+1, n)
    sigma: np.ndarray    # (L, K+1, n, n)
    cross: np.ndarray    # (L, K, n, n)  Cov(x_k, x_{k+1})
    loglik: np.ndarray   # (L,)

    def __getitem__(self, l):
        return SmoothedPosterior(self.mu[l], self.sigma[l], self.cross[l], self.loglik[l])


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def ltv_matrices(params: ModelParams, U):
    """Per-step ``(a_k, b_k)`` for a batch of input sequences ``U`` (L, K, n_u)."""
    a = params.A + np.einsum("lkj,jab->lkab", U, params.V)
    b = params.drift[0] + U @ params.drift[1:]
    return a, b


def kalman_forward(params: ModelParams, U, Y):
    """Kalman filter over each trajectory with exact log-likelihood."""
    U = np.asarray(U, dtype=float)
    Y = np.asarray(Y, dtype=float)
    single = Y.ndim == 1
    if single:
        U, Y = U[None], Y[None]
    L, K1 = Y.shape
    K = K1 - 1
    n = params.n
    c = params.c1
    a, b = ltv_matrices(params, U.reshape(L, K, params.n_u))
    mu_f = np.empty((L, K1, n))
    P_f = np.empty((L, K1, n, n))
    mu_p = np.empty((L, K1, n))
    P_p = np.empty((L, K1, n, n))
    innov = np.empty((L, K1))
    svar = np.empty((L, K1))
    mu = np.broadcast_to(params.mu0, (L, n)).copy()
    P = np.broadcast_to(params.sigma0, (L, n, n)).copy()
    for k in range(K1):
        mu_p[:, k] = mu
        P_p[:, k] = P
        Pc = P @ c
        s = Pc @ c + params.sigma_v
        if np.any(~(s > 0)):
            bad = int(np.flatnonzero(~(s > 0))[0])
            raise IdentificationError(f"nonpositive innovation variance at step {k}, trajectory {bad}")
        e = Y[:, k] - params.c0 - mu @ c
        g = Pc / s[:, None]
        mu = mu + g * e[:, None]
        P = _sym(P - g[:, :, None] * Pc[:, None, :])
        mu_f[:, k] = mu
        P_f[:, k] = P
        innov[:, k] = e
        svar[:, k] = s
        if k < K:
            ak = a[:, k]
            mu = np.einsum("lab,lb->la", ak, mu) + b[:, k]
            P = _sym(ak @ P @ np.swapaxes(ak, 1, 2) + params.sigma_w)
    ll = -0.5 * np.sum(LOG2PI + np.log(svar) + innov ** 2 / svar, axis=1)
    res = FilterResult(mu_f, P_f, mu_p, P_p, a, b, innov, svar, ll)
    return res


def _batched_solve(P, B):
    """Solve ``P X = B`` for a batch of symmetric matrices, regularizing if singular."""
    try:
        return np.linalg.solve(P, B)
    except np.linalg.LinAlgError:
        log.warning("singular predicted covariance; adding 1e-10 I")
        return np.linalg.solve(P + 1e-10 * np.eye(P.shape[-1]), B)


def rts_smoother(filt: FilterResult) -> SmoothedPosterior:
    L, K1, n = filt.mu_f.shape
    K = K1 - 1
    mu = np.empty_like(filt.mu_f)
    S = np.empty_like(filt.P_f)
    cross = np.empty((L, K, n, n))
    mu[:, K] = filt.mu_f[:, K]
    S[:, K] = filt.P_f[:, K]
    for k in range(K - 1, -1, -1):
        ak = filt.a[:, k]
        Pf = filt.P_f[:, k]
        Pp = filt.P_p[:, k + 1]
        # J = Pf a^T Pp^{-1}  <=>  Pp J^T = a Pf
        J = np.swapaxes(_batched_solve(Pp, ak @ Pf), 1, 2)
        mu[:, k] = filt.mu_f[:, k] + np.einsum("lab,lb->la", J, mu[:, k + 1] - filt.mu_p[:, k + 1])
        S[:, k] = _sym(Pf + J @ (S[:, k + 1] - Pp) @ np.swapaxes(J, 1, 2))
        cross[:, k] = J @ S[:, k + 1]
    return SmoothedPosterior(mu, S, cross, filt.loglik)


def e_step(params: ModelParams, data: TrajectoryDataset) -> SmoothedPosterior:
    return rts_smoother(kalman_forward(params, data.U, data.Y))


def log_likelihood(params: ModelParams, data: TrajectoryDataset) -> float:
    return float(np.sum(kalman_forward(params, data.U, data.Y).loglik))


# --------------------------------------------------------------------------- M-step


@dataclass
class SufficientStats:
    M: np.ndarray        # information matrix  sum (u~ u~^T) kron G
    R: np.ndarray        # sum u~^T kron H
    S_dd: np.ndarray     # sum E[dx dx^T]
    n_trans: int         # L K
    n_obs: int           # L (K+1)


def _augmented_inputs(U):
    L, K, _ = U.shape
    return np.concatenate([np.ones((L, K, 1)), U], axis=2)


def sufficient_stats(post: SmoothedPosterior, data: TrajectoryDataset) -> SufficientStats:
    mu, S, C = post.mu, post.sigma, post.cross
    L, K1, n = mu.shape
    K = K1 - 1
    T = L * K
    ut = _augmented_inputs(data.U).reshape(T, -1)
    m = ut.shape[1]
    mk = mu[:, :-1].reshape(T, n)
    dm = (mu[:, 1:] - mu[:, :-1]).reshape(T, n)
    Sk = S[:, :-1].reshape(T, n, n)
    Ck = C.reshape(T, n, n)
    # G = E[z z^T], z = [1, x_k]
    G = np.empty((T, n + 1, n + 1))
    G[:, 0, 0] = 1.0
    G[:, 0, 1:] = mk
    G[:, 1:, 0] = mk
    G[:, 1:, 1:] = Sk + mk[:, :, None] * mk[:, None, :]
    # H = E[dx z^T]
    H = np.empty((T, n, n + 1))
    H[:, :, 0] = dm
    H[:, :, 1:] = np.swapaxes(Ck, 1, 2) - Sk + dm[:, :, None] * mk[:, None, :]
    uu = (ut[:, :, None] * ut[:, None, :]).reshape(T, m * m)
    M = (uu.T @ G.reshape(T, -1)).reshape(m, m, n + 1, n + 1)
    M = M.transpose(0, 2, 1, 3).reshape(m * (n + 1), m * (n + 1))
    R = (ut.T @ H.reshape(T, -1)).reshape(m, n, n + 1).transpose(1, 0, 2).reshape(n, m * (n + 1))
    Sn = S[:, 1:].reshape(T, n, n)
    S_dd = np.sum(Sn - Ck - np.swapaxes(Ck, 1, 2) + Sk, axis=0) + dm.T @ dm
    return SufficientStats(_sym(M), R, _sym(S_dd), T, L * K1)


def pe_check(post: SmoothedPosterior, data: TrajectoryDataset, stats=None) -> float:
    """Smallest eigenvalue of the information matrix normalized by ``L (K+1)``."""
    st = sufficient_stats(post, data) if stats is None else stats
    return float(np.linalg.eigvalsh(st.M / st.n_obs)[0])


def _floor_psd(M, floor=1e-12):
    M = _sym(M)
    w, Q = np.linalg.eigh(M)
    if w[0] >= floor:
        return M
    return _sym((Q * np.maximum(w, floor)) @ Q.T)


def m_step(post: SmoothedPosterior, data: TrajectoryDataset, params: ModelParams,
           pe_threshold=0.0, stats=None, floor=1e-12):
    """Closed-form parameter update with ``c1`` held at ``params.c1``.

    Returns ``(new_params, min_eig)`` where ``min_eig`` is the normalized
    information-matrix eigenvalue used as the excitation diagnostic.
    """
    st = sufficient_stats(post, data) if stats is None else stats
    min_eig = float(np.linalg.eigvalsh(st.M / st.n_obs)[0])
    if not min_eig > pe_threshold:
        raise PersistentExcitationError(min_eig, pe_threshold)
    try:
        cf = linalg.cho_factor(st.M, lower=True, check_finite=False)
        W = linalg.cho_solve(cf, st.R.T, check_finite=False).T
    except linalg.LinAlgError:
        W = linalg.solve(st.M, st.R.T, assume_a="sym").T
    Q = st.S_dd - W @ st.R.T - st.R @ W.T + W @ st.M @ W.T
    sigma_w = _floor_psd(Q / st.n_trans, floor)

    mu, S = post.mu, post.sigma
    L = mu.shape[0]
    c = params.c1
    y = data.Y
    cmu = mu @ c
    c0 = float(np.mean(y - cmu))
    sigma_v = float(np.mean(np.einsum("i,lkij,j->lk", c, S, c) + (y - c0 - cmu) ** 2))
    mu0 = mu[:, 0].mean(axis=0)
    d0 = mu[:, 0] - mu0
    sigma0 = _floor_psd(S[:, 0].mean(axis=0) + d0.T @ d0 / L, floor)

    new = params.with_regression(W)
    new.c0, new.sigma_v, new.mu0, new.sigma0, new.sigma_w = c0, max(sigma_v, floor), mu0, sigma0, sigma_w
    return new, min_eig


# --------------------------------------------------------------------------- ELBO


def _logdet(M):
    sign, ld = np.linalg.slogdet(M)
    if np.any(sign <= 0):
        return -np.inf
    return ld


def expected_complete_loglik(params: ModelParams, post: SmoothedPosterior,
                             data: TrajectoryDataset, stats=None) -> float:
    """``E_q[log p(X, Y; params)]`` under a fixed Gaussian posterior ``q``."""
    st = sufficient_stats(post, data) if stats is None else stats
    mu, S = post.mu, post.sigma
    L, K1, n = mu.shape
    W = params.to_regression()
    Q = st.S_dd - W @ st.R.T - st.R @ W.T + W @ st.M @ W.T
    total = -0.5 * st.n_trans * (n * LOG2PI + _logdet(params.sigma_w))
    total -= 0.5 * np.trace(np.linalg.solve(params.sigma_w, Q))
    d0 = mu[:, 0] - params.mu0
    E0 = S[:, 0].sum(axis=0) + d0.T @ d0
    total -= 0.5 * L * (n * LOG2PI + _logdet(params.sigma0))
    total -= 0.5 * np.trace(np.linalg.solve(params.sigma0, E0))
    c = params.c1
    r = data.Y - params.c0 - mu @ c
    ev = np.einsum("i,lkij,j->", c, S, c) + np.sum(r ** 2)
    total -= 0.5 * (st.n_obs * (LOG2PI + np.log(params.sigma_v)) + ev / params.sigma_v)
    return float(total)


def posterior_entropy(post: SmoothedPosterior) -> float:
    """Entropy of the Gauss-Markov smoothing distribution over all states."""
    mu, S, C = post.mu, post.sigma, post.cross
    L, K1, n = mu.shape
    ld = np.sum(_logdet(S[:, 0]))
    if K1 > 1:
        Sk = S[:, :-1]
        cond = S[:, 1:] - np.swapaxes(C, -1, -2) @ np.linalg.solve(Sk, C)
        ld += np.sum(_logdet(_sym(cond)))
    return float(0.5 * (L * K1 * n * (1.0 + LOG2PI) + ld))


def elbo(params: ModelParams, post: SmoothedPosterior, data: TrajectoryDataset, stats=None) -> float:
    return expected_complete_loglik(params, post, data, stats) + posterior_entropy(post)


# --------------------------------------------------------------------------- init / EM


def default_stats(dt=15.0):
    """Population-average EV parameters (charger mixture mean, mid-range eta and Q)."""
    p = 6.2 * 0.8525 + 7.2 * 0.138 + 9.6 * 0.0021 + 11.5 * 0.0053 + 19.2 * 0.0021
    return FleetStats(n_ev=1.0, eta=0.915, capacity=25.0, p_ac=p, p_ad=p)


def c1_template(n_bins, scale):
    N = n_bins
    return scale * np.concatenate([-np.ones(N), np.zeros(N), np.ones(N), [0.0, 0.0, -1.0]])


def init_params(data: TrajectoryDataset, n_bins, rng, dt=None):
    """Structured random initialization.

    ``c1`` follows the charge/idle/discharge sign template scaled by a draw
    between the smallest and largest observed power magnitude; the
    transition part starts from population-average drift.
    """
    dt = data.dt if dt is None else dt
    n = n_states(n_bins)
    mag = np.abs(data.Y)
    lo, hi = float(mag.min()), float(mag.max())
    eta = rng.uniform(lo, max(hi, lo + 1.0))
    q_c, q_d = drift_probabilities(default_stats(dt), n_bins, dt)
    beta = rng.uniform(0.0, 1.0, size=3)
    return ModelParams(A=build_transition(n_bins, q_c, q_d), V=build_V(n_bins),
                       c1=c1_template(n_bins, eta), c0=0.0,
                       sigma_w=beta[0] * np.eye(n), sigma_v=beta[1], mu0=rng.uniform(0, 1, n),
                       sigma0=beta[2] * np.eye(n))


@dataclass
class FitReport:
    loglik: list = field(default_factory=list)
    min_eig: list = field(default_factory=list)
    elapsed: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    error: str = ""
    wall_time: float = 0.0

    def to_csv(self, path, with_timing=True):
        """One row per likelihood entry; ``min_eig`` is blank for the initial guess."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("iter", "loglik", "min_eig") + (("elapsed_s",) if with_timing else ()))
            for i, ll in enumerate(self.loglik):
                me = repr(float(self.min_eig[i - 1])) if i > 0 else ""
                row = (i, repr(float(ll)), me)
                if with_timing:
                    row += (repr(float(self.elapsed[i])),)
                w.writerow(row)

    @classmethod
    def from_csv(cls, path):
        rep = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rep.loglik.append(float(row["loglik"]))
                if row["min_eig"]:
                    rep.min_eig.append(float(row["min_eig"]))
                if row.get("elapsed_s"):
                    rep.elapsed.append(float(row["elapsed_s"]))
        rep.iterations = len(rep.loglik) - 1
        return rep


def em_fit(data: TrajectoryDataset, params0: ModelParams, eps_min=None, n_iter_max=100,
           rel_tol=1e-4, pe_threshold=0.0, callback=None):
    """Alternate E- and M-steps until the likelihood gain drops to ``eps_min``.

    ``loglik[i]`` in the report is the likelihood of the parameters after
    ``i`` updates (entry 0 is the initial guess). ``min_eig[i]`` is the
    excitation diagnostic of update ``i + 1``.
    """
    t0 = time.perf_counter()
    rep = FitReport()
    params = params0
    try:
        post = e_step(params, data)
    except IdentificationError as exc:
        rep.error = str(exc)
        rep.wall_time = time.perf_counter() - t0
        raise
    ll = float(np.sum(post.loglik))
    rep.loglik.append(ll)
    rep.elapsed.append(time.perf_counter() - t0)
    if eps_min is None:
        eps_min = rel_tol * abs(ll)
    for it in range(n_iter_max):
        try:
            new, me = m_step(post, data, params, pe_threshold=pe_threshold)
            new_post = e_step(new, data)
        except PersistentExcitationError as exc:
            rep.error = str(exc)
            rep.wall_time = time.perf_counter() - t0
            if it == 0:
                raise
            break
        except IdentificationError as exc:
            rep.error = str(exc)
            break
        new_ll = float(np.sum(new_post.loglik))
        rep.min_eig.append(me)
        rep.loglik.append(new_ll)
        rep.elapsed.append(time.perf_counter() - t0)
        rep.iterations = it + 1
        eps = new_ll - ll
        params, post, ll = new, new_post, new_ll
        if callback is not None:
            callback(it, params, ll)
        if eps <= eps_min:
            rep.converged = True
            break
    rep.wall_time = time.perf_counter() - t0
    return params, rep, post
