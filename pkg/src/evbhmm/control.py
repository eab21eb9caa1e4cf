"""Frequency regulation with an aggregated EV fleet.

Units: frequency in Hz, grid power in MW, fleet power in kW. Positive
regulation power means more generation (or less consumption) is requested.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .bhmm import ModelParams, lower_input, upper_input
from .essm import n_inputs

log = logging.getLogger(__name__)


@dataclass
class RegulationConfig:
    f_deadband: float = 0.1       # Hz
    f_target: float = 0.05        # Hz, where the bias-factor update aims the next deviation
    h: float = 120.0              # MW s / Hz
    d: float = 20.0               # MW / Hz
    ramp: float = 50.0            # MW / min
    cg_min: float = 0.0
    cg_max: float = 500.0
    dt: float = 15.0              # s
    n_p: int = 12
    q_w: float = 1.0
    r_w: float = 1e-6
    band_weight: float = 1e6
    mpc_tol: float = 1e-8
    mpc_max_iter: int = 500
    lambda_iters: int = 30
    swing: str = "zoh"            # or "euler"
    err_refit: float = 0.05

    def validate(self):
        for name in ("f_deadband", "h", "d", "ramp", "dt", "q_w", "r_w", "band_weight"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.f_target <= self.f_deadband:
            raise ValueError("f_target must lie in [0, f_deadband]")
        if self.cg_min > self.cg_max:
            raise ValueError("cg_min > cg_max")
        if self.n_p < 1:
            raise ValueError("n_p must be >= 1")
        if self.swing not in ("zoh", "euler"):
            raise ValueError("swing must be 'zoh' or 'euler'")
        return self

    @property
    def ramp_step(self):
        """Largest CG change per control interval (MW)."""
        return self.ramp * self.dt / 60.0

    @property
    def lambda_max(self):
        return 2.0 * (self.h / self.dt + self.d)


@dataclass
class GridState:
    delta_f: float = 0.0
    p_cg: float = 0.0
    p_load: float = 0.0
    p_wind: float = 0.0
    lam: float = 0.0
    inertia: float = 120.0
    damping: float = 20.0


@dataclass
class DispatchDecision:
    dp_ev: float   # kW
    dp_cg: float   # MW
    p_ref: float   # kW
    clamped: bool = False


# --------------------------------------------------------------------------- frequency


def swing(delta_f, p_imbalance, h, d, dt, method="zoh"):
    """Next frequency deviation of ``h dF/dt = P - d F`` over one interval."""
    if method == "euler" or d == 0:
        return delta_f + (dt / h) * (p_imbalance - d * delta_f)
    if method != "zoh":
        raise ValueError(f"unknown swing discretization {method!r}")
    phi = math.exp(-d * dt / h)
    return phi * delta_f + (1.0 - phi) * p_imbalance / d


def swing_step(grid: GridState, p_imbalance, dt, method="zoh") -> GridState:
    return replace(grid, delta_f=swing(grid.delta_f, p_imbalance, grid.inertia, grid.damping,
                                       dt, method))


def pi_regulation(delta_f, lam, f_deadband):
    """Dead-band proportional law ``lam (F - sign(F) eps)``; zero inside the band."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if abs(delta_f) <= f_deadband:
        return 0.0
    return lam * (delta_f - math.copysign(f_deadband, delta_f))


def regulation_demand(delta_f, lam, f_deadband):
    """Requested generation change (MW) for a deviation ``delta_f``; opposes the deviation."""
    return -pi_regulation(delta_f, lam, f_deadband)


class DeadbeatBisection:
    """Bias factor that lands the forecast deviation on ``config.f_target``.

    The forecast ``F1`` is one swing step ahead with the current imbalance
    estimate. ``lam`` is bisected on ``[0, lambda_max]`` so that delivering
    ``regulation_demand(F1, lam)`` over the same step leaves ``|F+| = f_target``.
    """

    def __call__(self, grid: GridState, config: RegulationConfig, p_imbalance=0.0):
        step = lambda p: swing(grid.delta_f, p, grid.inertia, grid.damping, config.dt,
                               config.swing)
        f1 = step(p_imbalance)
        if abs(f1) <= config.f_deadband:
            return grid.lam
        sgn = math.copysign(1.0, f1)
        # signed distance past the target; decreasing in lam
        excess = lambda lam: sgn * step(p_imbalance + regulation_demand(f1, lam,
                                                                        config.f_deadband)) \
            - config.f_target
        lo, hi = 0.0, config.lambda_max
        if excess(hi) > 0:
            return hi
        for _ in range(config.lambda_iters):
            mid = 0.5 * (lo + hi)
            if excess(mid) > 0:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)


def update_lambda(grid: GridState, config: RegulationConfig, p_imbalance=0.0, strategy=None):
    return (strategy or DeadbeatBisection())(grid, config, p_imbalance)


# --------------------------------------------------------------------------- dispatch


def dispatch(dp_d, p_pred, p_upper, p_lower, grid: GridState, config: RegulationConfig):
    """Split the requested change ``dp_d`` (MW) between the fleet and conventional units.

    Fleet quantities are in kW. The fleet is used first within its predicted
    headroom; the remainder goes to conventional generation, limited by ramp
    and capacity.
    """
    clamped = False
    if not p_lower <= p_pred <= p_upper:
        log.warning("predicted power %.1f kW outside band [%.1f, %.1f]; clamping",
                    p_pred, p_lower, p_upper)
        p_pred = min(max(p_pred, p_lower), p_upper)
        clamped = True
    up_room = (p_upper - p_pred) / 1000.0
    lo_room = (p_lower - p_pred) / 1000.0
    dp_cg = 0.0
    if dp_d > 0:
        if up_room > dp_d:
            dp_ev = dp_d
        else:
            dp_ev = up_room
            dp_cg = min(config.cg_max - grid.p_cg, config.ramp_step, dp_d - dp_ev)
    else:
        if lo_room < dp_d:
            dp_ev = dp_d
        else:
            dp_ev = lo_room
            dp_cg = max(config.cg_min - grid.p_cg, -config.ramp_step, dp_d - dp_ev)
    return DispatchDecision(dp_ev=dp_ev * 1000.0, dp_cg=dp_cg, p_ref=p_pred + dp_ev * 1000.0,
                            clamped=clamped)


# --------------------------------------------------------------------------- MPC


@dataclass
class MpcResult:
    u: np.ndarray
    p_pred: float          # kW, model power at the returned input
    objective: float
    kkt: float             # projected-gradient residual
    band_violation: bool
    iterations: int


def bhmm_affine(params: ModelParams, mu):
    """Coefficients of the one-step power ``p0 + g . u`` (kW) from state ``mu``."""
    mu = np.asarray(mu, dtype=float)
    c = params.c1
    p0 = params.c0 + c @ (params.A @ mu + params.drift[0])
    g = np.einsum("a,jab,b->j", c, params.V, mu) + params.drift[1:] @ c
    return float(p0), g


class _Objective:
    """``q (p - r)^2 + w [(p - hi)+^2 + (lo - p)+^2] + r_w |u|^2`` with ``p = p0 + g.u``, in MW."""

    def __init__(self, p0, g, p_ref, lo, hi, q, r_w, w):
        self.p0, self.g, self.ref, self.lo, self.hi = p0, g, p_ref, lo, hi
        self.q, self.r_w, self.w = q, r_w, w

    def dphi(self, s):
        p = self.p0 + s
        return 2 * self.q * (p - self.ref) + 2 * self.w * (max(p - self.hi, 0.0)
                                                           - max(self.lo - p, 0.0))

    def value(self, u):
        p = self.p0 + self.g @ u
        return (self.q * (p - self.ref) ** 2 + self.w * (max(p - self.hi, 0.0) ** 2
                                                         + max(self.lo - p, 0.0) ** 2)
                + self.r_w * (u @ u))

    def grad(self, u):
        return self.dphi(self.g @ u) * self.g + 2 * self.r_w * u

    def kkt(self, u):
        return float(np.max(np.abs(u - np.clip(u - self.grad(u), 0.0, 1.0)), initial=0.0))


def _solve_scalar(obj: _Objective):
    """Exact minimizer through the KKT form ``u = clip(theta g, 0, 1)``.

    ``theta + phi'(g.u(theta)) / (2 r_w)`` is strictly increasing in
    ``theta``; bisection finds the active set, then a closed-form solve on
    that set removes the bisection error.
    """
    g = obj.g
    u_of = lambda th: np.clip(th * g, 0.0, 1.0)
    F = lambda th: th + obj.dphi(g @ u_of(th)) / (2 * obj.r_w)
    s_lo, s_hi = np.minimum(g, 0).sum(), np.maximum(g, 0).sum()
    bound = max(abs(obj.dphi(s_lo)), abs(obj.dphi(s_hi))) / (2 * obj.r_w) + 1.0
    lo, hi = -bound, bound
    it = 0
    for it in range(1, 400):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if F(mid) > 0:
            hi = mid
        else:
            lo = mid
    th = 0.5 * (lo + hi)
    u = u_of(th)
    # closed-form polish on the identified pieces
    tg = th * g
    free = (tg > 0) & (tg < 1)
    s_c = g[tg >= 1].sum()
    G = g[free] @ g[free]
    p = obj.p0 + g @ u
    a, rhs = obj.q, obj.q * obj.ref
    if p > obj.hi:
        a, rhs = a + obj.w, rhs + obj.w * obj.hi
    elif p < obj.lo:
        a, rhs = a + obj.w, rhs + obj.w * obj.lo
    th2 = (rhs - a * (obj.p0 + s_c)) / (obj.r_w + a * G)
    tg2 = th2 * g
    if np.array_equal((tg2 > 0) & (tg2 < 1), free) and np.array_equal(tg2 >= 1, tg >= 1):
        u2 = u_of(th2)
        if obj.value(u2) <= obj.value(u):
            u = u2
    return u, it


def _solve_pg(obj: _Objective, tol, max_iter, u0=None):
    """Projected gradient; the step along each projected direction is exact."""
    g = obj.g
    u = np.zeros_like(g) if u0 is None else np.clip(np.asarray(u0, dtype=float), 0.0, 1.0)
    lip = 2 * obj.q * (g @ g) + 2 * obj.r_w
    it = 0
    for it in range(1, max_iter + 1):
        if obj.kkt(u) <= tol:
            break
        d = np.clip(u - obj.grad(u) / lip, 0.0, 1.0) - u
        gd, ud, dd = g @ d, u @ d, d @ d
        if dd == 0:
            break
        s0 = g @ u
        slope = lambda t: obj.dphi(s0 + t * gd) * gd + 2 * obj.r_w * (ud + t * dd)
        if slope(1.0) <= 0:
            t = 1.0
        else:
            lo, hi = 0.0, 1.0
            for _ in range(100):
                mid = 0.5 * (lo + hi)
                if slope(mid) > 0:
                    hi = mid
                else:
                    lo = mid
            t = 0.5 * (lo + hi)
        u = np.clip(u + t * d, 0.0, 1.0)
    return u, it


def solve_tracking_qp(p0, g, p_ref, p_lower, p_upper, config: RegulationConfig, method="scalar"):
    """Box-constrained tracking problem for a fleet power affine in ``u`` (kW in and out)."""
    scale = 1e-3
    obj = _Objective(p0 * scale, np.asarray(g, dtype=float) * scale, p_ref * scale,
                     p_lower * scale, p_upper * scale, config.q_w, config.r_w, config.band_weight)
    if method == "scalar":
        u, it = _solve_scalar(obj)
    elif method == "pg":
        u, it = _solve_pg(obj, config.mpc_tol, config.mpc_max_iter)
    else:
        raise ValueError(f"unknown MPC method {method!r}")
    p = obj.p0 + obj.g @ u
    kkt = obj.kkt(u)
    if method == "scalar" and kkt > 1e-6:
        log.warning("MPC KKT residual %.2e above 1e-6", kkt)
    viol = bool(p > obj.hi + 1e-9 or p < obj.lo - 1e-9)
    return MpcResult(u=u, p_pred=p / scale, objective=obj.value(u), kkt=kkt,
                     band_violation=viol, iterations=it)


def mpc_solve(params: ModelParams, mu_now, p_ref, p_lower, p_upper, config: RegulationConfig,
              method="scalar") -> MpcResult:
    """One-step tracking control for the identified model from state ``mu_now``."""
    p0, g = bhmm_affine(params, mu_now)
    return solve_tracking_qp(p0, g, p_ref, p_lower, p_upper, config, method)


def predict_band(params: ModelParams, mu_now):
    """Next-step ``(p, p_upper, p_lower)`` in kW.

    Doing nothing (``u = 0``) is always an admissible broadcast, so the band
    is widened to contain the nominal prediction when a learned model puts
    an extreme on the wrong side of it.
    """
    p0, g = bhmm_affine(params, mu_now)
    N = params.n_bins
    return p0, max(p0, p0 + g @ upper_input(N)), min(p0, p0 + g @ lower_input(N))


def predictive_std(params: ModelParams, sigma_now, u):
    """Standard deviation (kW) of the next observed power under input ``u``."""
    from .bhmm import augment
    a, _ = augment(params, u)
    c = params.c1
    return float(np.sqrt(max(c @ (a @ sigma_now @ a.T + params.sigma_w) @ c + params.sigma_v, 0.0)))


# --------------------------------------------------------------------------- broadcast


_HEADER = struct.Struct("<BBxx")


def encode_broadcast(u, seq=0):
    """``uint8 N, uint8 seq, 2 pad bytes`` then ``4N+2`` little-endian float32."""
    u = np.asarray(u, dtype=float).ravel()
    n_u = u.size
    if n_u < 6 or (n_u - 2) % 4:
        raise ValueError(f"invalid input length {n_u}")
    if np.any(~((u >= 0) & (u <= 1))):
        raise ValueError("broadcast entries must lie in [0, 1]")
    N = (n_u - 2) // 4
    if N > 255:
        raise ValueError("too many bins for the header")
    return _HEADER.pack(N, seq % 256) + u.astype("<f4").tobytes()


def decode_broadcast(payload, n_bins=None):
    """Inverse of :func:`encode_broadcast`; returns ``(u, seq)``."""
    if len(payload) < _HEADER.size:
        raise ValueError("payload shorter than header")
    N, seq = _HEADER.unpack_from(payload)
    if n_bins is not None and N != n_bins:
        raise ValueError(f"payload carries N={N}, expected {n_bins}")
    n_u = n_inputs(N)
    if len(payload) != _HEADER.size + 4 * n_u:
        raise ValueError(f"payload length {len(payload)} does not match N={N}")
    u = np.frombuffer(payload, dtype="<f4", offset=_HEADER.size).astype(float)
    return u, seq


# --------------------------------------------------------------------------- profiles


@dataclass
class GridProfiles:
    """Wind and load time series (MW), linearly interpolated in time (s)."""

    t_s: np.ndarray
    p_wind: np.ndarray
    p_load: np.ndarray

    def __post_init__(self):
        self.t_s = np.asarray(self.t_s, dtype=float)
        self.p_wind = np.asarray(self.p_wind, dtype=float)
        self.p_load = np.asarray(self.p_load, dtype=float)
        if not (self.t_s.shape == self.p_wind.shape == self.p_load.shape) or self.t_s.size < 2:
            raise ValueError("profile columns must have equal length >= 2")
        if np.any(np.diff(self.t_s) <= 0):
            raise ValueError("profile times must increase")

    def covers(self, t0, t1):
        return self.t_s[0] <= t0 and t1 <= self.t_s[-1]

    def at(self, t):
        if not self.t_s[0] <= t <= self.t_s[-1]:
            raise ValueError(f"time {t} s outside profile coverage")
        return float(np.interp(t, self.t_s, self.p_wind)), float(np.interp(t, self.t_s, self.p_load))

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("t_s,p_wind_mw,p_load_mw\n")
            for row in zip(self.t_s, self.p_wind, self.p_load):
                fh.write(",".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def from_csv(cls, path):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1], data[:, 2])


def synthetic_profiles(t_start, duration, seed, step=15.0, load_base=300.0, wind_base=120.0,
                       wind_amps=(3.0, 4.0, 5.0), load_amp=4.0, periods_min=(20, 60, 180),
                       noise=3.0, lull_rate=1.0, lull_depth=(14.0, 18.0), lull_minutes=(1.0, 4.0)):
    """Synthetic wind and load (MW) sampled every ``step`` seconds.

    Wind is three sinusoids plus white noise plus random lulls: sudden drops
    of ``lull_depth`` MW arriving at ``lull_rate`` per hour and lasting
    ``lull_minutes``. Load is one slow sinusoid.
    """
    rng = np.random.default_rng(seed)
    t = t_start + np.arange(int(np.ceil(duration / step)) + 1) * step
    phase = rng.uniform(0, 2 * np.pi, len(periods_min) + 1)
    wind = np.full(t.size, wind_base)
    for a, T, ph in zip(wind_amps, periods_min, phase):
        wind += a * np.sin(2 * np.pi * t / (60.0 * T) + ph)
    wind += noise * rng.standard_normal(t.size)
    n_lulls = rng.poisson(lull_rate * duration / 3600.0)
    for start in rng.uniform(t[0], t[-1], n_lulls):
        end = start + 60.0 * rng.uniform(*lull_minutes)
        wind[(t >= start) & (t < end)] -= rng.uniform(*lull_depth)
    load = load_base + load_amp * np.sin(2 * np.pi * t / (60.0 * max(periods_min)) + phase[-1])
    return GridProfiles(t, wind, load)


# --------------------------------------------------------------------------- run log


RUNLOG_COLUMNS = ("t_s", "delta_f_hz", "p_ev_real_kw", "p_ref_kw", "dp_cg_mw", "err_p",
                  "refit_flag")


@dataclass
class RunLog:
    t_s: list
    delta_f_hz: list
    p_ev_real_kw: list
    p_ref_kw: list
    dp_cg_mw: list
    err_p: list
    refit_flag: list
    extras: dict

    @classmethod
    def empty(cls):
        return cls(*([] for _ in RUNLOG_COLUMNS), extras={})

    def __len__(self):
        return len(self.t_s)

    def append(self, **row):
        for name in RUNLOG_COLUMNS:
            getattr(self, name).append(row.pop(name))
        for name, val in row.items():
            self.extras.setdefault(name, []).append(val)

    def column(self, name):
        src = getattr(self, name) if name in RUNLOG_COLUMNS else self.extras[name]
        return np.asarray(src, dtype=float)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write(",".join(RUNLOG_COLUMNS) + "\n")
            for row in zip(*(getattr(self, c) for c in RUNLOG_COLUMNS)):
                fh.write(",".join(repr(float(v)) if i < 6 else str(int(v))
                                  for i, v in enumerate(row)) + "\n")

    @classmethod
    def from_csv(cls, path):
        out = cls.empty()
        with open(path) as fh:
            head = fh.readline().strip().split(",")
            if tuple(head) != RUNLOG_COLUMNS:
                raise ValueError("unexpected run log header")
            for line in fh:
                vals = line.strip().split(",")
                out.append(**{c: (float(v) if i < 6 else int(v))
                              for i, (c, v) in enumerate(zip(RUNLOG_COLUMNS, vals))})
        return out


# --------------------------------------------------------------------------- aggregators


class BhmmAggregator:
    """Model-based controller fed only with aggregated power and its own broadcasts.

    Keeps the live trajectory, refits the bilinear model on a sliding window
    and tracks the hidden state with a Kalman filter between refits.
    """

    def __init__(self, history, n_bins, K, config: RegulationConfig, *, L=None, seed=0,
                 params0=None, warm_iters=5, first_iters=100, pe_threshold=1e-8):
        self.history = list(history)
        self.n_bins, self.K, self.L = n_bins, K, L
        self.config = config
        self.params = params0
        self.warm_iters, self.first_iters = warm_iters, first_iters
        self.pe_threshold = pe_threshold
        self._rng = np.random.default_rng(seed)
        self.live_u, self.live_p = [], []
        self.mu = self.sigma = None
        self.fit_times, self.min_eigs, self.failures = [], [], 0

    def _window(self):
        from .ident import build_dataset
        live = (np.array(self.live_u), np.array(self.live_p))
        return build_dataset(self.history, live, len(self.live_p) - 1, self.K, self.L,
                             dt=self.config.dt)

    def start(self, U, P):
        """Seed the live trajectory with warm-up data and run the first fit."""
        from .ident import init_params
        self.live_u = [np.asarray(u, dtype=float) for u in U]
        self.live_p = [float(p) for p in P]
        data = self._window()
        if self.params is None:
            self.params = init_params(data, self.n_bins, self._rng)
        if not self._fit(data, self.first_iters):
            raise RuntimeError("initial identification failed")

    def _fit(self, data, n_iter):
        from .ident import IdentificationError, em_fit, kalman_forward
        try:
            params, rep, _ = em_fit(data, self.params, n_iter_max=n_iter,
                                    pe_threshold=self.pe_threshold)
        except IdentificationError as exc:
            log.warning("refit rejected, keeping previous parameters: %s", exc)
            self.failures += 1
            return False
        self.params = params
        self.fit_times.append(rep.wall_time)
        self.min_eigs.append(min(rep.min_eig) if rep.min_eig else float("nan"))
        filt = kalman_forward(params, data.U[-1], data.Y[-1])
        self.mu, self.sigma = filt.mu_f[0, -1], filt.P_f[0, -1]
        return True

    def refit(self):
        return self._fit(self._window(), self.warm_iters)

    def predict(self):
        return predict_band(self.params, self.mu)

    def control(self, p_ref, p_lower, p_upper):
        return mpc_solve(self.params, self.mu, p_ref, p_lower, p_upper, self.config)

    def observe(self, u, p):
        from .bhmm import augment
        par = self.params
        a, b = augment(par, u)
        mu = a @ self.mu + b
        S = a @ self.sigma @ a.T + par.sigma_w
        Sc = S @ par.c1
        s = Sc @ par.c1 + par.sigma_v
        if s > 0:
            k = Sc / s
            mu = mu + k * (p - par.c0 - par.c1 @ mu)
            S = S - np.outer(k, Sc)
        self.mu, self.sigma = mu, 0.5 * (S + S.T)
        self.live_u.append(np.asarray(u, dtype=float))
        self.live_p.append(float(p))


class EssmAggregator:
    """State-feedback baseline on the bin model, built from reported per-EV data."""

    def __init__(self, plant, n_bins, config: RegulationConfig):
        self.plant, self.n_bins, self.config = plant, n_bins, config
        self.fit_times, self.min_eigs, self.failures = [], [], 0

    def _affine(self):
        from .essm import arrows, build_essm
        model = build_essm(self.plant.stats(), self.n_bins, self.config.dt)
        x = self.plant.reported_state()
        src, _ = arrows(self.n_bins)
        row = model.C[0]
        return float(row @ model.A @ x), (row @ model.B) * x[src]

    def predict(self):
        p0, g = self._affine()
        N = self.n_bins
        return p0, max(p0, p0 + g @ upper_input(N)), min(p0, p0 + g @ lower_input(N))

    def control(self, p_ref, p_lower, p_upper):
        p0, g = self._affine()
        return solve_tracking_qp(p0, g, p_ref, p_lower, p_upper, self.config)

    def observe(self, u, p):
        pass


# --------------------------------------------------------------------------- closed loop


def regulation_loop(scenario, profiles: GridProfiles, config: RegulationConfig, history=(), *,
                    controller="bhmm", n_steps=1200, t0=18.0, n_bins=3, K=60, L=None,
                    soc_noise=0.0, noise_seed=0, probe=False, warm_iters=5, first_iters=100,
                    params0=None, excitation_cap=0.3, discharge_cap=0.1, callback=None) -> RunLog:
    """Closed-loop frequency regulation run.

    The fleet is fast-forwarded to ``t0`` (hours), excited for ``K`` steps to
    seed the live trajectory, then regulated for ``n_steps`` intervals.
    ``controller`` is ``"bhmm"`` (identified model, aggregated data only),
    ``"essm"`` (bin model from reported SOC) or ``"none"`` (no fleet).
    ``history`` holds the aggregated records of previous days aligned with
    the same clock window.
    """
    import time
    from .experiments import FleetPlant, day_seed, excitation, run_excited
    from .fleet import fast_forward, sample_fleet

    config.validate()
    dt = config.dt
    t_start = t0 * 3600.0 + K * dt
    if not profiles.covers(t_start, t_start + n_steps * dt):
        raise ValueError("profiles do not cover the regulation horizon")
    out = RunLog.empty()
    plant = agg = None
    p_ev = 0.0
    if controller != "none":
        fleet = sample_fleet(replace(scenario, seed=day_seed(scenario.seed, 0)))
        fast_forward(fleet, t0)
        U = excitation(np.random.default_rng(day_seed(scenario.seed, 0)), K, n_bins,
                       cap=excitation_cap, discharge_cap=discharge_cap)
        P, _, _ = run_excited(fleet, U)
        plant = FleetPlant(fleet, n_bins, soc_noise, noise_seed)
        p_ev = float(P[-1])
        if controller == "bhmm":
            agg = BhmmAggregator(history, n_bins, K, config, L=L, seed=scenario.seed,
                                 params0=params0, warm_iters=warm_iters,
                                 first_iters=first_iters)
            agg.start(U, P)
        elif controller == "essm":
            agg = EssmAggregator(plant, n_bins, config)
        else:
            raise ValueError(f"unknown controller {controller!r}")
    wind, load = profiles.at(t_start)
    p_cg = min(max(load - wind - p_ev / 1000.0, config.cg_min), config.cg_max)
    grid = GridState(delta_f=0.0, p_cg=p_cg, p_load=load, p_wind=wind,
                     lam=config.h / dt + config.d, inertia=config.h, damping=config.d)
    err_p = 0.0
    zero_u = np.zeros(n_inputs(n_bins))
    for k in range(n_steps):
        t_next = t_start + (k + 1) * dt
        flag = 0
        if isinstance(agg, BhmmAggregator) and k > 0 and (k % config.n_p == 0
                                                          or err_p > config.err_refit):
            flag = 1 if agg.refit() else 2
        if agg is not None:
            p_hat, p_up, p_lo = agg.predict()
        else:
            p_hat = p_up = p_lo = 0.0
        wind, load = profiles.at(t_next)
        imb_hat = grid.p_cg + wind - load + p_hat / 1000.0
        grid.lam = update_lambda(grid, config, imb_hat)
        f_hat = swing(grid.delta_f, imb_hat, grid.inertia, grid.damping, dt, config.swing)
        dp_d = regulation_demand(f_hat, grid.lam, config.f_deadband)
        dec = dispatch(dp_d, p_hat, p_up, p_lo, grid, config)
        extra = {}
        if agg is not None:
            tic = time.perf_counter()
            res = agg.control(dec.p_ref, p_lo, p_up)
            extra["mpc_s"] = time.perf_counter() - tic
            extra["kkt"] = res.kkt
            payload = encode_broadcast(res.u, k)
            u_sent, _ = decode_broadcast(payload, n_bins)
            if probe:
                extra["probe_upper_kw"] = plant.probe(upper_input(n_bins))
                extra["probe_lower_kw"] = plant.probe(lower_input(n_bins))
                if isinstance(agg, BhmmAggregator):
                    extra["upper_sd_kw"] = predictive_std(agg.params, agg.sigma,
                                                          upper_input(n_bins))
                    extra["lower_sd_kw"] = predictive_std(agg.params, agg.sigma,
                                                          lower_input(n_bins))
            rec = plant.actuate(payload)
            p_ev = rec.p_kw
            agg.observe(u_sent, p_ev)
            extra["payload_bytes"] = len(payload)
            extra["u"] = u_sent
        else:
            extra["u"] = zero_u
        p_cg_new = grid.p_cg + dec.dp_cg
        if not (config.cg_min - 1e-9 <= p_cg_new <= config.cg_max + 1e-9
                and abs(dec.dp_cg) <= config.ramp_step + 1e-9):
            raise AssertionError("conventional dispatch violates its limits")
        grid = replace(grid, p_cg=p_cg_new, p_wind=wind, p_load=load)
        grid = swing_step(grid, grid.p_cg + wind - load + p_ev / 1000.0, dt, config.swing)
        err_p = abs((dec.p_ref - p_ev) / dec.p_ref) if abs(dec.p_ref) > 1e-6 else 0.0
        out.append(t_s=t_next, delta_f_hz=grid.delta_f, p_ev_real_kw=p_ev, p_ref_kw=dec.p_ref,
                   dp_cg_mw=dec.dp_cg, err_p=err_p, refit_flag=flag, p_pred_kw=p_hat,
                   p_upper_kw=p_up, p_lower_kw=p_lo, dp_d_mw=dp_d, dp_ev_kw=dec.dp_ev,
                   p_cg_mw=grid.p_cg, lam=grid.lam, **extra)
        if callback is not None:
            callback(k, out)
    if agg is not None:
        out.extras["fit_s"] = list(agg.fit_times)
        out.extras["min_eig"] = list(agg.min_eigs)
        out.extras["fit_failures"] = agg.failures
    return out
