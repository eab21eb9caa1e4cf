"""Individual-EV microsimulation: the ground-truth fleet and its IMM oracle.

Agents are stored as a struct of arrays. Time is kept in hours, power in kW
with the convention discharge = positive output, charge = negative.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import truncnorm

from . import kernels
from .kernels import CM, DM, FCM, IM, OFFLINE

MODE_NAMES = {OFFLINE: "OFFLINE", CM: "CM", IM: "IM", DM: "DM", FCM: "FCM"}

DEFAULT_MIXTURE = ((6.2, 0.8525), (7.2, 0.1380), (9.6, 0.0021), (11.5, 0.0053), (19.2, 0.0021))


@dataclass
class FleetScenario:
    """Sampling recipe for a fleet.

    Truncated normals are given as ``(mean, std, low, high)``. Arrival and
    departure clocks are ``(mean, std, low)``: the draw is truncated to
    ``[low, low + 24)`` and then wrapped onto the 24 h dial.
    """

    n_ev: int = 10_000
    charger_mixture: tuple = DEFAULT_MIXTURE
    eff_range: tuple = (0.88, 0.95)
    capacity_range: tuple = (20.0, 30.0)
    soc_start: tuple = (0.3, 0.05, 0.2, 0.4)
    soc_demand: tuple = (0.8, 0.03, 0.7, 0.9)
    t_start: tuple = (17.5, 3.4, 5.5)
    t_finish: tuple = (8.9, 3.4, -3.1)
    soc_distribution: str = "normal"
    s_min: float = 0.0
    s_max: float = 1.0
    dt: float = 15.0
    seed: int = 0

    def validate(self):
        if self.n_ev < 0:
            raise ValueError("n_ev must be nonnegative")
        if not self.charger_mixture:
            raise ValueError("charger mixture is empty")
        props = np.array([p for _, p in self.charger_mixture], dtype=float)
        if np.any(props < 0) or abs(props.sum() - 1.0) > 1e-9:
            raise ValueError("charger mixture proportions must be >= 0 and sum to 1")
        if any(kw <= 0 for kw, _ in self.charger_mixture):
            raise ValueError("charger power must be positive")
        for name in ("eff_range", "capacity_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} bounds are inverted")
        if not (0 < self.eff_range[0] and self.eff_range[1] <= 1):
            raise ValueError("efficiency must lie in (0, 1]")
        for name in ("soc_start", "soc_demand"):
            mu, sd, lo, hi = getattr(self, name)
            if not lo <= hi or sd < 0:
                raise ValueError(f"{name} bounds are inverted")
        if self.soc_start[3] >= self.soc_demand[2]:
            raise ValueError("start-SOC range must lie below demanded-SOC range")
        for name in ("t_start", "t_finish"):
            if getattr(self, name)[1] <= 0:
                raise ValueError(f"{name} std must be positive")
        if not self.s_min < self.s_max:
            raise ValueError("s_min must be below s_max")
        if self.soc_distribution not in ("normal", "uniform"):
            raise ValueError("soc_distribution must be 'normal' or 'uniform'")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        return self

    @property
    def dt_h(self):
        return self.dt / 3600.0

    def to_json(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2))

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        d = dict(d)
        if "charger_mixture" in d:
            d["charger_mixture"] = tuple(tuple(x) for x in d["charger_mixture"])
        for k in ("eff_range", "capacity_range", "soc_start", "soc_demand", "t_start", "t_finish"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d).validate()


def _truncnorm(rng, mu, sd, lo, hi, n):
    """Normal draws resampled until they land in ``[lo, hi]`` (bounds may be arrays)."""
    out = rng.normal(mu, sd, n)
    lo = np.broadcast_to(lo, (n,))
    hi = np.broadcast_to(hi, (n,))
    bad = (out < lo) | (out > hi)
    while bad.any():
        idx = np.flatnonzero(bad)
        mu_i = mu[idx] if np.ndim(mu) else mu
        sd_i = sd[idx] if np.ndim(sd) else sd
        out[idx] = rng.normal(mu_i, sd_i, idx.size)
        bad[idx] = (out[idx] < lo[idx]) | (out[idx] > hi[idx])
    return out


@dataclass
class FleetRecord:
    t_s: float
    p_kw: float
    p_upper_kw: float
    p_lower_kw: float
    n_cm: int
    n_im: int
    n_dm: int
    n_fcm: int
    n_off: int
    switches: int = 0


@dataclass
class FleetLog:
    records: list = field(default_factory=list)

    HEADER = ("t_s", "p_kw", "p_upper_kw", "p_lower_kw", "n_cm", "n_im", "n_dm", "n_fcm", "n_off")

    def append(self, rec):
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    @property
    def power(self):
        return self.column("p_kw")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.HEADER)
            for r in self.records:
                w.writerow([repr(float(r.t_s)), repr(float(r.p_kw)), repr(float(r.p_upper_kw)),
                            repr(float(r.p_lower_kw)), r.n_cm, r.n_im, r.n_dm, r.n_fcm, r.n_off])

    @classmethod
    def from_csv(cls, path):
        log = cls()
        with open(path, newline="") as fh:
            rd = csv.DictReader(fh)
            if tuple(rd.fieldnames or ()) != cls.HEADER:
                raise ValueError(f"unexpected fleet log header {rd.fieldnames}")
            for row in rd:
                log.append(FleetRecord(float(row["t_s"]), float(row["p_kw"]),
                                       float(row["p_upper_kw"]), float(row["p_lower_kw"]),
                                       int(row["n_cm"]), int(row["n_im"]), int(row["n_dm"]),
                                       int(row["n_fcm"]), int(row["n_off"])))
        return log


class Fleet:
    """Struct-of-arrays EV population plus its simulation clock."""

    def __init__(self, *, p_rated, eff, capacity, t_arrive, t_depart, soc_initial,
                 soc_demanded, s_min=0.0, s_max=1.0, dt=15.0, seed=0, overnight=None,
                 ids=None, t0=0.0):
        n = len(p_rated)
        f8 = lambda a: np.ascontiguousarray(a, dtype=np.float64).copy()
        self.ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        self.p_rated = f8(p_rated)
        self.eff = f8(eff)
        self.capacity = f8(capacity)
        self.t_arrive = f8(t_arrive)
        self.t_depart = f8(t_depart)
        self.soc_initial = f8(soc_initial)
        self.soc_demanded = f8(soc_demanded)
        self.overnight = (np.zeros(n, bool) if overnight is None
                          else np.asarray(overnight, dtype=bool).copy())
        self.soc = self.soc_initial.copy()
        self.soc_reported = self.soc.copy()
        self.mode = np.full(n, OFFLINE, dtype=np.int8)
        self.s_min = float(s_min)
        self.s_max = float(s_max)
        self.dt = float(dt)
        self.seed = int(seed)
        self.keys = kernels.agent_keys(self.seed, self.ids)
        self.t = float(t0)
        self.n_broadcasts = 0
        self.switches = 0
        self._scratch = tuple(np.zeros(n) for _ in range(3))

    # agent-level views; p_charge == p_discharge and eta_c == eta_d per agent
    p_charge = property(lambda self: self.p_rated)
    p_discharge = property(lambda self: self.p_rated)

    def __len__(self):
        return self.p_rated.size

    @property
    def dt_h(self):
        return self.dt / 3600.0

    @property
    def online(self):
        return self.mode != OFFLINE

    def copy(self):
        other = object.__new__(Fleet)
        for k, v in self.__dict__.items():
            other.__dict__[k] = v.copy() if isinstance(v, np.ndarray) else v
        other._scratch = tuple(np.zeros(len(self)) for _ in range(3))
        return other

    def agent(self, i):
        """Dictionary view of agent ``i`` (for inspection and tests)."""
        return dict(id=int(self.ids[i]), p_charge=self.p_rated[i], p_discharge=self.p_rated[i],
                    eff_charge=self.eff[i], eff_discharge=self.eff[i], capacity=self.capacity[i],
                    t_arrive=self.t_arrive[i], t_depart=self.t_depart[i],
                    soc_initial=self.soc_initial[i], soc_demanded=self.soc_demanded[i],
                    soc=self.soc[i], mode=MODE_NAMES[int(self.mode[i])],
                    soc_reported=self.soc_reported[i])

    def align_clock(self, t0):
        """Place each agent's daily window so that it is current or upcoming at ``t0``."""
        self.t = float(t0)
        # windows repeat daily; pick the earliest one ending after t0
        shift = np.floor((self.t - self.t_depart) / 24.0) + 1.0
        self.t_arrive += 24.0 * shift
        self.t_depart += 24.0 * shift
        self.mode[:] = OFFLINE
        self.soc[:] = self.soc_initial
        return self

    def _roll_days(self):
        done = (self.mode == OFFLINE) & (self.t_depart <= self.t)
        if done.any():
            self.t_arrive[done] += 24.0
            self.t_depart[done] += 24.0

    def apply_broadcast(self, u, n_bins):
        """Probabilistic per-agent switching under broadcast ``u``; returns switch count."""
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (4 * n_bins + 2,):
            raise ValueError(f"broadcast must have length {4 * n_bins + 2}")
        if np.any(~np.isfinite(u)) or np.any(u < 0.0) or np.any(u > 1.0):
            raise ValueError("broadcast entries must lie in [0, 1]")
        n = kernels.broadcast(self.mode, self.soc, self.keys, u, n_bins,
                              self.s_min, self.s_max, self.n_broadcasts)
        self.n_broadcasts += 1
        self.switches += n
        return n

    def step(self):
        """Advance one interval; returns the interval's :class:`FleetRecord`."""
        self._roll_days()
        p, up, lo, counts, _ = kernels.step(self, self.t, self.dt_h, self.s_min, self.s_max,
                                             self._scratch)
        rec = FleetRecord(self.t * 3600.0, p, up, lo, *counts, switches=self.switches)
        self.t += self.dt_h
        self.soc_reported[:] = self.soc
        return rec

    def run(self, n_steps, log=None):
        log = FleetLog() if log is None else log
        for _ in range(n_steps):
            log.append(self.step())
        return log


def sample_fleet(scenario: FleetScenario, t0=0.0) -> Fleet:
    """Draw a fleet from ``scenario``; deterministic in ``scenario.seed``."""
    sc = scenario.validate()
    rng = np.random.default_rng(sc.seed)
    n = sc.n_ev
    kw = np.array([k for k, _ in sc.charger_mixture], dtype=float)
    props = np.array([p for _, p in sc.charger_mixture], dtype=float)
    p_rated = kw[rng.choice(kw.size, size=n, p=props / props.sum())]
    eff = rng.uniform(*sc.eff_range, n)
    cap = rng.uniform(*sc.capacity_range, n)
    if sc.soc_distribution == "normal":
        s_s = _truncnorm(rng, sc.soc_start[0], sc.soc_start[1], sc.soc_start[2], sc.soc_start[3], n)
        s_d = _truncnorm(rng, sc.soc_demand[0], sc.soc_demand[1], sc.soc_demand[2], sc.soc_demand[3], n)
    else:
        s_s = rng.uniform(sc.soc_start[2], sc.soc_start[3], n)
        s_d = rng.uniform(sc.soc_demand[2], sc.soc_demand[3], n)
    mu, sd, lo = sc.t_start
    t_s = np.mod(_truncnorm(rng, mu, sd, lo, lo + 24.0, n), 24.0)
    mu, sd, lo = sc.t_finish
    t_f = np.mod(_truncnorm(rng, mu, sd, lo, lo + 24.0, n), 24.0)
    overnight = t_f <= t_s
    t_dep = np.where(overnight, t_f + 24.0, t_f)
    fleet = Fleet(p_rated=p_rated, eff=eff, capacity=cap, t_arrive=t_s, t_depart=t_dep,
                  soc_initial=s_s, soc_demanded=s_d, s_min=sc.s_min, s_max=sc.s_max,
                  dt=sc.dt, seed=sc.seed, overnight=overnight)
    return fleet.align_clock(t0)


def soc_step(soc, mode, p, eff, cap, dt, s_min=0.0, s_max=1.0):
    """SOC after one interval of ``dt`` seconds; returns ``(soc, boundary_hit)``."""
    dt_h = dt / 3600.0
    if mode in (CM, FCM):
        s = soc + p * eff * dt_h / cap
        if s >= s_max:
            return s_max, True
    elif mode == DM:
        s = soc - p * dt_h / (eff * cap)
        if s <= s_min:
            return s_min, True
    else:
        s = soc
    return s, False


def fcm_check(soc, soc_demanded, cap, p, eff, t_depart, t):
    """True when the remaining time no longer exceeds the charge time still needed."""
    if soc >= soc_demanded:
        return False
    required = (soc_demanded - soc) * cap / (p * eff)
    return bool(required >= t_depart - t)


def soc_bin(soc, n_bins, s_min=0.0, s_max=1.0):
    """1-based SOC bin of ``soc`` among ``n_bins`` uniform bins."""
    soc = np.asarray(soc, dtype=float)
    if np.any(soc < s_min) or np.any(soc > s_max):
        raise ValueError("soc outside [s_min, s_max]")
    width = (s_max - s_min) / n_bins
    b = np.minimum(((soc - s_min) / width).astype(np.int64) + 1, n_bins)
    return int(b) if b.ndim == 0 else b


def imm_flexibility(fleet: Fleet):
    """Oracle ``(p_upper, p_lower)`` in kW from the current agent states."""
    on = fleet.online
    fcm = fleet.mode == FCM
    p = fleet.p_rated
    up = np.where(on, np.where(fcm, -p, np.where(fleet.soc > fleet.s_min, p, 0.0)), 0.0)
    lo = np.where(on & (fcm | (fleet.soc < fleet.s_max)), -p, 0.0)
    return float(np.sum(up)), float(np.sum(lo))


def fleet_power(fleet: Fleet):
    """Instantaneous power of the current mode assignment (kW)."""
    m = fleet.mode
    p = fleet.p_rated
    return float(np.sum(np.where(m == DM, p, np.where((m == CM) | (m == FCM), -p, 0.0))))


def fleet_step(fleet: Fleet):
    """Advance ``fleet`` one interval in place; returns ``(fleet, power_kW)``."""
    rec = fleet.step()
    return fleet, rec.p_kw


def inject_soc_noise(fleet: Fleet, bound_fraction, rng, sigma=2.0):
    """Corrupt ``soc_reported`` with truncated Gaussian noise; true SOC untouched."""
    soc = fleet.soc
    half = bound_fraction * soc
    if bound_fraction <= 0:
        fleet.soc_reported[:] = soc
        return fleet
    eps = np.zeros_like(soc)
    live = half > 0
    # inverse-CDF draw: the window is narrow relative to sigma, so rejection would crawl
    b = half[live] / sigma
    eps[live] = sigma * truncnorm.rvs(-b, b, random_state=rng)
    fleet.soc_reported[:] = np.clip(soc + eps, 0.0, 1.0)
    return fleet


def fast_forward(fleet: Fleet, t0):
    """Put agents already plugged in at ``t0`` into their uncontrolled state.

    An uncontrolled agent charges from arrival until it reaches ``s_max``.
    """
    fleet.align_clock(t0)
    on = (fleet.t_arrive <= t0) & (t0 < fleet.t_depart)
    gained = fleet.p_rated * fleet.eff * (t0 - fleet.t_arrive) / fleet.capacity
    soc = np.minimum(fleet.soc_initial + gained, fleet.s_max)
    fleet.soc[on] = soc[on]
    fleet.mode[on] = np.where(soc[on] >= fleet.s_max, IM, CM).astype(np.int8)
    fleet.soc_reported[:] = fleet.soc
    return fleet
