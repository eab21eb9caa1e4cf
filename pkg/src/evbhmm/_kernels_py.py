"""Pure-numpy implementations of the fleet hot loops.

These are the reference versions; ``_kernels.pyx`` mirrors them agent by
agent and must produce bit-identical results.
"""

import numpy as np

OFFLINE, CM, IM, DM, FCM = 0, 1, 2, 3, 4

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV53 = 2.0 ** -53


def _mix(z):
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def agent_keys(seed, ids):
    """Per-agent stream keys derived from ``(seed, agent id)``."""
    s = np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return _mix(_mix(s) ^ np.asarray(ids, dtype=np.uint64))


def uniforms(keys, stream, counter):
    """Counter-based uniforms in (0, 1], one per key."""
    c = np.array([((int(stream) & 0xFFFF) << 48) ^ (int(counter) & 0xFFFFFFFFFFFF)],
                 dtype=np.uint64)
    with np.errstate(over="ignore"):
        h = _mix(keys ^ _mix(c))
    return ((h >> np.uint64(11)).astype(np.float64) + 1.0) * _INV53


def broadcast(mode, soc, keys, u, n_bins, s_min, s_max, counter):
    """Apply a switching-probability broadcast in place; return switch count."""
    n = n_bins
    online = (mode == CM) | (mode == IM) | (mode == DM)
    alpha = uniforms(keys, 1, counter)
    width = (s_max - s_min) / n
    b = np.minimum(((soc - s_min) / width).astype(np.int64), n - 1)
    b = np.clip(b, 0, n - 1)
    new = mode.copy()

    cm = online & (mode == CM)
    new[cm & (alpha <= u[b])] = IM

    dm = online & (mode == DM)
    new[dm & (alpha <= u[2 * n + b])] = IM

    im = online & (mode == IM)
    empty = im & (soc <= s_min)
    full = im & (soc >= s_max) & ~empty
    mid = im & ~empty & ~full
    ub = u[n + b]
    ud = u[3 * n + b]
    to_dm = mid & (alpha <= ub)
    to_cm = mid & ~to_dm & (alpha <= ub + ud)
    new[to_dm] = DM
    new[to_cm] = CM
    new[empty & (alpha <= u[4 * n])] = CM
    new[full & (alpha <= u[4 * n + 1])] = DM

    switched = int(np.count_nonzero(new != mode))
    mode[:] = new
    return switched


def step(mode, soc, p, eff, cap, t_arr, t_dep, soc_init, soc_dem,
         t, dt_h, s_min, s_max, pw, up, lo):
    """Advance every agent by one interval starting at time ``t`` (hours).

    Fills the per-agent power / upper / lower contributions (kW, discharge
    positive) evaluated over the interval, and returns the mode counts
    ``[n_cm, n_im, n_dm, n_fcm, n_off]`` followed by the boundary-hit count.
    """
    arrive = (mode == OFFLINE) & (t_arr <= t) & (t < t_dep)
    mode[arrive] = CM
    soc[arrive] = soc_init[arrive]
    mode[(mode != OFFLINE) & (t >= t_dep)] = OFFLINE

    online = mode != OFFLINE
    cand = online & (mode != FCM)
    required = (soc_dem - soc) * cap / (p * eff)
    # one-step lookahead: a discharge step raises the need by dt/eff^2
    mode[cand & (required + dt_h / (eff * eff) >= t_dep - t)] = FCM

    charging = (mode == CM) | (mode == FCM)
    dis = mode == DM
    fcm = mode == FCM
    pw[:] = np.where(dis, p, np.where(charging, -p, 0.0))
    up[:] = np.where(online, np.where(fcm, -p, np.where(soc > s_min, p, 0.0)), 0.0)
    lo[:] = np.where(online & (fcm | (soc < s_max)), -p, 0.0)
    counts = [int(np.count_nonzero(mode == m)) for m in (CM, IM, DM, FCM, OFFLINE)]

    soc[charging] = soc[charging] + p[charging] * eff[charging] * dt_h / cap[charging]
    soc[dis] = soc[dis] - p[dis] * dt_h / (eff[dis] * cap[dis])

    hit_hi = charging & (soc >= s_max)
    hit_lo = dis & (soc <= s_min)
    soc[hit_hi] = s_max
    soc[hit_lo] = s_min
    mode[hit_hi | hit_lo] = IM
    mode[fcm & ~hit_hi & (soc >= soc_dem)] = CM
    return counts + [int(np.count_nonzero(hit_hi | hit_lo))]
