"""Backend selection for the fleet hot loops.

The compiled extension is used when it imports; otherwise the numpy
implementation takes over. Set ``EVBHMM_PURE_PYTHON=1`` to force the
fallback.
"""

import os

import numpy as np

from . import _kernels_py

try:
    if os.environ.get("EVBHMM_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend forced")
    from . import _kernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _kernels_py
    BACKEND = "python"

OFFLINE, CM, IM, DM, FCM = (_kernels_py.OFFLINE, _kernels_py.CM, _kernels_py.IM,
                            _kernels_py.DM, _kernels_py.FCM)


def get_backend(name=None):
    """Return the kernel module for ``name`` (``"cython"``/``"python"``) or the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown backend {name!r}")


def agent_keys(seed, ids, backend=None):
    return get_backend(backend).agent_keys(int(seed), np.asarray(ids, dtype=np.int64))


def uniforms(keys, stream, counter, backend=None):
    return get_backend(backend).uniforms(keys, int(stream), int(counter))


def broadcast(mode, soc, keys, u, n_bins, s_min, s_max, counter, backend=None):
    u = np.ascontiguousarray(u, dtype=np.float64)
    return get_backend(backend).broadcast(mode, soc, keys, u, int(n_bins),
                                          float(s_min), float(s_max), int(counter))


def step(fleet_arrays, t, dt_h, s_min, s_max, scratch, backend=None):
    """One fleet interval; returns ``(power, p_upper, p_lower, counts, n_boundary)``."""
    a = fleet_arrays
    pw, up, lo = scratch
    res = get_backend(backend).step(a.mode, a.soc, a.p_rated, a.eff, a.capacity,
                                    a.t_arrive, a.t_depart, a.soc_initial,
                                    a.soc_demanded, float(t), float(dt_h),
                                    float(s_min), float(s_max), pw, up, lo)
    return float(np.sum(pw)), float(np.sum(up)), float(np.sum(lo)), tuple(res[:5]), res[5]
