# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled fleet kernels; agent-for-agent mirror of ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, int64_t, int8_t

cnp.import_array()

cdef enum:
    OFFLINE = 0
    CM = 1
    IM = 2
    DM = 3
    FCM = 4


cdef inline uint64_t _mix(uint64_t z) noexcept nogil:
    z = z + <uint64_t>0x9E3779B97F4A7C15ULL
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EBULL
    return z ^ (z >> 31)


def agent_keys(seed, ids):
    cdef uint64_t s = _mix(<uint64_t>(seed & 0xFFFFFFFFFFFFFFFF))
    cdef cnp.int64_t[::1] idv = np.ascontiguousarray(ids, dtype=np.int64)
    cdef Py_ssize_t i, n = idv.shape[0]
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = _mix(s ^ <uint64_t>idv[i])
    return out


def uniforms(keys, int stream, counter):
    cdef uint64_t c = _mix(((<uint64_t>(stream & 0xFFFF)) << 48)
                           ^ <uint64_t>(counter & 0xFFFFFFFFFFFF))
    cdef uint64_t[::1] k = keys
    cdef Py_ssize_t i, n = k.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = (<double>(_mix(k[i] ^ c) >> 11) + 1.0) * 1.1102230246251565e-16
    return out


def broadcast(int8_t[::1] mode, double[::1] soc, uint64_t[::1] keys,
              double[::1] u, int n_bins, double s_min, double s_max, counter):
    cdef uint64_t c = _mix(((<uint64_t>1) << 48)
                           ^ <uint64_t>(counter & 0xFFFFFFFFFFFF))
    cdef Py_ssize_t i, n = mode.shape[0]
    cdef int nb = n_bins
    cdef double width = (s_max - s_min) / nb
    cdef double alpha, x
    cdef int64_t b
    cdef int8_t m
    cdef long switched = 0
    with nogil:
        for i in range(n):
            m = mode[i]
            if m != CM and m != IM and m != DM:
                continue
            alpha = (<double>(_mix(keys[i] ^ c) >> 11) + 1.0) * 1.1102230246251565e-16
            x = (soc[i] - s_min) / width
            b = <int64_t>x
            if b > nb - 1:
                b = nb - 1
            if b < 0:
                b = 0
            if m == CM:
                if alpha <= u[b]:
                    mode[i] = IM
            elif m == DM:
                if alpha <= u[2 * nb + b]:
                    mode[i] = IM
            else:
                if soc[i] <= s_min:
                    if alpha <= u[4 * nb]:
                        mode[i] = CM
                elif soc[i] >= s_max:
                    if alpha <= u[4 * nb + 1]:
                        mode[i] = DM
                else:
                    if alpha <= u[nb + b]:
                        mode[i] = DM
                    elif alpha <= u[nb + b] + u[3 * nb + b]:
                        mode[i] = CM
            if mode[i] != m:
                switched += 1
    return switched


def step(int8_t[::1] mode, double[::1] soc, double[::1] p, double[::1] eff,
         double[::1] cap, double[::1] t_arr, double[::1] t_dep,
         double[::1] soc_init, double[::1] soc_dem, double t, double dt_h,
         double s_min, double s_max, double[::1] pw, double[::1] up,
         double[::1] lo):
    cdef Py_ssize_t i, n = mode.shape[0]
    cdef long n_cm = 0, n_im = 0, n_dm = 0, n_fcm = 0, n_off = 0, n_hit = 0
    cdef int8_t m
    cdef double s, required
    cdef bint charging, hit
    with nogil:
        for i in range(n):
            m = mode[i]
            if m == OFFLINE and t_arr[i] <= t and t < t_dep[i]:
                m = CM
                soc[i] = soc_init[i]
            if m != OFFLINE and t >= t_dep[i]:
                m = OFFLINE
            if m == OFFLINE:
                mode[i] = m
                pw[i] = 0.0
                up[i] = 0.0
                lo[i] = 0.0
                n_off += 1
                continue
            s = soc[i]
            if m != FCM:
                required = (soc_dem[i] - s) * cap[i] / (p[i] * eff[i])
                # one-step lookahead: a discharge step raises the need by dt/eff^2
                if required + dt_h / (eff[i] * eff[i]) >= t_dep[i] - t:
                    m = FCM
            charging = m == CM or m == FCM
            if m == DM:
                pw[i] = p[i]
                n_dm += 1
            elif charging:
                pw[i] = -p[i]
                if m == CM:
                    n_cm += 1
                else:
                    n_fcm += 1
            else:
                pw[i] = 0.0
                n_im += 1
            if m == FCM:
                up[i] = -p[i]
            elif s > s_min:
                up[i] = p[i]
            else:
                up[i] = 0.0
            if m == FCM or s < s_max:
                lo[i] = -p[i]
            else:
                lo[i] = 0.0

            hit = False
            if charging:
                s = s + p[i] * eff[i] * dt_h / cap[i]
                if s >= s_max:
                    s = s_max
                    hit = True
            elif m == DM:
                s = s - p[i] * dt_h / (eff[i] * cap[i])
                if s <= s_min:
                    s = s_min
                    hit = True
            if hit:
                n_hit += 1
                m = IM
            elif m == FCM and s >= soc_dem[i]:
                m = CM
            soc[i] = s
            mode[i] = m
    return [n_cm, n_im, n_dm, n_fcm, n_off, n_hit]
