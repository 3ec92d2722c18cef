# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the plant step, GAE recursion and moving average.

Semantics match ``_pykernels`` exactly; operation order is kept identical so
results agree to rounding.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs, tanh

cnp.import_array()


def centered_moving_average(x, int window):
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], c = xv.shape[1]
    cdef Py_ssize_t back = (window - 1) // 2, fwd = window // 2
    out = np.empty((n, c), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double[:, ::1] csum = np.zeros((n + 1, c), dtype=np.float64)
    cdef Py_ssize_t i, j, lo, hi
    for i in range(n):
        for j in range(c):
            csum[i + 1, j] = csum[i, j] + xv[i, j]
    for i in range(n):
        lo = i - back
        if lo < 0:
            lo = 0
        hi = i + fwd
        if hi > n - 1:
            hi = n - 1
        hi += 1
        for j in range(c):
            ov[i, j] = (csum[hi, j] - csum[lo, j]) / (hi - lo)
    return out


def gae(rewards, values, dones, last_values, double gamma, double lam):
    cdef double[:, ::1] r = np.ascontiguousarray(rewards, dtype=np.float64)
    cdef double[:, ::1] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef double[:, ::1] d = np.ascontiguousarray(dones, dtype=np.float64)
    cdef double[::1] last = np.ascontiguousarray(last_values, dtype=np.float64)
    cdef Py_ssize_t horizon = r.shape[0], n_env = r.shape[1]
    adv = np.zeros((horizon, n_env), dtype=np.float64)
    cdef double[:, ::1] av = adv
    cdef Py_ssize_t t, e
    cdef double running, next_v, notdone, delta
    for e in range(n_env):
        running = 0.0
        next_v = last[e]
        for t in range(horizon - 1, -1, -1):
            notdone = 1.0 - d[t, e]
            delta = r[t, e] + gamma * next_v * notdone - v[t, e]
            running = delta + gamma * lam * notdone * running
            av[t, e] = running
            next_v = v[t, e]
    return adv


def plant_step(s, a, cmd, double dt, double kp, double kd, double damping,
               inertia, q_lim, dq_lim, tau_lim, coupling, drag,
               double roll_relax, double roll_coupling, double knee_thresh,
               double knee_width, double reflex_gain, double reflex_scale,
               double sigma_v, double sigma_w):
    cdef double[:, ::1] sv = np.ascontiguousarray(s, dtype=np.float64)
    cdef double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[:, ::1] cv = np.ascontiguousarray(cmd, dtype=np.float64)
    cdef double[::1] inert = np.ascontiguousarray(inertia, dtype=np.float64)
    cdef double[::1] qlim = np.ascontiguousarray(q_lim, dtype=np.float64)
    cdef double[::1] dqlim = np.ascontiguousarray(dq_lim, dtype=np.float64)
    cdef double[::1] tlim = np.ascontiguousarray(tau_lim, dtype=np.float64)
    cdef double[:, ::1] B = np.ascontiguousarray(coupling, dtype=np.float64)
    cdef double[::1] dr = np.ascontiguousarray(drag, dtype=np.float64)
    cdef Py_ssize_t n = sv.shape[0]

    nxt = np.empty((n, 20), dtype=np.float64)
    r_task = np.empty(n, dtype=np.float64)
    costs = np.empty((n, 3), dtype=np.float64)
    tau_raw = np.empty((n, 8), dtype=np.float64)
    tau = np.empty((n, 8), dtype=np.float64)
    cdef double[:, ::1] nv = nxt
    cdef double[::1] rv = r_task
    cdef double[:, ::1] costv = costs
    cdef double[:, ::1] trv = tau_raw
    cdef double[:, ::1] tv = tau

    cdef Py_ssize_t i, j, k
    cdef double q, dq, tr, tc, dqn, qf, qn, stop, g, acc, asym, roll, ev, ew, ex, ey
    cdef double cpos, cvel, ctq, knee, lift
    cdef double u[8]
    for i in range(n):
        cpos = 0.0
        cvel = 0.0
        ctq = 0.0
        for j in range(8):
            q = sv[i, 4 + j]
            dq = sv[i, 12 + j]
            tr = kp * (av[i, j] - q) - kd * dq
            tc = tr
            if tc > tlim[j]:
                tc = tlim[j]
            elif tc < -tlim[j]:
                tc = -tlim[j]
            dqn = dq + dt * (tc - damping * dq) / inert[j]
            stop = 1.05 * qlim[j]
            qf = q + dt * dqn
            qn = qf
            if qn > stop:
                qn = stop
            elif qn < -stop:
                qn = -stop
            if qf != qn:
                dqn = 0.0
            nv[i, 4 + j] = qn
            nv[i, 12 + j] = dqn
            trv[i, j] = tr
            tv[i, j] = tc
            if fabs(qn) - qlim[j] > 0.0:
                cpos += fabs(qn) - qlim[j]
            if fabs(dqn) - dqlim[j] > 0.0:
                cvel += fabs(dqn) - dqlim[j]
            if fabs(tr) - tlim[j] > 0.0:
                ctq += fabs(tr) - tlim[j]
        for k in range(4):
            knee = nv[i, 4 + 2 * k + 1]
            lift = nv[i, 12 + 2 * k] * tanh(knee / reflex_scale)
            if lift < 0.0:
                lift = 0.0
            g = 1.0 / (1.0 + exp((knee + reflex_gain * lift - knee_thresh) / knee_width))
            u[2 * k] = nv[i, 12 + 2 * k] * g
            u[2 * k + 1] = nv[i, 12 + 2 * k + 1] * g
        for k in range(3):
            acc = 0.0
            for j in range(8):
                acc += u[j] * B[k, j]
            acc = acc - dr[k] * sv[i, k]
            nv[i, k] = sv[i, k] + dt * acc
        asym = nv[i, 12 + 0] + nv[i, 12 + 4] - nv[i, 12 + 2] - nv[i, 12 + 6]
        roll = sv[i, 3] + dt * (-roll_relax * sv[i, 3] + roll_coupling * asym)
        if roll > 3.141592653589793:
            roll = 3.141592653589793
        elif roll < -3.141592653589793:
            roll = -3.141592653589793
        nv[i, 3] = roll
        costv[i, 0] = cpos
        costv[i, 1] = cvel
        costv[i, 2] = ctq
        ex = nv[i, 0] - cv[i, 0]
        ey = nv[i, 1] - cv[i, 1]
        ev = (ex * ex + ey * ey) / (sigma_v * sigma_v)
        ew = (nv[i, 2] - cv[i, 2]) * (nv[i, 2] - cv[i, 2]) / (sigma_w * sigma_w)
        rv[i] = exp(-ev) + 0.5 * exp(-ew)
    return nxt, r_task, costs, tau_raw, tau
