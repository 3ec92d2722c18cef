"""Pure numpy implementations of the hot loops.

These are the reference versions; ``_ckernels.pyx`` mirrors them loop for loop.
"""

import numpy as np


def centered_moving_average(x, window):
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    back = (window - 1) // 2
    fwd = window // 2
    csum = np.concatenate([np.zeros((1,) + x.shape[1:]), np.cumsum(x, axis=0)])
    idx = np.arange(n)
    lo = np.maximum(idx - back, 0)
    hi = np.minimum(idx + fwd, n - 1) + 1
    return (csum[hi] - csum[lo]) / (hi - lo)[:, None]


def gae(rewards, values, dones, last_values, gamma, lam):
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    notdone = 1.0 - np.asarray(dones, dtype=np.float64)
    horizon = rewards.shape[0]
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1:])
    next_v = np.asarray(last_values, dtype=np.float64)
    for t in range(horizon - 1, -1, -1):
        delta = rewards[t] + gamma * next_v * notdone[t] - values[t]
        running = delta + gamma * lam * notdone[t] * running
        adv[t] = running
        next_v = values[t]
    return adv


def plant_step(s, a, cmd, dt, kp, kd, damping, inertia, q_lim, dq_lim, tau_lim,
               coupling, drag, roll_relax, roll_coupling, knee_thresh, knee_width,
               reflex_gain, reflex_scale, sigma_v, sigma_w):
    s = np.asarray(s, dtype=np.float64)
    q = s[:, 4:12]
    dq = s[:, 12:20]
    tau_raw = kp * (a - q) - kd * dq
    tau = np.clip(tau_raw, -tau_lim, tau_lim)
    dq_new = dq + dt * (tau - damping * dq) / inertia
    stop = 1.05 * q_lim
    q_free = q + dt * dq_new
    q_new = np.clip(q_free, -stop, stop)
    dq_new = np.where(q_free == q_new, dq_new, 0.0)

    # foot clearance: knee flexion plus a swing reflex whose direction follows the knee posture
    knee = q_new[:, 1::2]
    clearance = knee + reflex_gain * np.maximum(0.0, dq_new[:, 0::2] * np.tanh(knee / reflex_scale))
    gate = 1.0 / (1.0 + np.exp((clearance - knee_thresh) / knee_width))
    u = dq_new * np.repeat(gate, 2, axis=1)
    accel = u @ coupling.T - drag * s[:, 0:3]
    vel = s[:, 0:3] + dt * accel
    asym = dq_new[:, 0] + dq_new[:, 4] - dq_new[:, 2] - dq_new[:, 6]
    roll = s[:, 3] + dt * (-roll_relax * s[:, 3] + roll_coupling * asym)
    roll = np.clip(roll, -np.pi, np.pi)

    nxt = np.empty_like(s)
    nxt[:, 0:3] = vel
    nxt[:, 3] = roll
    nxt[:, 4:12] = q_new
    nxt[:, 12:20] = dq_new

    costs = np.empty((s.shape[0], 3))
    costs[:, 0] = np.maximum(0.0, np.abs(q_new) - q_lim).sum(axis=1)
    costs[:, 1] = np.maximum(0.0, np.abs(dq_new) - dq_lim).sum(axis=1)
    costs[:, 2] = np.maximum(0.0, np.abs(tau_raw) - tau_lim).sum(axis=1)

    ev = ((vel[:, 0] - cmd[:, 0]) ** 2 + (vel[:, 1] - cmd[:, 1]) ** 2) / sigma_v ** 2
    ew = (vel[:, 2] - cmd[:, 2]) ** 2 / sigma_w ** 2
    r_task = np.exp(-ev) + 0.5 * np.exp(-ew)
    return nxt, r_task, costs, tau_raw, tau
