"""Evaluation metrics: Frechet gait distance, tracking, safety counts, footfall, PCA."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .environment import EnvConfig, stance_proxy, step
from .motion_data import LEGS, STATE_DIM

EIG_FLOOR = 1e-10

# straight-line command profiles: name -> (command, evaluation distance in m)
TRACKING_PROFILES = {
    "forward_walk": ((1.0, 0.0, 0.0), 40.0),
    "high_speed_run": ((3.5, 0.0, 0.0), 40.0),
    "pure_lateral": ((0.0, 1.0, 0.0), 5.0),
    "pure_backward": ((-1.0, 0.0, 0.0), 5.0),
}
SPRINT_COMMAND = (3.0, 0.0, 0.0)
SPRINT_SECONDS = 15.0
TIME_BUDGET = 2.0  # allowed duration as a multiple of distance / commanded speed


# -- Frechet gait distance ---------------------------------------------------

@dataclass
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def fit(cls, rows) -> "GaussianSummary":
        rows = np.asarray(rows, dtype=float)
        if rows.ndim == 1:
            rows = rows[:, None]
        if rows.shape[0] == 0:
            raise ValueError("empty population")
        mu = rows.mean(axis=0)
        if rows.shape[0] > 1:
            cov = np.cov(rows, rowvar=False).reshape(rows.shape[1], rows.shape[1])
        else:
            cov = np.zeros((rows.shape[1], rows.shape[1]))
        return cls(mu, floor_psd(cov))


def floor_psd(cov, floor: float = EIG_FLOOR) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov)
    return (v * np.maximum(w, floor)) @ v.T


def _psd_sqrt(mat):
    w, v = np.linalg.eigh(0.5 * (mat + mat.T))
    return (v * np.sqrt(np.maximum(w, 0.0))) @ v.T


def frechet_from_summaries(a: GaussianSummary, b: GaussianSummary) -> float:
    diff = a.mean - b.mean
    sa = _psd_sqrt(a.cov)
    mid = sa @ b.cov @ sa
    tr_sqrt = np.sqrt(np.maximum(np.linalg.eigvalsh(0.5 * (mid + mid.T)), 0.0)).sum()
    val = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)
    return max(val, 0.0)


def fgd(pop_a, pop_b) -> float:
    """Frechet distance between Gaussian fits of two feature populations."""
    return frechet_from_summaries(GaussianSummary.fit(pop_a), GaussianSummary.fit(pop_b))


def standardize_features(x, mean, std):
    return (np.asarray(x, dtype=float) - mean) / np.maximum(std, 1e-6)


def expert_fgd(agent, dataset, cfg: EnvConfig, seconds: float = 5.0, settle_seconds: float = 2.0):
    """FGD between expert transitions and agent rollouts under each clip's mean command.

    Both populations are standardised with the expert statistics. Returns
    (fgd value, agent transitions) so callers can plot the same rows.
    """
    expert_x, _ = dataset.transitions()
    mean, std = expert_x.mean(axis=0), expert_x.std(axis=0)
    settle = int(round(settle_seconds / cfg.dt))
    steps = settle + int(round(seconds / cfg.dt))
    rows = []
    for clip in dataset.clips:
        command = np.asarray(clip.commands, dtype=float).mean(axis=0)
        trace = agent.rollout(command, steps, cfg)
        if trace.diverged:
            return math.inf, None
        rows.append(trace.transitions[settle:])
    agent_x = np.concatenate(rows)
    return fgd(standardize_features(expert_x, mean, std), standardize_features(agent_x, mean, std)), agent_x


# -- agents and tracking -----------------------------------------------------

@dataclass
class Trace:
    """Per-step record of an evaluation rollout."""

    states: np.ndarray            # (T+1, 20), includes the initial state
    commands: np.ndarray          # (T, 3)
    tau_raw: np.ndarray           # (T, 8)
    diverged: bool = False

    @property
    def velocities(self) -> np.ndarray:
        return self.states[1:, :3]

    @property
    def transitions(self) -> np.ndarray:
        return np.concatenate([self.states[:-1], self.states[1:]], axis=1)


class OracleAgent:
    """Scripted agent that realises the commanded body velocity exactly."""

    kind = "oracle"

    def rollout(self, command, steps: int, cfg: EnvConfig, smooth: bool = True) -> Trace:
        cmd = np.tile(np.asarray(command, dtype=float), (steps, 1))
        states = np.zeros((steps + 1, STATE_DIM))
        states[1:, :3] = cmd
        return Trace(states, cmd, np.zeros((steps, 8)))


class PolicyAgent:
    """Runs a deterministic policy ``act(states, cmds) -> actions`` in the plant."""

    kind = "policy"

    def __init__(self, act):
        self.act = act

    def rollout(self, command, steps: int, cfg: EnvConfig, smooth: bool = True) -> Trace:
        target = np.asarray(command, dtype=float)
        s = np.zeros(STATE_DIM)
        cmd = np.zeros(3) if smooth else target.copy()
        states = [s]
        cmds, taus = [], []
        diverged = False
        for _ in range(steps):
            if smooth:
                cmd = cmd + cfg.ema_alpha * (target - cmd)
            a = self.act(s[None, :], cmd[None, :])[0]
            out = step(s, a, cmd, cfg)
            s = out.state
            if out.failed or not np.all(np.isfinite(s)):
                diverged = True
                break
            states.append(s)
            cmds.append(cmd.copy())
            taus.append(out.info["tau_raw"])
        return Trace(np.array(states), np.array(cmds).reshape(-1, 3), np.array(taus).reshape(-1, 8), diverged)


@dataclass
class TrackingReport:
    profile: str
    command: tuple
    distance: float
    position_deviation: float | None
    heading_drift: float | None
    progress: float | None = None
    failed: bool = False

    def as_dict(self):
        return asdict(self)


def integrate_path(velocities, dt: float):
    """Planar positions and headings from body-frame (vx, vy, wz); both start at zero."""
    v = np.asarray(velocities, dtype=float)
    heading = np.concatenate([[0.0], np.cumsum(v[:, 2] * dt)])
    c, s = np.cos(heading[:-1]), np.sin(heading[:-1])
    dx = (c * v[:, 0] - s * v[:, 1]) * dt
    dy = (s * v[:, 0] + c * v[:, 1]) * dt
    pos = np.concatenate([np.zeros((1, 2)), np.stack([np.cumsum(dx), np.cumsum(dy)], axis=1)])
    return pos, heading


def tracking_from_velocities(velocities, command, dt: float):
    """(mean perpendicular distance to the commanded line, |heading drift|, along-track progress)."""
    pos, heading = integrate_path(velocities, dt)
    planar = np.asarray(command[:2], dtype=float)
    norm = np.linalg.norm(planar)
    if norm == 0:
        perp = np.linalg.norm(pos, axis=1)
        progress = 0.0
    else:
        u = planar / norm
        perp = np.abs(u[0] * pos[:, 1] - u[1] * pos[:, 0])
        progress = float(pos[-1] @ u)
    return float(perp[1:].mean()) if len(perp) > 1 else 0.0, float(abs(heading[-1] - heading[0])), progress


def tracking_steps(command, distance: float, dt: float) -> int:
    speed = float(np.linalg.norm(np.asarray(command[:2], dtype=float)))
    if speed == 0:
        raise ValueError("tracking profile needs a nonzero planar command")
    return int(math.ceil(distance / speed / dt))


def steps_to_distance(velocities, command, distance: float, dt: float):
    """Number of steps until along-track progress first reaches ``distance`` (None if never)."""
    pos, _ = integrate_path(velocities, dt)
    u = np.asarray(command[:2], dtype=float)
    u = u / np.linalg.norm(u)
    hit = np.nonzero(pos[1:] @ u >= distance - 1e-9)[0]
    return int(hit[0]) + 1 if hit.size else None


def tracking_eval(agent, cfg: EnvConfig, profile, distance: float, name: str = "custom",
                  time_budget: float = TIME_BUDGET) -> TrackingReport:
    """Deviation and drift accumulated while covering ``distance`` along the commanded line.

    The agent gets ``time_budget`` times the nominal duration; one that never covers the
    distance (stalls, spins or walks elsewhere) is reported as failed.
    """
    command = tuple(float(c) for c in (profile.to_array() if hasattr(profile, "to_array") else profile))
    steps = int(math.ceil(time_budget * tracking_steps(command, distance, cfg.dt)))
    trace = agent.rollout(command, steps, cfg)
    if trace.diverged:
        return TrackingReport(name, command, distance, None, None, None, failed=True)
    reach = steps_to_distance(trace.velocities, command, distance, cfg.dt)
    if reach is None:
        _, _, prog = tracking_from_velocities(trace.velocities, command, cfg.dt)
        return TrackingReport(name, command, distance, None, None, prog, failed=True)
    dev, drift, prog = tracking_from_velocities(trace.velocities[:reach], command, cfg.dt)
    return TrackingReport(name, command, distance, dev, drift, prog)


def tracking_suite(agent, cfg: EnvConfig, profiles=TRACKING_PROFILES) -> dict:
    return {name: tracking_eval(agent, cfg, cmd, dist, name) for name, (cmd, dist) in profiles.items()}


# -- safety --------------------------------------------------------------------

def count_safety_violations(tau_raw, dq, q, limits) -> dict:
    """Steps where any joint exceeds its position, velocity or (pre-clip) torque limit."""
    tau_raw = np.atleast_2d(np.asarray(tau_raw, dtype=float))
    dq = np.atleast_2d(np.asarray(dq, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    return {
        "position": int(np.any(np.abs(q) > limits.q_lim, axis=1).sum()),
        "velocity": int(np.any(np.abs(dq) > limits.dq_lim, axis=1).sum()),
        "torque": int(np.any(np.abs(tau_raw) > limits.tau_lim, axis=1).sum()),
    }


def trace_violations(trace: Trace, cfg: EnvConfig) -> dict:
    nxt = trace.states[1:]
    return count_safety_violations(trace.tau_raw, nxt[:, 12:20], nxt[:, 4:12], cfg.limits())


def sprint_violations(agent, cfg: EnvConfig, command=SPRINT_COMMAND, seconds: float = SPRINT_SECONDS) -> dict:
    steps = int(round(seconds / cfg.dt))
    trace = agent.rollout(command, steps, cfg)
    counts = trace_violations(trace, cfg)
    counts["diverged"] = trace.diverged
    return counts


# -- footfall -------------------------------------------------------------------

@dataclass
class FootfallStats:
    stance: np.ndarray                 # (T, 4) bool
    intervals: dict = field(default_factory=dict)  # leg -> [(start, end_exclusive)]
    support: np.ndarray = None         # (T,) int in 0..4


def _runs(flags):
    runs, start = [], None
    for i, f in enumerate(flags):
        if f and start is None:
            start = i
        elif not f and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(flags)))
    return runs


def footfall_stats(states) -> FootfallStats:
    stance = stance_proxy(np.asarray(states, dtype=float))
    intervals = {leg: _runs(stance[:, i]) for i, leg in enumerate(LEGS)}
    return FootfallStats(stance, intervals, stance.sum(axis=1).astype(int))


def stance_overlap(stats: FootfallStats, leg_a: str, leg_b: str) -> float:
    """Intersection-over-union of two legs' stance windows."""
    a = stats.stance[:, LEGS.index(leg_a)]
    b = stats.stance[:, LEGS.index(leg_b)]
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)


# -- PCA --------------------------------------------------------------------------

@dataclass
class Embedding:
    points: np.ndarray
    explained: np.ndarray
    components: np.ndarray
    mean: np.ndarray
    degenerate: bool = False

    def project(self, rows):
        return (np.asarray(rows, dtype=float) - self.mean) @ self.components.T


def pca_embed(features, dims: int = 2, tol: float = 1e-12) -> Embedding:
    x = np.asarray(features, dtype=float)
    if x.ndim != 2 or x.shape[0] < dims:
        raise ValueError(f"need at least {dims} rows")
    mean = x.mean(axis=0)
    xc = x - mean
    _, sv, vt = np.linalg.svd(xc, full_matrices=False)
    var = sv ** 2 / max(x.shape[0] - 1, 1)
    total = var.sum()
    rank = int((sv > tol * max(sv.max(initial=0.0), 1.0)).sum())
    comps = np.zeros((dims, x.shape[1]))
    explained = np.zeros(dims)
    keep = min(rank, dims)
    for i in range(keep):
        c = vt[i]
        if c[np.argmax(np.abs(c))] < 0:
            c = -c
        comps[i] = c
        explained[i] = var[i] / total if total > 0 else 0.0
    return Embedding(xc @ comps.T, explained, comps, mean, degenerate=rank < dims)


# -- report --------------------------------------------------------------------------

REPORT_SCHEMA = 1
COMPARE_COLUMNS = ("variant", "tracking_err", "heading_drift", "fgd", "torque_violations",
                   "velocity_violations", "position_violations")


def write_report(path, report: dict):
    doc = dict(report)
    doc.setdefault("schema_version", REPORT_SCHEMA)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def read_report(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != REPORT_SCHEMA:
        raise ValueError(f"{path}: unsupported report schema {doc.get('schema_version')!r}")
    for key in ("variant", "tracking", "fgd", "violations"):
        if key not in doc:
            raise ValueError(f"{path}: report missing {key!r}")
    return doc


def compare_rows(reports) -> list:
    rows = []
    for doc in reports:
        fwd = doc["tracking"].get("forward_walk", {})
        rows.append({
            "variant": doc["variant"],
            "tracking_err": fwd.get("position_deviation"),
            "heading_drift": fwd.get("heading_drift"),
            "fgd": doc["fgd"],
            "torque_violations": doc["violations"].get("torque"),
            "velocity_violations": doc["violations"].get("velocity"),
            "position_violations": doc["violations"].get("position"),
        })
    return rows


# -- plots ------------------------------------------------------------------------------

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_trajectories(traces: dict, dt: float, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 5))
    for name, (trace, command) in traces.items():
        pos, _ = integrate_path(trace.velocities, dt)
        ax.plot(pos[:, 0], pos[:, 1], label=name)
        end = np.asarray(command[:2]) * len(trace.velocities) * dt
        ax.plot([0, end[0]], [0, end[1]], "k--", lw=0.6)
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.axis("equal")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_footfall(stats: FootfallStats, dt: float, path):
    plt = _pyplot()
    fig, (ax, bx) = plt.subplots(2, 1, figsize=(7, 3), sharex=True, gridspec_kw={"height_ratios": [3, 1]})
    for i, leg in enumerate(LEGS):
        for a, b in stats.intervals[leg]:
            ax.barh(i, (b - a) * dt, left=a * dt, color="tab:blue")
    ax.set_yticks(range(4), LEGS)
    t = np.arange(len(stats.support)) * dt
    bx.step(t, stats.support, where="post")
    bx.set_ylim(-0.2, 4.2)
    bx.set_xlabel("t (s)")
    bx.set_ylabel("support")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_pca(expert_rows, agent_rows, path):
    plt = _pyplot()
    emb = pca_embed(expert_rows, 2)
    pa = emb.points
    pb = emb.project(agent_rows)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(pa[:, 0], pa[:, 1], s=2, alpha=0.3, label="expert")
    ax.scatter(pb[:, 0], pb[:, 1], s=2, alpha=0.3, label="agent", color="tab:orange")
    ax.set_xlabel(f"PC1 ({emb.explained[0]:.0%})")
    ax.set_ylabel(f"PC2 ({emb.explained[1]:.0%})")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
