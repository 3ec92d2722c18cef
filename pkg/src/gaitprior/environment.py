"""Deterministic planar-quadruped plant with actuator-limit cost channels.

The plant is an abstraction rather than physics. Each joint is a PD-driven
inertia; a leg is "loaded" while its knee is extended, and loaded joint
velocities are mapped to base accelerations through a fixed 3x8 coupling
matrix built to be mirror-equivariant (hips sweep the body forward and yaw it,
knees push it sideways).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import config, kernels
from .config import ConfigError
from .motion_data import (
    DEFAULT_MORPHOLOGY,
    HIP_IDX,
    KNEE_IDX,
    STATE_DIM,
    CommandEnvelope,
    LocomotorState,
    MorphologyMap,
    VelocityCommand,
)

SIDE = np.array([1.0, -1.0, 1.0, -1.0])  # FL, FR, RL, RR; +1 = left


@dataclass(frozen=True)
class ActuatorLimits:
    q_lim: np.ndarray
    dq_lim: np.ndarray
    tau_lim: np.ndarray

    def __post_init__(self):
        for name in ("q_lim", "dq_lim", "tau_lim"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(8)
            if not np.all(arr > 0):
                raise ConfigError(f"{name} must be strictly positive")
            object.__setattr__(self, name, arr)


@dataclass
class EnvConfig:
    dt: float = 0.02
    kp: float = 12.0
    kd: float = 0.3
    inertia_hip: float = 0.04
    inertia_knee: float = 0.02
    damping: float = 0.1
    q_lim_hip: float = 0.9
    q_lim_knee: float = 1.2
    dq_lim: float = 14.0
    tau_lim: float = 8.0
    coupling_x: float = 0.6
    coupling_y: float = 0.35
    coupling_yaw: float = 0.5
    drag_x: float = 2.0
    drag_y: float = 2.0
    drag_yaw: float = 2.0
    roll_relax: float = 5.0
    roll_coupling: float = 0.02
    knee_thresh: float = 0.25
    knee_width: float = 0.06
    reflex_gain: float = 0.1
    reflex_scale: float = 0.1
    sigma_v: float = 0.25
    sigma_w: float = 0.25
    episode_length: int = 1000
    ema_alpha: float = 0.05
    zero_window: int = 100
    obs_noise: float = 0.0
    reset_scale: float = 0.05
    cmd_vx_min: float = -3.5
    cmd_vx_max: float = 3.5
    cmd_vy_min: float = -1.0
    cmd_vy_max: float = 1.0
    cmd_wz_min: float = -1.5
    cmd_wz_max: float = 1.5
    command_interval: int = 250

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if not 0 < self.ema_alpha <= 1:
            raise ConfigError("ema_alpha must lie in (0, 1]")
        if not 0 <= self.zero_window < self.episode_length:
            raise ConfigError("zero_window must be smaller than episode_length")
        for name in ("kp", "inertia_hip", "inertia_knee", "sigma_v", "sigma_w", "knee_width", "reflex_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.command_interval < 1:
            raise ConfigError("command_interval must be >= 1")
        self.limits()  # positivity checks

    def limits(self) -> ActuatorLimits:
        q = np.where(np.isin(np.arange(8), HIP_IDX), self.q_lim_hip, self.q_lim_knee)
        return ActuatorLimits(q, np.full(8, self.dq_lim), np.full(8, self.tau_lim))

    def inertia(self) -> np.ndarray:
        return np.where(np.isin(np.arange(8), HIP_IDX), self.inertia_hip, self.inertia_knee)

    def coupling_matrix(self) -> np.ndarray:
        """B (3x8) acting on loaded joint velocities."""
        B = np.zeros((3, 8))
        B[0, HIP_IDX] = -self.coupling_x
        B[1, KNEE_IDX] = self.coupling_y * SIDE
        B[2, HIP_IDX] = self.coupling_yaw * SIDE
        return B

    def drag(self) -> np.ndarray:
        return np.array([self.drag_x, self.drag_y, self.drag_yaw])

    def envelope(self) -> CommandEnvelope:
        return CommandEnvelope((self.cmd_vx_min, self.cmd_vx_max), (self.cmd_vy_min, self.cmd_vy_max),
                               (self.cmd_wz_min, self.cmd_wz_max))

    def replace(self, **kw) -> "EnvConfig":
        return dataclasses.replace(self, **kw)


def parse_flat_config(text: str, cls=None):
    """Parse ``key = value`` lines into ``cls`` (default EnvConfig); unknown keys are rejected."""
    return config.build(cls or EnvConfig, config.read_flat(text))


def load_env_config(path) -> EnvConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_flat_config(fh.read(), EnvConfig)


def dump_flat_config(cfg) -> str:
    return config.dump(cfg)


@dataclass
class StepOutput:
    state: np.ndarray          # (E, 20)
    r_task: np.ndarray         # (E,)
    costs: np.ndarray          # (E, 3) position, velocity, torque
    violations: np.ndarray     # (E, 3) bool
    failed: np.ndarray         # (E,) bool, non-finite action
    info: dict = field(default_factory=dict)


def step(s, a, cmd, cfg: EnvConfig) -> StepOutput:
    """Advance the plant one control period. Works on single states or (E, ...) batches."""
    single = isinstance(s, LocomotorState) or np.ndim(s) == 1
    s_arr = np.atleast_2d(s.to_array() if isinstance(s, LocomotorState) else np.asarray(s, dtype=float))
    a_arr = np.atleast_2d(np.asarray(a, dtype=float))
    c_arr = np.atleast_2d(cmd.to_array() if isinstance(cmd, VelocityCommand) else np.asarray(cmd, dtype=float))
    failed = ~np.all(np.isfinite(a_arr), axis=1)
    if failed.any():
        a_arr = np.where(failed[:, None], s_arr[:, 4:12], a_arr)
    lim = cfg.limits()
    nxt, r_task, costs, tau_raw, tau = kernels.plant_step(
        np.ascontiguousarray(s_arr), np.ascontiguousarray(a_arr), np.ascontiguousarray(c_arr),
        cfg.dt, cfg.kp, cfg.kd, cfg.damping, cfg.inertia(), lim.q_lim, lim.dq_lim, lim.tau_lim,
        cfg.coupling_matrix(), cfg.drag(), cfg.roll_relax, cfg.roll_coupling,
        cfg.knee_thresh, cfg.knee_width, cfg.reflex_gain, cfg.reflex_scale, cfg.sigma_v, cfg.sigma_w,
    )
    nxt = np.where(failed[:, None], s_arr, nxt)
    out = StepOutput(nxt, r_task, costs, costs > 0, failed,
                     {"tau_raw": tau_raw, "tau": tau, "stance": stance_proxy(nxt)})
    if single:
        out = StepOutput(nxt[0], r_task[0], costs[0], costs[0] > 0, failed[0],
                         {k: v[0] for k, v in out.info.items()})
    return out


def stance_proxy(s) -> np.ndarray:
    """A leg counts as in stance while its hip sweeps backward."""
    arr = s.to_array() if isinstance(s, LocomotorState) else np.asarray(s, dtype=float)
    return arr[..., 12 + HIP_IDX] < 0


def sample_raw_command(rng: np.random.Generator, envelope: CommandEnvelope, curriculum_stage: float = 1.0,
                       size=None) -> np.ndarray:
    """Uniform command over the envelope, shrunk toward its centre for stage < 1."""
    stage = float(np.clip(curriculum_stage, 0.0, 1.0))
    low, high = envelope.low, envelope.high
    mid = 0.5 * (low + high)
    half = 0.5 * (high - low) * stage
    shape = (3,) if size is None else (size, 3)
    return mid + half * rng.uniform(-1.0, 1.0, size=shape)


def smooth_command(prev, target, alpha: float):
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    prev = np.asarray(prev, dtype=float)
    return prev + alpha * (np.asarray(target, dtype=float) - prev)


def episode_command_schedule(t, episode_length: int, zero_window: int, raw):
    """Zero the raw command during the final ``zero_window`` steps of an episode."""
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= episode_length):
        raise ValueError("t must satisfy 0 <= t < episode_length")
    raw = np.asarray(raw, dtype=float)
    late = t >= episode_length - zero_window
    return np.where(np.expand_dims(late, -1), 0.0, raw)


def reset(rng: np.random.Generator, cfg: EnvConfig, size=None) -> np.ndarray:
    shape = (STATE_DIM,) if size is None else (size, STATE_DIM)
    if cfg.reset_scale == 0:
        return np.zeros(shape)
    return rng.uniform(-cfg.reset_scale, cfg.reset_scale, size=shape)


class VecEnv:
    """E independent plants with per-instance RNG streams and the command curriculum.

    ``zero_override`` toggles the end-of-episode zero command.
    """

    def __init__(self, cfg: EnvConfig, num_envs: int, seed: int, zero_override: bool = True,
                 morphology: MorphologyMap = DEFAULT_MORPHOLOGY):
        self.cfg = cfg
        self.num_envs = num_envs
        self.zero_override = zero_override
        self.morphology = morphology
        self.rngs = [np.random.default_rng(ss) for ss in np.random.SeedSequence(seed).spawn(num_envs)]
        self.curriculum_stage = 1.0
        self.envelope = cfg.envelope()
        self.states = np.zeros((num_envs, STATE_DIM))
        self.t = np.zeros(num_envs, dtype=int)
        self.raw_cmd = np.zeros((num_envs, 3))
        self.smoothed_cmd = np.zeros((num_envs, 3))
        self.episode_cost = np.zeros((num_envs, 3))
        self.forced_command = None
        for i in range(num_envs):
            self._reset_one(i)

    def _reset_one(self, i):
        self.states[i] = reset(self.rngs[i], self.cfg)
        self.t[i] = 0
        self.smoothed_cmd[i] = 0.0
        self.episode_cost[i] = 0.0
        self._resample(i)

    def _resample(self, i):
        if self.forced_command is not None:
            self.raw_cmd[i] = self.forced_command
        else:
            self.raw_cmd[i] = sample_raw_command(self.rngs[i], self.envelope, self.curriculum_stage)

    def force_command(self, cmd):
        self.forced_command = None if cmd is None else np.asarray(cmd, dtype=float)
        if cmd is not None:
            self.raw_cmd[:] = self.forced_command

    def current_command(self) -> np.ndarray:
        """Apply the schedule and EMA for the current step; returns the smoothed command."""
        for i in range(self.num_envs):
            if self.t[i] > 0 and self.t[i] % self.cfg.command_interval == 0:
                self._resample(i)
        target = self.raw_cmd
        if self.zero_override:
            target = episode_command_schedule(self.t, self.cfg.episode_length, self.cfg.zero_window, self.raw_cmd)
        self.smoothed_cmd = smooth_command(self.smoothed_cmd, target, self.cfg.ema_alpha)
        return self.smoothed_cmd.copy()

    def observe(self) -> np.ndarray:
        if self.cfg.obs_noise == 0:
            return self.states.copy()
        noise = np.stack([r.standard_normal(STATE_DIM) for r in self.rngs])
        return self.states + self.cfg.obs_noise * noise

    def step(self, actions, cmd):
        """Step all envs; returns (StepOutput, next_states_before_reset, dones, timeouts)."""
        out = step(self.states, actions, cmd, self.cfg)
        next_states = out.state.copy()
        self.episode_cost += out.costs
        self.t += 1
        timeouts = self.t >= self.cfg.episode_length
        dones = timeouts | out.failed
        self.states = out.state
        for i in np.flatnonzero(dones):
            self._reset_one(i)
        return out, next_states, dones, timeouts & ~out.failed
