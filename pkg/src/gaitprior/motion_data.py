"""States, transitions, commands, the scripted expert dataset and its augmentations.

State layout (20 floats, heading-decoupled body frame)::

    [vx, vy, wz, roll, q(8), dq(8)]

with joints ordered ``FL_hip, FL_knee, FR_hip, FR_knee, RL_hip, RL_knee,
RR_hip, RR_knee``. A transition is the concatenation ``[s_t, s_{t+1}]`` (40).
All array functions accept arbitrary leading batch dimensions.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import kernels

JOINT_NAMES = (
    "FL_hip", "FL_knee", "FR_hip", "FR_knee",
    "RL_hip", "RL_knee", "RR_hip", "RR_knee",
)
LEGS = ("FL", "FR", "RL", "RR")
STATE_DIM = 20
TRANSITION_DIM = 40
COMMAND_DIM = 3
ACTION_DIM = 8

# index helpers into the flat state
VX, VY, WZ, ROLL = 0, 1, 2, 3
Q = slice(4, 12)
DQ = slice(12, 20)
HIP_IDX = np.array([0, 2, 4, 6])
KNEE_IDX = np.array([1, 3, 5, 7])
LEFT_LEGS = np.array([0, 2])   # FL, RL
RIGHT_LEGS = np.array([1, 3])  # FR, RR

GAIT_PHASES = {
    "walk": np.array([0.0, 0.5, 0.75, 0.25]) * 2 * np.pi,
    "trot": np.array([0.0, 0.5, 0.5, 0.0]) * 2 * np.pi,
    "bound": np.array([0.0, 0.0, 0.5, 0.5]) * 2 * np.pi,
}


class UnusableDataError(ValueError):
    """Raised when motion data cannot be used (empty clips, bad files)."""


@dataclass(frozen=True)
class LocomotorState:
    vx: float = 0.0
    vy: float = 0.0
    wz: float = 0.0
    roll: float = 0.0
    q: np.ndarray = field(default_factory=lambda: np.zeros(8))
    dq: np.ndarray = field(default_factory=lambda: np.zeros(8))

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(8)
        dq = np.asarray(self.dq, dtype=float).reshape(8)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "dq", dq)
        flat = self.to_array()
        if not np.all(np.isfinite(flat)):
            raise ValueError("state has non-finite components")
        if abs(self.roll) > np.pi:
            raise ValueError(f"|roll| must be <= pi, got {self.roll}")

    def to_array(self) -> np.ndarray:
        return np.concatenate([[self.vx, self.vy, self.wz, self.roll], self.q, self.dq])

    @classmethod
    def from_array(cls, arr) -> "LocomotorState":
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (STATE_DIM,):
            raise ValueError(f"expected shape (20,), got {arr.shape}")
        return cls(arr[0], arr[1], arr[2], arr[3], arr[Q].copy(), arr[DQ].copy())


@dataclass(frozen=True)
class Transition:
    s0: LocomotorState
    s1: LocomotorState
    dt: float

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.s0.to_array(), self.s1.to_array()])


@dataclass(frozen=True)
class VelocityCommand:
    vx_cmd: float = 0.0
    vy_cmd: float = 0.0
    wz_cmd: float = 0.0

    def to_array(self) -> np.ndarray:
        return np.array([self.vx_cmd, self.vy_cmd, self.wz_cmd], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "VelocityCommand":
        vx, vy, wz = np.asarray(arr, dtype=float).reshape(3)
        return cls(float(vx), float(vy), float(wz))


@dataclass(frozen=True)
class CommandEnvelope:
    """Box of admissible commands, stored as per-axis (low, high)."""

    vx: tuple = (-3.5, 3.5)
    vy: tuple = (-1.0, 1.0)
    wz: tuple = (-1.5, 1.5)

    @property
    def low(self) -> np.ndarray:
        return np.array([self.vx[0], self.vy[0], self.wz[0]], dtype=float)

    @property
    def high(self) -> np.ndarray:
        return np.array([self.vx[1], self.vy[1], self.wz[1]], dtype=float)

    def contains(self, cmd) -> bool:
        c = np.asarray(cmd, dtype=float)
        return bool(np.all(c >= self.low) and np.all(c <= self.high))


@dataclass(frozen=True)
class MorphologyMap:
    """Sagittal-plane mirror acting on joints, base features and commands.

    ``mirrored[j] = joint_sign[j] * x[swap[j]]`` for joint vectors.
    """

    swap: tuple = (2, 3, 0, 1, 6, 7, 4, 5)
    joint_sign: tuple = (1.0,) * 8
    state_sign: tuple = (1.0, -1.0, -1.0, -1.0)
    cmd_sign: tuple = (1.0, -1.0, -1.0)

    def __post_init__(self):
        swap = np.asarray(self.swap)
        if sorted(swap.tolist()) != list(range(8)):
            raise ValueError("swap must be a permutation of range(8)")
        if not np.array_equal(swap[swap], np.arange(8)):
            raise ValueError("swap must be an involution")
        sign = np.asarray(self.joint_sign, dtype=float)
        if not np.array_equal(sign * sign[swap], np.ones(8)):
            raise ValueError("joint_sign is inconsistent with an involutive mirror")

    @property
    def state_perm(self) -> np.ndarray:
        return np.concatenate([np.arange(4), 4 + np.asarray(self.swap), 12 + np.asarray(self.swap)])

    @property
    def state_signs(self) -> np.ndarray:
        js = np.asarray(self.joint_sign, dtype=float)
        return np.concatenate([np.asarray(self.state_sign, dtype=float), js, js])

    def state_matrix(self) -> np.ndarray:
        """20x20 signed permutation matrix P with mirror_state(s) = P @ s."""
        return _signed_perm_matrix(self.state_perm, self.state_signs)

    def action_matrix(self) -> np.ndarray:
        return _signed_perm_matrix(np.asarray(self.swap), np.asarray(self.joint_sign, dtype=float))

    def command_matrix(self) -> np.ndarray:
        return np.diag(np.asarray(self.cmd_sign, dtype=float))


def _signed_perm_matrix(perm, signs):
    n = len(perm)
    m = np.zeros((n, n))
    m[np.arange(n), perm] = signs
    return m


DEFAULT_MORPHOLOGY = MorphologyMap()


def mirror_state(s, m: MorphologyMap = DEFAULT_MORPHOLOGY):
    if isinstance(s, LocomotorState):
        return LocomotorState.from_array(mirror_state(s.to_array(), m))
    s = np.asarray(s, dtype=float)
    return s[..., m.state_perm] * m.state_signs


def mirror_transition(x, m: MorphologyMap = DEFAULT_MORPHOLOGY):
    if isinstance(x, Transition):
        return Transition(mirror_state(x.s0, m), mirror_state(x.s1, m), x.dt)
    x = np.asarray(x, dtype=float)
    return np.concatenate([mirror_state(x[..., :STATE_DIM], m), mirror_state(x[..., STATE_DIM:], m)], axis=-1)


def mirror_command(v, m: MorphologyMap = DEFAULT_MORPHOLOGY):
    if isinstance(v, VelocityCommand):
        return VelocityCommand.from_array(mirror_command(v.to_array(), m))
    return np.asarray(v, dtype=float) * np.asarray(m.cmd_sign, dtype=float)


def mirror_action(a, m: MorphologyMap = DEFAULT_MORPHOLOGY):
    a = np.asarray(a, dtype=float)
    return a[..., list(m.swap)] * np.asarray(m.joint_sign, dtype=float)


def _rotate_planar(v, delta):
    c, s = np.cos(delta), np.sin(delta)
    out = v.copy()
    out[..., 0] = c * v[..., 0] - s * v[..., 1]
    out[..., 1] = s * v[..., 0] + c * v[..., 1]
    return out


def yaw_rotate_transition(x, cmd, delta):
    """Rotate the planar velocities of both states and the command by ``delta``.

    ``delta`` may be a scalar or broadcast against the batch dimensions.
    """
    if isinstance(x, Transition):
        arr, c = yaw_rotate_transition(x.to_array(), VelocityCommand.to_array(cmd), delta)
        return (
            Transition(LocomotorState.from_array(arr[:STATE_DIM]), LocomotorState.from_array(arr[STATE_DIM:]), x.dt),
            VelocityCommand.from_array(c),
        )
    delta = np.asarray(delta, dtype=float)
    if np.any(np.abs(delta) > np.pi):
        raise ValueError("yaw offset must lie in [-pi, pi]")
    x = np.asarray(x, dtype=float)
    cmd = np.asarray(cmd, dtype=float)
    out = x.copy()
    out[..., 0:2] = _rotate_planar(x[..., 0:2], delta)
    out[..., STATE_DIM:STATE_DIM + 2] = _rotate_planar(x[..., STATE_DIM:STATE_DIM + 2], delta)
    return out, _rotate_planar(cmd, delta)


def augment_expert_batch(transitions, commands, m: MorphologyMap, rng: np.random.Generator,
                         mirror_prob: float = 0.5, yaw: bool = True):
    """Mirror each sample with probability ``mirror_prob``, then rotate by a fresh yaw offset."""
    x = np.asarray(transitions, dtype=float)
    c = np.asarray(commands, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("augment_expert_batch needs a nonempty (N, 40) batch")
    n = x.shape[0]
    flip = rng.random(n) < mirror_prob
    x = np.where(flip[:, None], mirror_transition(x, m), x)
    c = np.where(flip[:, None], mirror_command(c, m), c)
    if yaw:
        delta = rng.uniform(-np.pi, np.pi, size=n)
        x, c = yaw_rotate_transition(x, c, delta)
    return x, c


def relabel_commands(states, window: int) -> np.ndarray:
    """Hindsight pseudo-commands: centered moving average of (vx, vy, wz).

    Near the clip edges the window is truncated to the valid range.
    """
    states = np.asarray(states, dtype=float)
    if states.ndim != 2 or states.shape[0] == 0:
        raise UnusableDataError("cannot relabel an empty clip")
    if window < 1 or states.shape[0] < window:
        raise ValueError(f"need clip length >= window >= 1 (len={states.shape[0]}, window={window})")
    vel = np.ascontiguousarray(states[:, :3])
    return kernels.centered_moving_average(vel, int(window))


# -- scripted expert ---------------------------------------------------------

GAIT_BANDS = {"walk": (0.0, 1.0), "trot": (1.0, 3.0), "bound": (3.0, 10.0)}


def _in_band(gait, speed):
    if gait == "walk":
        return 0.0 <= speed < 1.0
    if gait == "trot":
        return 1.0 <= speed <= 3.0
    if gait == "bound":
        return 3.0 < speed <= 10.0
    raise ValueError(f"unknown gait {gait!r}")


@dataclass(frozen=True)
class GaitScaling:
    """Affine speed laws for the scripted gait and the signal amplitudes."""

    freq0: float = 1.0       # Hz at zero speed
    freq_slope: float = 0.4  # Hz per m/s
    hip0: float = 0.15       # rad
    hip_slope: float = 0.1   # rad per m/s
    knee_amp: float = 0.6    # rad
    knee_lag: float = np.pi / 2
    noise: float = 0.05      # amplitude of the vx noise (m/s)
    lateral_amp: float = 0.03
    yaw_amp: float = 0.03
    roll_amp: float = 0.02


def synth_expert(gait: str, speed: float, duration: float, seed: int, dt: float = 0.02,
                 yaw_bias: float = 0.0, scaling: GaitScaling = GaitScaling()) -> np.ndarray:
    """Generate a deterministic (T, 20) state sequence for one scripted gait.

    ``yaw_bias`` adds a constant turning rate (rad/s) realised by a
    left/right hip-amplitude imbalance; the default dataset uses it to bake a
    one-sided turning bias into the demonstrations.
    """
    if not _in_band(gait, speed):
        lo, hi = GAIT_BANDS[gait]
        raise ValueError(f"speed {speed} outside the {gait} band ({lo}, {hi})")
    if duration <= dt:
        raise ValueError("duration must exceed one control period")
    rng = np.random.default_rng(seed)
    n = int(round(duration / dt))
    t = np.arange(n) * dt
    f = scaling.freq0 + scaling.freq_slope * speed
    w = 2 * np.pi * f
    amp_hip = scaling.hip0 + scaling.hip_slope * speed
    phase0 = rng.uniform(0, 2 * np.pi)
    psi = GAIT_PHASES[gait]

    # right legs swing wider for a positive (left) turn
    side_gain = np.array([1.0 - yaw_bias, 1.0 + yaw_bias, 1.0 - yaw_bias, 1.0 + yaw_bias])
    side_gain = np.clip(side_gain, 0.0, 2.0)

    states = np.zeros((n, STATE_DIM))
    for leg in range(4):
        ph = w * t + phase0 + psi[leg]
        a_h = amp_hip * side_gain[leg]
        states[:, 4 + HIP_IDX[leg]] = a_h * np.sin(ph)
        states[:, 12 + HIP_IDX[leg]] = a_h * w * np.cos(ph)
        kp = ph + scaling.knee_lag
        lifted = np.sin(kp) > 0
        states[:, 4 + KNEE_IDX[leg]] = scaling.knee_amp * np.maximum(0.0, np.sin(kp))
        states[:, 12 + KNEE_IDX[leg]] = np.where(lifted, scaling.knee_amp * w * np.cos(kp), 0.0)

    states[:, VX] = speed + _bounded_noise(rng, t, scaling.noise)
    states[:, VY] = scaling.lateral_amp * np.sin(w * t + rng.uniform(0, 2 * np.pi))
    states[:, WZ] = yaw_bias + scaling.yaw_amp * np.sin(w * t + rng.uniform(0, 2 * np.pi))
    states[:, ROLL] = scaling.roll_amp * np.sin(2 * w * t + rng.uniform(0, 2 * np.pi))
    return states


def _bounded_noise(rng, t, amp):
    # sum of random-phase sinusoids, normalised so |noise| <= amp
    if amp == 0:
        return np.zeros_like(t)
    freqs = rng.uniform(0.1, 2.0, size=4)
    phases = rng.uniform(0, 2 * np.pi, size=4)
    weights = rng.uniform(0.5, 1.0, size=4)
    sig = sum(wgt * np.sin(2 * np.pi * fr * t + ph) for wgt, fr, ph in zip(weights, freqs, phases))
    return amp * sig / weights.sum()


# -- dataset -----------------------------------------------------------------

@dataclass
class Clip:
    gait: str
    speed: float
    states: np.ndarray
    commands: np.ndarray | None = None
    yaw_bias: float = 0.0

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2 or self.states.shape[1] != STATE_DIM or self.states.shape[0] < 2:
            raise UnusableDataError("a clip needs at least two 20-dim states")
        if self.commands is not None:
            self.commands = np.asarray(self.commands, dtype=float)
            if self.commands.shape != (self.states.shape[0], COMMAND_DIM):
                raise UnusableDataError("commands must parallel the state sequence")


@dataclass
class MotionDataset:
    dt: float
    clips: list

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    def transitions(self):
        """All consecutive (s_t, s_{t+1}) pairs with the pseudo-command at t."""
        xs, cs = [], []
        for clip in self.clips:
            if clip.commands is None:
                raise UnusableDataError("dataset has not been relabelled")
            xs.append(np.concatenate([clip.states[:-1], clip.states[1:]], axis=1))
            cs.append(clip.commands[:-1])
        if not xs:
            raise UnusableDataError("dataset is empty")
        return np.concatenate(xs), np.concatenate(cs)

    def transition_stats(self):
        x, _ = self.transitions()
        return x.mean(axis=0), x.std(axis=0)


DEFAULT_GRID = (
    ("walk", 0.5, 0.0),
    ("walk", 0.8, 0.0),
    ("walk", 0.8, 0.3),
    ("trot", 1.0, 0.0),
    ("trot", 1.5, 0.0),
    ("trot", 1.5, 0.3),
    ("trot", 2.0, 0.0),
    ("trot", 2.5, 0.0),
    ("trot", 3.0, 0.0),
    ("bound", 3.2, 0.0),
    ("bound", 3.5, 0.0),
)


@dataclass
class DatasetConfig:
    grid: tuple = DEFAULT_GRID  # (gait, speed, yaw_bias) triples
    duration: float = 10.0
    dt: float = 0.02
    seed: int = 0
    window: int = 25
    scaling: GaitScaling = GaitScaling()


def build_expert_dataset(config: DatasetConfig = DatasetConfig(), path=None) -> MotionDataset:
    if len(config.grid) == 0:
        raise UnusableDataError("empty (gait, speed) grid")
    seeds = np.random.SeedSequence(config.seed).spawn(len(config.grid))
    clips = []
    for entry, ss in zip(config.grid, seeds):
        gait, speed = entry[0], float(entry[1])
        bias = float(entry[2]) if len(entry) > 2 else 0.0
        states = synth_expert(gait, speed, config.duration, int(ss.generate_state(1)[0]),
                              dt=config.dt, yaw_bias=bias, scaling=config.scaling)
        clips.append(Clip(gait, speed, states, relabel_commands(states, config.window), bias))
    ds = MotionDataset(config.dt, clips)
    if path is not None:
        save_dataset(ds, path)
    return ds


def save_dataset(ds: MotionDataset, path) -> None:
    doc = {
        "dt": ds.dt,
        "joint_order": list(JOINT_NAMES),
        "clips": [
            {
                "gait": c.gait,
                "speed": c.speed,
                "yaw_bias": c.yaw_bias,
                "states": c.states.tolist(),
                "commands": None if c.commands is None else c.commands.tolist(),
            }
            for c in ds.clips
        ],
    }
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_dataset(path) -> MotionDataset:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    for key in ("dt", "joint_order", "clips"):
        if key not in doc:
            raise UnusableDataError(f"dataset file missing key {key!r}")
    if list(doc["joint_order"]) != list(JOINT_NAMES):
        raise UnusableDataError(f"joint_order {doc['joint_order']} differs from {list(JOINT_NAMES)}")
    clips = [
        Clip(c["gait"], float(c["speed"]), np.array(c["states"], dtype=float),
             None if c.get("commands") is None else np.array(c["commands"], dtype=float),
             float(c.get("yaw_bias", 0.0)))
        for c in doc["clips"]
    ]
    return MotionDataset(float(doc["dt"]), clips)


def forward_fraction(ds: MotionDataset) -> float:
    """Fraction of clips whose mean velocity is dominated by forward motion."""
    if not ds.clips:
        return 0.0
    fwd = 0
    for c in ds.clips:
        v = c.states[:, :2].mean(axis=0)
        fwd += v[0] > 0 and abs(v[0]) >= abs(v[1])
    return fwd / len(ds.clips)
