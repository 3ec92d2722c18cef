"""PPO with reward mixing, mirror-symmetry regularisation and a gated constraint penalty.

One training iteration collects a rollout under the frozen style prior, runs
the policy update, advances the penalty schedule and finally updates the prior
(diffusion classifier, or the logit discriminator in the baseline) on augmented
expert transitions against a FIFO reservoir of recent agent transitions.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import kernels
from .diffusion_prior import (
    AmpDiscriminator,
    Denoiser,
    NoiseSchedule,
    amp_bce_loss,
    amp_logit_reward,
    diffusion_bce_loss,
    style_reward,
)
from .environment import EnvConfig, VecEnv
from .motion_data import (
    ACTION_DIM,
    COMMAND_DIM,
    DEFAULT_MORPHOLOGY,
    STATE_DIM,
    MorphologyMap,
    MotionDataset,
    augment_expert_batch,
)
from .nets import DTYPE, as_tensor, mlp

log = logging.getLogger(__name__)

ABLATIONS = ("full", "no_sacc", "no_constraints", "vanilla_amp")
OBS_DIM = STATE_DIM + COMMAND_DIM
LOG_STD_RANGE = (-4.0, 1.0)
METRIC_COLUMNS = (
    "iteration", "mean_task_reward", "mean_diff_reward", "bce_loss", "sym_loss", "viol_loss",
    "lambda_1", "lambda_2", "lambda_3", "epcost_1", "epcost_2", "epcost_3",
    "tracking_err", "heading_drift", "fgd", "wallclock_s",
)


class TrainingDiverged(FloatingPointError):
    """A loss became non-finite."""


@dataclass
class TrainConfig:
    ablation: str = "full"
    seed: int = 0
    iterations: int = 300
    num_envs: int = 32
    horizon: int = 32
    w_task: float = 0.5
    w_diff: float = 0.5
    clip: float = 0.2
    epochs: int = 4
    minibatch: int = 512
    gamma: float = 0.99
    lam: float = 0.95
    entropy_coef: float = 0.0
    value_coef: float = 1.0
    lr_policy: float = 1e-3
    lr_prior: float = 3e-4
    max_grad_norm: float = 1.0
    lambda_sym: float = 0.5
    disc_steps: int = 2
    disc_batch: int = 256
    replay_size: int = 100000
    n_mc_reward: int = 4
    n_mc_train: int = 1
    antithetic: str = "noise"
    lambda0: float = 0.1
    lambda_growth: float = 2.0
    lambda_period: float = 200.0
    lambda_max: float = 10.0
    cost_limit_pos: float = 0.0
    cost_limit_vel: float = 0.0
    cost_limit_torque: float = 0.5
    init_log_std: float = -1.0
    actor_hidden: tuple = (64, 64)
    critic_hidden: tuple = (64, 64)
    prior_hidden: tuple = (256, 256)
    diffusion_steps: int = 50
    amp_gp_weight: float = 0.0
    prior_gp_weight: float = 0.0
    curriculum_start: float = 1.0
    curriculum_iters: int = 0
    equivariant_init: bool = True
    eval_every: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if not (0 < self.gamma < 1 and 0 < self.lam < 1):
            raise ValueError("gamma and lam must lie in (0, 1)")
        self.actor_hidden = tuple(int(h) for h in self.actor_hidden)
        self.critic_hidden = tuple(int(h) for h in self.critic_hidden)
        self.prior_hidden = tuple(int(h) for h in self.prior_hidden)

    @property
    def sacc(self) -> bool:
        return self.ablation != "no_sacc"

    @property
    def constrained(self) -> bool:
        return self.ablation != "no_constraints"

    @property
    def uses_amp(self) -> bool:
        return self.ablation == "vanilla_amp"

    @property
    def cost_limits(self) -> np.ndarray:
        return np.array([self.cost_limit_pos, self.cost_limit_vel, self.cost_limit_torque])

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def mix_reward(r_task, r_diff, cfg: TrainConfig):
    return cfg.w_task * np.asarray(r_task) + cfg.w_diff * np.asarray(r_diff)


# -- networks ------------------------------------------------------------------

OBS_SCALE = np.concatenate([[2.0, 1.0, 1.0, 0.2], np.full(8, 0.5), np.full(8, 5.0), [2.0, 1.0, 1.0]])


class ActorCritic(nn.Module):
    """Gaussian actor over target joint positions, value critic and a 3-head cost critic."""

    def __init__(self, actor_hidden=(64, 64), critic_hidden=(64, 64), init_log_std=-1.0, activation=nn.ELU):
        super().__init__()
        self.actor = mlp(OBS_DIM, actor_hidden, ACTION_DIM, activation).to(DTYPE)
        self.critic = mlp(OBS_DIM, critic_hidden, 1, activation).to(DTYPE)
        self.cost_critic = mlp(OBS_DIM, critic_hidden, 3, activation).to(DTYPE)
        self.log_std = nn.Parameter(torch.full((ACTION_DIM,), float(init_log_std), dtype=DTYPE))
        self.register_buffer("obs_scale", as_tensor(OBS_SCALE))
        self.actor_hidden = tuple(actor_hidden)
        self.critic_hidden = tuple(critic_hidden)
        with torch.no_grad():
            self.actor[-1].weight.mul_(0.1)
            self.actor[-1].bias.zero_()

    def config(self) -> dict:
        return {"actor_hidden": list(self.actor_hidden), "critic_hidden": list(self.critic_hidden)}

    def obs(self, s, cmd):
        return torch.cat([as_tensor(s), as_tensor(cmd)], dim=-1) / self.obs_scale

    def mean(self, s, cmd):
        return self.actor(self.obs(s, cmd))

    def value(self, s, cmd):
        return self.critic(self.obs(s, cmd)).squeeze(-1)

    def cost_values(self, s, cmd):
        return self.cost_critic(self.obs(s, cmd))

    def std(self):
        return torch.exp(self.log_std.clamp(*LOG_STD_RANGE))

    def log_prob(self, s, cmd, actions):
        mu = self.mean(s, cmd)
        std = self.std()
        z = (as_tensor(actions) - mu) / std
        return (-0.5 * z ** 2 - torch.log(std) - 0.5 * math.log(2 * math.pi)).sum(-1)

    def entropy(self):
        return (0.5 + 0.5 * math.log(2 * math.pi) + torch.log(self.std())).sum()

    @torch.no_grad()
    def act_deterministic(self, s, cmd) -> np.ndarray:
        return self.mean(s, cmd).numpy()


def mirror_matrices(m: MorphologyMap = DEFAULT_MORPHOLOGY):
    """(obs mirror 23x23, action mirror 8x8) as torch tensors."""
    obs = np.zeros((OBS_DIM, OBS_DIM))
    obs[:STATE_DIM, :STATE_DIM] = m.state_matrix()
    obs[STATE_DIM:, STATE_DIM:] = m.command_matrix()
    return as_tensor(obs), as_tensor(m.action_matrix())


@torch.no_grad()
def symmetrize_weights(model: ActorCritic, m: MorphologyMap = DEFAULT_MORPHOLOGY):
    """Tie weights so the actor is mirror-equivariant and the critics mirror-invariant.

    Hidden units are paired half-with-half; each linear map W is replaced by the
    average of W and P_out W P_in, which is a fixed point of the mirror action.
    """
    p_obs, p_act = mirror_matrices(m)
    # obs_scale is mirror-symmetric, so mirroring commutes with the input scaling
    for net, p_final in ((model.actor, p_act), (model.critic, None), (model.cost_critic, None)):
        linears = [layer for layer in net if isinstance(layer, nn.Linear)]
        p_in = p_obs
        for i, layer in enumerate(linears):
            last = i == len(linears) - 1
            if last:
                p_out = p_final if p_final is not None else torch.eye(layer.out_features, dtype=DTYPE)
            else:
                h = layer.out_features
                if h % 2:
                    raise ValueError("equivariant tying needs even hidden widths")
                perm = torch.cat([torch.arange(h // 2, h), torch.arange(0, h // 2)])
                p_out = torch.eye(h, dtype=DTYPE)[perm]
            layer.weight.copy_(0.5 * (layer.weight + p_out @ layer.weight @ p_in))
            layer.bias.copy_(0.5 * (layer.bias + p_out @ layer.bias))
            p_in = p_out


# -- advantage estimation ---------------------------------------------------------

def gae(rewards, values, dones, gamma: float, lam: float, last_values=None):
    """Generalised advantage estimation over (H, E) arrays; returns (advantages, returns)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    squeeze = rewards.ndim == 1
    if squeeze:
        rewards = rewards[:, None]
    values = np.asarray(values, dtype=np.float64).reshape(rewards.shape)
    dones = np.asarray(dones, dtype=np.float64).reshape(rewards.shape)
    if last_values is None:
        last_values = np.zeros(rewards.shape[1])
    last_values = np.asarray(last_values, dtype=np.float64).reshape(rewards.shape[1])
    adv = kernels.gae(rewards, values, dones, last_values, float(gamma), float(lam))
    ret = adv + values
    if squeeze:
        return adv[:, 0], ret[:, 0]
    return adv, ret


def normalize(adv):
    """Per-batch standardisation; returns (normalised, mean, std before flooring)."""
    adv = as_tensor(adv)
    mu = adv.mean()
    sd = adv.std(unbiased=False)
    return (adv - mu) / (sd + 1e-8), float(mu), float(sd)


# -- losses -----------------------------------------------------------------------------

@dataclass
class Batch:
    states: torch.Tensor
    cmds: torch.Tensor
    actions: torch.Tensor
    old_logp: torch.Tensor
    advantages: torch.Tensor        # normalised
    returns: torch.Tensor
    cost_advantages: torch.Tensor   # (N, 3) normalised
    cost_returns: torch.Tensor      # (N, 3)

    def __len__(self):
        return self.states.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(*(getattr(self, f.name)[idx] for f in dataclasses.fields(self)))


def ppo_surrogate(model: ActorCritic, batch: Batch, clip: float):
    """Clipped policy loss, squared-error value loss and Gaussian entropy."""
    logp = model.log_prob(batch.states, batch.cmds, batch.actions)
    ratio = torch.exp(logp - batch.old_logp)
    adv = batch.advantages
    surr = torch.min(ratio * adv, torch.clamp(ratio, 1 - clip, 1 + clip) * adv)
    actor_loss = -surr.mean()
    critic_loss = ((model.value(batch.states, batch.cmds) - batch.returns) ** 2).mean()
    return actor_loss, critic_loss, model.entropy()


def symmetry_loss(model: ActorCritic, states, cmds, lambda_sym: float,
                  m: MorphologyMap = DEFAULT_MORPHOLOGY) -> torch.Tensor:
    """lambda * mean( ||pi(s,v) - M_a pi(M_s s, M_v v)||^2 + (V(s,v) - sg[V(M_s s, M_v v)])^2 )."""
    p_obs, p_act = mirror_matrices(m)
    s = as_tensor(states)
    v = as_tensor(cmds)
    s_m = s @ p_obs[:STATE_DIM, :STATE_DIM].T
    v_m = v @ p_obs[STATE_DIM:, STATE_DIM:].T
    act_term = ((model.mean(s, v) - model.mean(s_m, v_m) @ p_act.T) ** 2).sum(-1)
    val_term = (model.value(s, v) - model.value(s_m, v_m).detach()) ** 2
    return lambda_sym * (act_term + val_term).mean()


@dataclass
class ConstraintLedger:
    limits: np.ndarray
    lambda0: float = 0.1
    growth: float = 2.0
    period: float = 200.0
    lambda_max: float = 10.0
    lambdas: np.ndarray = None
    episodic_cost: np.ndarray = field(default_factory=lambda: np.zeros(3))
    adv_mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    adv_std: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        self.limits = np.asarray(self.limits, dtype=float)
        if self.lambdas is None:
            self.lambdas = np.full(3, self.lambda0)

    @property
    def margins(self) -> np.ndarray:
        return (self.episodic_cost - self.limits) / (self.adv_std + 1e-8)


def schedule_lambda(ledger: ConstraintLedger, iteration: int) -> np.ndarray:
    lam = min(ledger.lambda_max, ledger.lambda0 * ledger.growth ** (iteration / ledger.period))
    ledger.lambdas = np.maximum(ledger.lambdas, np.full(3, lam))
    return ledger.lambdas


def cost_surrogates(model: ActorCritic, batch: Batch, clip: float) -> torch.Tensor:
    """Pessimistic clipped surrogate of each normalised cost advantage; shape (3,)."""
    logp = model.log_prob(batch.states, batch.cmds, batch.actions)
    ratio = torch.exp(logp - batch.old_logp)[:, None]
    ca = batch.cost_advantages
    return torch.max(ratio * ca, torch.clamp(ratio, 1 - clip, 1 + clip) * ca).mean(0)


def constraint_penalty(model: ActorCritic, batch: Batch, ledger: ConstraintLedger, clip: float) -> torch.Tensor:
    """sum_i lambda_i * relu(C_surr_i + margin_i)."""
    surr = cost_surrogates(model, batch, clip)
    gate = surr + as_tensor(ledger.margins)
    return (as_tensor(ledger.lambdas) * torch.relu(gate)).sum()


# -- rollouts -------------------------------------------------------------------------------

@dataclass
class RolloutBuffer:
    states: np.ndarray        # (H, E, 20) observed states
    cmds: np.ndarray          # (H, E, 3) smoothed commands
    actions: np.ndarray       # (H, E, 8)
    logp: np.ndarray          # (H, E)
    r_task: np.ndarray
    r_diff: np.ndarray
    reward: np.ndarray
    values: np.ndarray
    costs: np.ndarray         # (H, E, 3)
    cost_values: np.ndarray   # (H, E, 3)
    dones: np.ndarray         # (H, E) bool
    timeouts: np.ndarray      # (H, E) bool
    transitions: np.ndarray   # (H, E, 40) true (s_t, s_{t+1}) pairs
    tau_raw: np.ndarray       # (H, E, 8)
    last_values: np.ndarray   # (E,)
    last_cost_values: np.ndarray  # (E, 3)
    next_values: np.ndarray   # (H, E) value of s_{t+1} (used at time-outs)
    next_cost_values: np.ndarray

    @property
    def horizon(self) -> int:
        return self.states.shape[0]


class StyleRewarder:
    """Frozen-snapshot style reward for rollouts (diffusion prior or logit baseline)."""

    def __init__(self, model, uses_amp: bool, conditioned: bool, n_mc: int, mode: str):
        self.model = model
        self.uses_amp = uses_amp
        self.conditioned = conditioned
        self.n_mc = n_mc
        self.mode = mode

    def condition(self, cmds):
        cmds = np.asarray(cmds, dtype=float)
        return cmds if self.conditioned else np.zeros_like(cmds)

    def __call__(self, transitions, cmds, rng) -> np.ndarray:
        c = self.condition(cmds)
        if self.uses_amp:
            return amp_logit_reward(self.model, transitions, c)
        return style_reward(self.model, transitions, c, rng, self.n_mc, mode=self.mode)


def collect_rollouts(model: ActorCritic, venv: VecEnv, rewarder, cfg: TrainConfig,
                     rng: np.random.Generator, reward_rng: np.random.Generator,
                     zero_policy: bool = False) -> RolloutBuffer:
    H, E = cfg.horizon, venv.num_envs
    st = np.zeros((H, E, STATE_DIM))
    true_st = np.zeros((H, E, STATE_DIM))
    nx = np.zeros((H, E, STATE_DIM))
    cm = np.zeros((H, E, 3))
    ac = np.zeros((H, E, ACTION_DIM))
    lp = np.zeros((H, E))
    rt = np.zeros((H, E))
    co = np.zeros((H, E, 3))
    dn = np.zeros((H, E), dtype=bool)
    to = np.zeros((H, E), dtype=bool)
    tq = np.zeros((H, E, ACTION_DIM))
    with torch.no_grad():
        for t in range(H):
            cmd = venv.current_command()
            obs = venv.observe()
            true_st[t] = venv.states
            if zero_policy:
                mu = np.zeros((E, ACTION_DIM))
                act = mu
            else:
                mu = model.mean(obs, cmd).numpy()
                act = mu + model.std().numpy() * rng.standard_normal((E, ACTION_DIM))
            lp[t] = model.log_prob(obs, cmd, act).numpy()
            out, nxt, dones, timeouts = venv.step(act, cmd)
            st[t], cm[t], ac[t] = obs, cmd, act
            nx[t] = nxt
            rt[t] = out.r_task
            co[t] = out.costs
            dn[t] = dones
            to[t] = timeouts
            tq[t] = out.info["tau_raw"]
        flat_s = st.reshape(H * E, STATE_DIM)
        flat_c = cm.reshape(H * E, 3)
        values = model.value(flat_s, flat_c).numpy().reshape(H, E)
        cvalues = model.cost_values(flat_s, flat_c).numpy().reshape(H, E, 3)
        next_values = model.value(nx.reshape(H * E, STATE_DIM), flat_c).numpy().reshape(H, E)
        next_cvalues = model.cost_values(nx.reshape(H * E, STATE_DIM), flat_c).numpy().reshape(H, E, 3)
        last_cmd = venv.smoothed_cmd
        last_values = model.value(venv.states, last_cmd).numpy()
        last_cvalues = model.cost_values(venv.states, last_cmd).numpy()
    transitions = np.concatenate([true_st, nx], axis=-1)
    r_diff = rewarder(transitions.reshape(H * E, 40), flat_c, reward_rng).reshape(H, E)
    reward = mix_reward(rt, r_diff, cfg)
    return RolloutBuffer(st, cm, ac, lp, rt, r_diff, reward, values, co, cvalues, dn, to,
                         transitions, tq, last_values, last_cvalues, next_values, next_cvalues)


class ReplayReservoir:
    """FIFO store of recent agent transitions and their commands."""

    def __init__(self, capacity: int):
        self.capacity = int(capacity)
        self.x = np.zeros((self.capacity, 40))
        self.c = np.zeros((self.capacity, 3))
        self.size = 0
        self.ptr = 0

    def add(self, x, c):
        x = np.asarray(x).reshape(-1, 40)
        c = np.asarray(c).reshape(-1, 3)
        for i in range(0, len(x), self.capacity):
            xb, cb = x[i:i + self.capacity], c[i:i + self.capacity]
            n = len(xb)
            idx = (self.ptr + np.arange(n)) % self.capacity
            self.x[idx] = xb
            self.c[idx] = cb
            self.ptr = int((self.ptr + n) % self.capacity)
            self.size = min(self.capacity, self.size + n)

    def sample(self, rng, n):
        idx = rng.integers(0, self.size, size=n)
        return self.x[idx], self.c[idx]


# -- trainer -------------------------------------------------------------------------------------

def _advantages_with_timeouts(buf: RolloutBuffer, cfg: TrainConfig):
    # bootstrap through time-limit truncations
    r = buf.reward + cfg.gamma * buf.next_values * buf.timeouts
    adv, ret = gae(r, buf.values, buf.dones, cfg.gamma, cfg.lam, buf.last_values)
    c_adv = np.zeros_like(buf.costs)
    c_ret = np.zeros_like(buf.costs)
    for i in range(3):
        rc = buf.costs[..., i] + cfg.gamma * buf.next_cost_values[..., i] * buf.timeouts
        c_adv[..., i], c_ret[..., i] = gae(rc, buf.cost_values[..., i], buf.dones, cfg.gamma, cfg.lam,
                                           buf.last_cost_values[:, i])
    return adv, ret, c_adv, c_ret


class Trainer:
    """Owns all networks, optimisers, RNG streams and the environment for one run."""

    def __init__(self, env_cfg: EnvConfig, cfg: TrainConfig, dataset: MotionDataset,
                 morphology: MorphologyMap = DEFAULT_MORPHOLOGY):
        self.env_cfg = env_cfg
        self.cfg = cfg
        self.dataset = dataset
        self.morphology = morphology
        seeds = np.random.SeedSequence(cfg.seed).spawn(5)
        self.policy_rng = np.random.default_rng(seeds[0])
        self.reward_rng = np.random.default_rng(seeds[1])
        self.prior_rng = np.random.default_rng(seeds[2])
        self.batch_rng = np.random.default_rng(seeds[3])
        torch.manual_seed(int(seeds[4].generate_state(1)[0]))
        self.venv = VecEnv(env_cfg, cfg.num_envs, int(seeds[4].generate_state(2)[1]),
                           zero_override=cfg.constrained, morphology=morphology)

        self.expert_x, self.expert_c = dataset.transitions()
        mean, std = self.expert_x.mean(axis=0), np.maximum(self.expert_x.std(axis=0), 1e-6)
        self.feature_mean, self.feature_std = mean, std

        self.model = ActorCritic(cfg.actor_hidden, cfg.critic_hidden, cfg.init_log_std)
        if cfg.sacc and cfg.equivariant_init:
            symmetrize_weights(self.model, morphology)
        if cfg.uses_amp:
            self.prior = AmpDiscriminator(cfg.prior_hidden, mean, std)
        else:
            self.prior = Denoiser(cfg.prior_hidden, NoiseSchedule(cfg.diffusion_steps), x_mean=mean, x_std=std)
        self.policy_opt = torch.optim.Adam(self.model.parameters(), lr=cfg.lr_policy)
        self.param_groups = [
            list(self.model.actor.parameters()) + [self.model.log_std],
            list(self.model.critic.parameters()),
            list(self.model.cost_critic.parameters()),
        ]
        self.prior_opt = torch.optim.Adam(self.prior.parameters(), lr=cfg.lr_prior)
        self.ledger = ConstraintLedger(cfg.cost_limits, cfg.lambda0, cfg.lambda_growth, cfg.lambda_period,
                                       cfg.lambda_max)
        self.reservoir = ReplayReservoir(cfg.replay_size)
        self.iteration = 0
        self.started = time.perf_counter()
        self.evaluator = None

    # prior ------------------------------------------------------------------------

    def rewarder(self) -> StyleRewarder:
        return StyleRewarder(self.prior, self.cfg.uses_amp, self.cfg.sacc, self.cfg.n_mc_reward, self.cfg.antithetic)

    def expert_batch(self, n):
        idx = self.batch_rng.integers(0, len(self.expert_x), size=n)
        x, c = self.expert_x[idx], self.expert_c[idx]
        if self.cfg.sacc:
            x, c = augment_expert_batch(x, c, self.morphology, self.batch_rng)
        else:
            c = np.zeros_like(c)
        return x, c

    def prior_update(self) -> float:
        cfg = self.cfg
        losses = []
        for _ in range(cfg.disc_steps):
            ex, ec = self.expert_batch(cfg.disc_batch)
            ax, ac = self.reservoir.sample(self.batch_rng, cfg.disc_batch)
            if not cfg.sacc:
                ac = np.zeros_like(ac)
            if cfg.uses_amp:
                loss = amp_bce_loss(self.prior, ex, ec, ax, ac, cfg.amp_gp_weight)
            else:
                loss = diffusion_bce_loss(self.prior, ex, ec, ax, ac, self.prior_rng, cfg.n_mc_train,
                                          mode=cfg.antithetic, gp_weight=cfg.prior_gp_weight)
            if not torch.isfinite(loss):
                raise TrainingDiverged("prior loss is not finite")
            self.prior_opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(self.prior.parameters(), 10.0)
            self.prior_opt.step()
            losses.append(loss.item())
        return float(np.mean(losses))

    # policy -----------------------------------------------------------------------

    def build_batch(self, buf: RolloutBuffer) -> Batch:
        cfg = self.cfg
        adv, ret, c_adv, c_ret = _advantages_with_timeouts(buf, cfg)
        n = adv.size
        adv_n, _, _ = normalize(adv.reshape(n))
        c_norm = []
        means, stds = np.zeros(3), np.zeros(3)
        for i in range(3):
            a, means[i], stds[i] = normalize(c_adv[..., i].reshape(n))
            c_norm.append(a)
        self.ledger.adv_mean, self.ledger.adv_std = means, stds
        # undiscounted episodic cost estimated from the per-step batch mean
        self.ledger.episodic_cost = buf.costs.reshape(n, 3).mean(0) * self.env_cfg.episode_length
        return Batch(
            as_tensor(buf.states.reshape(n, STATE_DIM)),
            as_tensor(buf.cmds.reshape(n, 3)),
            as_tensor(buf.actions.reshape(n, ACTION_DIM)),
            as_tensor(buf.logp.reshape(n)),
            adv_n,
            as_tensor(ret.reshape(n)),
            torch.stack(c_norm, dim=1),
            as_tensor(c_ret.reshape(n, 3)),
        )

    def policy_update(self, batch: Batch) -> dict:
        cfg = self.cfg
        n = len(batch)
        stats = {"sym": [], "viol": []}
        for _ in range(cfg.epochs):
            perm = self.batch_rng.permutation(n)
            for start in range(0, n, cfg.minibatch):
                mb = batch.subset(torch.as_tensor(perm[start:start + cfg.minibatch]))
                actor_loss, critic_loss, entropy = ppo_surrogate(self.model, mb, cfg.clip)
                cost_v = ((self.model.cost_values(mb.states, mb.cmds) - mb.cost_returns) ** 2).mean()
                loss = actor_loss + cfg.value_coef * (critic_loss + cost_v) - cfg.entropy_coef * entropy
                if cfg.sacc and cfg.lambda_sym > 0:
                    l_sym = symmetry_loss(self.model, mb.states, mb.cmds, cfg.lambda_sym, self.morphology)
                    loss = loss + l_sym
                    stats["sym"].append(l_sym.item())
                if cfg.constrained:
                    l_viol = constraint_penalty(self.model, mb, self.ledger, cfg.clip)
                    loss = loss + l_viol
                    stats["viol"].append(l_viol.item())
                if not torch.isfinite(loss):
                    raise TrainingDiverged("policy loss is not finite")
                self.policy_opt.zero_grad()
                loss.backward()
                # clip each head separately so large value errors cannot starve the actor
                for group in self.param_groups:
                    nn.utils.clip_grad_norm_(group, cfg.max_grad_norm)
                self.policy_opt.step()
                with torch.no_grad():
                    self.model.log_std.clamp_(*LOG_STD_RANGE)
        return {k: (float(np.mean(v)) if v else 0.0) for k, v in stats.items()}

    def curriculum_stage(self) -> float:
        cfg = self.cfg
        if cfg.curriculum_iters <= 0:
            return 1.0
        frac = min(1.0, self.iteration / cfg.curriculum_iters)
        return cfg.curriculum_start + (1.0 - cfg.curriculum_start) * frac

    def train_iteration(self) -> dict:
        cfg = self.cfg
        self.venv.curriculum_stage = self.curriculum_stage()
        self.prior.eval()
        buf = collect_rollouts(self.model, self.venv, self.rewarder(), cfg, self.policy_rng, self.reward_rng)
        batch = self.build_batch(buf)
        stats = self.policy_update(batch)
        schedule_lambda(self.ledger, self.iteration + 1)
        self.reservoir.add(buf.transitions, buf.cmds)
        self.prior.train()
        bce = self.prior_update()
        self.iteration += 1
        row = {
            "iteration": self.iteration,
            "mean_task_reward": float(buf.r_task.mean()),
            "mean_diff_reward": float(buf.r_diff.mean()),
            "bce_loss": bce,
            "sym_loss": stats["sym"],
            "viol_loss": stats["viol"],
            "tracking_err": "",
            "heading_drift": "",
            "fgd": "",
        }
        for i in range(3):
            row[f"lambda_{i + 1}"] = float(self.ledger.lambdas[i])
            row[f"epcost_{i + 1}"] = float(self.ledger.episodic_cost[i])
        if cfg.eval_every and self.iteration % cfg.eval_every == 0 and self.evaluator is not None:
            row.update(self.evaluator(self))
        row["wallclock_s"] = time.perf_counter() - self.started
        return row

    def act(self, states, cmds) -> np.ndarray:
        return self.model.act_deterministic(states, cmds)
