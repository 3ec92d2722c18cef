"""Command-conditioned diffusion classifier and the baseline MLP discriminator.

The prior scores a transition by comparing its denoising error under the two
concept hypotheses (expert, agent). Both hypotheses reuse the same Monte-Carlo
draws, so ``D = sigmoid(L_agent - L_expert)`` is a paired comparison and the
resulting style reward is confined to [0, 1]. The baseline discriminator
returns a raw logit, which is unbounded.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .motion_data import COMMAND_DIM, TRANSITION_DIM
from .nets import DTYPE, as_tensor, mlp

log = logging.getLogger(__name__)

D_CLAMP = 1e-7
EXPERT = 0
AGENT = 1
ANTITHETIC_MODES = ("noise", "timestep", "none")


class NumericalBlowupError(FloatingPointError):
    """The denoiser produced non-finite output."""


@dataclass(frozen=True)
class NoiseSchedule:
    K: int = 50
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("need at least two diffusion steps")
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ValueError("need 0 < beta_start < beta_end < 1")

    @property
    def beta(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.K)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)


def concept_onehot(label, n: int) -> torch.Tensor:
    """``label`` is EXPERT/AGENT (or the strings 'expert'/'agent')."""
    if isinstance(label, str):
        label = {"expert": EXPERT, "agent": AGENT}[label]
    if label not in (EXPERT, AGENT):
        raise ValueError(f"unknown concept {label!r}")
    out = torch.zeros(n, 2, dtype=DTYPE)
    out[:, label] = 1.0
    return out


def timestep_embedding(k: torch.Tensor, dim: int = 16) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=DTYPE) / half)
    ang = k.to(DTYPE)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class Denoiser(nn.Module):
    """eps_phi([x_k, cmd], c, k) with early fusion of all inputs."""

    def __init__(self, hidden=(256, 256), schedule: NoiseSchedule = NoiseSchedule(), emb_dim: int = 16,
                 x_mean=None, x_std=None, cmd_scale=(3.5, 1.0, 1.5)):
        super().__init__()
        self.hidden = tuple(int(h) for h in hidden)
        self.schedule = schedule
        self.emb_dim = emb_dim
        self.net = mlp(TRANSITION_DIM + COMMAND_DIM + 2 + emb_dim, self.hidden, TRANSITION_DIM).to(DTYPE)
        first = self.net[0]
        with torch.no_grad():
            # concept pathways start tied, so an untrained prior is indifferent
            cc = TRANSITION_DIM + COMMAND_DIM
            first.weight[:, cc:cc + 2] = 0.0
        self.register_buffer("x_mean", as_tensor(np.zeros(TRANSITION_DIM) if x_mean is None else x_mean))
        self.register_buffer("x_std", as_tensor(np.ones(TRANSITION_DIM) if x_std is None else x_std))
        self.register_buffer("cmd_scale", as_tensor(cmd_scale))
        self.register_buffer("alpha_bar", as_tensor(schedule.alpha_bar))

    def config(self) -> dict:
        s = self.schedule
        return {"hidden": list(self.hidden), "K": s.K, "beta_start": s.beta_start, "beta_end": s.beta_end,
                "emb_dim": self.emb_dim}

    def standardize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.x_mean) / self.x_std

    def forward(self, x_noisy, cmd, concept, k):
        h = torch.cat([x_noisy, cmd / self.cmd_scale, concept, timestep_embedding(k, self.emb_dim)], dim=-1)
        return self.net(h)


def forward_diffuse(x, k, eps, schedule: NoiseSchedule):
    """sqrt(abar_k) x + sqrt(1 - abar_k) eps for numpy or torch inputs; k may be per-row."""
    k_arr = np.asarray(k.detach().cpu() if isinstance(k, torch.Tensor) else k)
    if np.any(k_arr < 0) or np.any(k_arr >= schedule.K):
        raise IndexError(f"diffusion step out of range [0, {schedule.K})")
    ab = schedule.alpha_bar[k_arr]
    if isinstance(x, torch.Tensor):
        ab = torch.as_tensor(ab, dtype=x.dtype)
        if ab.ndim:
            ab = ab[..., None]
        return torch.sqrt(ab) * x + torch.sqrt(1 - ab) * eps
    if np.ndim(ab):
        ab = ab[..., None]
    return np.sqrt(ab) * np.asarray(x) + np.sqrt(1 - ab) * np.asarray(eps)


@dataclass
class Draws:
    """Shared Monte-Carlo draws: k (N, M) integer steps and eps (N, M, 40)."""

    k: torch.Tensor
    eps: torch.Tensor


def draw_noise(rng: np.random.Generator, n: int, n_mc: int, K: int, mode: str = "noise") -> Draws:
    """Draw ``n_mc`` antithetic pairs per sample (M = 2 n_mc columns).

    ``noise`` pairs (eps, -eps) at a shared k; ``timestep`` pairs k with
    K-1-k using independent noise; ``none`` draws every column independently.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    if mode not in ANTITHETIC_MODES:
        raise ValueError(f"mode must be one of {ANTITHETIC_MODES}")
    if mode == "noise":
        k = rng.integers(0, K, size=(n, n_mc))
        e = rng.standard_normal((n, n_mc, TRANSITION_DIM))
        k = np.concatenate([k, k], axis=1)
        eps = np.concatenate([e, -e], axis=1)
    elif mode == "timestep":
        k = rng.integers(0, K, size=(n, n_mc))
        k = np.concatenate([k, K - 1 - k], axis=1)
        eps = rng.standard_normal((n, 2 * n_mc, TRANSITION_DIM))
    else:
        k = rng.integers(0, K, size=(n, 2 * n_mc))
        eps = rng.standard_normal((n, 2 * n_mc, TRANSITION_DIM))
    return Draws(torch.as_tensor(k, dtype=torch.long), torch.as_tensor(eps, dtype=DTYPE))


def _losses(model: Denoiser, x, cmd, concepts, draws: Draws):
    """Denoising losses for each concept one-hot in ``concepts``; returns list of (N,) tensors."""
    x = as_tensor(x)
    cmd = as_tensor(cmd)
    n, m = draws.k.shape
    xs = model.standardize(x)
    ab = model.alpha_bar[draws.k]                                    # (N, M)
    xk = torch.sqrt(ab)[..., None] * xs[:, None, :] + torch.sqrt(1 - ab)[..., None] * draws.eps
    xk = xk.reshape(n * m, TRANSITION_DIM)
    kk = draws.k.reshape(-1)
    cm = cmd[:, None, :].expand(n, m, COMMAND_DIM).reshape(n * m, COMMAND_DIM)
    n_c = len(concepts)
    c_all = torch.cat([c[:, None, :].expand(n, m, 2).reshape(n * m, 2) for c in concepts])
    pred = model(xk.repeat(n_c, 1), cm.repeat(n_c, 1), c_all, kk.repeat(n_c))
    if not torch.all(torch.isfinite(pred)):
        raise NumericalBlowupError("denoiser output is not finite")
    target = draws.eps.reshape(n * m, TRANSITION_DIM).repeat(n_c, 1)
    err = ((target - pred) ** 2).sum(-1).reshape(n_c, n, m).mean(-1)
    return list(err)


def denoise_loss(model: Denoiser, x, cmd, concept, rng=None, n_mc: int = 1, draws: Draws | None = None,
                 mode: str = "noise") -> torch.Tensor:
    """Per-sample Monte-Carlo estimate of E_{k,eps} ||eps - eps_phi(x_k, cmd, c, k)||^2."""
    x = as_tensor(x)
    if draws is None:
        draws = draw_noise(rng, x.shape[0], n_mc, model.schedule.K, mode)
    c = concept if isinstance(concept, torch.Tensor) else concept_onehot(concept, x.shape[0])
    return _losses(model, x, cmd, [c], draws)[0]


def classify_from_losses(l_expert, l_agent):
    """exp(-L+) / (exp(-L+) + exp(-L-)) in the shifted (sigmoid) form."""
    if isinstance(l_expert, torch.Tensor):
        return torch.sigmoid(l_agent - l_expert)
    z = np.asarray(l_agent, dtype=float) - np.asarray(l_expert, dtype=float)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0, e) / (1.0 + e)


def hypothesis_losses(model: Denoiser, x, cmd, rng=None, n_mc: int = 1, draws: Draws | None = None,
                      mode: str = "noise"):
    """(L_expert, L_agent) evaluated on one shared set of draws."""
    x = as_tensor(x)
    n = x.shape[0]
    if draws is None:
        draws = draw_noise(rng, n, n_mc, model.schedule.K, mode)
    lp, lm = _losses(model, x, cmd, [concept_onehot(EXPERT, n), concept_onehot(AGENT, n)], draws)
    return lp, lm


def classify(model: Denoiser, x, cmd, rng=None, n_mc: int = 1, draws: Draws | None = None,
             mode: str = "noise") -> torch.Tensor:
    lp, lm = hypothesis_losses(model, x, cmd, rng, n_mc, draws, mode)
    return classify_from_losses(lp, lm)


_clamp_events = 0


def _clamped_log(p: torch.Tensor) -> torch.Tensor:
    global _clamp_events
    if torch.any(p < D_CLAMP) or torch.any(p > 1 - D_CLAMP):
        # warn on the first event and then sparsely, so long runs stay readable
        if _clamp_events % 1000 == 0:
            log.warning("classifier probability saturated; clamping to [%g, 1 - %g] (event %d)",
                        D_CLAMP, D_CLAMP, _clamp_events + 1)
        _clamp_events += 1
    return torch.log(p.clamp(D_CLAMP, 1 - D_CLAMP))


def diffusion_bce_loss(model: Denoiser, expert_x, expert_cmd, agent_x, agent_cmd, rng=None, n_mc: int = 1,
                       mode: str = "noise", expert_draws: Draws | None = None,
                       agent_draws: Draws | None = None, gp_weight: float = 0.0) -> torch.Tensor:
    """mean(-log D) over expert samples + mean(-log(1 - D)) over agent samples.

    Differentiable w.r.t. the denoiser parameters; the sampled (k, eps) are constants.
    With ``gp_weight > 0`` the squared gradient of the classifier logit L- - L+
    w.r.t. the standardised expert transition is added as a smoothness penalty.
    """
    if len(expert_x) == 0 or len(agent_x) == 0:
        raise ValueError("both batches must be nonempty")
    expert_x = as_tensor(expert_x)
    if expert_draws is None:
        expert_draws = draw_noise(rng, expert_x.shape[0], n_mc, model.schedule.K, mode)
    if gp_weight > 0:
        xs = model.standardize(expert_x).detach().requires_grad_(True)
        expert_in = xs * model.x_std + model.x_mean
    else:
        expert_in = expert_x
    lp, lm = hypothesis_losses(model, expert_in, expert_cmd, draws=expert_draws)
    d_exp = classify_from_losses(lp, lm)
    d_agt = classify(model, agent_x, agent_cmd, rng, n_mc, agent_draws, mode)
    loss = -_clamped_log(d_exp).mean() - _clamped_log(1 - d_agt).mean()
    if gp_weight > 0:
        (g,) = torch.autograd.grad((lm - lp).sum(), xs, create_graph=True)
        loss = loss + gp_weight * (g ** 2).sum(-1).mean()
    return loss


@torch.no_grad()
def style_reward(model: Denoiser, x, cmd, rng=None, n_mc: int = 4, draws: Draws | None = None,
                 mode: str = "noise", chunk: int = 4096) -> np.ndarray:
    """Bounded style reward r = D(x) in [0, 1]."""
    x = as_tensor(x)
    cmd = as_tensor(cmd)
    if draws is not None:
        return classify(model, x, cmd, draws=draws).cpu().numpy()
    out = []
    for i in range(0, x.shape[0], chunk):
        out.append(classify(model, x[i:i + chunk], cmd[i:i + chunk], rng, n_mc, mode=mode))
    return torch.cat(out).cpu().numpy() if out else np.zeros(0)


# -- baseline ----------------------------------------------------------------

class AmpDiscriminator(nn.Module):
    """MLP over [x ‖ cmd] returning a scalar logit."""

    def __init__(self, hidden=(256, 256), x_mean=None, x_std=None, cmd_scale=(3.5, 1.0, 1.5)):
        super().__init__()
        self.hidden = tuple(int(h) for h in hidden)
        self.net = mlp(TRANSITION_DIM + COMMAND_DIM, self.hidden, 1, activation=nn.ReLU).to(DTYPE)
        self.register_buffer("x_mean", as_tensor(np.zeros(TRANSITION_DIM) if x_mean is None else x_mean))
        self.register_buffer("x_std", as_tensor(np.ones(TRANSITION_DIM) if x_std is None else x_std))
        self.register_buffer("cmd_scale", as_tensor(cmd_scale))

    def config(self) -> dict:
        return {"hidden": list(self.hidden)}

    def inputs(self, x, cmd):
        return torch.cat([(as_tensor(x) - self.x_mean) / self.x_std, as_tensor(cmd) / self.cmd_scale], dim=-1)

    def forward(self, x, cmd):
        return self.net(self.inputs(x, cmd)).squeeze(-1)


@torch.no_grad()
def amp_logit_reward(disc: AmpDiscriminator, x, cmd) -> np.ndarray:
    """log D - log(1 - D) of the baseline, i.e. its raw logit."""
    return disc(x, cmd).cpu().numpy()


def amp_bce_loss(disc: AmpDiscriminator, expert_x, expert_cmd, agent_x, agent_cmd,
                 gp_weight: float = 0.0) -> torch.Tensor:
    """Pooled sigmoid BCE (expert = 1, agent = 0) plus an optional gradient penalty on expert inputs."""
    le = disc(expert_x, expert_cmd)
    la = disc(agent_x, agent_cmd)
    logits = torch.cat([le, la])
    labels = torch.cat([torch.ones_like(le), torch.zeros_like(la)])
    loss = F.binary_cross_entropy_with_logits(logits, labels)
    if gp_weight > 0:
        inp = disc.inputs(expert_x, expert_cmd).detach().requires_grad_(True)
        out = disc.net(inp).sum()
        (g,) = torch.autograd.grad(out, inp, create_graph=True)
        loss = loss + gp_weight * (g ** 2).sum(-1).mean()
    return loss
