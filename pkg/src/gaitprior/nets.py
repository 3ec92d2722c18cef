"""Small shared torch helpers."""

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64


def mlp(in_dim, hidden, out_dim, activation=nn.SiLU):
    layers = []
    for h in hidden:
        layers += [nn.Linear(in_dim, h), activation()]
        in_dim = h
    layers.append(nn.Linear(in_dim, out_dim))
    return nn.Sequential(*layers)


def as_tensor(x, dtype=DTYPE):
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def seed_torch(seed: int):
    """Seed torch's global generator (used only for weight initialisation)."""
    torch.manual_seed(int(seed) % (2**63))


def flat_grad(loss, params):
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return torch.cat([
        (g if g is not None else torch.zeros_like(p)).reshape(-1) for g, p in zip(grads, params)
    ])
