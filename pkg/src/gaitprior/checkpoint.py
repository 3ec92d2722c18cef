"""JSON checkpoint container for policies, priors and run state.

Each network section stores its tensors as an ordered list of (name, shape)
records plus one flat weight array in that order. Loading rebuilds the network
from the stored config and refuses any shape disagreement.
"""

from __future__ import annotations

import dataclasses
import json
import os
import tempfile
from pathlib import Path

import numpy as np
import torch

from .diffusion_prior import AmpDiscriminator, Denoiser, NoiseSchedule
from .environment import EnvConfig
from .nets import DTYPE

SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint."""


def pack_module(module: torch.nn.Module) -> dict:
    state = module.state_dict()
    layers = [{"name": k, "shape": list(v.shape)} for k, v in state.items()]
    flat = np.concatenate([v.detach().cpu().numpy().astype(np.float64).ravel() for v in state.values()]) \
        if state else np.zeros(0)
    return {"layers": layers, "weights": flat.tolist()}


def unpack_into(module: torch.nn.Module, section: dict, label: str = "section"):
    """Copy a packed section into ``module`` after validating names and shapes."""
    expected = module.state_dict()
    layers = section.get("layers")
    weights = np.asarray(section.get("weights", []), dtype=np.float64)
    if layers is None:
        raise CheckpointError(f"{label}: missing layer table")
    names = [entry["name"] for entry in layers]
    if names != list(expected):
        raise CheckpointError(f"{label}: layer names {names} do not match {list(expected)}")
    total = sum(int(np.prod(entry["shape"])) for entry in layers)
    if total != weights.size:
        raise CheckpointError(f"{label}: layer shapes need {total} weights, found {weights.size}")
    new_state = {}
    offset = 0
    for entry in layers:
        shape = tuple(entry["shape"])
        if shape != tuple(expected[entry["name"]].shape):
            raise CheckpointError(f"{label}: {entry['name']} has shape {shape}, "
                                  f"expected {tuple(expected[entry['name']].shape)}")
        n = int(np.prod(shape))
        new_state[entry["name"]] = torch.as_tensor(weights[offset:offset + n].reshape(shape),
                                                   dtype=expected[entry["name"]].dtype)
        offset += n
    module.load_state_dict(new_state)


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {k: _jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def atomic_write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def trainer_payload(trainer, reason: str = "periodic") -> dict:
    """Serialisable snapshot of a Trainer's networks and configuration."""
    prior = trainer.prior
    payload = {
        "schema_version": SCHEMA_VERSION,
        "kind": "policy",
        "reason": reason,
        "iteration": trainer.iteration,
        "ablation": trainer.cfg.ablation,
        "env_config": _jsonable(trainer.env_cfg),
        "train_config": _jsonable(trainer.cfg),
        "normalization": {"mean": trainer.feature_mean.tolist(), "std": trainer.feature_std.tolist()},
        "policy": {"config": trainer.model.config(), **pack_module(trainer.model)},
        "lambdas": trainer.ledger.lambdas.tolist(),
    }
    if isinstance(prior, Denoiser):
        sched = prior.schedule
        payload["schedule"] = {"K": sched.K, "beta_start": sched.beta_start, "beta_end": sched.beta_end,
                               "beta": sched.beta.tolist(), "alpha_bar": sched.alpha_bar.tolist()}
        payload["prior"] = {"type": "diffusion", "config": prior.config(), **pack_module(prior)}
    else:
        payload["prior"] = {"type": "amp", "config": prior.config(), **pack_module(prior)}
    return payload


def oracle_payload(env_cfg: EnvConfig | None = None) -> dict:
    """Checkpoint stub standing for an agent that realises commands exactly."""
    return {"schema_version": SCHEMA_VERSION, "kind": "oracle",
            "env_config": _jsonable(env_cfg or EnvConfig())}


def save_checkpoint(path, payload: dict):
    atomic_write_text(path, json.dumps(payload))


def load_payload(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from exc
    if payload.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: unsupported schema_version {payload.get('schema_version')!r}")
    if payload.get("kind") not in ("policy", "oracle"):
        raise CheckpointError(f"{path}: unknown checkpoint kind {payload.get('kind')!r}")
    return payload


def env_config_from(payload: dict) -> EnvConfig:
    fields = dict(payload.get("env_config", {}))
    for key, value in fields.items():
        if isinstance(value, list):
            fields[key] = tuple(value)
    return EnvConfig(**fields)


def build_policy(payload: dict):
    from .training import ActorCritic

    cfg = payload["policy"]["config"]
    model = ActorCritic(tuple(cfg["actor_hidden"]), tuple(cfg["critic_hidden"]))
    unpack_into(model, payload["policy"], "policy")
    model.eval()
    return model


def build_prior(payload: dict):
    section = payload["prior"]
    cfg = section["config"]
    if section["type"] == "diffusion":
        sched_cfg = payload["schedule"]
        schedule = NoiseSchedule(int(sched_cfg["K"]), float(sched_cfg["beta_start"]), float(sched_cfg["beta_end"]))
        if not np.allclose(schedule.alpha_bar, sched_cfg["alpha_bar"], rtol=0, atol=1e-12):
            raise CheckpointError("stored noise schedule disagrees with its parameters")
        model = Denoiser(tuple(cfg["hidden"]), schedule, emb_dim=int(cfg["emb_dim"]))
    elif section["type"] == "amp":
        model = AmpDiscriminator(tuple(cfg["hidden"]))
    else:
        raise CheckpointError(f"unknown prior type {section['type']!r}")
    unpack_into(model, section, "prior")
    model.to(DTYPE).eval()
    return model
