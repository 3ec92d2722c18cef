"""Command-line entry point: gen-data, train, eval, compare."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import config as flatcfg
from . import metrics
from .environment import EnvConfig
from .motion_data import DatasetConfig, build_expert_dataset, forward_fraction, load_dataset, save_dataset
from .training import ABLATIONS, METRIC_COLUMNS, TrainConfig, Trainer, TrainingDiverged

log = logging.getLogger("gaitprior")

CONFIG_ENV_VAR = "GAITPRIOR_CONFIG"
SECTIONS = ("data", "env", "train")


class UsageError(Exception):
    """Bad invocation detected after argument parsing."""


@dataclasses.dataclass
class RunConfig:
    data: DatasetConfig
    env: EnvConfig
    train: TrainConfig

    def dump(self) -> str:
        return "".join(flatcfg.dump(getattr(self, name), f"{name}.") for name in SECTIONS)


def load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig(DatasetConfig(), EnvConfig(), TrainConfig())
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    raw = flatcfg.split_sections(flatcfg.read_flat(path.read_text(encoding="utf-8")), SECTIONS)
    return RunConfig(flatcfg.build(DatasetConfig, raw["data"]),
                     flatcfg.build(EnvConfig, raw["env"]),
                     flatcfg.build(TrainConfig, raw["train"]))


def resolve_config_path(arg):
    return arg if arg is not None else os.environ.get(CONFIG_ENV_VAR) or None


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


# -- gen-data --------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    run = load_run_config(resolve_config_path(args.config))
    data_cfg = run.data if args.seed is None else dataclasses.replace(run.data, seed=args.seed)
    ds = build_expert_dataset(data_cfg)
    save_dataset(ds, args.out)
    backward = sum(1 for c in ds.clips if c.states[:, 0].mean() < 0)
    print(f"clips: {len(ds.clips)}  forward-dominant fraction: {forward_fraction(ds):.3f}  "
          f"backward clips: {backward}")
    print(f"wrote {args.out} (sha256 {file_sha256(args.out)[:16]})")
    return 0


# -- train ---------------------------------------------------------------------------

def quick_eval(trainer: Trainer) -> dict:
    agent = metrics.PolicyAgent(trainer.act)
    (command, distance) = metrics.TRACKING_PROFILES["forward_walk"]
    rep = metrics.tracking_eval(agent, trainer.env_cfg, command, distance, "forward_walk")
    value, _ = metrics.expert_fgd(agent, trainer.dataset, trainer.env_cfg)
    return {
        "tracking_err": "" if rep.failed else rep.position_deviation,
        "heading_drift": "" if rep.failed else rep.heading_drift,
        "fgd": value,
    }


def _format(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def cmd_train(args) -> int:
    run = load_run_config(resolve_config_path(args.config))
    overrides = {}
    if args.ablation is not None:
        overrides["ablation"] = args.ablation
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.checkpoint_every is not None:
        overrides["checkpoint_every"] = args.checkpoint_every
    train_cfg = dataclasses.replace(run.train, **overrides)
    run = RunConfig(run.data, run.env, train_cfg)

    dataset_path = Path(args.dataset)
    if not dataset_path.exists():
        raise UsageError(f"dataset not found: {dataset_path}")
    dataset = load_dataset(dataset_path)

    out = Path(args.out)
    ck_dir = out / "checkpoints"
    ck_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "ablation": train_cfg.ablation,
        "seed": train_cfg.seed,
        "dataset": str(dataset_path),
        "dataset_sha256": file_sha256(dataset_path),
        "config": run.dump(),
        "started": _now(),
        "layout": {"metrics": "metrics.csv", "checkpoints": "checkpoints/", "config": "config.txt",
                   "final_checkpoint": "checkpoints/final.json"},
    }
    (out / "config.txt").write_text(run.dump(), encoding="utf-8")

    trainer = Trainer(run.env, train_cfg, dataset)
    trainer.evaluator = quick_eval
    status, code = "completed", 0
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        try:
            for _ in range(train_cfg.iterations):
                row = trainer.train_iteration()
                writer.writerow([_format(row[c]) for c in METRIC_COLUMNS])
                fh.flush()
                if train_cfg.checkpoint_every and trainer.iteration % train_cfg.checkpoint_every == 0:
                    ckpt.save_checkpoint(ck_dir / f"iter_{trainer.iteration:06d}.json",
                                         ckpt.trainer_payload(trainer))
            ckpt.save_checkpoint(ck_dir / "final.json", ckpt.trainer_payload(trainer, "final"))
        except KeyboardInterrupt:
            ckpt.save_checkpoint(ck_dir / "final.json", ckpt.trainer_payload(trainer, "interrupted"))
            status, code = "interrupted", 130
            print("interrupted; final checkpoint written", file=sys.stderr)
        except TrainingDiverged as exc:
            ckpt.save_checkpoint(ck_dir / "diverged.json", ckpt.trainer_payload(trainer, f"diverged: {exc}"))
            status, code = "diverged", 1
            print(f"training diverged at iteration {trainer.iteration + 1}: {exc}; "
                  f"diagnostic checkpoint written", file=sys.stderr)
    manifest.update({"finished": _now(), "status": status, "iterations_done": trainer.iteration})
    ckpt.atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2))
    if code == 0:
        print(f"trained {trainer.iteration} iterations ({train_cfg.ablation}, seed {train_cfg.seed}); "
              f"artifacts in {out}")
    return code


# -- eval ---------------------------------------------------------------------------------

def evaluate_agent(agent, variant: str, dataset, env_cfg: EnvConfig, out: Path | None = None,
                   plots: bool = True) -> dict:
    suite = metrics.tracking_suite(agent, env_cfg)
    fgd_value, agent_rows = metrics.expert_fgd(agent, dataset, env_cfg)
    violations = metrics.sprint_violations(agent, env_cfg)
    report = {
        "schema_version": metrics.REPORT_SCHEMA,
        "variant": variant,
        "tracking": {k: v.as_dict() for k, v in suite.items()},
        "fgd": fgd_value,
        "violations": violations,
    }
    if out is not None and plots:
        traces = {}
        for name, (command, distance) in metrics.TRACKING_PROFILES.items():
            steps = metrics.tracking_steps(command, distance, env_cfg.dt)
            traces[name] = (agent.rollout(command, steps, env_cfg), command)
        metrics.plot_trajectories(traces, env_cfg.dt, out / "trajectories.png")
        walk = agent.rollout(metrics.TRACKING_PROFILES["forward_walk"][0], 250, env_cfg)
        metrics.plot_footfall(metrics.footfall_stats(walk.states[1:]), env_cfg.dt, out / "footfall.png")
        if agent_rows is not None:
            expert_x, _ = dataset.transitions()
            metrics.plot_pca(expert_x, agent_rows, out / "pca.png")
    return report


def cmd_eval(args) -> int:
    path = Path(args.checkpoint)
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    payload = ckpt.load_payload(path)
    dataset = load_dataset(args.dataset)
    env_cfg = ckpt.env_config_from(payload)
    if payload["kind"] == "oracle":
        agent, variant = metrics.OracleAgent(), "oracle"
    else:
        model = ckpt.build_policy(payload)
        agent, variant = metrics.PolicyAgent(model.act_deterministic), payload.get("ablation", "policy")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate_agent(agent, variant, dataset, env_cfg, out, plots=not args.no_plots)
    report["checkpoint"] = str(path)
    metrics.write_report(out / "report.json", report)
    fwd = report["tracking"]["forward_walk"]
    print(f"{variant}: forward deviation {fwd['position_deviation']}, drift {fwd['heading_drift']}, "
          f"fgd {report['fgd']:.4g}, torque violations {report['violations']['torque']}")
    return 0


# -- compare ------------------------------------------------------------------------------

def cmd_compare(args) -> int:
    reports = [metrics.read_report(p) for p in args.reports]
    rows = metrics.compare_rows(reports)
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        writer = csv.writer(out)
        writer.writerow(metrics.COMPARE_COLUMNS)
        for row in rows:
            writer.writerow(["" if row[c] is None else _format(row[c]) for c in metrics.COMPARE_COLUMNS])
    finally:
        if args.out:
            out.close()
    return 0


# -- entry point ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gaitprior", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="build the scripted expert dataset")
    g.add_argument("--config", help=f"flat config file (falls back to ${CONFIG_ENV_VAR})")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True, help="dataset file to write")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one variant")
    t.add_argument("--config", help=f"flat config file (falls back to ${CONFIG_ENV_VAR})")
    t.add_argument("--dataset", required=True)
    t.add_argument("--ablation", choices=ABLATIONS)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--iterations", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument("--no-plots", action="store_true")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="merge evaluation reports into one table")
    c.add_argument("reports", nargs="+")
    c.add_argument("--out", help="CSV file (default: stdout)")
    c.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"gaitprior: error: {exc}", file=sys.stderr)
        return 2
    except (flatcfg.ConfigError, ckpt.CheckpointError, ValueError, OSError) as exc:
        print(f"gaitprior: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
