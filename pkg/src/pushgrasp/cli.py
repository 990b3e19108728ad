"""Command-line entry point.

Every flag can also be given in a JSON config file (``--config``).  Keys are
flag names with dashes or underscores; a section named after the subcommand
overrides top-level keys, and explicit flags override the file.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("pushgrasp")


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# name -> (type, default, help)
COMMANDS = {
    "gen-data": {
        "scenes": (int, 300, "number of random scenes"),
        "objects_min": (int, 2, "fewest objects per scene"),
        "objects_max": (int, 5, "most objects per scene"),
        "grasps_per_mask": (int, 64, "labelled grasps per object mask"),
        "seed": (int, 0, "dataset seed"),
        "grid": (int, 64, "grid size in pixels"),
        "out": (str, None, "dataset directory"),
    },
    "train-grasp": {
        "data": (str, None, "dataset directory"),
        "epochs": (int, 10, "passes over the scenes"),
        "lr": (float, 0.05, "learning rate"),
        "seed": (int, 0, "initialisation and shuffling seed"),
        "out": (str, None, "checkpoint path"),
    },
    "train-critic": {
        "data": (str, None, "dataset directory"),
        "epochs": (int, 2, "passes over the samples"),
        "lr": (float, 0.05, "learning rate"),
        "seed": (int, 0, "initialisation and shuffling seed"),
        "out": (str, None, "checkpoint path"),
    },
    "train-push": {
        "grasp_ckpt": (str, None, "trained grasp checkpoint"),
        "critic_ckpt": (str, None, "trained critic checkpoint"),
        "steps": (int, 500, "bandit steps"),
        "epsilon_start": (float, 0.5, "initial exploration rate"),
        "epsilon_end": (float, 0.1, "final exploration rate"),
        "lr": (float, 0.01, "push-net learning rate"),
        "seed": (int, 0, "bandit seed"),
        "out": (str, None, "output directory (all three checkpoints)"),
    },
    "eval": {
        "task": (str, "retrieval", "retrieval | clearing | constrained"),
        "ckpt_dir": (str, None, "directory holding grasp/critic/push checkpoints"),
        "seeds": (str, "0,1,2,3", "comma-separated seeds"),
        "push_budget": (int, 5, "maximum pushes per episode"),
        "policy": (str, "learned", "learned | random_push | grasp_only | random_bin"),
        "tau": (float, 0.5, "critic threshold"),
        "objects": (str, "5,8", "comma-separated object counts"),
        "target_total": (int, 60, "targets per seed and object count"),
        "iterations": (int, 10, "constrained layouts per case"),
        "report": (str, None, "report path prefix"),
        "episodes_dir": (str, "", "if set, write every episode record here (input for render)"),
    },
    "render": {
        "episode": (str, None, "episode JSON-lines file"),
        "out_dir": (str, None, "frame directory"),
        "grid": (int, 64, "grid size in pixels"),
    },
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pushgrasp", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file mirroring the flags")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, flags in COMMANDS.items():
        p = sub.add_parser(name)
        for key, (typ, default, help_) in flags.items():
            extra = f" (default {default})" if default not in (None, "") else ""
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None, help=help_ + extra)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults < config file (top level < section) < explicit flags."""
    flags = COMMANDS[args.command]
    values = {k: v[1] for k, v in flags.items()}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        layers = [{k: v for k, v in raw.items() if not isinstance(v, dict)}, raw.get(args.command, {})]
        for layer in layers:
            for key, val in layer.items():
                k = key.replace("-", "_")
                if k in flags:
                    try:
                        values[k] = flags[k][0](val)
                    except (TypeError, ValueError) as exc:
                        raise ConfigError(f"bad value for {key}: {val!r}") from exc
                elif k not in _ALL_KEYS:
                    raise ConfigError(f"unknown config key {key!r}")
    for k in flags:
        v = getattr(args, k)
        if v is not None:
            values[k] = v
    missing = [k for k, v in values.items() if v is None]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return values


_ALL_KEYS = {k for flags in COMMANDS.values() for k in flags} | set(COMMANDS)


def _int_list(text: str) -> tuple:
    try:
        return tuple(int(t) for t in str(text).split(",") if t.strip())
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def _setup_determinism():
    import torch

    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def _load_dataset(path):
    from .training import GraspDataset

    try:
        return GraspDataset.load(path)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load dataset {path}: {exc}") from exc


def _load_ckpt(path):
    from .equinets.checkpoint import CheckpointError, load_checkpoint

    try:
        return load_checkpoint(path)
    except (FileNotFoundError, CheckpointError) as exc:
        raise DataError(str(exc)) from exc


def cmd_gen_data(v: dict) -> int:
    from .geometry2d import GridSpec
    from .training import collect_grasp_dataset

    if v["objects_min"] < 1 or v["objects_max"] < v["objects_min"]:
        raise ConfigError("need 1 <= objects-min <= objects-max")
    if v["grasps_per_mask"] < 1 or v["scenes"] < 1:
        raise ConfigError("scenes and grasps-per-mask must be positive")
    ds = collect_grasp_dataset(v["scenes"], (v["objects_min"], v["objects_max"]), v["grasps_per_mask"],
                               v["seed"], GridSpec.centered(v["grid"]), out_dir=v["out"])
    c = ds.manifest["counts"]
    print(f"wrote {c['total']} samples ({c['positive']} positive) to {v['out']}")
    return EXIT_OK


def cmd_train_grasp(v: dict) -> int:
    from .equinets.checkpoint import save_checkpoint
    from .training import TrainConfig, train_grasp_net

    ds = _load_dataset(v["data"])
    cfg = TrainConfig(lr=v["lr"], epochs=v["epochs"], seed=v["seed"])
    Path(v["out"]).parent.mkdir(parents=True, exist_ok=True)
    net, curve = train_grasp_net(ds, cfg, curve_path=Path(v["out"]).with_suffix(".csv"))
    save_checkpoint(net, v["out"], {"epochs": v["epochs"], "lr": v["lr"], "seed": v["seed"]})
    print(f"grasp net saved to {v['out']} (final loss {curve[-1]:.4f})")
    return EXIT_OK


def cmd_train_critic(v: dict) -> int:
    from .equinets.checkpoint import save_checkpoint
    from .training import TrainConfig, train_critic_net

    ds = _load_dataset(v["data"])
    cfg = TrainConfig(critic_lr=v["lr"], critic_epochs=v["epochs"], seed=v["seed"])
    Path(v["out"]).parent.mkdir(parents=True, exist_ok=True)
    net, curve = train_critic_net(ds, cfg, curve_path=Path(v["out"]).with_suffix(".csv"))
    save_checkpoint(net, v["out"], {"epochs": v["epochs"], "lr": v["lr"], "seed": v["seed"]})
    print(f"critic saved to {v['out']} (final loss {curve[-1]:.4f})")
    return EXIT_OK


def cmd_train_push(v: dict) -> int:
    from .equinets.checkpoint import save_checkpoint
    from .geometry2d import GridSpec
    from .policy import Nets
    from .training import TrainConfig, train_push_net

    try:
        cfg = TrainConfig(bandit_steps=v["steps"], epsilon_start=v["epsilon_start"],
                          epsilon_end=v["epsilon_end"], push_lr=v["lr"], seed=v["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    grasp, critic = _load_ckpt(v["grasp_ckpt"]), _load_ckpt(v["critic_ckpt"])
    grid = GridSpec.centered(int(round(0.40 / grasp.config.meters_per_pixel)))
    out = Path(v["out"])
    out.mkdir(parents=True, exist_ok=True)
    res = train_push_net(Nets(grasp, critic, None, grid), cfg, out_dir=out)
    dst = out / "grasp.ckpt"
    if not (dst.exists() and dst.samefile(v["grasp_ckpt"])):
        shutil.copyfile(v["grasp_ckpt"], dst)
    save_checkpoint(res.critic, out / "critic.ckpt", {"fine_tuned_steps": v["steps"]})
    save_checkpoint(res.push, out / "push.ckpt", {"steps": v["steps"], "seed": v["seed"]})
    tail = res.rewards[-100:]
    print(f"push net saved to {out} (mean reward over last {len(tail)} steps "
          f"{sum(tail) / max(1, len(tail)):.3f})")
    return EXIT_OK


def cmd_eval(v: dict) -> int:
    from .evalharness import TaskSpec, load_nets, run_task, write_report

    try:
        spec = TaskSpec(task=v["task"], object_counts=_int_list(v["objects"]), seeds=_int_list(v["seeds"]),
                        target_total=v["target_total"], push_budget=v["push_budget"], ckpt_dir=v["ckpt_dir"],
                        policy=v["policy"], tau=v["tau"], iterations=v["iterations"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        nets = load_nets(spec.ckpt_dir, need_push=spec.policy == "learned" and spec.push_budget > 0)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    results = run_task(spec, nets)
    write_report(results, v["report"], f"{spec.task} / {spec.policy} / push budget {spec.push_budget}")
    if v["episodes_dir"]:
        root = Path(v["episodes_dir"])
        root.mkdir(parents=True, exist_ok=True)
        for name in sorted(results):
            for k, rec in enumerate(results[name].records):
                rec.write(root / f"{name}_{k:04d}.jsonl")
    print(Path(f"{v['report']}.txt").read_text())
    return EXIT_OK


def cmd_render(v: dict) -> int:
    from .evalharness import render_frames
    from .geometry2d import GridSpec
    from .policy import EpisodeRecord

    try:
        rec = EpisodeRecord.read(v["episode"])
    except (FileNotFoundError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read episode {v['episode']}: {exc}") from exc
    paths = render_frames(rec, v["out_dir"], GridSpec.centered(v["grid"]))
    print(f"wrote {len(paths)} frames to {v['out_dir']}")
    return EXIT_OK


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-grasp": cmd_train_grasp,
    "train-critic": cmd_train_critic,
    "train-push": cmd_train_push,
    "eval": cmd_eval,
    "render": cmd_render,
}


def main(argv=None) -> int:
    from .training import TrainingDiverged

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        values = resolve(args)
        _setup_determinism()
        return HANDLERS[args.command](values)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
