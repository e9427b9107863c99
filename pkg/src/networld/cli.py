"""Command-line entry point: gen-data, pretrain, finetune, eval, plot.

Configuration precedence is flags > ``--config`` file > built-in defaults;
``NETWORLD_SEED`` overrides the built-in default seed. Every run writes a
``run_manifest.txt`` with the fully resolved configuration into ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from networld import __version__, dataset, envs
from networld.envs import parse_kv
from networld.planner import ExpertPolicy, Planner, PlannerConfig, RandomPolicy, evaluate
from networld.trainer import ModelConfig, NetWorld, TrainConfig, finetune, pretrain

log = logging.getLogger("networld")

MANIFEST = "run_manifest.txt"


class UsageError(Exception):
    """Bad invocation: reported with the usage line, exit status 2."""


def _default_seed() -> int:
    raw = os.environ.get("NETWORLD_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"NETWORLD_SEED must be an integer, got {raw!r}") from None


def _common(p: argparse.ArgumentParser, seed: int) -> None:
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--workers", type=int, default=1, help="cap on worker processes / torch threads")
    p.add_argument("-v", "--verbose", action="store_true")


def _train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--steps-per-epoch", type=int, default=d.steps_per_epoch)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--gamma", type=float, default=d.gamma)
    p.add_argument("--w-diffusion", type=float, default=d.w_diffusion)
    p.add_argument("--w-classifier", type=float, default=d.w_classifier)
    p.add_argument("--w-invdyn", type=float, default=d.w_invdyn)
    p.add_argument("--w-reconstruction", type=float, default=d.w_reconstruction)


def build_parser(seed: int = 0) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="networld", description="Multi-task diffusion world model for wireless control")
    parser.add_argument("--version", action="version", version=f"networld {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate an offline dataset")
    _common(p, seed)
    p.add_argument("--task", required=True, choices=sorted(envs.TASK_IDS))
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--steps", type=int, default=500, help="episode length")
    p.add_argument("--agents", type=int, default=4)
    p.add_argument("--policy", choices=["expert", "random"], default="expert")

    p = sub.add_parser("pretrain", help="multi-task pretraining")
    _common(p, seed)
    p.add_argument("--data", nargs="+", required=True, help="dataset directories")
    p.add_argument("--hold-out", choices=sorted(envs.TASK_IDS), help="task to leave out of pretraining")
    _train_flags(p)
    m = ModelConfig()
    p.add_argument("--latent-dim", type=int, default=m.latent_dim)
    p.add_argument("--horizon", type=int, default=m.horizon)
    p.add_argument("--diffusion-steps", type=int, default=m.diffusion_steps)
    p.add_argument("--hidden", type=int, nargs=4, default=list(m.hidden), help="U-Net widths per level")

    p = sub.add_parser("finetune", help="few-shot adaptation to a held-out task")
    _common(p, seed)
    p.add_argument("--model", required=True, help="pretrained model directory")
    p.add_argument("--data", required=True, help="dataset directory of the new task")
    p.add_argument("--task", required=True, choices=sorted(envs.TASK_IDS))
    _train_flags(p)
    p.add_argument("--finetune-ratio", type=float, default=TrainConfig().finetune_ratio)

    p = sub.add_parser("eval", help="evaluate a policy over seeds")
    _common(p, seed)
    p.add_argument("--task", required=True, choices=sorted(envs.TASK_IDS))
    p.add_argument("--policy", choices=["planner", "random", "expert"], default="planner")
    p.add_argument("--model", help="model directory (planner policy)")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--episodes", type=int, default=1, help="episodes per seed")
    p.add_argument("--steps", type=int, default=200, help="episode length")
    p.add_argument("--agents", type=int, default=4)
    p.add_argument("--guidance-scale", type=float, default=1.0)
    p.add_argument("--replan-interval", type=int, default=1)

    p = sub.add_parser("plot", help="render curves.png / ratio.png from CSVs")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--curves", nargs="*", default=[], help="curves.csv or per-episode reward CSVs")
    p.add_argument("--metrics", nargs="*", default=[], help="LABEL=metrics.csv entries for the ratio chart")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:  # noqa: SLF001  (argparse has no public accessor)
        if command in action.choices:
            return action.choices[command]
    raise UsageError(f"unknown command {command!r}")


def _apply_config(sub: argparse.ArgumentParser, path: str) -> None:
    """Turn a key = value file into subcommand defaults (keys use flag names).

    A previous run's manifest is accepted too: its ``arg.*`` entries are
    replayed, bookkeeping entries and the old ``--out`` are ignored.
    """
    try:
        kv = parse_kv(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    if "command" in kv:
        kv = {k[4:]: v for k, v in kv.items() if k.startswith("arg.") and k[4:] not in ("out", "config")}
        kv = {k: v for k, v in kv.items() if v != "None"}
    actions = {a.dest: a for a in sub._actions}  # noqa: SLF001
    defaults = {}
    for key, raw in kv.items():
        dest = key.replace("-", "_")
        if dest not in actions or dest in ("config", "help"):
            raise UsageError(f"{path}: unknown configuration key {key!r}")
        a = actions[dest]
        conv = a.type or (lambda s: s)
        try:
            if a.nargs in ("+", "*") or isinstance(a.nargs, int):
                value = [conv(x) for x in raw.replace(",", " ").split()]
            elif a.const is True:  # store_true
                value = raw.lower() in ("1", "true", "yes")
            else:
                value = conv(raw)
        except ValueError:
            raise UsageError(f"{path}: bad value {raw!r} for {key!r}") from None
        if a.choices is not None and value not in a.choices:
            raise UsageError(f"{path}: {key} must be one of {sorted(a.choices)}")
        defaults[dest] = value
        a.required = False
    sub.set_defaults(**defaults)


def _prescan(argv: list[str]) -> tuple[str | None, str | None]:
    """Command and ``--config`` value, found before full parsing so the
    file can also supply otherwise-required options."""
    command = next((a for a in argv if not a.startswith("-")), None)
    config = None
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            config = argv[i + 1]
        elif a.startswith("--config="):
            config = a.split("=", 1)[1]
    return command, config


def parse(argv: list[str]) -> argparse.Namespace:
    parser = build_parser(_default_seed())
    command, config = _prescan(argv)
    if config and command in COMMANDS:
        _apply_config(_subparser(parser, command), config)
    return parser.parse_args(argv)


# ---------------------------------------------------------------- manifests


def _resolved(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("verbose",)}


def write_manifest(out: Path, args: argparse.Namespace, started: str, outputs: list[str]) -> None:
    lines = [f"command = {args.command}", f"version = {__version__}", f"started = {started}",
             f"finished = {_dt.datetime.now().isoformat(timespec='seconds')}"]
    for k, v in _resolved(args).items():
        if k == "command":
            continue
        if isinstance(v, list):
            v = " ".join(str(x) for x in v)
        lines.append(f"arg.{k} = {v}")
    lines.append(f"outputs = {' '.join(outputs)}")
    (out / MANIFEST).write_text("\n".join(lines) + "\n")


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs, steps_per_epoch=args.steps_per_epoch, batch_size=args.batch_size, lr=args.lr,
        finetune_ratio=getattr(args, "finetune_ratio", TrainConfig().finetune_ratio),
        w_diffusion=args.w_diffusion, w_classifier=args.w_classifier, w_invdyn=args.w_invdyn,
        w_reconstruction=args.w_reconstruction, seed=args.seed, gamma=args.gamma)


def _read_dataset(path: str) -> dataset.TrajectoryStore:
    if not (Path(path) / "manifest.txt").exists():
        raise UsageError(f"not a dataset directory: {path}")
    store = dataset.read(path)
    if store.spec is None or len(store) == 0:
        raise UsageError(f"dataset {path} has no task spec or no episodes")
    return store


def _require_model(path: str | None) -> str:
    if not path or not (Path(path) / "model.txt").exists():
        raise UsageError(f"no model checkpoint at {path}")
    return path


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, out: Path) -> list[str]:
    if args.episodes < 1 or args.steps < 1 or args.agents < 1:
        raise UsageError("--episodes, --steps and --agents must be positive")
    spec = envs.make_task(args.task, num_agents=args.agents, episode_length=args.steps)
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            store = dataset.generate(spec, args.policy, args.episodes, args.seed, map_fn=pool.map)
    else:
        store = dataset.generate(spec, args.policy, args.episodes, args.seed)
    dataset.write(store, out)
    log.info("%s: %d %s episodes, mean reward %.4f", args.task, len(store), args.policy, store.mean_reward())
    return ["manifest.txt", "obs.bin", "act.bin", "rew.bin", "adj.bin", "task.txt"]


def cmd_pretrain(args, out: Path) -> list[str]:
    stores = {}
    for path in args.data:
        store = _read_dataset(path)
        if args.hold_out and store.spec.name == args.hold_out:
            log.info("holding out %s (%s)", path, args.hold_out)
            continue
        if store.spec.task_id in stores:
            raise UsageError(f"two datasets for task {store.spec.name}")
        stores[store.spec.task_id] = store
    if not stores:
        raise UsageError("no source datasets left after --hold-out")
    model_cfg = ModelConfig(latent_dim=args.latent_dim, horizon=args.horizon, diffusion_steps=args.diffusion_steps,
                            hidden=tuple(args.hidden))
    art = pretrain(_train_config(args), stores, model_cfg, out_dir=out / "checkpoints")
    art.models.save(out / "model")
    art.write_curves(out / "curves.csv")
    return ["model", "checkpoints", "curves.csv"]


def cmd_finetune(args, out: Path) -> list[str]:
    store = _read_dataset(args.data)
    if store.spec.name != args.task:
        raise UsageError(f"dataset {args.data} is for task {store.spec.name}, not {args.task}")
    art = finetune(_train_config(args), _require_model(args.model), store, out_dir=out / "checkpoints")
    art.models.save(out / "model")
    art.write_curves(out / "curves.csv")
    return ["model", "checkpoints", "curves.csv"]


def make_policy(args, spec):
    if args.policy == "random":
        return RandomPolicy(spec)
    if args.policy == "expert":
        return ExpertPolicy(spec)
    models = NetWorld.load(_require_model(args.model))
    cfg = PlannerConfig(guidance_scale=args.guidance_scale, replan_interval=args.replan_interval,
                        episodes=args.episodes, seed=args.seed)
    return Planner(models, spec, cfg)


def cmd_eval(args, out: Path) -> list[str]:
    if args.episodes < 1 or args.steps < 1:
        raise UsageError("--episodes and --steps must be positive")
    spec = envs.make_task(args.task, num_agents=args.agents, episode_length=args.steps)
    try:
        policy = make_policy(args, spec)
    except ValueError as e:
        raise UsageError(str(e)) from None
    result = evaluate(policy, spec, args.episodes, args.seeds)
    outputs = ["metrics.csv"]
    with open(out / "metrics.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["task", "policy", "seed", "mean_reward"])
        for s, r in zip(args.seeds, result.per_seed):
            wr.writerow([args.task, args.policy, s, repr(r)])
        wr.writerow([args.task, args.policy, "mean", repr(result.mean)])
        wr.writerow([args.task, args.policy, "std", repr(result.std)])
        wr.writerow([args.task, args.policy, "fallbacks", result.fallbacks])
    # per-step rewards of each seed's first episode, for reward curves
    for i, s in enumerate(args.seeds):
        name = f"rewards_seed{s}.csv"
        result.summaries[i * args.episodes].write_csv(out / name)
        outputs.append(name)
    log.info("%s/%s: mean %.4f +- %.4f over seeds %s", args.task, args.policy, result.mean, result.std, args.seeds)
    print(f"{args.task} {args.policy}: {result.mean:.4f} +- {result.std:.4f}")
    return outputs


def _read_csv(path: str) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def cmd_plot(args, out: Path) -> list[str]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from networld.trainer import smoothed

    if not args.curves and not args.metrics:
        raise UsageError("nothing to plot: give --curves and/or --metrics")
    outputs = []
    if args.curves:
        fig, ax = plt.subplots(1, 2, figsize=(11, 4))
        for path in args.curves:
            rows = _read_csv(path)
            if rows and "component" in rows[0]:
                for comp in sorted({r["component"] for r in rows} - {"total"}):
                    v = [float(r["value"]) for r in rows if r["component"] == comp]
                    ax[0].plot(smoothed(v, 50), label=f"{Path(path).parent.name}:{comp}")
            elif rows and "reward" in rows[0]:
                steps = sorted({int(r["step"]) for r in rows})
                by_step = {s: [] for s in steps}
                for r in rows:
                    by_step[int(r["step"])].append(float(r["reward"]))
                ax[1].plot(smoothed([np.mean(by_step[s]) for s in steps], 10), label=Path(path).stem)
            else:
                raise UsageError(f"{path}: neither a loss curve nor an episode reward CSV")
        ax[0].set(title="training losses (smoothed)", xlabel="step", yscale="log")
        ax[1].set(title="average reward per step", xlabel="env step")
        for a in ax:
            if a.lines:
                a.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / "curves.png", dpi=120)
        plt.close(fig)
        outputs.append("curves.png")
    if args.metrics:
        labels, means, stds = [], [], []
        for item in args.metrics:
            label, sep, path = item.partition("=")
            if not sep:
                raise UsageError(f"--metrics entries are LABEL=path, got {item!r}")
            rows = {r["seed"]: r for r in _read_csv(path)}
            labels.append(label)
            means.append(float(rows["mean"]["mean_reward"]))
            stds.append(float(rows["std"]["mean_reward"]))
        fig, ax = plt.subplots(figsize=(1.2 * len(labels) + 3, 4))
        ax.bar(labels, means, yerr=stds, capsize=4, color="tab:blue")
        ax.set(ylabel="average reward", title="performance vs. data")
        fig.tight_layout()
        fig.savefig(out / "ratio.png", dpi=120)
        plt.close(fig)
        outputs.append("ratio.png")
    return outputs


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "eval": cmd_eval, "plot": cmd_plot}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse(argv)
    except UsageError as e:
        print(f"networld: error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:  # argparse usage errors
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    workers = getattr(args, "workers", 1)
    if workers < 1:
        print("networld: error: --workers must be >= 1", file=sys.stderr)
        return 2
    torch.set_num_threads(workers)
    started = _dt.datetime.now().isoformat(timespec="seconds")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        outputs = COMMANDS[args.command](args, out)
        write_manifest(out, args, started, outputs)
    except UsageError as e:
        print(f"networld {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001  runtime failure -> exit 1 with a message
        log.debug("failure", exc_info=True)
        print(f"networld {args.command}: failed: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
