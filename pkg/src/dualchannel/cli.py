"""Command-line entry point.

Exit codes: 0 success, 1 bad configuration, 2 training failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import agents, embed, harness
from .errors import ConfigError, TrainingDiverged
from .maze import MazeConfig, load_layout

log = logging.getLogger("dualchannel")

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING, EXIT_IO = 0, 1, 2, 3


def _maze(args) -> MazeConfig:
    base = MazeConfig(n_actuators=args.n)
    if getattr(args, "layout", None):
        try:
            return load_layout(args.layout, base)
        except OSError as exc:
            raise ConfigError(f"cannot read layout {args.layout}: {exc}") from None
    return base


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _experiment_config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    over = _overrides(args.set)
    if args.seed_list:
        over["experiment.seeds"] = args.seed_list
    if getattr(args, "output_dir", None):
        over["experiment.output_dir"] = args.output_dir
    if getattr(args, "jobs", None):
        over["experiment.jobs"] = str(args.jobs)
    return harness.apply_overrides(cfg, over)


# ---------------------------------------------------------------- commands


def cmd_collect(args) -> int:
    data = embed.collect_transitions(_maze(args), args.count, args.seed)
    embed.save_transitions(data, args.out)
    print(f"wrote {len(data)} transitions to {args.out}")
    return EXIT_OK


def cmd_train_embed(args) -> int:
    try:
        data = embed.load_transitions(args.data)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg = embed.EmbedTrainConfig(eta=args.eta, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr)
    model = embed.train_embeddings(args.scheme, data, cfg, args.seed)
    embed.save_model(model, args.out)
    maze_cfg = MazeConfig(n_actuators=data.n_actuators)
    m = embed.embedding_metrics(embed.embedding_table(model, maze_cfg))
    print(f"min_dist={m.min_dist:.6g} mean_dist={m.mean_dist:.6g} structure_corr={m.structure_corr:.4f}")
    return EXIT_OK


def cmd_train_rl(args) -> int:
    cfg = agents.RLConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.scheme == "DQN":
        agent, curve = agents.dqn_train(_maze(args), args.episodes, cfg, args.seed)
        agents.save_dqn(agent, out / "agent")
    else:
        if not args.model:
            raise ConfigError("--model is required unless --scheme DQN")
        model = embed.load_model(args.model)
        maze_cfg = replace(_maze(args), n_actuators=model.n_actuators)
        agent, curve = agents.ddpg_train(maze_cfg, model, args.decoder, args.episodes, cfg, args.seed)
        agents.save_ddpg(agent, out / "agent")
    agents.save_curve(curve, out / "curve.csv")
    print(f"final_metric={agents.final_metric(curve):.4f}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _experiment_config(args)
    records = harness.run_experiment(cfg)
    for r in records:
        print(f"{r.scheme} N={r.n_actions} seed={r.seed} {r.status} final_metric={r.final_metric:.4f} {r.error}".rstrip())
    return EXIT_OK if all(r.status == "ok" for r in records) else EXIT_TRAINING


def cmd_sweep_eta(args) -> int:
    cfg = _experiment_config(args)
    grid = [float(v) for v in args.grid.split(",")] if args.grid else harness.DEFAULT_ETA_GRID
    rows, eta_star = harness.eta_sweep(cfg, grid)
    harness.write_sweep(rows, args.out, eta_star)
    for r in rows:
        print(f"eta={r.eta:g} min_dist={r.min_dist:.6g} structure_corr={r.structure_corr:.4f} {r.error}".rstrip())
    print(f"eta_star={eta_star!r}")
    return EXIT_TRAINING if any(r.error for r in rows) else EXIT_OK


def cmd_export(args) -> int:
    if args.displacements is not None:
        harness.displacement_csv(args.displacements, args.out)
    else:
        if not args.model:
            raise ConfigError("give --model or --displacements")
        model = embed.load_model(args.model)
        harness.export_embeddings(model, None, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def _runs_files(paths) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(p.rglob("runs.csv")))
        elif p.exists():
            files.append(p)
        else:
            raise FileNotFoundError(f"no such file or directory: {p}")
    return files


def cmd_aggregate(args) -> int:
    records = []
    for path in _runs_files(args.inputs):
        records.extend(harness.read_runs_csv(path))
    if not records:
        raise ConfigError("no run records found")
    rows = harness.aggregate_seeds(records)
    harness.write_summary(rows, args.out)
    if args.table:
        harness.write_table(rows, args.table)
    for r in rows:
        print(f"{r.scheme} N={r.n_actions} mu={r.mu:.3f} sigma={r.sigma:.3f} seeds={r.seeds}")
    return EXIT_OK


def moving_average(values, window: int = 10) -> np.ndarray:
    """Trailing mean; the first ``window - 1`` points average what is available."""
    v = np.asarray(values, dtype=float)
    if window < 1:
        raise ValueError("window must be >= 1")
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for path in args.curves:
        curve = agents.load_curve(path)
        rewards = [r.total_reward for r in curve]
        ax.plot(moving_average(rewards, args.window), label=Path(path).parent.name or str(path))
    ax.set_xlabel("episode")
    ax.set_ylabel(f"total reward ({args.window}-episode moving average)")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(args.out)
    plt.close(fig)
    print(f"wrote {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualchannel", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("collect", help="record random-policy transitions")
    c.add_argument("--n", type=int, required=True, help="number of actuators")
    c.add_argument("--count", type=int, default=20_000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--layout")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_collect)

    c = sub.add_parser("train-embed", help="learn action embeddings from a transition file")
    c.add_argument("--data", required=True)
    c.add_argument("--scheme", choices=embed.SCHEMES, default="DCT")
    c.add_argument("--eta", type=float, default=0.01)
    c.add_argument("--epochs", type=int, default=embed.EmbedTrainConfig.epochs)
    c.add_argument("--batch-size", type=int, default=128)
    c.add_argument("--lr", type=float, default=1e-3)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_train_embed)

    c = sub.add_parser("train-rl", help="train DDPG on an embedding model, or DQN on raw actions")
    c.add_argument("--scheme", choices=("DDPG", "DQN"), default="DDPG")
    c.add_argument("--model")
    c.add_argument("--decoder", choices=("learned", "euclidean"), default="learned")
    c.add_argument("--n", type=int, default=4)
    c.add_argument("--layout")
    c.add_argument("--episodes", type=int, default=500)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_train_rl)

    for name, func, helptext in (("run", cmd_run, "full pipeline over a seed list"),
                                 ("sweep-eta", cmd_sweep_eta, "embedding metrics across eta values")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--config")
        c.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
        c.add_argument("--seed-list", help='e.g. "0..9" or "1,3,5"')
        if name == "run":
            c.add_argument("--output-dir")
            c.add_argument("--jobs", type=int)
        else:
            c.add_argument("--grid", help="comma-separated eta values")
            c.add_argument("--out", required=True)
        c.set_defaults(func=func)

    c = sub.add_parser("export-embeddings", help="write the embedding table as CSV")
    c.add_argument("--model")
    c.add_argument("--displacements", type=int, metavar="N", help="export true displacements instead")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_export)

    c = sub.add_parser("aggregate", help="summarise runs.csv files across seeds")
    c.add_argument("inputs", nargs="+")
    c.add_argument("--out", required=True)
    c.add_argument("--table")
    c.set_defaults(func=cmd_aggregate)

    c = sub.add_parser("plot", help="learning curves with a moving average")
    c.add_argument("curves", nargs="+")
    c.add_argument("--window", type=int, default=10)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
