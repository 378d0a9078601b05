"""Experiment orchestration: collect -> embed -> RL, seeds, sweeps, exports.

Configs are INI-style text (``[section]`` headers, ``key = value`` lines).
The config hash is the SHA-256 of the canonical re-serialization, so
reordering keys or reformatting numbers does not change it.
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import logging
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .agents import RLConfig, ddpg_train, dqn_train, final_metric, save_curve, save_ddpg, save_dqn
from .embed import (
    EmbedTrainConfig,
    EmbeddingModel,
    collect_transitions,
    embedding_metrics,
    embedding_table,
    save_model,
    save_transitions,
    train_embeddings,
)
from .errors import ConfigError
from .maze import MazeConfig, displacement_table, load_layout

log = logging.getLogger(__name__)

EXPERIMENT_SCHEMES = ("DCT", "DCT-Euc", "PGRA", "JSAE", "DQN")
EMBED_SCHEME = {"DCT": "DCT", "DCT-Euc": "DCT", "PGRA": "PGRA", "JSAE": "JSAE"}
DECODER = {"DCT": "learned", "DCT-Euc": "euclidean", "PGRA": "euclidean", "JSAE": "euclidean"}
DEFAULT_ETA_GRID = (0.0, 1e-4, 1e-3, 1e-2, 1e-1, 0.5)
FINAL_METRIC_NOTE = "final_metric = mean total reward over the last 100 episodes of training"

_PHASES = {"collect": 0, "embed": 1, "rl": 2}


def phase_seed(seed: int, phase: str) -> int:
    """Independent integer seed for one pipeline phase of one run."""
    return int(np.random.SeedSequence([int(seed), _PHASES[phase]]).generate_state(1)[0])


@dataclass
class ExperimentConfig:
    maze: MazeConfig = field(default_factory=MazeConfig)
    scheme: str = "DCT"
    embed: EmbedTrainConfig = field(default_factory=EmbedTrainConfig)
    dataset_size: int = 20_000
    rl: RLConfig = field(default_factory=RLConfig)
    episodes: int = 500
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs"
    jobs: int = 1

    def __post_init__(self):
        if self.scheme not in EXPERIMENT_SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {EXPERIMENT_SCHEMES}")
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ConfigError("seed list is empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seed list has duplicates: {self.seeds}")
        if self.dataset_size < 1:
            raise ConfigError("dataset_size must be >= 1")
        if self.episodes < 0:
            raise ConfigError("episodes must be >= 0")

    @property
    def n_actions(self) -> int:
        return self.maze.n_actions


# ---------------------------------------------------------------- config IO

_MAZE_SCALARS = {
    "n_actuators": int, "goal_radius": float, "magnitude": float, "p_noise": float,
    "step_penalty": float, "goal_reward": float, "collision_penalty": float, "timeout": int,
}


def _num(text: str, kind):
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f"cannot read {text!r} as {kind.__name__}") from None


def parse_seed_list(text: str) -> tuple[int, ...]:
    """``"0..9"``, ``"1,4,7"`` or a mix like ``"0..2,10"``."""
    seeds: list[int] = []
    for part in str(text).replace(" ", "").split(","):
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..", 1)
            seeds.extend(range(_num(lo, int), _num(hi, int) + 1))
        else:
            seeds.append(_num(part, int))
    return tuple(seeds)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def config_to_text(cfg: ExperimentConfig, include_output: bool = True) -> str:
    """Canonical text form: fixed section order, sorted keys."""
    maze = cfg.maze
    sections = {
        "experiment": {
            "scheme": cfg.scheme,
            "episodes": cfg.episodes,
            "dataset_size": cfg.dataset_size,
            "seeds": ",".join(str(s) for s in cfg.seeds),
        },
        "maze": {
            "n_actuators": maze.n_actuators,
            "start": f"{maze.start[0]!r} {maze.start[1]!r}",
            "goal": f"{maze.goal[0]!r} {maze.goal[1]!r}",
            "goal_radius": maze.goal_radius,
            "magnitude": "auto" if maze.magnitude is None else maze.magnitude,
            "p_noise": maze.p_noise,
            "step_penalty": maze.step_penalty,
            "goal_reward": maze.goal_reward,
            "collision_penalty": maze.collision_penalty,
            "timeout": maze.timeout,
            "walls": "; ".join(" ".join(repr(c) for c in w) for w in maze.walls),
        },
        "embed": {f.name: getattr(cfg.embed, f.name) for f in fields(EmbedTrainConfig)},
        "rl": {f.name: getattr(cfg.rl, f.name) for f in fields(RLConfig)},
    }
    if include_output:
        sections["experiment"]["output_dir"] = cfg.output_dir
        sections["experiment"]["jobs"] = cfg.jobs
    lines = []
    for name, values in sections.items():
        lines.append(f"[{name}]")
        for key in sorted(values):
            lines.append(f"{key} = {_fmt(values[key])}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: ExperimentConfig) -> str:
    """Digest of everything that affects results (output dir and job count excluded)."""
    return hashlib.sha256(config_to_text(cfg, include_output=False).encode()).hexdigest()[:16]


def _typed(dc_type, key: str, value: str):
    for f in fields(dc_type):
        if f.name == key:
            spec = str(f.type)
            if "None" in spec and value.lower() in ("none", "auto", ""):
                return None
            kind = int if spec.startswith("int") else float if spec.startswith("float") else str
            return _num(value, kind)
    raise ConfigError(f"unknown key {key!r} for {dc_type.__name__}")


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, str], base_dir: Path | None = None) -> ExperimentConfig:
    """Apply ``{"section.key": "value"}`` (or bare experiment keys) to a config."""
    maze_kw, embed_kw, rl_kw, exp_kw = {}, {}, {}, {}
    for dotted, value in overrides.items():
        section, _, key = dotted.rpartition(".")
        section = section or "experiment"
        value = str(value).strip()
        if section == "maze":
            if key == "layout":
                path = Path(value)
                if base_dir is not None and not path.is_absolute():
                    path = base_dir / path
                try:
                    layout = load_layout(path, cfg.maze)
                except OSError as exc:
                    raise ConfigError(f"cannot read layout {path}: {exc}") from None
                maze_kw.update(walls=layout.walls, start=layout.start, goal=layout.goal, goal_radius=layout.goal_radius)
            elif key in ("start", "goal"):
                parts = value.split()
                if len(parts) != 2:
                    raise ConfigError(f"maze.{key} needs two numbers")
                maze_kw[key] = (_num(parts[0], float), _num(parts[1], float))
            elif key == "walls":
                walls = []
                for chunk in value.split(";"):
                    if chunk.strip():
                        nums = [_num(v, float) for v in chunk.split()]
                        if len(nums) != 4:
                            raise ConfigError("each wall needs four numbers")
                        walls.append(tuple(nums))
                maze_kw["walls"] = tuple(walls)
            elif key == "magnitude":
                maze_kw[key] = None if value == "auto" else _num(value, float)
            elif key in _MAZE_SCALARS:
                maze_kw[key] = _num(value, _MAZE_SCALARS[key])
            else:
                raise ConfigError(f"unknown maze key {key!r}")
        elif section == "embed":
            embed_kw[key] = _typed(EmbedTrainConfig, key, value)
        elif section == "rl":
            rl_kw[key] = _typed(RLConfig, key, value)
        elif section == "experiment":
            if key == "scheme":
                exp_kw[key] = value
            elif key in ("episodes", "dataset_size", "jobs"):
                exp_kw[key] = _num(value, int)
            elif key == "seeds":
                exp_kw[key] = parse_seed_list(value)
            elif key == "output_dir":
                exp_kw[key] = value
            else:
                raise ConfigError(f"unknown experiment key {key!r}")
        else:
            raise ConfigError(f"unknown config section {section!r}")
    return replace(
        cfg,
        maze=replace(cfg.maze, **maze_kw) if maze_kw else cfg.maze,
        embed=replace(cfg.embed, **embed_kw) if embed_kw else cfg.embed,
        rl=replace(cfg.rl, **rl_kw) if rl_kw else cfg.rl,
        **exp_kw,
    )


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    overrides = {}
    # layout first so explicit maze keys can refine it
    if parser.has_option("maze", "layout"):
        overrides["maze.layout"] = parser.get("maze", "layout")
    for section in parser.sections():
        for key, value in parser.items(section):
            if (section, key) != ("maze", "layout"):
                overrides[f"{section}.{key}"] = value
    return apply_overrides(ExperimentConfig(), overrides, base_dir)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, path.parent)


# ---------------------------------------------------------------- exports


def export_embeddings(model: EmbeddingModel, maze_cfg: MazeConfig | None, path) -> Path:
    """CSV ``action_index,e1,e2,dx,dy,R,G,B``; R, G are min-max scaled dx, dy, B = 0.5."""
    table = embedding_table(model, maze_cfg)
    return write_embedding_csv(table.embeddings, table.displacements, path)


def _minmax(v: np.ndarray) -> np.ndarray:
    span = v.max() - v.min()
    if span <= 1e-12:
        return np.full_like(v, 0.5)
    return (v - v.min()) / span


def write_embedding_csv(embeddings, displacements, path) -> Path:
    path = Path(path)
    disp = np.where(np.abs(displacements) < 1e-15, 0.0, displacements)
    R, G = _minmax(disp[:, 0]), _minmax(disp[:, 1])
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["action_index", "e1", "e2", "dx", "dy", "R", "G", "B"])
            for i, (e, d) in enumerate(zip(embeddings, disp)):
                w.writerow([i, repr(float(e[0])), repr(float(e[1])), repr(float(d[0])), repr(float(d[1])),
                            repr(float(R[i])), repr(float(G[i])), "0.5"])
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {path}: {exc}") from exc
    return path


# ------------------------------------------------------------------- runs


@dataclass
class RunRecord:
    scheme: str
    n_actuators: int
    seed: int
    config_hash: str
    status: str = "ok"
    error: str = ""
    final_metric: float = math.nan
    curve: list = field(default_factory=list)
    embedding_table: np.ndarray | None = None
    artifacts: list = field(default_factory=list)
    wall_seconds: dict = field(default_factory=dict)

    @property
    def n_actions(self) -> int:
        return 2**self.n_actuators


def _run_seed(cfg: ExperimentConfig, seed: int) -> RunRecord:
    chash = config_hash(cfg)
    rec = RunRecord(cfg.scheme, cfg.maze.n_actuators, seed, chash)
    out = Path(cfg.output_dir) / cfg.scheme / f"n{cfg.maze.n_actuators}" / f"seed_{seed}"
    out.mkdir(parents=True, exist_ok=True)
    try:
        if cfg.scheme == "DQN":
            t0 = time.perf_counter()
            agent, curve = dqn_train(cfg.maze, cfg.episodes, cfg.rl, phase_seed(seed, "rl"))
            rec.wall_seconds["rl"] = time.perf_counter() - t0
            save_dqn(agent, out / "agent")
            rec.artifacts.append(out / "agent")
        else:
            t0 = time.perf_counter()
            data = collect_transitions(cfg.maze, cfg.dataset_size, phase_seed(seed, "collect"))
            save_transitions(data, out / "transitions.txt")
            rec.artifacts.append(out / "transitions.txt")
            rec.wall_seconds["collect"] = time.perf_counter() - t0

            t0 = time.perf_counter()
            model = train_embeddings(EMBED_SCHEME[cfg.scheme], data, cfg.embed, phase_seed(seed, "embed"))
            rec.wall_seconds["embed"] = time.perf_counter() - t0
            save_model(model, out / "model")
            export_embeddings(model, cfg.maze, out / "embeddings.csv")
            rec.artifacts += [out / "model", out / "embeddings.csv"]
            rec.embedding_table = model.embed(np.arange(model.n_actions))

            t0 = time.perf_counter()
            agent, curve = ddpg_train(cfg.maze, model, DECODER[cfg.scheme], cfg.episodes, cfg.rl, phase_seed(seed, "rl"))
            rec.wall_seconds["rl"] = time.perf_counter() - t0
            save_ddpg(agent, out / "agent")
            rec.artifacts.append(out / "agent")
        save_curve(curve, out / "curve.csv")
        rec.artifacts.append(out / "curve.csv")
        rec.curve = curve
        rec.final_metric = final_metric(curve)
    except Exception as exc:  # one bad seed must not sink the others
        rec.status = "failed"
        rec.error = f"{type(exc).__name__}: {exc}"
        log.error("seed %d failed: %s\n%s", seed, rec.error, traceback.format_exc())
    return rec


def run_experiment(cfg: ExperimentConfig) -> list[RunRecord]:
    """Run every seed of ``cfg`` and write per-seed artifacts plus ``runs.csv``.

    Seeds run sequentially unless ``cfg.jobs > 1``; each worker owns its own
    environment, models and generators.
    """
    root = Path(cfg.output_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {root}: {exc}") from exc
    if cfg.jobs > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            records = list(pool.map(_run_seed, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        records = [_run_seed(cfg, s) for s in cfg.seeds]
    cell = root / cfg.scheme / f"n{cfg.maze.n_actuators}"
    cell.mkdir(parents=True, exist_ok=True)
    (cell / "config.ini").write_text(config_to_text(cfg))
    write_runs_csv(records, cell / "runs.csv")
    return records


RUNS_HEADER = ["scheme", "n_actions", "seed", "status", "final_metric", "config_hash", "error"]


def write_runs_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {FINAL_METRIC_NOTE}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RUNS_HEADER)
        for r in records:
            w.writerow([r.scheme, r.n_actions, r.seed, r.status, repr(float(r.final_metric)), r.config_hash, r.error])


def read_runs_csv(path) -> list[RunRecord]:
    with open(path, newline="") as fh:
        rows = [line for line in fh if not line.startswith("#")]
    out = []
    for row in csv.DictReader(rows):
        n = int(row["n_actions"]).bit_length() - 1
        out.append(RunRecord(row["scheme"], n, int(row["seed"]), row["config_hash"], row["status"],
                             row.get("error", ""), float(row["final_metric"])))
    return out


# ------------------------------------------------------------- aggregation


@dataclass
class SummaryRow:
    scheme: str
    n_actions: int
    mu: float
    sigma: float
    seeds: int


def aggregate_seeds(records) -> list[SummaryRow]:
    """Sample mean and (n-1) standard deviation of final metrics per scheme x N."""
    cells: dict[tuple[str, int], list[float]] = {}
    for r in records:
        key = (r.scheme, r.n_actions)
        cells.setdefault(key, [])
        if r.status == "ok" and math.isfinite(r.final_metric):
            cells[key].append(r.final_metric)
    rows = []
    for (scheme, n_actions), values in sorted(cells.items(), key=lambda kv: (_scheme_order(kv[0][0]), kv[0][1])):
        if not values:
            log.warning("no successful runs for %s with %d actions; cell omitted", scheme, n_actions)
            continue
        v = np.asarray(values)
        sigma = float(v.std(ddof=1)) if len(v) > 1 else 0.0
        rows.append(SummaryRow(scheme, n_actions, float(v.mean()), sigma, len(v)))
    return rows


def _scheme_order(scheme: str) -> int:
    order = ("DQN", "PGRA", "JSAE", "DCT", "DCT-Euc")
    return order.index(scheme) if scheme in order else len(order)


def write_summary(rows, path) -> None:
    """Long format: one line per scheme x action count."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# {FINAL_METRIC_NOTE}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheme", "n_actions", "mu", "sigma", "seeds"])
        for r in rows:
            w.writerow([r.scheme, r.n_actions, f"{r.mu:.6g}", f"{r.sigma:.6g}", r.seeds])


def write_table(rows, path) -> None:
    """Wide format: schemes down, mu/sigma per action count across."""
    counts = sorted({r.n_actions for r in rows})
    schemes = sorted({r.scheme for r in rows}, key=_scheme_order)
    lookup = {(r.scheme, r.n_actions): r for r in rows}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheme"] + [f"{h}_{n}" for n in counts for h in ("mu", "sigma")])
        for s in schemes:
            line = [s]
            for n in counts:
                r = lookup.get((s, n))
                line += [f"{r.mu:.4g}", f"{r.sigma:.4g}"] if r else ["", ""]
            w.writerow(line)


# ------------------------------------------------------------------ sweeps


@dataclass
class SweepRow:
    eta: float
    min_dist: float
    mean_dist: float
    structure_corr: float
    seeds: int
    error: str = ""


def select_eta(rows) -> float:
    """Largest min-distance among etas whose structure correlation stays >= 0.9x the eta=0 value."""
    ok = [r for r in rows if not r.error and math.isfinite(r.min_dist)]
    if not ok:
        return math.nan
    base = next((r for r in ok if r.eta == 0.0), None)
    if base is None or not math.isfinite(base.structure_corr):
        candidates = ok
    else:
        floor = 0.9 * base.structure_corr
        candidates = [r for r in ok if math.isfinite(r.structure_corr) and r.structure_corr >= floor]
    return max(candidates, key=lambda r: (r.min_dist, -r.eta)).eta if candidates else math.nan


def eta_sweep(base: ExperimentConfig, grid=DEFAULT_ETA_GRID, seeds=None):
    """Train DCT embeddings (no RL) for each eta; metrics are averaged over seeds.

    Every eta sees the same datasets and initial weights for a given seed.
    Returns ``(rows, eta_star)``.
    """
    grid = list(grid)
    if not grid:
        raise ConfigError("eta grid is empty")
    seeds = tuple(seeds) if seeds is not None else base.seeds
    datasets = {s: collect_transitions(base.maze, base.dataset_size, phase_seed(s, "collect")) for s in seeds}
    rows = []
    for eta in grid:
        mets, err = [], ""
        for s in seeds:
            try:
                model = train_embeddings("DCT", datasets[s], replace(base.embed, eta=float(eta)), phase_seed(s, "embed"))
                mets.append(embedding_metrics(embedding_table(model, base.maze)))
            except Exception as exc:
                err = f"{type(exc).__name__}: {exc}"
                log.error("eta=%g seed=%d failed: %s", eta, s, err)
        if mets:
            rows.append(SweepRow(float(eta), float(np.mean([m.min_dist for m in mets])),
                                 float(np.mean([m.mean_dist for m in mets])),
                                 float(np.mean([m.structure_corr for m in mets])), len(mets), err))
        else:
            rows.append(SweepRow(float(eta), math.nan, math.nan, math.nan, 0, err))
    return rows, select_eta(rows)


def write_sweep(rows, path, eta_star=None) -> None:
    with open(path, "w", newline="") as fh:
        if eta_star is not None:
            fh.write(f"# eta_star = {eta_star!r}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["eta", "min_dist", "mean_dist", "structure_corr"])
        for r in rows:
            w.writerow([repr(r.eta), repr(r.min_dist), repr(r.mean_dist), repr(r.structure_corr)])


def displacement_csv(n: int, path, magnitude=None) -> Path:
    """True displacements exported in the embedding CSV layout (e = displacement)."""
    d = displacement_table(n, magnitude)
    return write_embedding_csv(d, d, path)
