import csv
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualchannel import harness
from dualchannel.agents import RLConfig
from dualchannel.embed import EmbedTrainConfig
from dualchannel.errors import ConfigError
from dualchannel.harness import ExperimentConfig, RunRecord, SweepRow
from dualchannel.maze import MazeConfig
from oracles import mean_and_sample_std


# ----------------------------------------------------------------- seeds


@pytest.mark.parametrize(
    "text,expected",
    [("0..9", tuple(range(10))), ("1,4,7", (1, 4, 7)), ("0..2,10", (0, 1, 2, 10)), ("5", (5,))],
)
def test_seed_list_parsing(text, expected):
    assert harness.parse_seed_list(text) == expected


def test_seed_list_errors():
    with pytest.raises(ConfigError):
        harness.parse_seed_list("a..b")
    with pytest.raises(ConfigError):
        ExperimentConfig(seeds=())
    with pytest.raises(ConfigError):
        ExperimentConfig(seeds=(1, 2, 1))


def test_phase_seeds_differ():
    seeds = {harness.phase_seed(s, p) for s in range(5) for p in ("collect", "embed", "rl")}
    assert len(seeds) == 15


# ---------------------------------------------------------------- config


BASE = """
[experiment]
scheme = DCT
episodes = 50
seeds = 0..2

[maze]
n_actuators = 6
p_noise = 0.1

[embed]
eta = 0.01
epochs = 20
"""

REORDERED = """
[embed]
epochs = 20
eta = 1e-2

[maze]
p_noise = 0.10
n_actuators = 6

[experiment]
seeds = 0,1,2
episodes = 50
scheme = DCT
output_dir = elsewhere
"""


def test_config_parse_values():
    cfg = harness.parse_config(BASE)
    assert cfg.maze.n_actuators == 6 and cfg.embed.eta == 0.01 and cfg.seeds == (0, 1, 2)
    assert cfg.embed.epochs == 20 and cfg.episodes == 50


def test_hash_ignores_order_and_formatting():
    a, b = harness.parse_config(BASE), harness.parse_config(REORDERED)
    assert harness.config_hash(a) == harness.config_hash(b)


def test_hash_tracks_values():
    cfg = harness.parse_config(BASE)
    other = harness.apply_overrides(cfg, {"embed.eta": "0.1"})
    assert harness.config_hash(cfg) != harness.config_hash(other)


def test_canonical_text_roundtrip():
    cfg = harness.parse_config(BASE)
    again = harness.parse_config(harness.config_to_text(cfg))
    assert again == cfg


@pytest.mark.parametrize(
    "override",
    [{"embed.colour": "1"}, {"nowhere.x": "1"}, {"maze.n_actuators": "six"}, {"experiment.scheme": "A2C"}, {"maze.start": "1"}],
)
def test_bad_overrides(override):
    with pytest.raises(ConfigError):
        harness.apply_overrides(ExperimentConfig(), override)


def test_malformed_config_text():
    with pytest.raises(ConfigError):
        harness.parse_config("no section header\nx = 1\n")


def test_layout_path_is_relative_to_config(tmp_path):
    (tmp_path / "maze.txt").write_text("version = 1\ngoal = 0.8 0.8\nwall = 0 0.5 0.5 0.5\n")
    (tmp_path / "exp.ini").write_text("[maze]\nlayout = maze.txt\nn_actuators = 3\n")
    cfg = harness.load_config(tmp_path / "exp.ini")
    assert cfg.maze.goal == (0.8, 0.8) and cfg.maze.walls == ((0.0, 0.5, 0.5, 0.5),)
    assert cfg.maze.n_actuators == 3


def test_missing_config_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        harness.load_config(tmp_path / "absent.ini")


# --------------------------------------------------------------- exports


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.reader(line for line in fh if not line.startswith("#")))


def test_displacement_csv(tmp_path):
    path = harness.displacement_csv(4, tmp_path / "d.csv")
    rows = _read(path)
    assert rows[0] == ["action_index", "e1", "e2", "dx", "dy", "R", "G", "B"]
    body = rows[1:]
    assert len(body) == 16 and [int(r[0]) for r in body] == list(range(16))
    assert all(r[7] == "0.5" for r in body)
    dx = np.array([float(r[3]) for r in body])
    R = np.array([float(r[5]) for r in body])
    assert R.min() == 0.0 and R.max() == 1.0
    assert np.allclose(R, (dx - dx.min()) / (dx.max() - dx.min()))
    assert body[15][3] == "0.0" and body[15][4] == "0.0"


def test_constant_column_colours_mid(tmp_path):
    disp = np.array([[0.1, 0.0], [0.1, 0.5], [0.1, 1.0]])
    rows = _read(harness.write_embedding_csv(np.zeros((3, 2)), disp, tmp_path / "e.csv"))[1:]
    assert [float(r[5]) for r in rows] == [0.5, 0.5, 0.5]
    assert [float(r[6]) for r in rows] == [0.0, 0.5, 1.0]


# ----------------------------------------------------------- aggregation


def _rec(scheme, n, seed, value, status="ok"):
    return RunRecord(scheme, n, seed, "h", status=status, final_metric=value)


def test_identical_values_zero_spread():
    rows = harness.aggregate_seeds([_rec("DCT", 8, s, 97.5) for s in range(10)])
    assert len(rows) == 1 and rows[0].mu == 97.5 and rows[0].sigma == 0.0 and rows[0].seeds == 10


def test_two_point_spread():
    rows = harness.aggregate_seeds([_rec("DQN", 4, 0, 0.0), _rec("DQN", 4, 1, 100.0)])
    assert rows[0].mu == 50.0
    assert rows[0].sigma == pytest.approx(70.71, abs=1e-2)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 100, allow_nan=False), min_size=1, max_size=12))
def test_aggregate_matches_oracle(values):
    rows = harness.aggregate_seeds([_rec("JSAE", 6, i, v) for i, v in enumerate(values)])
    mu, sigma = mean_and_sample_std(values)
    assert rows[0].mu == pytest.approx(mu, abs=1e-9)
    assert rows[0].sigma == pytest.approx(sigma, abs=1e-9)


def test_failed_runs_excluded_and_empty_cells_dropped():
    recs = [_rec("DCT", 4, 0, 90.0), _rec("DCT", 4, 1, math.nan, "failed"), _rec("PGRA", 4, 0, math.nan, "failed")]
    rows = harness.aggregate_seeds(recs)
    assert [(r.scheme, r.seeds) for r in rows] == [("DCT", 1)]


def test_summary_and_table_files(tmp_path):
    recs = [_rec("DCT", 4, 0, 98.0), _rec("DCT", 4, 1, 96.0), _rec("DQN", 4, 0, 90.0), _rec("DCT", 8, 0, 97.0)]
    rows = harness.aggregate_seeds(recs)
    harness.write_summary(rows, tmp_path / "s.csv")
    harness.write_table(rows, tmp_path / "t.csv")
    text = (tmp_path / "s.csv").read_text()
    assert text.startswith("# final_metric = mean total reward over the last 100 episodes")
    table = _read(tmp_path / "t.csv")
    assert table[0] == ["scheme", "mu_16", "sigma_16", "mu_256", "sigma_256"]
    assert table[1][0] == "DQN" and table[1][3:] == ["", ""]


def test_runs_csv_roundtrip(tmp_path):
    recs = [_rec("DCT", 8, 3, 97.25), _rec("DQN", 10, 4, math.nan, "failed")]
    recs[1].error = "TrainingDiverged: boom"
    harness.write_runs_csv(recs, tmp_path / "runs.csv")
    back = harness.read_runs_csv(tmp_path / "runs.csv")
    assert [(r.scheme, r.n_actions, r.seed, r.status) for r in back] == [("DCT", 256, 3, "ok"), ("DQN", 1024, 4, "failed")]
    assert back[0].final_metric == 97.25 and back[1].error == "TrainingDiverged: boom"


# ---------------------------------------------------------------- sweeps


def test_select_eta_constrained_argmax():
    rows = [
        SweepRow(0.0, 0.002, 0.5, 0.95, 1),
        SweepRow(0.01, 0.02, 0.6, 0.90, 1),
        SweepRow(0.1, 0.05, 0.7, 0.86, 1),  # 0.86 > 0.855 still admissible
        SweepRow(0.5, 0.30, 0.9, 0.40, 1),  # structure lost
    ]
    assert harness.select_eta(rows) == 0.1


def test_select_eta_skips_failures():
    rows = [SweepRow(0.0, 0.01, 0.5, 0.9, 1), SweepRow(0.1, math.nan, math.nan, math.nan, 0, "boom")]
    assert harness.select_eta(rows) == 0.0


def _tiny(tmp_path, scheme="DCT", **kw):
    return ExperimentConfig(
        maze=MazeConfig(n_actuators=2, timeout=25),
        scheme=scheme,
        embed=EmbedTrainConfig(eta=0.1, epochs=2, decoder_refit=200),
        dataset_size=300,
        rl=RLConfig(warmup=20, batch_size=8),
        episodes=3,
        seeds=(0, 1),
        output_dir=str(tmp_path / "out"),
        **kw,
    )


def test_eta_sweep_small(tmp_path):
    base = _tiny(tmp_path)
    rows, eta_star = harness.eta_sweep(base, grid=(0.0, 0.5), seeds=(0,))
    assert [r.eta for r in rows] == [0.0, 0.5] and eta_star in (0.0, 0.5)
    harness.write_sweep(rows, tmp_path / "sweep.csv", eta_star)
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("# eta_star = ") and lines[1] == "eta,min_dist,mean_dist,structure_corr"


def test_empty_eta_grid():
    with pytest.raises(ConfigError):
        harness.eta_sweep(ExperimentConfig(), grid=())


# ------------------------------------------------------------------- runs


def test_run_writes_artifacts(tmp_path):
    cfg = _tiny(tmp_path)
    records = harness.run_experiment(cfg)
    assert [r.status for r in records] == ["ok", "ok"]
    seed_dir = tmp_path / "out" / "DCT" / "n2" / "seed_0"
    for name in ("transitions.txt", "curve.csv", "embeddings.csv", "model", "agent"):
        assert (seed_dir / name).exists(), name
    cell = tmp_path / "out" / "DCT" / "n2"
    assert harness.parse_config((cell / "config.ini").read_text()) == cfg
    back = harness.read_runs_csv(cell / "runs.csv")
    assert [r.final_metric for r in back] == [r.final_metric for r in records]


def test_one_failing_seed_does_not_sink_others(tmp_path, monkeypatch):
    real = harness.ddpg_train

    def flaky(env_cfg, model, decoder, episodes, config, seed):
        if seed == harness.phase_seed(1, "rl"):
            raise RuntimeError("injected")
        return real(env_cfg, model, decoder, episodes, config, seed)

    monkeypatch.setattr(harness, "ddpg_train", flaky)
    records = harness.run_experiment(_tiny(tmp_path))
    assert [r.status for r in records] == ["ok", "failed"]
    assert "injected" in records[1].error
    assert harness.aggregate_seeds(records)[0].seeds == 1


def test_repeated_runs_are_byte_identical(tmp_path):
    a = replace(_tiny(tmp_path, scheme="DQN"), output_dir=str(tmp_path / "a"))
    b = replace(a, output_dir=str(tmp_path / "b"))
    harness.run_experiment(a)
    harness.run_experiment(b)
    for rel in ("DQN/n2/runs.csv", "DQN/n2/seed_0/curve.csv", "DQN/n2/seed_1/curve.csv"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_parallel_matches_sequential(tmp_path):
    seq = replace(_tiny(tmp_path, scheme="DQN"), output_dir=str(tmp_path / "seq"))
    par = replace(seq, output_dir=str(tmp_path / "par"), jobs=2)
    harness.run_experiment(seq)
    harness.run_experiment(par)
    assert (tmp_path / "seq/DQN/n2/runs.csv").read_bytes() == (tmp_path / "par/DQN/n2/runs.csv").read_bytes()
