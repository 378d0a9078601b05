"""Action-embedding training: dual-channel (DCT), PG-RA style and JSAE style.

DCT trains a one-hot action encoder jointly with two heads: ``f`` decodes the
2-D embedding back to a softmax over actions, ``g`` predicts the next state
from the current state and the embedding.  The loss is

    mse(g(s, E), s') - eta / N * log P(a | f, E)

averaged over the batch.  JSAE keeps only the ``g`` channel.  PG-RA learns
a bottleneck classifier from ``(s, s')`` to the action taken.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist
from scipy.stats import spearmanr

from . import nn
from .errors import ConfigError, ShapeError, TrainingDiverged
from .maze import MazeConfig, MazeEnv, displacement_table

log = logging.getLogger(__name__)

SCHEMES = ("DCT", "PGRA", "JSAE")
EMBED_DIM = 2
MIN_HIDDEN = 32
STATE_DIM = 4
DATASET_VERSION = 1
TRANSITION_HIDDEN = (30, 20, 10)
PGRA_HIDDEN = (32, 16)


# ------------------------------------------------------------------ data


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: int
    s_next: np.ndarray
    r: float


@dataclass
class Transitions:
    """Column-wise transition dataset."""

    n_actuators: int
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float).reshape(-1, STATE_DIM)
        self.next_states = np.asarray(self.next_states, dtype=float).reshape(-1, STATE_DIM)
        self.actions = np.asarray(self.actions, dtype=np.intp).reshape(-1)
        self.rewards = np.asarray(self.rewards, dtype=float).reshape(-1)
        m = len(self.actions)
        if not (len(self.states) == len(self.next_states) == len(self.rewards) == m):
            raise ShapeError("transition columns have different lengths")
        if m and (self.actions.min() < 0 or self.actions.max() >= self.n_actions):
            raise ShapeError("action index outside [0, N)")

    @property
    def n_actions(self) -> int:
        return 2**self.n_actuators

    def __len__(self):
        return len(self.actions)

    def __getitem__(self, i) -> Transition:
        return Transition(self.states[i], int(self.actions[i]), self.next_states[i], float(self.rewards[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "Transitions":
        return Transitions(
            self.n_actuators, self.states[idx], self.actions[idx], self.next_states[idx],
            self.rewards[idx], self.seed,
        )


def collect_transitions(cfg: MazeConfig, count: int, seed=None) -> Transitions:
    """Roll out a uniform-random policy until ``count`` transitions exist.

    The recorded action is the one the policy chose, not the one executed
    after environment noise.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    env_seq, pol_seq = np.random.SeedSequence(seed).spawn(2)
    env = MazeEnv(cfg, env_seq)
    policy_rng = np.random.default_rng(pol_seq)
    S = np.empty((count, STATE_DIM))
    S2 = np.empty((count, STATE_DIM))
    A = policy_rng.integers(cfg.n_actions, size=count)
    R = np.empty(count)
    obs = env.reset()
    for i in range(count):
        out = env.step(int(A[i]))
        nxt = out.state.observation()
        S[i], S2[i], R[i] = obs, nxt, out.reward
        obs = env.reset() if out.done else nxt
    return Transitions(cfg.n_actuators, S, A, S2, R, seed)


def save_transitions(data: Transitions, path) -> None:
    header = f"# transitions version={DATASET_VERSION} n={data.n_actuators} count={len(data)} seed={data.seed}"
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for s, a, s2, r in zip(data.states, data.actions, data.next_states, data.rewards):
            fields = [repr(float(v)) for v in s] + [str(int(a))] + [repr(float(v)) for v in s2] + [repr(float(r))]
            fh.write(" ".join(fields) + "\n")


def load_transitions(path) -> Transitions:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) < 2 or header[1] != "transitions":
            raise ValueError(f"{path}: not a transition dataset")
        meta = dict(tok.split("=", 1) for tok in header[2:])
        if int(meta.get("version", -1)) != DATASET_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {meta.get('version')}")
        rows = np.loadtxt(fh, ndmin=2)
    count = int(meta["count"])
    if rows.shape != (count, 10):
        raise ValueError(f"{path}: expected {count} records of 10 fields, got {rows.shape}")
    seed = None if meta.get("seed", "None") == "None" else int(meta["seed"])
    return Transitions(
        int(meta["n"]), rows[:, 0:4], rows[:, 4].astype(np.intp), rows[:, 5:9], rows[:, 9], seed
    )


# ----------------------------------------------------------------- models


def encoder_widths(n_actions: int) -> list[int]:
    """[N, N/2, N/4, N/8, 2]; hidden widths never drop below MIN_HIDDEN."""
    return [n_actions] + [max(n_actions // k, MIN_HIDDEN) for k in (2, 4, 8)] + [EMBED_DIM]


@dataclass
class EmbeddingModel:
    scheme: str
    n_actuators: int
    eta: float
    encoder: nn.DenseNet
    transition: nn.DenseNet | None = None
    decoder: nn.DenseNet | None = None
    decoder_trained: bool = False
    # PG-RA only: per-action embedding read off the bottleneck
    action_embeddings: np.ndarray | None = None
    history: list = field(default_factory=list)
    refit_steps: int = 0

    @property
    def n_actions(self) -> int:
        return 2**self.n_actuators

    @property
    def has_decoder(self) -> bool:
        return self.decoder is not None and self.decoder_trained

    def embed(self, actions) -> np.ndarray:
        """Embeddings for action indices, shape ``(len(actions), 2)``."""
        actions = np.asarray(actions, dtype=np.intp).reshape(-1)
        if self.scheme == "PGRA":
            if self.action_embeddings is None:
                raise ValueError("PG-RA model has no action embeddings yet")
            return self.action_embeddings[actions]
        return self.encoder.forward_onehot(actions)


def build_model(scheme: str, n_actuators: int, eta: float = 0.0, seed=None) -> EmbeddingModel:
    """Fresh model; encoder and ``g`` are drawn first so DCT and JSAE share them."""
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown embedding scheme {scheme!r}")
    if eta < 0:
        raise ConfigError("eta must be >= 0")
    rng = np.random.default_rng(seed)
    N = 2**n_actuators
    widths = encoder_widths(N)
    if scheme == "PGRA":
        enc_sizes = [2 * STATE_DIM, *PGRA_HIDDEN, EMBED_DIM]
        encoder = nn.DenseNet(enc_sizes, ["tanh"] * (len(enc_sizes) - 1), rng)
        transition = None
    else:
        encoder = nn.DenseNet(widths, ["tanh"] * 4, rng)
        g_sizes = [STATE_DIM + EMBED_DIM, *TRANSITION_HIDDEN, STATE_DIM]
        transition = nn.DenseNet(g_sizes, ["tanh"] * 3 + ["linear"], rng)
    decoder = None
    if scheme != "JSAE":
        decoder = nn.DenseNet(widths[::-1], ["tanh"] * 3 + ["softmax"], rng)
    return EmbeddingModel(scheme, n_actuators, float(eta), encoder, transition, decoder)


# ------------------------------------------------------------------- loss


@dataclass
class LossBreakdown:
    total: float
    prediction: float
    cross_entropy: float
    reconstruction: float  # eta / N * cross_entropy


def _dual_channel(model: EmbeddingModel, S, A, S2, need_grads: bool, train_decoder: bool = True):
    N = model.n_actions
    E, enc_cache = model.encoder.forward_cached(A, onehot=True)
    g_in = np.concatenate([S, E], axis=1)
    delta, g_cache = model.transition.forward_cached(g_in)
    pred = S + delta
    mse, d_pred = nn.mse_loss(pred, S2)

    ce = 0.0
    f_cache = None
    if model.decoder is not None:
        probs, f_cache = model.decoder.forward_cached(E)
        ce, d_logits = nn.cross_entropy_from_probs(probs, A)
    w = model.eta / N
    total = mse + w * ce
    breakdown = LossBreakdown(total, mse, ce, w * ce)
    if not math.isfinite(total):
        raise TrainingDiverged("non-finite dual-channel loss")
    if not need_grads:
        return breakdown, None

    grads = {}
    grads["transition"], d_gin = model.transition.backward(g_cache, d_pred)
    d_E = d_gin[:, STATE_DIM:]
    if f_cache is not None and train_decoder:
        # f sees only the reconstruction channel, so its minimiser does not
        # depend on w; its step uses the unweighted gradient because w * grad
        # sinks below Adam's eps for large N.  The encoder gets the exact mix.
        grads["decoder"], d_E_f = model.decoder.backward(f_cache, d_logits, preactivation=True)
        if w > 0:
            d_E = d_E + w * d_E_f
    grads["encoder"], _ = model.encoder.backward(enc_cache, d_E)
    return breakdown, grads


def dct_loss(model: EmbeddingModel, batch) -> LossBreakdown:
    """Dual-channel loss of ``model`` on a batch (Transitions or list of Transition)."""
    if model.scheme not in ("DCT", "JSAE"):
        raise ValueError(f"dual-channel loss is undefined for scheme {model.scheme}")
    S, A, S2 = _batch_arrays(batch)
    return _dual_channel(model, S, A, S2, need_grads=False)[0]


def jsae_loss(model: EmbeddingModel, batch) -> float:
    """Next-state prediction loss only."""
    S, A, S2 = _batch_arrays(batch)
    E = model.encoder.forward_onehot(A)
    pred = S + model.transition.forward(np.concatenate([S, E], axis=1))
    return nn.mse_loss(pred, S2)[0]


def _batch_arrays(batch):
    if isinstance(batch, Transitions):
        return batch.states, batch.actions, batch.next_states
    batch = list(batch)
    return (
        np.array([t.s for t in batch], dtype=float),
        np.array([t.a for t in batch], dtype=np.intp),
        np.array([t.s_next for t in batch], dtype=float),
    )


def _pgra_loss(model: EmbeddingModel, S, A, S2, need_grads: bool):
    x = np.concatenate([S, S2], axis=1)
    E, enc_cache = model.encoder.forward_cached(x)
    probs, f_cache = model.decoder.forward_cached(E)
    ce, d_logits = nn.cross_entropy_from_probs(probs, A)
    if not math.isfinite(ce):
        raise TrainingDiverged("non-finite PG-RA loss")
    breakdown = LossBreakdown(ce, 0.0, ce, ce)
    if not need_grads:
        return breakdown, None
    g_dec, d_E = model.decoder.backward(f_cache, d_logits, preactivation=True)
    g_enc, _ = model.encoder.backward(enc_cache, d_E)
    return breakdown, {"encoder": g_enc, "decoder": g_dec}


# --------------------------------------------------------------- training


@dataclass
class EmbedTrainConfig:
    eta: float = 0.01
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    decoder_lr: float | None = None  # None -> lr
    holdout: float = 0.1
    # after the joint epochs, keep fitting f alone on the frozen table until every action round-trips
    decoder_refit: int = 5000  # Adam steps per refit attempt
    refit_restarts: int = 3
    refit_batch: int = 256
    refit_lr: float = 3e-3
    refit_max_actions: int = 1024  # larger tables skip the refit (each check decodes the whole table)


def train_embeddings(scheme: str, dataset: Transitions, config: EmbedTrainConfig | None = None, seed=None) -> EmbeddingModel:
    """Train an embedding model with Adam over shuffled minibatches.

    10% of the data (``config.holdout``) is held out; per-epoch train and
    holdout losses land in ``model.history``.
    """
    config = config or EmbedTrainConfig()
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if config.batch_size < 1 or config.epochs < 0:
        raise ConfigError("batch_size must be >= 1 and epochs >= 0")
    init_seq, split_seq, shuffle_seq = np.random.SeedSequence(seed).spawn(3)
    eta = config.eta if scheme == "DCT" else 0.0
    model = build_model(scheme, dataset.n_actuators, eta, init_seq)

    split_rng = np.random.default_rng(split_seq)
    order = split_rng.permutation(len(dataset))
    n_hold = int(round(config.holdout * len(dataset))) if len(dataset) > 1 else 0
    hold_idx, train_idx = np.sort(order[:n_hold]), np.sort(order[n_hold:])
    train, hold = dataset.subset(train_idx), dataset.subset(hold_idx)

    nets = {"encoder": model.encoder}
    if model.transition is not None:
        nets["transition"] = model.transition
    if model.decoder is not None:
        nets["decoder"] = model.decoder
    optims = {k: nn.Optimizer(net, lr=config.lr) for k, net in nets.items()}
    if "decoder" in optims and config.decoder_lr is not None:
        optims["decoder"] = nn.Optimizer(model.decoder, lr=config.decoder_lr)
    train_decoder = scheme == "PGRA" or eta > 0

    shuffle_rng = np.random.default_rng(shuffle_seq)
    m = len(train)
    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(m)
        sums = np.zeros(3)
        for start in range(0, m, config.batch_size):
            idx = perm[start : start + config.batch_size]
            S, A, S2 = train.states[idx], train.actions[idx], train.next_states[idx]
            try:
                if scheme == "PGRA":
                    br, grads = _pgra_loss(model, S, A, S2, True)
                else:
                    br, grads = _dual_channel(model, S, A, S2, True, train_decoder)
            except TrainingDiverged as exc:
                exc.epoch = epoch
                raise TrainingDiverged(f"embedding training diverged at epoch {epoch}: {exc}", exc.layer, epoch) from exc
            for k, g in grads.items():
                optims[k].step(g)
            sums += np.array([br.total, br.prediction, br.cross_entropy]) * len(idx)
        entry = {"epoch": epoch, "total": sums[0] / m, "prediction": sums[1] / m, "cross_entropy": sums[2] / m}
        if len(hold):
            hb = evaluate(model, hold)
            entry.update(holdout_prediction=hb.prediction, holdout_cross_entropy=hb.cross_entropy)
        model.history.append(entry)
        log.debug("%s epoch %d: %s", scheme, epoch, entry)

    model.decoder_trained = train_decoder and model.decoder is not None
    if model.decoder_trained and scheme == "DCT" and config.decoder_refit > 0 and model.n_actions <= config.refit_max_actions:
        _refit_decoder(model, config, shuffle_rng)
    if scheme == "PGRA":
        model.action_embeddings = _pgra_action_embeddings(model, dataset)
    return model


def round_trip_accuracy(model: EmbeddingModel) -> float:
    """Fraction of actions ``a`` with ``argmax f(E(a)) == a``."""
    if not model.has_decoder:
        raise ValueError(f"{model.scheme} model has no trained decoder")
    N = model.n_actions
    hits = 0
    for start in range(0, N, 1024):
        idx = np.arange(start, min(start + 1024, N))
        hits += int(np.sum(model.decoder.forward(model.embed(idx)).argmax(axis=1) == idx))
    return hits / N


def _refit_decoder(model: EmbeddingModel, config: EmbedTrainConfig, rng) -> None:
    # the reconstruction channel's f-minimiser over a uniform action marginal, with E held fixed.
    # A jointly trained f can get stuck with saturated hidden units merging two classes, so
    # after continuing it we try fresh initialisations and keep the best decoder.
    N = model.n_actions
    table = model.embed(np.arange(N))
    spec = nn.LossSpec("cross_entropy")
    batch = min(N, config.refit_batch)
    best, best_acc, total = model.decoder, round_trip_accuracy(model), 0
    candidates = [model.decoder.copy()]
    for attempt in range(config.refit_restarts + 1):
        if best_acc == 1.0:
            break
        net = candidates[0] if attempt == 0 else nn.DenseNet(best.sizes, best.activations, rng)
        opt = nn.Optimizer(net, lr=config.refit_lr)
        for step in range(config.decoder_refit):
            if step % 25 == 0 and np.all(net.forward(table).argmax(axis=1) == np.arange(N)):
                break
            idx = np.arange(N) if batch == N else rng.choice(N, size=batch, replace=False)
            _, g = nn.backward(net, table[idx], idx, spec)
            opt.step(g)
            total += 1
        acc = float(np.mean(net.forward(table).argmax(axis=1) == np.arange(N)))
        if acc > best_acc:
            best, best_acc = net, acc
    model.decoder = best
    model.refit_steps = total


def evaluate(model: EmbeddingModel, data: Transitions) -> LossBreakdown:
    if model.scheme == "PGRA":
        return _pgra_loss(model, data.states, data.actions, data.next_states, False)[0]
    return _dual_channel(model, data.states, data.actions, data.next_states, False)[0]


def _pgra_action_embeddings(model: EmbeddingModel, data: Transitions) -> np.ndarray:
    """Mean bottleneck output per action label.

    Actions absent from the data fall back to the point of a 65x65 grid over
    [-1, 1]^2 where f assigns them the highest probability.
    """
    N = model.n_actions
    E = model.encoder.forward(np.concatenate([data.states, data.next_states], axis=1))
    sums = np.zeros((N, EMBED_DIM))
    np.add.at(sums, data.actions, E)
    counts = np.bincount(data.actions, minlength=N)
    table = np.zeros((N, EMBED_DIM))
    seen = counts > 0
    table[seen] = sums[seen] / counts[seen, None]
    if not seen.all():
        g = np.linspace(-1, 1, 65)
        grid = np.stack(np.meshgrid(g, g), axis=-1).reshape(-1, 2)
        probs = model.decoder.forward(grid)
        for a in np.flatnonzero(~seen):
            table[a] = grid[np.argmax(probs[:, a])]
    return table


# -------------------------------------------------------------- decoding


@dataclass
class EmbeddingTable:
    embeddings: np.ndarray  # (N, 2)
    displacements: np.ndarray  # (N, 2)

    def __len__(self):
        return len(self.embeddings)


def embedding_table(model: EmbeddingModel, cfg: MazeConfig | None = None) -> EmbeddingTable:
    cfg = cfg or MazeConfig(n_actuators=model.n_actuators)
    if cfg.n_actuators != model.n_actuators:
        raise ConfigError("maze and model disagree on the number of actuators")
    emb = model.embed(np.arange(model.n_actions))
    return EmbeddingTable(emb, displacement_table(cfg.n_actuators, cfg.magnitude))


def decode_learned(model: EmbeddingModel, e):
    """``(argmax action, softmax scores)`` of the learned decoder at ``e``.

    Accepts one 2-vector or a batch; ``np.argmax`` breaks ties by lowest index.
    """
    if not model.has_decoder:
        raise ValueError(f"{model.scheme} model has no trained decoder f")
    e = np.asarray(e, dtype=float)
    scores = model.decoder.forward(e)
    return np.argmax(scores, axis=-1), scores


def decode_euclidean(table, e):
    """Index of the nearest table row (squared Euclidean), lowest index on ties."""
    rows = table.embeddings if isinstance(table, EmbeddingTable) else np.asarray(table, dtype=float)
    if len(rows) == 0:
        raise ValueError("empty embedding table")
    e = np.asarray(e, dtype=float)
    if e.ndim == 1:
        diff = rows - e
        return int(np.argmin((diff * diff).sum(axis=1)))
    d2 = (e * e).sum(1)[:, None] - 2.0 * e @ rows.T + (rows * rows).sum(1)[None, :]
    # expanded form can reorder near-ties; recheck the candidates exactly
    out = np.empty(len(e), dtype=np.intp)
    for i, q in enumerate(e):
        cand = np.flatnonzero(d2[i] <= d2[i].min() + 1e-9)
        diff = rows[cand] - q
        out[i] = cand[np.argmin((diff * diff).sum(axis=1))]
    return out


class Decoder:
    """Callable embedding -> action index, learned or nearest-neighbour."""

    def __init__(self, model: EmbeddingModel, kind: str = "learned", cfg: MazeConfig | None = None):
        if kind not in ("learned", "euclidean"):
            raise ConfigError(f"unknown decoder {kind!r}")
        if kind == "learned" and not model.has_decoder:
            raise ConfigError(f"{model.scheme} embeddings have no learned decoder; use euclidean")
        self.kind = kind
        self.model = model
        self.rows = model.embed(np.arange(model.n_actions)) if kind == "euclidean" else None
        self._layers = model.decoder.layers if kind == "learned" else None

    def __call__(self, e) -> int:
        e = np.asarray(e, dtype=float)
        if self.kind == "euclidean":
            diff = self.rows - e
            return int(np.argmax(-(diff * diff).sum(axis=1)))
        x = e
        for layer in self._layers[:-1]:
            x = np.tanh(layer.W @ x + layer.b)
        last = self._layers[-1]
        # argmax of the logits equals argmax of the softmax
        return int(np.argmax(last.W @ x + last.b))


# --------------------------------------------------------------- metrics


@dataclass
class EmbeddingMetrics:
    min_dist: float
    mean_dist: float
    structure_corr: float  # nan when undefined


def embedding_metrics(table: EmbeddingTable) -> EmbeddingMetrics:
    """Pairwise-distance spread and Spearman structure correlation."""
    if len(table) < 2:
        raise ValueError("need at least two embeddings")
    de = pdist(table.embeddings)
    # displacement distances tie exactly in geometry; rounding keeps float noise from breaking ties
    dd = np.round(pdist(table.displacements), 12)
    if np.ptp(de) == 0 or np.ptp(dd) == 0:
        corr = math.nan
    else:
        corr = float(spearmanr(np.round(de, 12), dd)[0])
    return EmbeddingMetrics(float(de.min()), float(de.mean()), corr)


# ------------------------------------------------------------ persistence


def save_model(model: EmbeddingModel, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = [
        "version = 1",
        f"scheme = {model.scheme}",
        f"n_actuators = {model.n_actuators}",
        f"eta = {model.eta!r}",
        f"decoder_trained = {int(model.decoder_trained)}",
    ]
    (d / "model.txt").write_text("\n".join(meta) + "\n")
    nn.save_net(model.encoder, d / "encoder.txt")
    if model.transition is not None:
        nn.save_net(model.transition, d / "transition.txt")
    if model.decoder is not None:
        nn.save_net(model.decoder, d / "decoder.txt")
    if model.action_embeddings is not None:
        np.savetxt(d / "action_embeddings.txt", model.action_embeddings, fmt="%.17g")


def load_model(directory) -> EmbeddingModel:
    d = Path(directory)
    meta = {}
    for line in (d / "model.txt").read_text().splitlines():
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            meta[k] = v
    model = EmbeddingModel(
        meta["scheme"], int(meta["n_actuators"]), float(meta["eta"]), nn.load_net(d / "encoder.txt"),
        nn.load_net(d / "transition.txt") if (d / "transition.txt").exists() else None,
        nn.load_net(d / "decoder.txt") if (d / "decoder.txt").exists() else None,
        bool(int(meta["decoder_trained"])),
    )
    if (d / "action_embeddings.txt").exists():
        model.action_embeddings = np.loadtxt(d / "action_embeddings.txt", ndmin=2)
    return model
