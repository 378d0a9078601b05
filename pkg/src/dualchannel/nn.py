"""Small dense feed-forward networks with hand-written reverse mode and Adam.

Every network stores its parameters in one contiguous float64 vector; the
per-layer weight matrices and biases are views into it.  That keeps Adam,
soft target updates and serialization to single vector operations.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError, TrainingDiverged

ACTIVATIONS = ("tanh", "linear", "softmax")
LOSS_KINDS = ("mse", "cross_entropy", "composite")
FORMAT_HEADER = "dualchannel-densenet"
FORMAT_VERSION = 1


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class Layer:
    """One affine map followed by an activation; ``W`` is [out x in]."""

    __slots__ = ("W", "b", "activation")

    def __init__(self, W: np.ndarray, b: np.ndarray, activation: str):
        self.W = W
        self.b = b
        self.activation = activation

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]


class DenseNet:
    """A chain of dense layers.

    Args:
        sizes: layer widths including the input, e.g. ``[4, 30, 20, 10, 2]``.
        activations: one activation per layer (``len(sizes) - 1`` entries).
            ``softmax`` is only allowed on the last layer.
        rng: generator used for the uniform +-sqrt(1/fan_in) initialisation.
            Pass ``None`` to get all-zero parameters.
    """

    def __init__(self, sizes, activations, rng: np.random.Generator | None = None):
        sizes = [int(s) for s in sizes]
        activations = list(activations)
        if len(sizes) < 2:
            raise ShapeError("a network needs at least an input and an output size")
        if len(activations) != len(sizes) - 1:
            raise ShapeError(
                f"{len(sizes) - 1} layers but {len(activations)} activations given"
            )
        for k, act in enumerate(activations):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if act == "softmax" and k != len(activations) - 1:
                raise ValueError("softmax is only supported on the output layer")
        if min(sizes) < 1:
            raise ShapeError(f"layer widths must be positive, got {sizes}")

        self.sizes = sizes
        self.activations = activations
        n_params = sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:]))
        self.params = np.zeros(n_params)
        self.layers: list[Layer] = []
        self._bind_views()
        if rng is not None:
            for layer in self.layers:
                bound = np.sqrt(1.0 / layer.n_in)
                layer.W[...] = rng.uniform(-bound, bound, size=layer.W.shape)
                layer.b[...] = rng.uniform(-bound, bound, size=layer.b.shape)

    def _bind_views(self):
        self.layers = []
        offset = 0
        for n_in, n_out, act in zip(self.sizes[:-1], self.sizes[1:], self.activations):
            W = self.params[offset : offset + n_out * n_in].reshape(n_out, n_in)
            offset += n_out * n_in
            b = self.params[offset : offset + n_out]
            offset += n_out
            self.layers.append(Layer(W, b, act))

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def copy(self) -> "DenseNet":
        other = DenseNet.__new__(DenseNet)
        other.sizes = list(self.sizes)
        other.activations = list(self.activations)
        other.params = self.params.copy()
        other._bind_views()
        return other

    def load_params(self, params: np.ndarray):
        params = np.asarray(params, dtype=float)
        if params.shape != self.params.shape:
            raise ShapeError(f"expected {self.params.shape} parameters, got {params.shape}")
        self.params[...] = params

    def _check_input(self, x: np.ndarray):
        if x.shape[-1] != self.n_in:
            raise ShapeError(
                f"input has dimension {x.shape[-1]} but the first layer expects {self.n_in}"
            )

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x) -> np.ndarray:
        """Output for a single vector ``(in,)`` or a batch ``(B, in)``."""
        x = np.asarray(x, dtype=float)
        self._check_input(x)
        for layer in self.layers:
            x = _activate(x @ layer.W.T + layer.b, layer.activation)
        return x

    def forward_onehot(self, indices) -> np.ndarray:
        """Forward pass for one-hot inputs given as integer indices.

        Equivalent to ``forward(eye(n_in)[indices])`` without building the
        one-hot matrix: the first affine map reduces to a column gather.
        """
        out, _ = self.forward_cached(indices, onehot=True)
        return out

    def forward_cached(self, x, onehot: bool = False):
        """Batch forward pass that keeps what :meth:`backward` needs.

        With ``onehot=True``, ``x`` is a 1-D array of integer indices.
        Returns ``(output, cache)``.
        """
        if onehot:
            idx = np.asarray(x, dtype=np.intp)
            if idx.ndim != 1:
                raise ShapeError("one-hot input must be a 1-D index array")
            if idx.size and (idx.min() < 0 or idx.max() >= self.n_in):
                raise ShapeError(f"one-hot index out of range for input width {self.n_in}")
            first = self.layers[0]
            z = first.W.T[idx] + first.b
            inputs = [idx]
        else:
            x = np.asarray(x, dtype=float)
            if x.ndim != 2:
                raise ShapeError(f"batch input must be 2-D, got shape {x.shape}")
            self._check_input(x)
            z = x @ self.layers[0].W.T + self.layers[0].b
            inputs = [x]
        outputs = []
        a = _activate(z, self.layers[0].activation)
        outputs.append(a)
        for layer in self.layers[1:]:
            inputs.append(a)
            a = _activate(a @ layer.W.T + layer.b, layer.activation)
            outputs.append(a)
        return a, (inputs, outputs, onehot)

    def backward(self, cache, grad_out: np.ndarray, preactivation: bool = False):
        """Reverse-mode pass.

        Args:
            cache: second return value of :meth:`forward_cached`.
            grad_out: d(loss)/d(output), shape ``(B, out)``.
            preactivation: if True, ``grad_out`` is already taken with respect
                to the last layer's pre-activation (used for fused
                softmax + cross-entropy).

        Returns:
            ``(grad_params, grad_input)``; ``grad_input`` is ``None`` for
            one-hot inputs.
        """
        inputs, outputs, onehot = cache
        grads = np.zeros_like(self.params)
        gviews = _views(grads, self.sizes)
        g = np.asarray(grad_out, dtype=float)
        grad_input = None
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            if not (k == len(self.layers) - 1 and preactivation):
                g = _activation_backward(g, outputs[k], layer.activation)
            gW, gb = gviews[k]
            gb[...] = g.sum(axis=0)
            if k == 0 and onehot:
                np.add.at(gW.T, inputs[0], g)
            else:
                gW[...] = g.T @ inputs[k]
            if not (np.all(np.isfinite(gW)) and np.all(np.isfinite(gb))):
                raise TrainingDiverged(f"non-finite gradient in layer {k}", layer=k)
            if k > 0 or not onehot:
                g = g @ layer.W
        if not onehot:
            grad_input = g
        return grads, grad_input


def _views(flat: np.ndarray, sizes):
    out = []
    offset = 0
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        W = flat[offset : offset + n_out * n_in].reshape(n_out, n_in)
        offset += n_out * n_in
        b = flat[offset : offset + n_out]
        offset += n_out
        out.append((W, b))
    return out


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return np.tanh(z)
    if activation == "softmax":
        return softmax(z)
    return z


def _activation_backward(g: np.ndarray, y: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return g * (1.0 - y * y)
    if activation == "softmax":
        return y * (g - (g * y).sum(axis=-1, keepdims=True))
    return g


def forward(net: DenseNet, x) -> np.ndarray:
    return net.forward(x)


# --------------------------------------------------------------------- losses


@dataclass(frozen=True)
class LossSpec:
    """Which loss :func:`backward` minimises.

    ``composite`` expects the network output to be ``[prediction | logits]``
    with the last ``n_actions`` columns read as logits, and targets given as
    ``(state_targets, action_indices)``.  The loss is
    ``mse(prediction) + eta / n_actions * cross_entropy(logits)``.
    """

    kind: str = "mse"
    eta: float = 0.0
    n_actions: int = 1

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.n_actions < 1:
            raise ValueError("n_actions must be >= 1")


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error over all elements and its gradient."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} vs target shape {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def cross_entropy_from_logits(logits: np.ndarray, labels: np.ndarray):
    """Batch-mean ``-log softmax(logits)[label]`` and its gradient w.r.t. logits."""
    labels = np.asarray(labels, dtype=np.intp)
    B = logits.shape[0]
    logp = log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(B), labels]))
    grad = np.exp(logp)
    grad[np.arange(B), labels] -= 1.0
    return loss, grad / B


def cross_entropy_from_probs(probs: np.ndarray, labels: np.ndarray):
    """Cross-entropy for a softmax output layer.

    The gradient is taken with respect to the softmax pre-activation
    (``probs - onehot``), which avoids dividing by tiny probabilities.
    """
    labels = np.asarray(labels, dtype=np.intp)
    B = probs.shape[0]
    picked = probs[np.arange(B), labels]
    loss = -float(np.mean(np.log(np.maximum(picked, np.finfo(float).tiny))))
    grad = probs.copy()
    grad[np.arange(B), labels] -= 1.0
    return loss, grad / B


def backward(net: DenseNet, inputs, targets, loss: LossSpec):
    """Batch-mean loss and exact parameter gradients for ``net``.

    Returns ``(loss_value, grad_params)`` where ``grad_params`` is flat and
    aligned with ``net.params``.
    """
    out, cache = net.forward_cached(np.atleast_2d(np.asarray(inputs, dtype=float)))
    last = net.activations[-1]
    preact = False
    if loss.kind == "mse":
        if last == "softmax":
            raise ValueError("mse loss on a softmax output layer is not supported")
        value, g = mse_loss(out, np.asarray(targets, dtype=float).reshape(out.shape))
    elif loss.kind == "cross_entropy":
        if last == "softmax":
            value, g = cross_entropy_from_probs(out, targets)
            preact = True
        elif last == "linear":
            value, g = cross_entropy_from_logits(out, targets)
        else:
            raise ValueError("cross_entropy needs a softmax or linear output layer")
    else:
        if last != "linear":
            raise ValueError("composite loss needs a linear output layer")
        state_targets, labels = targets
        state_targets = np.asarray(state_targets, dtype=float)
        k = out.shape[1] - loss.n_actions
        if k < 1 or state_targets.shape != (out.shape[0], k):
            raise ShapeError(
                f"output width {out.shape[1]} cannot hold {state_targets.shape[-1]} "
                f"prediction columns plus {loss.n_actions} logits"
            )
        mse_v, g_pred = mse_loss(out[:, :k], state_targets)
        ce_v, g_logit = cross_entropy_from_logits(out[:, k:], labels)
        w = loss.eta / loss.n_actions
        value = mse_v + w * ce_v
        g = np.concatenate([g_pred, w * g_logit], axis=1)
    if not np.isfinite(value):
        raise TrainingDiverged("non-finite loss", layer=len(net.layers) - 1)
    grads, _ = net.backward(cache, g, preactivation=preact)
    return value, grads


# ----------------------------------------------------------------------- adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: np.ndarray, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(np.zeros_like(params), np.zeros_like(params), 0, lr, beta1, beta2, eps)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState):
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if not (params.shape == grads.shape == state.m.shape == state.v.shape):
        raise ShapeError(
            f"params {params.shape}, grads {grads.shape}, moments {state.m.shape} disagree"
        )
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1**state.t)
    v_hat = state.v / (1.0 - b2**state.t)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


@dataclass
class Optimizer:
    """Adam bound to one network."""

    net: DenseNet
    state: AdamState = field(init=False)
    lr: float = 1e-3

    def __post_init__(self):
        self.state = AdamState.for_params(self.net.params, lr=self.lr)

    def step(self, grads: np.ndarray):
        adam_step(self.net.params, grads, self.state)


# -------------------------------------------------------------- serialization


def save_net(net: DenseNet, path) -> None:
    """Write layer dims and row-major parameters as versioned text."""
    lines = [f"{FORMAT_HEADER} {FORMAT_VERSION}", str(len(net.layers))]
    for layer in net.layers:
        lines.append(f"{layer.n_in} {layer.n_out} {layer.activation}")
    lines.extend(repr(float(p)) for p in net.params)
    Path(path).write_text("\n".join(lines) + "\n")


def load_net(path) -> DenseNet:
    text = Path(path).read_text().split("\n")
    head = text[0].split()
    if len(head) != 2 or head[0] != FORMAT_HEADER:
        raise ValueError(f"{path}: not a network file")
    if int(head[1]) != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {head[1]}")
    n_layers = int(text[1])
    sizes, acts = [], []
    for line in text[2 : 2 + n_layers]:
        n_in, n_out, act = line.split()
        if sizes and sizes[-1] != int(n_in):
            raise ShapeError(f"{path}: layer input {n_in} does not match previous output {sizes[-1]}")
        if not sizes:
            sizes.append(int(n_in))
        sizes.append(int(n_out))
        acts.append(act)
    net = DenseNet(sizes, acts)
    values = [float(v) for v in text[2 + n_layers :] if v.strip()]
    net.load_params(np.array(values))
    return net
