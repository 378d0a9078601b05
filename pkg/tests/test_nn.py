import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualchannel import nn
from dualchannel.errors import ShapeError, TrainingDiverged
from oracles import central_differences, max_relative_error


def test_zero_net_gives_zero_output():
    net = nn.DenseNet([3, 5, 2], ["tanh", "tanh"])
    assert np.all(net.forward([0.3, -1.0, 2.0]) == 0.0)


def test_single_linear_layer_is_affine():
    net = nn.DenseNet([1, 1], ["linear"])
    net.layers[0].W[...] = [[2.0]]
    net.layers[0].b[...] = [1.0]
    assert net.forward([3.0]).tolist() == [7.0]


def test_two_layer_tanh_matches_hand_trace():
    net = nn.DenseNet([2, 2, 2], ["tanh", "tanh"], np.random.default_rng(7))
    x = [0.4, -0.9]
    W1, b1 = net.layers[0].W.tolist(), net.layers[0].b.tolist()
    W2, b2 = net.layers[1].W.tolist(), net.layers[1].b.tolist()
    h = [math.tanh(W1[i][0] * x[0] + W1[i][1] * x[1] + b1[i]) for i in range(2)]
    y = [math.tanh(W2[i][0] * h[0] + W2[i][1] * h[1] + b2[i]) for i in range(2)]
    assert net.forward(x) == pytest.approx(y, abs=1e-15)


def test_dimension_mismatch_names_both_sizes():
    net = nn.DenseNet([3, 2], ["linear"])
    with pytest.raises(ShapeError, match=r"4.*3"):
        net.forward(np.zeros(4))


def test_init_within_fan_in_bound():
    net = nn.DenseNet([16, 8, 2], ["tanh", "tanh"], np.random.default_rng(0))
    for layer in net.layers:
        bound = math.sqrt(1.0 / layer.n_in)
        assert np.abs(layer.W).max() <= bound and np.abs(layer.b).max() <= bound


def test_tanh_outputs_open_interval_and_softmax_normalised():
    rng = np.random.default_rng(1)
    net = nn.DenseNet([4, 6, 5], ["tanh", "softmax"], rng)
    x = rng.normal(scale=5.0, size=(50, 4))
    p = net.forward(x)
    assert np.all(p > 0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9, rtol=0)
    t = nn.DenseNet([4, 3], ["tanh"], rng).forward(x)
    assert np.all(np.abs(t) < 1)


def test_softmax_stable_for_huge_logits():
    p = nn.softmax(np.array([[1000.0, 1000.0, -1000.0]]))
    assert p[0].tolist() == pytest.approx([0.5, 0.5, 0.0])


def test_onehot_forward_matches_dense_forward():
    rng = np.random.default_rng(3)
    net = nn.DenseNet([16, 8, 4, 2], ["tanh"] * 3, rng)
    idx = np.array([0, 5, 5, 15])
    assert np.allclose(net.forward_onehot(idx), net.forward(np.eye(16)[idx]), atol=1e-14)


# ------------------------------------------------------------- backward


def test_zero_net_mse_at_zero_targets():
    net = nn.DenseNet([3, 4, 2], ["tanh", "linear"])
    loss, grads = nn.backward(net, np.ones((5, 3)), np.zeros((5, 2)), nn.LossSpec("mse"))
    assert loss == 0.0
    assert np.all(grads == 0.0)


def test_uniform_softmax_cross_entropy_is_log_n():
    net = nn.DenseNet([3, 16], ["softmax"])
    loss, _ = nn.backward(net, np.ones((4, 3)), np.array([0, 3, 7, 15]), nn.LossSpec("cross_entropy"))
    assert loss == pytest.approx(math.log(16), abs=1e-12)
    assert loss == pytest.approx(2.7726, abs=1e-4)


def _loss_fn(net, x, y, spec):
    def f():
        return nn.backward(net, x, y, spec)[0]

    return f


CASES = [
    ("mse", ["tanh", "tanh", "linear"]),
    ("cross_entropy", ["tanh", "tanh", "softmax"]),
    ("cross_entropy", ["tanh", "linear", "linear"]),
    ("composite", ["tanh", "tanh", "linear"]),
]


@pytest.mark.parametrize("kind,acts", CASES)
def test_gradients_match_finite_differences(kind, acts):
    rng = np.random.default_rng(11)
    n_actions = 5
    out = {"mse": 3, "cross_entropy": 6, "composite": 3 + n_actions}[kind]
    net = nn.DenseNet([4, 7, 6, out], acts, rng)
    x = rng.normal(size=(9, 4))
    if kind == "mse":
        y = rng.normal(size=(9, out))
    elif kind == "cross_entropy":
        y = rng.integers(out, size=9)
    else:
        y = (rng.normal(size=(9, 3)), rng.integers(n_actions, size=9))
    spec = nn.LossSpec(kind, eta=0.7, n_actions=n_actions)
    _, grads = nn.backward(net, x, y, spec)
    numeric = central_differences(_loss_fn(net, x, y, spec), net.params)
    assert max_relative_error(grads, numeric) < 1e-4


def test_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    net = nn.DenseNet([3, 5, 2], ["tanh", "linear"], rng)
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(4, 2))
    _, cache = net.forward_cached(x)
    _, gx = net.backward(cache, w)
    numeric = central_differences(lambda: float((net.forward(x) * w).sum()), x)
    assert max_relative_error(gx, numeric) < 1e-4


def test_onehot_backward_matches_dense_backward():
    rng = np.random.default_rng(9)
    net = nn.DenseNet([8, 5, 2], ["tanh", "tanh"], rng)
    idx = np.array([1, 1, 6, 0])
    g = rng.normal(size=(4, 2))
    _, c1 = net.forward_cached(idx, onehot=True)
    _, c2 = net.forward_cached(np.eye(8)[idx])
    assert np.allclose(net.backward(c1, g)[0], net.backward(c2, g)[0], atol=1e-14)


def test_nonfinite_gradient_reports_layer():
    net = nn.DenseNet([2, 2, 1], ["tanh", "linear"], np.random.default_rng(0))
    _, cache = net.forward_cached(np.ones((1, 2)))
    with pytest.raises(TrainingDiverged) as info:
        net.backward(cache, np.array([[np.inf]]))
    assert info.value.layer == 1


def test_nonfinite_loss_is_divergence():
    net = nn.DenseNet([1, 1], ["linear"])
    with pytest.raises(TrainingDiverged):
        nn.backward(net, [[1.0]], [[np.inf]], nn.LossSpec("mse"))


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    widths=st.lists(st.integers(1, 8), min_size=1, max_size=3),
    kind=st.sampled_from(["mse", "cross_entropy", "composite"]),
)
def test_gradient_exactness_property(seed, widths, kind):
    rng = np.random.default_rng(seed)
    n_actions = 3
    out = {"mse": 2, "cross_entropy": 4, "composite": 2 + n_actions}[kind]
    sizes = [3, *widths[:-1], out] if len(widths) > 1 else [3, out]
    last = "softmax" if kind == "cross_entropy" and rng.random() < 0.5 else "linear"
    acts = [str(rng.choice(["tanh", "linear"])) for _ in sizes[1:-1]] + [last]
    net = nn.DenseNet(sizes, acts, rng)
    x = rng.normal(size=(5, 3))
    if kind == "mse":
        y = rng.normal(size=(5, out))
    elif kind == "cross_entropy":
        y = rng.integers(out, size=5)
    else:
        y = (rng.normal(size=(5, 2)), rng.integers(n_actions, size=5))
    spec = nn.LossSpec(kind, eta=1.3, n_actions=n_actions)
    _, grads = nn.backward(net, x, y, spec)
    numeric = central_differences(_loss_fn(net, x, y, spec), net.params)
    assert max_relative_error(grads, numeric) < 1e-4


# ----------------------------------------------------------------- adam


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    p = np.array([1.0, -2.0])
    state = nn.AdamState.for_params(p)
    before = p.copy()
    nn.adam_step(p, np.zeros(2), state)
    assert np.array_equal(p, before)
    assert state.t == 1


def test_adam_moments_decay_under_zero_gradient():
    p = np.zeros(1)
    state = nn.AdamState.for_params(p)
    state.m[...] = 0.5
    state.v[...] = 0.1
    nn.adam_step(p, np.zeros(1), state)
    assert state.m[0] == pytest.approx(0.45)
    assert state.v[0] == pytest.approx(0.0999)


@pytest.mark.parametrize("g", [3.0, -0.02])
def test_adam_first_step_is_learning_rate_against_gradient(g):
    p = np.array([0.0])
    state = nn.AdamState.for_params(p, lr=1e-3)
    nn.adam_step(p, np.array([g]), state)
    assert p[0] == pytest.approx(-math.copysign(1e-3, g), rel=1e-5)


def test_adam_three_step_trace():
    p = np.array([1.0])
    state = nn.AdamState.for_params(p, lr=0.1)
    expected = [0.900000002, 0.8654394181165108, 0.8275002408356956]
    for g, want in zip([0.5, -0.2, 0.1], expected):
        nn.adam_step(p, np.array([g]), state)
        assert p[0] == pytest.approx(want, abs=1e-15)
    assert state.t == 3
    assert state.m[0] == pytest.approx(0.0325)
    assert state.v[0] == pytest.approx(0.00029946025)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        nn.adam_step(np.zeros(3), np.zeros(2), nn.AdamState.for_params(np.zeros(3)))


# ---------------------------------------------------- training properties


def _train_toy(seed, steps):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.normal(-2, 0.5, size=(20, 2)), rng.normal(2, 0.5, size=(20, 2))])
    y = np.array([0] * 20 + [1] * 20)
    net = nn.DenseNet([2, 4, 2], ["tanh", "softmax"], np.random.default_rng(seed + 1))
    opt = nn.Optimizer(net, lr=1e-2)
    losses = []
    for _ in range(steps):
        loss, g = nn.backward(net, x, y, nn.LossSpec("cross_entropy"))
        losses.append(loss)
        opt.step(g)
    return net, losses


def test_cross_entropy_decreases_on_separable_toy():
    _, losses = _train_toy(0, 200)
    assert losses[-1] < losses[0]


def test_training_is_bitwise_deterministic():
    a, _ = _train_toy(4, 30)
    b, _ = _train_toy(4, 30)
    assert np.array_equal(a.params, b.params)


# -------------------------------------------------------- serialization


def test_save_load_roundtrip(tmp_path):
    net = nn.DenseNet([5, 4, 3], ["tanh", "softmax"], np.random.default_rng(2))
    nn.save_net(net, tmp_path / "net.txt")
    back = nn.load_net(tmp_path / "net.txt")
    assert back.sizes == net.sizes and back.activations == net.activations
    assert np.array_equal(back.params, net.params)
    assert (tmp_path / "net.txt").read_text().startswith("dualchannel-densenet 1\n")


def test_load_rejects_unknown_version(tmp_path):
    path = tmp_path / "net.txt"
    path.write_text("dualchannel-densenet 99\n0\n")
    with pytest.raises(ValueError, match="version"):
        nn.load_net(path)


def test_params_are_views():
    net = nn.DenseNet([2, 3], ["linear"])
    net.params[:] = np.arange(9.0)
    assert net.layers[0].W.tolist() == [[0, 1], [2, 3], [4, 5]]
    assert net.layers[0].b.tolist() == [6, 7, 8]
