import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bmoe.errors import RejectedInputError, TrainingDivergedError
from bmoe.nn import (DenseNet, Layer, TrainConfig, backward, backward_with_input, forward,
                     from_checkpoint, init_dense, load_net, save_net, sgd_step, softmax,
                     softmax_cross_entropy, to_checkpoint, train_classifier)

from oracles import central_diff, flatten_grads, flatten_net, rel_err, unflatten_net


def one_layer(w, b, act="identity"):
    return DenseNet((Layer(np.array(w, float), np.array(b, float), act),))


# ---- forward ---------------------------------------------------------------

def test_identity_net_passes_input_through():
    net = one_layer(np.eye(2), [0, 0])
    assert forward(net, [1, 2]).tolist() == [1, 2]


def test_relu_clamps_negative():
    assert forward(one_layer([[-1]], [0], "relu"), [3]).tolist() == [0]


def test_affine_with_bias():
    assert forward(one_layer([[1, 1]], [0.5]), [1, 2]).tolist() == [3.5]


def test_dimension_mismatch_rejected():
    net = one_layer(np.eye(2), [0, 0])
    with pytest.raises(RejectedInputError):
        forward(net, [1, 2, 3])


def test_layers_must_chain():
    a = Layer(np.ones((3, 2)), np.zeros(3))
    b = Layer(np.ones((1, 4)), np.zeros(1))
    with pytest.raises(RejectedInputError):
        DenseNet((a, b))


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_nonfinite_weights_rejected(bad):
    with pytest.raises(RejectedInputError):
        Layer(np.array([[bad]]), np.zeros(1))


def test_unknown_activation_rejected():
    with pytest.raises(RejectedInputError):
        Layer(np.ones((1, 1)), np.zeros(1), "tanh")


def test_forward_is_pure():
    net = init_dense([3, 5, 2], seed=4)
    x = np.random.default_rng(0).normal(size=(7, 3))
    a, b = forward(net, x), forward(net, x)
    assert a.tobytes() == b.tobytes()


def test_batch_matches_rowwise():
    net = init_dense([3, 4, 2], seed=1)
    x = np.random.default_rng(1).normal(size=(5, 3))
    rows = np.stack([forward(net, r) for r in x])
    np.testing.assert_allclose(forward(net, x), rows, rtol=0, atol=1e-15)


def test_glorot_bounds():
    net = init_dense([10, 30, 4], seed=0)
    for l in net.layers:
        lim = math.sqrt(6 / (l.in_dim + l.out_dim))
        assert np.abs(l.w).max() <= lim
        assert np.all(l.b == 0)


# ---- backward --------------------------------------------------------------

def test_linear_derivative():
    net = one_layer([[0.7]], [0.0])
    (dw, db), = backward(net, [2.0], [1.0])
    assert dw.tolist() == [[2.0]]
    assert db.tolist() == [1.0]


def test_zero_upstream_gives_zero_grads():
    net = init_dense([3, 4, 2], seed=2)
    grads = backward(net, np.ones(3), np.zeros(2))
    assert all(not dw.any() and not db.any() for dw, db in grads)


@given(seed=st.integers(0, 10_000), depth=st.integers(1, 3), width=st.integers(1, 5),
       batch=st.integers(1, 4))
def test_backward_matches_finite_differences(seed, depth, width, batch):
    rng = np.random.default_rng(seed)
    sizes = [int(rng.integers(1, 5))] + [width] * (depth - 1) + [int(rng.integers(1, 4))]
    net = init_dense(sizes, seed=seed)
    theta0 = rng.uniform(-1, 1, size=flatten_net(net).size)
    net = unflatten_net(net, theta0)
    x = rng.normal(size=(batch, sizes[0]))
    up = rng.normal(size=(batch, sizes[-1]))

    def f(theta):
        return float(np.sum(up * forward(unflatten_net(net, theta), x)))

    numeric = central_diff(f, theta0)
    analytic = flatten_grads(backward(net, x, up))
    # relu kinks within h of a pre-activation make finite differences meaningless
    zs = []
    h = x
    for l in net.layers:
        z = h @ l.w.T + l.b
        if l.act == "relu":
            zs.append(np.abs(z).min())
        h = np.maximum(z, 0) if l.act == "relu" else z
    if zs and min(zs) < 1e-3:
        return
    assert rel_err(numeric, analytic) < 1e-4


def test_input_gradient_matches_finite_differences():
    net = init_dense([3, 6, 2], seed=8)
    x0 = np.array([0.3, -0.8, 1.1])
    up = np.array([0.4, -1.3])
    _, dx = backward_with_input(net, x0, up)
    numeric = central_diff(lambda x: float(up @ forward(net, x)), x0)
    assert rel_err(numeric, dx) < 1e-6


def test_upstream_shape_checked():
    net = init_dense([2, 3], seed=0)
    with pytest.raises(RejectedInputError):
        backward(net, np.ones((4, 2)), np.ones((4, 2)))


# ---- sgd ---------------------------------------------------------------------

def test_sgd_step_arithmetic():
    net = one_layer([[1.0]], [0.0])
    new = sgd_step(net, [(np.array([[2.0]]), np.array([0.0]))], 0.1)
    assert new.layers[0].w[0, 0] == pytest.approx(0.8, abs=1e-15)
    assert net.layers[0].w[0, 0] == 1.0  # input untouched


def test_sgd_zero_lr_is_identity():
    net = init_dense([3, 4, 2], seed=3)
    grads = backward(net, np.ones(3), np.ones(2))
    new = sgd_step(net, grads, 0.0)
    for a, b in zip(net.layers, new.layers):
        assert a.w.tobytes() == b.w.tobytes() and a.b.tobytes() == b.b.tobytes()


def test_sgd_nan_gradient_diverges():
    net = one_layer([[1.0]], [0.0])
    with pytest.raises(TrainingDivergedError):
        sgd_step(net, [(np.array([[np.nan]]), np.array([0.0]))], 0.1)


def test_train_config_validation():
    with pytest.raises(RejectedInputError):
        TrainConfig(batch_size=0)
    with pytest.raises(RejectedInputError):
        TrainConfig(learning_rate=0)
    assert TrainConfig().batch_size == 128 and TrainConfig().learning_rate == 1e-4


# ---- loss ----------------------------------------------------------------------

def test_uniform_cross_entropy_is_ln2():
    loss, grad = softmax_cross_entropy([0.0, 0.0], 0)
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    np.testing.assert_allclose(grad, [-0.5, 0.5])


def test_cross_entropy_large_logits_stable():
    loss, grad = softmax_cross_entropy([1000.0, 0.0], 0)
    assert 0.0 <= loss < 1e-12
    assert np.all(np.isfinite(grad))


def test_cross_entropy_label_out_of_range():
    with pytest.raises(RejectedInputError):
        softmax_cross_entropy([0.0, 1.0], 2)
    with pytest.raises(RejectedInputError):
        softmax_cross_entropy([0.0, 1.0], -1)


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6), st.data())
def test_cross_entropy_gradient_finite_differences(logits, data):
    z = np.array(logits)
    label = data.draw(st.integers(0, len(z) - 1))
    _, grad = softmax_cross_entropy(z, label)
    numeric = central_diff(lambda v: softmax_cross_entropy(v, label)[0], z)
    assert np.allclose(grad, numeric, atol=1e-7) or rel_err(grad, numeric) < 1e-4


@given(st.lists(st.floats(-500, 500), min_size=2, max_size=8), st.floats(-1e3, 1e3))
def test_softmax_sums_to_one_and_shift_invariant(logits, c):
    z = np.array(logits)
    s = softmax(z)
    assert abs(s.sum() - 1) < 1e-9
    np.testing.assert_allclose(softmax(z + c), s, atol=1e-12)


# ---- checkpoints and training ----------------------------------------------------

def test_checkpoint_round_trip_is_lossless(tmp_path):
    net = init_dense([4, 7, 3], seed=11)
    path = tmp_path / "net.json"
    save_net(net, path)
    back = load_net(path)
    for a, b in zip(net.layers, back.layers):
        assert a.w.tobytes() == b.w.tobytes() and a.b.tobytes() == b.b.tobytes()
        assert a.act == b.act
    assert to_checkpoint(net)["layers"][0]["act"] == "relu"
    assert to_checkpoint(net)["layers"][1]["act"] == "id"
    assert to_checkpoint(net)["input_dim"] == 4


def test_checkpoint_input_dim_must_agree():
    obj = to_checkpoint(init_dense([2, 3], seed=0))
    obj["input_dim"] = 5
    with pytest.raises(RejectedInputError):
        from_checkpoint(obj)


def test_train_classifier_learns_and_is_deterministic():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(400, 2))
    y = (x[:, 0] + x[:, 1] > 0).astype(int)
    cfg = TrainConfig(batch_size=32, learning_rate=0.1, steps=300, seed=5)
    net0 = init_dense([2, 8, 2], seed=0)
    a, _ = train_classifier(net0, x, y, cfg)
    b, _ = train_classifier(net0, x, y, cfg)
    assert to_checkpoint(a) == to_checkpoint(b)
    assert np.mean(forward(a, x).argmax(1) == y) > 0.95


def test_train_classifier_divergence_reports_step():
    x = np.array([[1e200, 1e200], [-1e200, 1e200]])
    y = np.array([1, 0])  # misclassified at init, so the first step is huge
    with pytest.raises(TrainingDivergedError) as info, np.errstate(all="ignore"):
        train_classifier(init_dense([2, 2], seed=0), x, y,
                         TrainConfig(batch_size=2, learning_rate=1e10, steps=50))
    assert info.value.step == 1
