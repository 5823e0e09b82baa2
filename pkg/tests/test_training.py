import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import bmoe.training as tr
from bmoe.errors import RejectedInputError, TrainingDivergedError
from bmoe.gating import soft_gate
from bmoe.nn import DenseNet, Layer, TrainConfig, forward, init_dense, to_checkpoint
from bmoe.synth import (ExpertSpec, PreprocessSpec, default_expert_specs, expert_to_json,
                        gen_feature_task, save_expert, train_experts)
from bmoe.training import (BiasLossConfig, MixtureModel, as_bias, bias_loss, enforce_bias,
                           largest_remainder_counts, load_mixture, mixture_forward,
                           mixture_objective, new_mixture, precompute_expert_logits, route,
                           save_mixture, selection_deviation, train_mixture)

from oracles import central_diff, flatten_grads, flatten_net, largest_remainder_reference, \
    rel_err, unflatten_net

G_TRACE = np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.5, 0.2, 0.3], [0.1, 0.3, 0.6]])


def simplex(n_min=2, n_max=5):
    @st.composite
    def build(draw):
        n = draw(st.integers(n_min, n_max))
        w = np.array(draw(st.lists(st.integers(0, 1000), min_size=n, max_size=n)), float)
        if w.sum() == 0:
            w[0] = 1
        return w / w.sum()
    return build()


# ---- bias loss ----------------------------------------------------------------

def test_bias_loss_zero_at_target():
    loss, grad = bias_loss([0.3, 0.7], [0.3, 0.7], BiasLossConfig(5.0))
    assert loss == 0.0 and not grad.any()


def test_bias_loss_clamped_at_opposite_corner():
    cfg = BiasLossConfig(1.0, 1e-7)
    loss, grad = bias_loss([1.0, 0.0], [0.0, 1.0], cfg)
    assert loss == pytest.approx(-math.log(1e-7))
    assert not grad.any()


def test_bias_loss_worked_example():
    loss, _ = bias_loss([0.75, 0.25], [0.5, 0.5])
    assert math.sqrt(0.125) == pytest.approx(0.35355, abs=1e-5)
    assert loss == pytest.approx(-math.log(0.75), abs=1e-12)
    assert loss == pytest.approx(0.28768, abs=1e-5)


@given(simplex(), st.data(), st.floats(0, 10))
def test_bias_loss_properties(b, data, w):
    u = data.draw(st.lists(st.floats(0, 1), min_size=len(b), max_size=len(b)))
    u = np.array(u) + 1e-3
    u /= u.sum()
    loss, grad = bias_loss(u, b, BiasLossConfig(w))
    assert loss >= 0
    if np.linalg.norm(u - b) / math.sqrt(2) < 0.99 and np.linalg.norm(u - b) > 1e-6:
        num = central_diff(lambda v: bias_loss(v, b, BiasLossConfig(w))[0], u, h=1e-7)
        assert np.allclose(grad, num, atol=1e-6) or rel_err(grad, num) < 1e-4


def test_bias_loss_increases_with_distance():
    b = np.array([0.5, 0.5])
    losses = [bias_loss([0.5 + t, 0.5 - t], b)[0] for t in np.linspace(0, 0.49, 20)]
    assert all(x < y for x, y in zip(losses, losses[1:]))


def test_bias_validation():
    with pytest.raises(RejectedInputError):
        as_bias([0.6, 0.6])
    with pytest.raises(RejectedInputError):
        as_bias([-0.1, 1.1])
    with pytest.raises(RejectedInputError):
        as_bias([0.5, 0.5], n=3)


# ---- enforcement ------------------------------------------------------------------

def test_four_row_quota_counts():
    assert largest_remainder_counts(4, [0.50, 0.25, 0.25]).tolist() == [2, 1, 1]


def test_hand_traced_enforcement():
    masked, a = enforce_bias(G_TRACE, [0.5, 0.25, 0.25])
    assert a.tolist() == [0, 1, 0, 2]
    np.testing.assert_array_equal(masked, [[0.6, 0, 0], [0, 0.5, 0], [0.5, 0, 0], [0, 0, 0.6]])


def test_one_hot_bias_keeps_first_column():
    masked, a = enforce_bias(G_TRACE, [1, 0, 0])
    assert a.tolist() == [0, 0, 0, 0]
    np.testing.assert_array_equal(masked[:, 0], G_TRACE[:, 0])
    assert not masked[:, 1:].any()


def test_remainder_ties_go_to_lower_index():
    assert largest_remainder_counts(3, [0.5, 0.5]).tolist() == [2, 1]
    assert largest_remainder_counts(1, [1 / 3, 1 / 3, 1 / 3]).tolist() == [1, 0, 0]


def test_row_ties_go_to_lower_row():
    _, a = enforce_bias(np.full((4, 2), 0.5), [0.5, 0.5])
    assert a.tolist() == [0, 0, 1, 1]


def test_enforce_rejects_empty_batch():
    with pytest.raises(RejectedInputError):
        enforce_bias(np.zeros((0, 2)), [0.5, 0.5])


@given(st.integers(1, 300), simplex(1, 6))
def test_counts_match_reference_apportionment(m, b):
    counts = largest_remainder_counts(m, b)
    assert counts.sum() == m
    assert counts.tolist() == largest_remainder_reference(m, b)
    assert np.all(np.abs(counts - m * b) < 1)


@given(st.integers(1, 64), simplex(), st.integers(0, 2**32 - 1))
def test_enforcement_invariants(m, b, seed):
    rng = np.random.default_rng(seed)
    G = soft_gate(rng.normal(size=(m, len(b))))
    masked, a = enforce_bias(G, b)
    assert np.all((masked != 0).sum(axis=1) == 1)
    np.testing.assert_array_equal(np.bincount(a, minlength=len(b)), largest_remainder_counts(m, b))
    assert np.all(masked <= G)
    rows = np.arange(m)
    np.testing.assert_array_equal(masked[rows, a], G[rows, a])


@given(st.integers(2, 40), simplex(), st.integers(0, 2**32 - 1))
def test_enforcement_is_permutation_equivariant(m, b, seed):
    rng = np.random.default_rng(seed)
    G = soft_gate(rng.normal(size=(m, len(b))))  # distinct values almost surely
    perm = rng.permutation(m)
    _, a = enforce_bias(G, b)
    _, ap = enforce_bias(G[perm], b)
    np.testing.assert_array_equal(ap, a[perm])


# ---- mixtures ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_task():
    ds = gen_feature_task(n_per_class=100, seed=3)
    experts = train_experts(ds, default_expert_specs("feature"),
                            cfg=TrainConfig(64, 0.1, 800, seed=3))
    return ds, experts


def fixed_expert(id_, cost_values, w):
    """A 3-class linear expert reading the first ``cost_values`` features."""
    spec = PreprocessSpec("feature_mask", features=tuple(range(cost_values)))
    net = DenseNet((Layer(np.asarray(w, float), np.zeros(3)),))
    return ExpertSpec(id_, spec, net, 0.5)


def test_gradient_flows_only_through_retained_gate():
    rng = np.random.default_rng(0)
    net = init_dense([2, 4, 3], seed=1)
    x = rng.normal(size=(6, 2))
    Z = rng.normal(size=(6, 3, 4))
    labels = rng.integers(0, 4, size=6)
    a = np.array([0, 1, 2, 0, 1, 2])
    theta0 = flatten_net(net)

    def f(theta):
        t, _, _, _ = mixture_objective(unflatten_net(net, theta), x, Z, labels, a)
        return t

    _, _, grads, _ = mixture_objective(net, x, Z, labels, a)
    assert rel_err(central_diff(f, theta0), flatten_grads(grads)) < 1e-6


def test_objective_with_bias_loss_gradient():
    rng = np.random.default_rng(2)
    net = init_dense([3, 5, 2], seed=4)
    x = rng.normal(size=(8, 3))
    Z = rng.normal(size=(8, 2, 3))
    labels = rng.integers(0, 3, size=8)
    a = rng.integers(0, 2, size=8)
    cfg = BiasLossConfig(2.0)
    b = [0.2, 0.8]
    theta0 = flatten_net(net)

    def f(theta):
        t, lb, _, _ = mixture_objective(unflatten_net(net, theta), x, Z, labels, a, b, cfg)
        return t + lb

    _, lb, grads, _ = mixture_objective(net, x, Z, labels, a, b, cfg)
    assert lb > 0
    assert rel_err(central_diff(f, theta0), flatten_grads(grads)) < 1e-6


def test_per_input_routing_matches_sparse_gate():
    experts = [fixed_expert(i, 1, np.ones((3, 1))) for i in range(3)]
    # a gating net that returns its input makes the gates equal G_TRACE
    ident = DenseNet((Layer(np.eye(3), np.zeros(3)),))
    model = MixtureModel(tuple(experts), ident, np.array([.5, .25, .25]))
    logits = np.log(G_TRACE)
    G, a = route(model, logits, "per_input_argmax")
    np.testing.assert_allclose(G, G_TRACE, atol=1e-15)
    assert a.tolist() == [0, 1, 0, 2]
    _, a = route(model, logits, "batch_enforced")
    assert a.tolist() == [0, 1, 0, 2]


def test_batch_enforced_cost_is_exact():
    # experts reading 25 and 75 values cost 100 and 300 bytes
    e1 = fixed_expert(0, 25, np.ones((3, 25)))
    e2 = fixed_expert(1, 75, np.ones((3, 75)))
    model = new_mixture([e1, e2], 75, [0.5, 0.5], "bias_enforcement", seed=0)
    x = np.random.default_rng(0).normal(size=(10, 75))
    out = mixture_forward(model, x, "batch_enforced")
    assert out.realized_cost == 200.0
    assert selection_deviation(model, x, "batch_enforced") == 0.0


def test_single_expert_mixture_is_the_expert():
    e = fixed_expert(0, 2, np.arange(6.0).reshape(3, 2))
    model = MixtureModel((e,), init_dense([2, 1], seed=0), np.array([1.0]))
    x = np.random.default_rng(1).normal(size=(5, 2))
    out = mixture_forward(model, x)
    assert out.assignment.tolist() == [0] * 5
    np.testing.assert_allclose(out.y, forward(e.net, x))


def test_only_selected_experts_run():
    calls = []
    e1 = fixed_expert(0, 2, np.ones((3, 2)))
    e2 = fixed_expert(1, 2, -np.ones((3, 2)))
    model = new_mixture([e1, e2], 2, [1.0, 0.0], "bias_enforcement", seed=0)
    orig = tr.expert_logits

    def spy(expert, x):
        calls.append((expert.id, len(x)))
        return orig(expert, x)

    tr.expert_logits = spy
    try:
        mixture_forward(model, np.ones((4, 2)), "batch_enforced")
    finally:
        tr.expert_logits = orig
    assert calls == [(0, 4)]


def test_mixture_forward_rejects_empty():
    e = fixed_expert(0, 2, np.ones((3, 2)))
    model = new_mixture([e, e], 2, [0.5, 0.5], "bias_enforcement")
    with pytest.raises(RejectedInputError):
        mixture_forward(model, np.zeros((0, 2)))


def test_training_is_deterministic_and_freezes_experts(small_task, tmp_path):
    ds, experts = small_task
    before = [expert_to_json(e) for e in experts]
    cfg = TrainConfig(64, 0.5, 60, seed=1)
    runs = []
    for _ in range(2):
        m = new_mixture(experts, 2, [0.5, 0.5], "soft_regularization", seed=1)
        m, log = train_mixture(m, ds, cfg, BiasLossConfig(1.0))
        runs.append((to_checkpoint(m.gating_net), log.rows))
    assert runs[0] == runs[1]
    assert [expert_to_json(e) for e in experts] == before


def test_enforcement_with_one_hot_bias_equals_first_expert(small_task):
    ds, experts = small_task
    m = new_mixture(experts, 2, [1.0, 0.0], "bias_enforcement", seed=0)
    m, _ = train_mixture(m, ds, TrainConfig(64, 0.5, 30, seed=0))
    x, y = ds.split("test")
    out = mixture_forward(m, x, "batch_enforced", 128)
    alone = np.argmax(forward(experts[0].net, x[:, :1]), axis=1)
    assert np.mean(out.predictions == y) == np.mean(alone == y)
    assert out.realized_cost == experts[0].data_cost_bytes


def test_soft_training_reduces_task_loss_with_identical_experts(small_task):
    ds, experts = small_task
    twins = [experts[1], ExpertSpec(1, experts[1].preprocess, experts[1].net, 0.0)]
    m = new_mixture(twins, 2, [0.5, 0.5], "soft_regularization", seed=2)
    _, log = train_mixture(m, ds, TrainConfig(64, 0.5, 400, seed=2), BiasLossConfig(0.0))
    loss = log.column("task_loss")
    windows = loss[: len(loss) // 100 * 100].reshape(-1, 100).mean(axis=1)
    assert np.all(np.diff(windows) < 0)


def test_training_log_csv(small_task, tmp_path):
    ds, experts = small_task
    m = new_mixture(experts, 2, [0.5, 0.5], "bias_enforcement", seed=0)
    _, log = train_mixture(m, ds, TrainConfig(64, 0.5, 5, seed=0))
    log.write_csv(tmp_path / "log.csv")
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert rows[0] == ["step", "task_loss", "bias_loss", "u_1", "u_2", "realized_cost"]
    assert len(rows) == 6
    assert all(float(r[-1]) == 6.0 for r in rows[1:])  # exact 32/32 split of 4 and 8 bytes


def test_divergence_reports_step(small_task):
    ds, experts = small_task
    m = new_mixture(experts, 2, [0.5, 0.5], "soft_regularization", seed=0)
    with pytest.raises(TrainingDivergedError) as info, np.errstate(all="ignore"):
        train_mixture(m, ds, TrainConfig(64, 1e300, 20, seed=0), BiasLossConfig(1.0))
    assert info.value.step is not None


def test_mixture_checkpoint_round_trip(small_task, tmp_path):
    ds, experts = small_task
    for e in experts:
        save_expert(e, tmp_path / f"expert_{e.id}.json")
    m = new_mixture(experts, 2, [0.25, 0.75], "bias_enforcement", seed=0)
    save_mixture(m, tmp_path / "mix.json")
    back = load_mixture(tmp_path / "mix.json")
    assert to_checkpoint(back.gating_net) == to_checkpoint(m.gating_net)
    assert back.bias.tolist() == [0.25, 0.75] and back.method == "bias_enforcement"
    x, _ = ds.split("test")
    np.testing.assert_array_equal(mixture_forward(back, x).y, mixture_forward(m, x).y)


def test_precomputed_logits_shape(small_task):
    ds, experts = small_task
    Z = precompute_expert_logits(experts, ds.x[:7])
    assert Z.shape == (7, 2, ds.n_classes)
