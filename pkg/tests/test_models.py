import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grbench.errors import ShapeMismatchError, ValidationError
from grbench.evaluate import subset_accuracy
from grbench.graph import GraphBundle
from grbench.models import (
    ARCHS,
    ModelSpec,
    TrainedModel,
    forward_logits,
    gcn_normalize,
    init_model,
    load_model,
    logits_on,
    mean_normalize,
    predict,
    propagation_operator,
    save_model,
)

from conftest import random_graph


def dense_gcn(a):
    a = a + np.eye(a.shape[0])
    d = a.sum(axis=1) ** -0.5
    return d[:, None] * a * d[None, :]


def test_gcn_normalize_examples():
    one = GraphBundle.from_edges(1, [], np.zeros((1, 1), np.float32), np.zeros(1, np.int64), 1)
    assert gcn_normalize(one).toarray().tolist() == [[1.0]]
    two = GraphBundle.from_edges(2, [(0, 1)], np.zeros((2, 1), np.float32), np.zeros(2, np.int64), 1)
    assert np.allclose(gcn_normalize(two).toarray(), 0.5)
    star = GraphBundle.from_edges(5, [(0, i) for i in range(1, 5)], np.zeros((5, 1), np.float32),
                                  np.zeros(5, np.int64), 1)
    assert np.allclose(gcn_normalize(star).toarray(), dense_gcn(star.adjacency.toarray()), atol=1e-15)


def test_mean_normalize_rows_sum_to_one():
    g = random_graph(12, 0.3)
    assert np.allclose(np.asarray(mean_normalize(g).sum(axis=1)).ravel(), 1.0)


def test_zero_weights_give_zero_logits():
    g = random_graph(6, 0.5)
    m = init_model(ModelSpec("GCN"), 4, 3)
    m.params = {k: np.zeros_like(v) for k, v in m.params.items()}
    assert np.all(logits_on(m, g) == 0)
    assert np.all(predict(m, g) == 0)


def test_sgc_identity_operator():
    n, c = 4, 3
    m = init_model(ModelSpec("SGC", k=1), n, c, seed=3)
    out = forward_logits(m, np.eye(n), np.eye(n))
    assert np.allclose(out, m.params["W0"] + m.params["b0"])


def test_sgc_matches_linear_gcn_oracle():
    g = random_graph(10, 0.3)
    m = init_model(ModelSpec("SGC", k=1), 4, 3, seed=1)
    a = dense_gcn(g.adjacency.toarray())
    expected = a @ g.features.astype(np.float64) @ m.params["W0"] + m.params["b0"]
    assert np.allclose(logits_on(m, g), expected, atol=1e-12)
    # two hops equal a two-layer GCN with identity activations and weights W, I
    m2 = init_model(ModelSpec("SGC", k=2), 4, 3, seed=1)
    assert np.allclose(logits_on(m2, g), a @ (a @ g.features @ m2.params["W0"]) + m2.params["b0"], atol=1e-12)


def test_appnp_alpha_one_is_mlp():
    g = random_graph(9, 0.4)
    m = init_model(ModelSpec("APPNP", hidden_sizes=(8,), alpha=1.0), 4, 3, seed=2)
    p = m.params
    x = g.features.astype(np.float64)
    mlp = np.maximum(x @ p["W0"] + p["b0"], 0) @ p["W1"] + p["b1"]
    assert np.allclose(logits_on(m, g), mlp, atol=1e-12)


def test_predict_tie_break():
    m = init_model(ModelSpec("SGC", k=1), 2, 2)
    m.params["W0"] = np.array([[0.1, 0.9], [0.5, 0.5]])
    m.params["b0"] = np.zeros((1, 2))
    g = GraphBundle.from_edges(2, [], np.eye(2, dtype=np.float32), np.zeros(2, np.int64), 2)
    assert predict(m, g).tolist() == [1, 0]


def test_gcn_parameter_count():
    assert init_model(ModelSpec.default("GCN"), 302, 7).num_parameters() == 28167


def test_spec_validation():
    with pytest.raises(ValidationError):
        ModelSpec("GAT")
    with pytest.raises(ValidationError):
        ModelSpec("GCN", dropout=1.0)
    m = init_model(ModelSpec("GCN"), 4, 3)
    with pytest.raises(ShapeMismatchError):
        TrainedModel(m.spec, {"W0": m.params["W0"]}, 4, 3)
    with pytest.raises(ShapeMismatchError):
        forward_logits(m, np.eye(2), np.ones((2, 5)))


@pytest.mark.parametrize("arch", ARCHS)
@pytest.mark.parametrize("ln", [False, True])
def test_permutation_equivariance(arch, ln):
    g = random_graph(30, 0.15, seed=4)
    m = init_model(ModelSpec(arch, hidden_sizes=(8, 8), with_layer_norm=ln), 4, 3, seed=5)
    perm = np.random.default_rng(0).permutation(30)
    inv = np.argsort(perm)
    edges = inv[g.edge_array()]
    h = GraphBundle.from_edges(30, edges, g.features[perm], g.labels[perm], 3)
    assert np.allclose(logits_on(m, h), logits_on(m, g)[perm], atol=1e-10)


@pytest.mark.parametrize("arch", ARCHS)
def test_layer_norm_keeps_large_inputs_finite(arch):
    g = random_graph(20, 0.2, seed=6)
    big = g.replace(features=g.features * 1e3)
    m = init_model(ModelSpec(arch, hidden_sizes=(8, 8), with_layer_norm=True), 4, 3, seed=0)
    out = logits_on(m, big)
    assert np.all(np.isfinite(out))
    small = logits_on(m, g)
    # input LN makes the output invariant to a global rescale (up to eps)
    assert np.allclose(out, small, atol=1e-3)


def test_propagation_operator_cached():
    g = random_graph(8, 0.3)
    assert propagation_operator("GCN", g) is propagation_operator("SGC", g)


def test_checkpoint_round_trip(tmp_path):
    m = init_model(ModelSpec("TAGCN", with_layer_norm=True), 4, 3, seed=9)
    # checkpoints store float32, as produced by training
    m.params = {k: v.astype(np.float32) for k, v in m.params.items()}
    save_model(m, tmp_path / "m.grbm")
    back = load_model(tmp_path / "m.grbm")
    assert back.spec == m.spec
    for k in m.params:
        assert np.array_equal(back.params[k], m.params[k])


def test_trained_accuracy_matches_evaluator(toy, toy_split, toy_surrogate):
    pred = predict(toy_surrogate, toy)
    direct = np.mean(pred[toy_split.test_full] == toy.labels[toy_split.test_full])
    assert subset_accuracy(pred, toy.labels, toy_split.test_full) == direct


@settings(max_examples=10, deadline=None)
@given(arch=st.sampled_from(ARCHS), seed=st.integers(0, 100))
def test_eval_forward_deterministic(arch, seed):
    g = random_graph(10, 0.3, seed=seed)
    m = init_model(ModelSpec(arch, hidden_sizes=(4,)), 4, 3, seed=seed)
    assert np.array_equal(logits_on(m, g), logits_on(m, g))
