import numpy as np
import pytest

from grbench.autodiff import Tape
from grbench.data import DifficultySplit
from grbench.errors import EmptyTrainSetError, ValidationError
from grbench.graph import InjectionPatch, apply_injection
from grbench.models import ModelSpec, bind_params, build_logits, forward_logits, predict, propagation_operator
from grbench.training import Adam, AtConfig, TrainConfig, adversarial_train, train

from conftest import two_clusters

EMPTY = np.zeros(0, np.int64)


def all_train_split(n):
    return DifficultySplit(np.arange(n), EMPTY, EMPTY, EMPTY, EMPTY)


def same_params(a, b):
    return set(a.params) == set(b.params) and all(
        np.array_equal(a.params[k], b.params[k]) for k in a.params
    )


def test_overfits_two_clusters():
    g = two_clusters()
    m = train(ModelSpec("GCN", hidden_sizes=(16,), dropout=0.0), g, all_train_split(g.num_nodes),
              TrainConfig(max_epochs=200, patience=200))
    assert np.all(predict(m, g) == g.labels)


def test_same_seed_bit_identical(toy, toy_split):
    cfg = TrainConfig(seed=3, max_epochs=30)
    a = train(ModelSpec.default("SAGE"), toy, toy_split, cfg)
    b = train(ModelSpec.default("SAGE"), toy, toy_split, cfg)
    assert same_params(a, b)
    assert a.history == b.history


def test_history_records_epochs(toy, toy_split):
    m = train(ModelSpec.default("GCN"), toy, toy_split, TrainConfig(max_epochs=15, patience=100))
    assert [h["epoch"] for h in m.history] == list(range(15))
    assert all(np.isfinite(h["train_loss"]) for h in m.history)


def test_early_stopping(toy, toy_split):
    m = train(ModelSpec.default("GCN"), toy, toy_split, TrainConfig(max_epochs=1000, patience=5))
    assert len(m.history) < 1000


def test_inductive_guard(toy, toy_split):
    feats = toy.features.copy()
    feats[toy_split.test_full] = np.nan
    poisoned = toy.replace(features=feats)
    cfg = TrainConfig(seed=1, max_epochs=20)
    a = train(ModelSpec.default("GCN", True), poisoned, toy_split, cfg)
    b = train(ModelSpec.default("GCN", True), toy, toy_split, cfg)
    assert same_params(a, b)


def test_empty_train_set(toy):
    with pytest.raises(EmptyTrainSetError):
        train(ModelSpec.default("GCN"), toy, DifficultySplit(EMPTY, np.arange(5), EMPTY, EMPTY, EMPTY))


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(lr=0)
    with pytest.raises(ValidationError):
        TrainConfig(patience=0)
    with pytest.raises(ValidationError):
        AtConfig(injected=0)
    with pytest.raises(ValidationError):
        AtConfig(feature_min=1.0, feature_max=0.0)


def test_adam_zero_gradient():
    p = {"w": np.array([[1.0, -2.0]])}
    before = p["w"].copy()
    opt = Adam(p, lr=0.1)
    for _ in range(3):
        opt.step({"w": np.zeros((1, 2))})
    assert np.array_equal(p["w"], before)


def test_adam_moves_against_gradient():
    p = {"w": np.zeros((1, 1))}
    Adam(p, lr=0.1).step({"w": np.ones((1, 1))})
    assert p["w"][0, 0] == pytest.approx(-0.1)


@pytest.mark.parametrize("at", [AtConfig(warmup_epochs=40), AtConfig(steps=0)])
def test_at_disabled_equals_train(toy, toy_split, at):
    cfg = TrainConfig(seed=4, max_epochs=40)
    spec = ModelSpec.default("GCN")
    assert same_params(adversarial_train(spec, toy, toy_split, cfg, at), train(spec, toy, toy_split, cfg))


def test_at_runs_and_differs(toy, toy_split):
    cfg = TrainConfig(seed=4, max_epochs=60, patience=10)
    at = AtConfig(warmup_epochs=5, injected=4, edges=5, feature_min=-0.9, feature_max=0.9)
    spec = ModelSpec.default("GCN")
    a = adversarial_train(spec, toy, toy_split, cfg, at)
    assert not same_params(a, train(spec, toy, toy_split, cfg))
    assert same_params(a, adversarial_train(spec, toy, toy_split, cfg, at))


def test_injected_rows_get_no_loss_gradient(toy, toy_split, toy_surrogate):
    m = toy_surrogate
    patch = InjectionPatch(3, np.zeros((3, toy.num_features)), [(0, 1), (1, 2), (2, 3)])
    g = apply_injection(toy, patch)
    train_idx = toy_split.train
    tape = Tape()
    logits = build_logits(tape, m, propagation_operator("GCN", g), tape.input(g.features), bind_params(tape, m))
    watch = tape.scale_add(logits, tape.input(np.zeros(logits.shape), requires_grad=True), 1.0, 1.0)
    leaf = watch.parents[1]
    loss = tape.nll_loss(tape.gather_rows(tape.log_softmax(watch), train_idx), g.labels[train_idx])
    grad = tape.backward(loss)[leaf]
    assert np.all(grad[toy.num_nodes:] == 0)
    assert np.any(grad[train_idx] != 0)


def test_trained_weights_are_float32_representable(toy_surrogate, toy):
    for v in toy_surrogate.params.values():
        assert np.array_equal(v, v.astype(np.float32))
    op = propagation_operator("GCN", toy)
    assert np.all(np.isfinite(forward_logits(toy_surrogate, op, toy.features)))
