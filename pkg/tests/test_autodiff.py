import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from grbench.autodiff import Tape, backward, forward_op, grad_check
from grbench.errors import NonScalarLossError, ShapeMismatchError
from grbench.graph import GraphBundle
from grbench.models import ModelSpec, bind_params, build_logits, gcn_normalize, init_model


def test_relu_forward_and_grad():
    tape = Tape()
    x = tape.input([[-1.0, 2.0]], requires_grad=True)
    r = forward_op(tape, "relu", [x])
    assert r.value.tolist() == [[0.0, 2.0]]
    grads = backward(tape, tape.sum(r))
    assert grads[x].tolist() == [[0.0, 1.0]]


def test_layer_norm_constant_row():
    tape = Tape()
    x = tape.input(np.full((1, 4), 3.0))
    out = tape.layer_norm_rows(x, tape.input(np.ones((1, 4))), tape.input(np.zeros((1, 4))))
    assert np.all(out.value == 0.0)


def test_spmm_two_node_example():
    tape = Tape()
    a = sp.csr_matrix(np.full((2, 2), 0.5))
    out = tape.spmm(a, tape.input(np.eye(2)))
    assert np.array_equal(out.value, np.full((2, 2), 0.5))


def test_spmm_grad_is_column_sums():
    rng = np.random.default_rng(0)
    a = sp.random(5, 4, density=0.5, random_state=1, format="csr")
    tape = Tape()
    x = tape.input(rng.normal(size=(4, 3)), requires_grad=True)
    grads = tape.backward(tape.sum(tape.spmm(a, x)))
    col = np.asarray(a.sum(axis=0)).ravel()
    assert np.allclose(grads[x], np.repeat(col[:, None], 3, axis=1))


def test_backward_twice_is_idempotent():
    rng = np.random.default_rng(0)
    tape = Tape()
    x = tape.input(rng.normal(size=(3, 3)), requires_grad=True)
    w = tape.input(rng.normal(size=(3, 2)), requires_grad=True)
    loss = tape.sum(tape.relu(tape.matmul(x, w)))
    g1 = {k: v.copy() for k, v in tape.backward(loss).items()}
    g2 = tape.backward(loss)
    for k in g1:
        assert np.array_equal(g1[k], g2[k])


def test_non_scalar_loss():
    tape = Tape()
    x = tape.input(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(NonScalarLossError):
        tape.backward(x)


def test_grad_check_sum_of_squares():
    x = np.random.default_rng(0).normal(size=(3, 3))
    err = grad_check(lambda t, v: t.sum(t.mul(v, v)), x, h=1e-3)
    assert err < 1e-6


def test_grad_check_constant():
    tape = Tape()
    x = tape.input(np.ones((2, 2)), requires_grad=True)
    zero = tape.sum(tape.mul(x, tape.input(np.zeros((2, 2)))))
    assert np.all(tape.backward(zero)[x] == 0)
    assert grad_check(lambda t, v: t.sum(t.mul(v, t.input(np.zeros((2, 2))))), np.ones((2, 2))) == 0.0


def test_grad_check_two_layer_gcn():
    rng = np.random.default_rng(1)
    g = GraphBundle.from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4)], rng.normal(size=(5, 3)),
                               np.array([0, 1, 0, 1, 0]), 2)
    m = init_model(ModelSpec("GCN", hidden_sizes=(4,), dropout=0.0), 3, 2, seed=0)
    op = gcn_normalize(g)

    def loss(t, x):
        return t.nll_loss(t.log_softmax(build_logits(t, m, op, x, bind_params(t, m))), g.labels)

    assert grad_check(loss, g.features.astype(np.float64)) < 1e-4


def test_log_softmax_rows_normalized():
    x = np.random.default_rng(0).normal(size=(6, 5)) * 30
    out = Tape().log_softmax(Tape().input(x))
    assert np.allclose(np.exp(out.value).sum(axis=1), 1.0, atol=1e-9)


def test_dropout_eval_identity_and_train_scaling():
    x = np.random.default_rng(0).normal(size=(4, 4))
    assert np.array_equal(Tape().dropout(Tape().input(x), 0.5).value, x)
    t = Tape(training=True, rng=np.random.default_rng(0))
    out = t.dropout(t.input(np.ones((200, 50))), 0.5).value
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_shape_errors():
    t = Tape()
    with pytest.raises(ShapeMismatchError):
        t.matmul(t.input(np.ones((2, 3))), t.input(np.ones((2, 3))))


# per-op finite-difference checks on random shapes
OPS = {
    "relu": lambda t, x, r: t.sum(t.mul(t.relu(x), t.input(r.normal(size=x.shape)))),
    "matmul": lambda t, x, r: t.sum(t.mul(t.matmul(x, t.input(r.normal(size=(x.shape[1], 3)))),
                                          t.input(r.normal(size=(x.shape[0], 3))))),
    "add_bias": lambda t, x, r: t.sum(t.mul(t.add_bias(x, t.input(r.normal(size=(1, x.shape[1])))), x)),
    "layer_norm": lambda t, x, r: t.sum(t.mul(
        t.layer_norm_rows(x, t.input(r.normal(size=(1, x.shape[1]))), t.input(r.normal(size=(1, x.shape[1])))),
        t.input(r.normal(size=x.shape)))),
    "log_softmax": lambda t, x, r: t.nll_loss(t.log_softmax(x), r.integers(0, x.shape[1], x.shape[0])),
    "margin": lambda t, x, r: t.margin_loss(x, r.integers(0, x.shape[1], x.shape[0])),
    "gather": lambda t, x, r: t.sum(t.mul(t.gather_rows(x, [0, 0, x.shape[0] - 1]),
                                          t.input(r.normal(size=(3, x.shape[1]))))),
    "concat": lambda t, x, r: t.sum(t.mul(t.concat_rows(x, x), t.input(r.normal(size=(2 * x.shape[0], x.shape[1]))))),
    "scale_add": lambda t, x, r: t.sum(t.mul(t.scale_add(x, x, 0.3, -2.0), x)),
    "spmm": lambda t, x, r: t.sum(t.mul(
        t.spmm(sp.random(x.shape[0], x.shape[0], density=0.5, random_state=3, format="csr"), x), x)),
}


@settings(max_examples=8, deadline=None)
@given(op=st.sampled_from(sorted(OPS)), rows=st.integers(2, 5), cols=st.integers(2, 5),
       seed=st.integers(0, 1000))
def test_op_gradients(op, rows, cols, seed):
    x = np.random.default_rng(seed).normal(size=(rows, cols))
    f = lambda t, v: OPS[op](t, v, np.random.default_rng(seed + 1))  # noqa: E731
    assert grad_check(f, x, h=1e-6) < 1e-4
