"""Tape-based reverse-mode differentiation over dense float64 matrices.

Every value on the tape is a 2-D ``float64`` array. Sparse operators enter
only as constant left factors of :meth:`Tape.spmm`; their backward pass
multiplies by the transpose. Broadcasting is limited to adding a 1 x d row
(bias, layer-norm gain) to every row.

Example::

    tape = Tape()
    x = tape.input(np.array([[-1.0, 2.0]]), requires_grad=True)
    loss = tape.sum(tape.relu(x))
    grads = tape.backward(loss)   # grads[x] == [[0., 1.]]
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import NonScalarLossError, ShapeMismatchError, ValidationError

LN_EPS = 1e-5


class Node:
    __slots__ = ("id", "op", "parents", "value", "grad", "requires_grad", "_backward")

    def __init__(self, id, op, parents, value, requires_grad, backward=None):
        self.id = id
        self.op = op
        self.parents = parents
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = backward

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"


def _as2d(value) -> np.ndarray:
    a = np.asarray(value, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeMismatchError(f"tape values must be 2-D, got shape {a.shape}")
    return a


class Tape:
    """Append-only list of nodes in topological order.

    ``training`` enables dropout; ``rng`` drives dropout masks.
    """

    def __init__(self, training: bool = False, rng: np.random.Generator | None = None):
        self.nodes: list[Node] = []
        self.training = training
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def _push(self, op, parents, value, backward) -> Node:
        rg = any(p.requires_grad for p in parents)
        node = Node(len(self.nodes), op, tuple(parents), value, rg, backward if rg else None)
        self.nodes.append(node)
        return node

    # leaves -------------------------------------------------------------------

    def input(self, value, requires_grad: bool = False) -> Node:
        node = Node(len(self.nodes), "input", (), _as2d(value), requires_grad)
        self.nodes.append(node)
        return node

    def param(self, value) -> Node:
        return self.input(value, requires_grad=True)

    # ops ---------------------------------------------------------------------

    def spmm(self, a: sp.spmatrix, x: Node) -> Node:
        if a.shape[1] != x.shape[0]:
            raise ShapeMismatchError(f"spmm: operator {a.shape} vs input {x.shape}")
        value = np.asarray(a @ x.value)

        def backward(g):
            return (np.asarray(a.T @ g),)

        return self._push("spmm", (x,), value, backward)

    def matmul(self, a: Node, b: Node) -> Node:
        if a.shape[1] != b.shape[0]:
            raise ShapeMismatchError(f"matmul: {a.shape} @ {b.shape}")
        av, bv = a.value, b.value

        def backward(g):
            return (
                g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None,
            )

        return self._push("matmul", (a, b), av @ bv, backward)

    def add_bias(self, x: Node, b: Node) -> Node:
        if b.shape != (1, x.shape[1]):
            raise ShapeMismatchError(f"add_bias: bias {b.shape} vs input {x.shape}")

        def backward(g):
            return g, g.sum(axis=0, keepdims=True)

        return self._push("add_bias", (x, b), x.value + b.value, backward)

    def relu(self, x: Node) -> Node:
        mask = x.value > 0

        def backward(g):
            return (g * mask,)

        return self._push("relu", (x,), np.maximum(x.value, 0.0), backward)

    def layer_norm_rows(self, x: Node, gain: Node, bias: Node, eps: float = LN_EPS) -> Node:
        d = x.shape[1]
        if gain.shape != (1, d) or bias.shape != (1, d):
            raise ShapeMismatchError("layer_norm_rows: gain/bias must be 1 x d")
        mu = x.value.mean(axis=1, keepdims=True)
        xc = x.value - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
        xhat = xc * inv
        gv = gain.value

        def backward(g):
            dxhat = g * gv
            dx = inv / d * (
                d * dxhat
                - dxhat.sum(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
            )
            return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

        return self._push("layer_norm_rows", (x, gain, bias), xhat * gv + bias.value, backward)

    def dropout(self, x: Node, rate: float) -> Node:
        if not 0.0 <= rate < 1.0:
            raise ValidationError("dropout rate must lie in [0, 1)")
        if not self.training or rate == 0.0:
            return self._push("dropout", (x,), x.value, lambda g: (g,))
        # inverted scaling: eval mode needs no rescale
        mask = (self.rng.random(x.shape) >= rate) / (1.0 - rate)

        def backward(g):
            return (g * mask,)

        return self._push("dropout", (x,), x.value * mask, backward)

    def log_softmax(self, x: Node) -> Node:
        z = x.value - x.value.max(axis=1, keepdims=True)
        out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        soft = np.exp(out)

        def backward(g):
            return (g - soft * g.sum(axis=1, keepdims=True),)

        return self._push("log_softmax", (x,), out, backward)

    def gather_rows(self, x: Node, index) -> Node:
        idx = np.asarray(index, dtype=np.int64)
        shape = x.shape

        def backward(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return self._push("gather_rows", (x,), x.value[idx], backward)

    def concat_rows(self, *parts: Node) -> Node:
        if len({p.shape[1] for p in parts}) != 1:
            raise ShapeMismatchError("concat_rows: column counts differ")
        bounds = np.cumsum([0] + [p.shape[0] for p in parts])

        def backward(g):
            return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

        return self._push("concat_rows", parts, np.vstack([p.value for p in parts]), backward)

    def scale_add(self, a: Node, b: Node, alpha: float = 1.0, beta: float = 1.0) -> Node:
        """alpha * a + beta * b."""
        if a.shape != b.shape:
            raise ShapeMismatchError(f"scale_add: {a.shape} vs {b.shape}")

        def backward(g):
            return alpha * g, beta * g

        return self._push("scale_add", (a, b), alpha * a.value + beta * b.value, backward)

    def mul(self, a: Node, b: Node) -> Node:
        """Elementwise product."""
        if a.shape != b.shape:
            raise ShapeMismatchError(f"mul: {a.shape} vs {b.shape}")
        av, bv = a.value, b.value

        def backward(g):
            return g * bv, g * av

        return self._push("mul", (a, b), av * bv, backward)

    def sum(self, x: Node) -> Node:
        shape = x.shape

        def backward(g):
            return (np.full(shape, g[0, 0]),)

        return self._push("sum", (x,), np.array([[x.value.sum()]]), backward)

    def nll_loss(self, logp: Node, labels) -> Node:
        """Mean negative log-likelihood of ``labels`` under row log-probabilities."""
        y = np.asarray(labels, dtype=np.int64)
        if y.shape != (logp.shape[0],):
            raise ShapeMismatchError("nll_loss: one label per row required")
        rows = np.arange(y.size)
        n = max(y.size, 1)

        def backward(g):
            out = np.zeros(logp.shape)
            out[rows, y] = -g[0, 0] / n
            return (out,)

        value = -logp.value[rows, y].sum() / n
        return self._push("nll_loss", (logp,), np.array([[value]]), backward)

    def margin_loss(self, logits: Node, labels) -> Node:
        """Sum over rows of max(0, z_label - max_{c != label} z_c)."""
        y = np.asarray(labels, dtype=np.int64)
        rows = np.arange(y.size)
        z = logits.value
        other = z.copy()
        other[rows, y] = -np.inf
        runner = other.argmax(axis=1)
        margin = z[rows, y] - z[rows, runner]
        active = margin > 0

        def backward(g):
            out = np.zeros(z.shape)
            r = rows[active]
            out[r, y[active]] += g[0, 0]
            out[r, runner[active]] -= g[0, 0]
            return (out,)

        value = np.maximum(margin, 0.0).sum()
        return self._push("margin_loss", (logits,), np.array([[value]]), backward)

    # backward ----------------------------------------------------------------

    def backward(self, loss: Node) -> dict[Node, np.ndarray]:
        """Gradients of a 1 x 1 ``loss`` w.r.t. every leaf that requires grad.

        Gradients are zeroed first, so repeated calls give identical results.
        """
        if loss.shape != (1, 1):
            raise NonScalarLossError(f"loss must be 1 x 1, got {loss.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones((1, 1))
        for node in reversed(self.nodes[: loss.id + 1]):
            if node.grad is None or node._backward is None:
                continue
            for parent, g in zip(node.parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                # accumulation never writes in place, so aliasing g is safe
                parent.grad = g if parent.grad is None else parent.grad + g
        return {
            n: (n.grad if n.grad is not None else np.zeros(n.shape))
            for n in self.nodes[: loss.id + 1]
            if n.op == "input" and n.requires_grad
        }


OPS = (
    "spmm", "matmul", "add_bias", "relu", "layer_norm_rows", "dropout", "log_softmax",
    "gather_rows", "concat_rows", "scale_add", "mul", "sum", "nll_loss", "margin_loss",
)


def forward_op(tape: Tape, op: str, parents: Sequence, **params) -> Node:
    """Dispatch ``op`` by name; ``parents`` are nodes (or a sparse operator for spmm)."""
    if op == "input":
        return tape.input(*parents, **params)
    if op not in OPS:
        raise ValidationError(f"unknown op {op!r}")
    return getattr(tape, op)(*parents, **params)


def backward(tape: Tape, loss: Node) -> dict[Node, np.ndarray]:
    return tape.backward(loss)


def grad_check(
    f: Callable[[Tape, Node], Node], x: np.ndarray, h: float = 1e-5
) -> float:
    """Maximum relative error between tape and central-difference gradients.

    ``f(tape, x_node)`` must build a scalar loss deterministically.
    """
    x = _as2d(x).copy()
    tape = Tape()
    xn = tape.input(x, requires_grad=True)
    analytic = tape.backward(f(tape, xn))[xn]

    numeric = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = _eval(f, x)
        x[idx] = orig - h
        down = _eval(f, x)
        x[idx] = orig
        numeric[idx] = (up - down) / (2.0 * h)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-8)
    return float(err.max()) if err.size else 0.0


def _eval(f, x: np.ndarray) -> float:
    tape = Tape()
    return float(f(tape, tape.input(x.copy())).value[0, 0])
