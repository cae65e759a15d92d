"""GNN model zoo built on the tape: GCN, SGC, TAGCN, APPNP, GIN, GraphSAGE.

A model is a :class:`ModelSpec` plus a dict of named float64 parameter
matrices. Forward passes are pure functions of (model, operator, features).
"""

from __future__ import annotations

import json
import struct
import weakref
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .autodiff import Node, Tape
from .errors import IoFailureError, ShapeMismatchError, ValidationError
from .graph import GraphBundle

ARCHS = ("GCN", "SGC", "TAGCN", "APPNP", "GIN", "SAGE")

_DEFAULT_K = {"SGC": 4, "TAGCN": 2, "APPNP": 10}


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "GCN"
    hidden_sizes: tuple[int, ...] = (64, 64, 64)
    with_layer_norm: bool = False
    dropout: float = 0.5
    k: int | None = None
    alpha: float = 0.01

    def __post_init__(self) -> None:
        if self.arch not in ARCHS:
            raise ValidationError(f"unknown architecture {self.arch!r}; choose from {ARCHS}")
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ValidationError("hidden_sizes must be a non-empty list of positive widths")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must lie in [0, 1)")
        if self.k is None:
            object.__setattr__(self, "k", _DEFAULT_K.get(self.arch, 1))
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError("alpha must lie in [0, 1]")

    @classmethod
    def default(cls, arch: str, with_layer_norm: bool = False) -> "ModelSpec":
        hidden = (64,) if arch == "APPNP" else (64, 64, 64)
        return cls(arch=arch, hidden_sizes=hidden, with_layer_norm=with_layer_norm)

    @property
    def label(self) -> str:
        return self.arch + ("+LN" if self.with_layer_norm else "")

    def to_json(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelSpec":
        return cls(**{**d, "hidden_sizes": tuple(d["hidden_sizes"])})


@dataclass(eq=False)
class TrainedModel:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    input_dim: int
    output_dim: int
    seed: int = 0
    name: str = ""
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        if not self.name:
            self.name = self.spec.label
        expected = param_shapes(self.spec, self.input_dim, self.output_dim)
        if set(expected) != set(self.params):
            raise ShapeMismatchError("parameter names do not match the model spec")
        for k, shape in expected.items():
            if self.params[k].shape != shape:
                raise ShapeMismatchError(f"{k}: expected {shape}, got {self.params[k].shape}")

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))


# parameters -----------------------------------------------------------------


def _dims(spec: ModelSpec, d: int, n_out: int) -> list[int]:
    return [d, *spec.hidden_sizes, n_out]


def param_shapes(spec: ModelSpec, d: int, n_out: int) -> dict[str, tuple[int, int]]:
    shapes: dict[str, tuple[int, int]] = {}
    dims = _dims(spec, d, n_out)
    n_layers = len(dims) - 1
    a = spec.arch
    if a == "SGC":
        shapes["W0"] = (d, n_out)
        shapes["b0"] = (1, n_out)
    else:
        for i in range(n_layers):
            fi, fo = dims[i], dims[i + 1]
            if a in ("GCN", "APPNP"):
                shapes[f"W{i}"] = (fi, fo)
            elif a == "TAGCN":
                for j in range(spec.k + 1):
                    shapes[f"W{i}_{j}"] = (fi, fo)
            elif a == "SAGE":
                shapes[f"W{i}_self"] = (fi, fo)
                shapes[f"W{i}_neigh"] = (fi, fo)
            elif a == "GIN":
                shapes[f"W{i}"] = (fi, fo)
                if i < n_layers - 1:
                    shapes[f"W{i}_mlp"] = (fo, fo)
                    shapes[f"b{i}_mlp"] = (1, fo)
            shapes[f"b{i}"] = (1, fo)
    if spec.with_layer_norm:
        shapes["ln_in_gain"] = (1, d)
        shapes["ln_in_bias"] = (1, d)
        if a != "SGC":
            for i in range(n_layers - 1):
                shapes[f"ln{i}_gain"] = (1, dims[i + 1])
                shapes[f"ln{i}_bias"] = (1, dims[i + 1])
    return shapes


def init_model(spec: ModelSpec, input_dim: int, output_dim: int, seed: int = 0) -> TrainedModel:
    """Glorot-uniform weights, zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(spec, input_dim, output_dim).items():
        if name.endswith("_gain"):
            params[name] = np.ones(shape)
        elif name.startswith("W"):
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
        else:
            params[name] = np.zeros(shape)
    return TrainedModel(spec, params, input_dim, output_dim, seed)


# operators --------------------------------------------------------------------


def gcn_normalize(g: GraphBundle) -> sp.csr_matrix:
    """D^{-1/2} (A + I) D^{-1/2} with D the degree matrix of A + I."""
    a = g.adjacency + sp.identity(g.num_nodes, format="csr")
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv = np.zeros_like(deg)
    pos = deg > 0
    inv[pos] = deg[pos] ** -0.5
    s = sp.diags(inv)
    out = (s @ a @ s).tocsr()
    out.sort_indices()
    return out


def mean_normalize(g: GraphBundle) -> sp.csr_matrix:
    """D^{-1} (A + I): mean over the closed neighbourhood."""
    a = g.adjacency + sp.identity(g.num_nodes, format="csr")
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv = np.zeros_like(deg)
    pos = deg != 0
    inv[pos] = 1.0 / deg[pos]
    out = (sp.diags(inv) @ a).tocsr()
    out.sort_indices()
    return out


def sum_operator(g: GraphBundle) -> sp.csr_matrix:
    """Plain adjacency (sum aggregation, no self-loops)."""
    return g.adjacency.copy()


_OPERATORS = {
    "GCN": gcn_normalize,
    "SGC": gcn_normalize,
    "TAGCN": gcn_normalize,
    "APPNP": gcn_normalize,
    "SAGE": mean_normalize,
    "GIN": sum_operator,
}
_op_cache: "weakref.WeakKeyDictionary[GraphBundle, dict]" = weakref.WeakKeyDictionary()


def propagation_operator(arch: str, g: GraphBundle) -> sp.csr_matrix:
    """Operator used by ``arch``; cached per (immutable) graph."""
    fn = _OPERATORS[arch]
    per_graph = _op_cache.setdefault(g, {})
    if fn.__name__ not in per_graph:
        per_graph[fn.__name__] = fn(g)
    return per_graph[fn.__name__]


# forward ----------------------------------------------------------------------


def bind_params(tape: Tape, m: TrainedModel, requires_grad: bool = False) -> dict[str, Node]:
    return {k: tape.input(v, requires_grad=requires_grad) for k, v in m.params.items()}


def _propagate(tape: Tape, op, h: Node) -> Node:
    # a dense operator on the tape (used for adjacency gradients) or a sparse constant
    if isinstance(op, Node):
        return tape.matmul(op, h)
    return tape.spmm(op, h)


def _linear(tape: Tape, h: Node, w: Node, b: Node | None = None) -> Node:
    out = tape.matmul(h, w)
    return tape.add_bias(out, b) if b is not None else out


def input_stage(tape: Tape, m: TrainedModel, x: Node, p: dict[str, Node]) -> Node:
    """Row-wise computation that precedes the first propagation.

    Rows of the result depend only on the matching rows of ``x``, so callers
    that vary a few rows may evaluate the rest once and concatenate. Covers
    the input layer norm, plus the first weight product for GCN and the
    whole MLP for APPNP.
    """
    if x.shape[1] != m.input_dim:
        raise ShapeMismatchError(f"features have {x.shape[1]} columns, expected {m.input_dim}")
    spec = m.spec
    h = x
    if spec.with_layer_norm:
        h = tape.layer_norm_rows(h, p["ln_in_gain"], p["ln_in_bias"])
    if spec.arch == "GCN":
        h = tape.matmul(h, p["W0"])
    elif spec.arch == "APPNP":
        n_layers = len(spec.hidden_sizes) + 1
        for i in range(n_layers):
            h = _linear(tape, h, p[f"W{i}"], p[f"b{i}"])
            if i < n_layers - 1:
                h = _between(tape, h, p, i, spec.with_layer_norm, spec.dropout)
    return h


def build_logits(tape: Tape, m: TrainedModel, op, x: Node, p: dict[str, Node], staged: bool = False) -> Node:
    """Append the forward pass of ``m`` to ``tape`` and return the logits node.

    With ``staged=True``, ``x`` is the output of :func:`input_stage` rather
    than raw features.
    """
    spec = m.spec
    n = op.shape[0]
    if x.shape[0] != n:
        raise ShapeMismatchError(f"features have {x.shape[0]} rows, operator has {n}")
    h = x if staged else input_stage(tape, m, x, p)
    a = spec.arch

    if a == "SGC":
        for _ in range(spec.k):
            h = _propagate(tape, op, h)
        h = tape.dropout(h, spec.dropout)
        return _linear(tape, h, p["W0"], p["b0"])

    n_layers = len(spec.hidden_sizes) + 1
    if a == "APPNP":
        z = h
        for _ in range(spec.k):
            z = tape.scale_add(_propagate(tape, op, z), h, 1.0 - spec.alpha, spec.alpha)
        return z

    ln = spec.with_layer_norm
    for i in range(n_layers):
        last = i == n_layers - 1
        if a == "GCN":
            hw = h if i == 0 else tape.matmul(h, p[f"W{i}"])
            h = tape.add_bias(_propagate(tape, op, hw), p[f"b{i}"])
        elif a == "TAGCN":
            hop = h
            acc = tape.matmul(hop, p[f"W{i}_0"])
            for j in range(1, spec.k + 1):
                hop = _propagate(tape, op, hop)
                acc = tape.scale_add(acc, tape.matmul(hop, p[f"W{i}_{j}"]))
            h = tape.add_bias(acc, p[f"b{i}"])
        elif a == "SAGE":
            neigh = tape.matmul(_propagate(tape, op, h), p[f"W{i}_neigh"])
            h = tape.add_bias(tape.scale_add(tape.matmul(h, p[f"W{i}_self"]), neigh), p[f"b{i}"])
        elif a == "GIN":
            # eps = 0: (1 + eps) h + sum of neighbours
            agg = tape.scale_add(h, _propagate(tape, op, h))
            h = _linear(tape, agg, p[f"W{i}"], p[f"b{i}"])
            if not last:
                h = _linear(tape, tape.relu(h), p[f"W{i}_mlp"], p[f"b{i}_mlp"])
        if not last:
            h = _between(tape, h, p, i, ln, spec.dropout)
    return h


def _between(tape: Tape, h: Node, p: dict, i: int, ln: bool, rate: float) -> Node:
    if ln:
        h = tape.layer_norm_rows(h, p[f"ln{i}_gain"], p[f"ln{i}_bias"])
    return tape.dropout(tape.relu(h), rate)


def forward_logits(
    m: TrainedModel,
    op,
    x: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    tape = Tape(training=training, rng=rng)
    out = build_logits(tape, m, op, tape.input(x), bind_params(tape, m))
    return out.value


def logits_on(m: TrainedModel, g: GraphBundle) -> np.ndarray:
    return forward_logits(m, propagation_operator(m.spec.arch, g), g.features)


def predict(m: TrainedModel, g: GraphBundle) -> np.ndarray:
    """Row-wise argmax in eval mode; ties go to the lowest class id."""
    return np.argmax(logits_on(m, g), axis=1)


# checkpoints -------------------------------------------------------------------

MAGIC = b"GRBM1\n"


def save_model(m: TrainedModel, path) -> None:
    names = sorted(m.params)
    header = {
        "format": "GRBM1",
        "spec": m.spec.to_json(),
        "input_dim": m.input_dim,
        "output_dim": m.output_dim,
        "seed": m.seed,
        "name": m.name,
        "shapes": [[k, list(m.params[k].shape)] for k in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for k in names:
                fh.write(m.params[k].astype("<f4").tobytes())
    except OSError as exc:
        raise IoFailureError(f"cannot write checkpoint {path}: {exc}") from exc


def load_model(path) -> TrainedModel:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValidationError(f"{path} is not a GRBM1 checkpoint")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    params = {}
    for k, shape in header["shapes"]:
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos)
        params[k] = arr.reshape(shape).astype(np.float64)
        pos += 4 * count
    return TrainedModel(
        ModelSpec.from_json(header["spec"]),
        params,
        header["input_dim"],
        header["output_dim"],
        header["seed"],
        header.get("name", ""),
    )
