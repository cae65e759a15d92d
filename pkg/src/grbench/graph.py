"""Attributed graph container, bundle persistence and structural edits.

Graphs are undirected and unweighted. The adjacency is kept in canonical
CSR form: symmetric, sorted column indices, no duplicates, no self-loops.
Bundles are immutable; every edit returns a new bundle.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import (
    DuplicateAddError,
    EmptyNeighborhoodError,
    InvalidTargetError,
    IoFailureError,
    LabelOutOfRangeError,
    MissingFileError,
    MissingRemoveError,
    SelfLoopForbiddenError,
    ShapeMismatchError,
    ValidationError,
)

BUNDLE_FILES = ("meta.json", "edges.bin", "features.bin", "labels.bin")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def canonical_csr(num_nodes: int, src: np.ndarray, dst: np.ndarray) -> sp.csr_matrix:
    """Symmetrize, drop self-loops and duplicates; unit weights."""
    src = np.asarray(src, dtype=np.int64).ravel()
    dst = np.asarray(dst, dtype=np.int64).ravel()
    keep = src != dst
    src, dst = src[keep], dst[keep]
    rows = np.concatenate([src, dst])
    cols = np.concatenate([dst, src])
    m = sp.coo_matrix(
        (np.ones(rows.size, dtype=np.float64), (rows, cols)), shape=(num_nodes, num_nodes)
    ).tocsr()
    m.sum_duplicates()
    m.sort_indices()
    m.data[:] = 1.0
    return m


@dataclass(frozen=True, eq=False)
class GraphBundle:
    """Immutable attributed graph.

    ``labels`` may contain the sentinel value ``num_classes`` for nodes whose
    label is unknown (injected nodes, or test nodes hidden from an attacker).
    ``weights`` is ``None`` for ordinary graphs; preprocessing defenses such
    as the low-rank reconstruction produce weighted adjacencies.
    """

    name: str
    num_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    weights: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = self.num_nodes
        if self.indptr.shape != (n + 1,):
            raise ShapeMismatchError(f"indptr has shape {self.indptr.shape}, expected ({n + 1},)")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ShapeMismatchError(
                f"features have shape {self.features.shape}, expected ({n}, D)"
            )
        if self.labels.shape != (n,):
            raise ShapeMismatchError(f"labels have shape {self.labels.shape}, expected ({n},)")
        if n and (self.labels.min() < 0 or self.labels.max() > self.num_classes):
            raise LabelOutOfRangeError(
                f"labels must lie in [0, {self.num_classes}] (sentinel included)"
            )
        object.__setattr__(self, "indptr", _frozen(self.indptr.astype(np.int64, copy=False)))
        object.__setattr__(self, "indices", _frozen(self.indices.astype(np.int64, copy=False)))
        object.__setattr__(self, "features", _frozen(self.features.astype(np.float32, copy=False)))
        object.__setattr__(self, "labels", _frozen(self.labels.astype(np.int64, copy=False)))
        if self.weights is not None:
            object.__setattr__(self, "weights", _frozen(self.weights.astype(np.float64, copy=False)))

    # construction -------------------------------------------------------

    @classmethod
    def from_edges(
        cls,
        num_nodes: int,
        edges: np.ndarray | Sequence[tuple[int, int]],
        features: np.ndarray,
        labels: np.ndarray,
        num_classes: int,
        name: str = "graph",
    ) -> "GraphBundle":
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= num_nodes):
            raise ShapeMismatchError("edge endpoint outside [0, num_nodes)")
        m = canonical_csr(num_nodes, e[:, 0], e[:, 1])
        return cls.from_csr(m, features, labels, num_classes, name)

    @classmethod
    def from_csr(cls, m: sp.csr_matrix, features, labels, num_classes: int, name: str = "graph"):
        return cls(
            name=name,
            num_nodes=m.shape[0],
            indptr=m.indptr,
            indices=m.indices,
            features=np.asarray(features),
            labels=np.asarray(labels),
            num_classes=int(num_classes),
        )

    # views -----------------------------------------------------------------

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        """Number of undirected edges."""
        return int(self.indices.size // 2)

    @property
    def sentinel(self) -> int:
        return self.num_classes

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        data = self.weights if self.weights is not None else np.ones(self.indices.size)
        m = sp.csr_matrix(
            (np.array(data, dtype=np.float64), self.indices.copy(), self.indptr.copy()),
            shape=(self.num_nodes, self.num_nodes),
        )
        return m

    def edge_array(self) -> np.ndarray:
        """Undirected edges as an (|E|, 2) array with u < v, row-major sorted."""
        rows = np.repeat(np.arange(self.num_nodes), np.diff(self.indptr))
        keep = rows < self.indices
        return np.stack([rows[keep], self.indices[keep]], axis=1)

    def edge_set(self) -> set[tuple[int, int]]:
        return set(map(tuple, self.edge_array().tolist()))

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v] : self.indptr[v + 1]]

    def has_edge(self, u: int, v: int) -> bool:
        nb = self.neighbors(u)
        i = np.searchsorted(nb, v)
        return bool(i < nb.size and nb[i] == v)

    def replace(self, **changes) -> "GraphBundle":
        fields = dict(
            name=self.name,
            num_nodes=self.num_nodes,
            indptr=self.indptr,
            indices=self.indices,
            features=self.features,
            labels=self.labels,
            num_classes=self.num_classes,
            weights=self.weights,
            meta=dict(self.meta),
        )
        fields.update(changes)
        return GraphBundle(**fields)

    def with_labels_hidden(self, nodes: Iterable[int]) -> "GraphBundle":
        """Copy with the given nodes' labels replaced by the sentinel."""
        labels = self.labels.copy()
        labels[np.asarray(list(nodes), dtype=np.int64)] = self.sentinel
        return self.replace(labels=labels)

    def subgraph(self, nodes: np.ndarray) -> "GraphBundle":
        """Induced subgraph on ``nodes`` (sorted ascending), relabelled 0..k-1."""
        nodes = np.sort(np.asarray(nodes, dtype=np.int64))
        sub = self.adjacency[nodes][:, nodes].tocsr()
        sub.sort_indices()
        out = GraphBundle(
            name=self.name,
            num_nodes=nodes.size,
            indptr=sub.indptr,
            indices=sub.indices,
            features=self.features[nodes],
            labels=self.labels[nodes],
            num_classes=self.num_classes,
            weights=None if self.weights is None else sub.data,
        )
        return out

    def equals(self, other: "GraphBundle") -> bool:
        """Bit-exact equality of all arrays and scalar fields."""
        if (self.num_nodes, self.num_classes, self.name) != (
            other.num_nodes,
            other.num_classes,
            other.name,
        ):
            return False
        if (self.weights is None) != (other.weights is None):
            return False
        pairs = [
            (self.indptr, other.indptr),
            (self.indices, other.indices),
            (self.features, other.features),
            (self.labels, other.labels),
        ]
        if self.weights is not None:
            pairs.append((self.weights, other.weights))
        return all(a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes() for a, b in pairs)


def degrees(g: GraphBundle) -> np.ndarray:
    """Number of distinct neighbours of every node."""
    return np.diff(g.indptr).astype(np.int64)


# persistence -----------------------------------------------------------------


def load_bundle(path: str | os.PathLike) -> GraphBundle:
    """Read a bundle directory (meta.json, edges.bin, features.bin, labels.bin).

    Edges are symmetrized, deduplicated and stripped of self-loops, so the
    loaded ``num_edges`` can be lower than the count stored in meta.json.
    """
    root = Path(path)
    for fname in BUNDLE_FILES:
        if not (root / fname).is_file():
            raise MissingFileError(f"{root / fname} not found")
    meta = json.loads((root / "meta.json").read_text(encoding="utf-8"))
    try:
        n = int(meta["num_nodes"])
        n_edges = int(meta["num_edges"])
        d = int(meta["num_features"])
        n_classes = int(meta["num_classes"])
    except KeyError as exc:
        raise ShapeMismatchError(f"meta.json lacks field {exc}") from None

    edges = np.fromfile(root / "edges.bin", dtype="<u4")
    if edges.size % 2:
        raise ShapeMismatchError("edges.bin does not hold whole u32 pairs")
    edges = edges.reshape(-1, 2).astype(np.int64)
    if edges.shape[0] != n_edges:
        raise ShapeMismatchError(f"meta says {n_edges} edges, edges.bin holds {edges.shape[0]}")
    if edges.size and edges.max() >= n:
        raise ShapeMismatchError("edge endpoint outside [0, num_nodes)")

    feats = np.fromfile(root / "features.bin", dtype="<f4")
    if feats.size != n * d:
        raise ShapeMismatchError(f"features.bin holds {feats.size} values, expected {n}x{d}")
    labels = np.fromfile(root / "labels.bin", dtype="<u4").astype(np.int64)
    if labels.size != n:
        raise ShapeMismatchError(f"labels.bin holds {labels.size} values, expected {n}")
    if n and labels.max() >= n_classes:
        raise LabelOutOfRangeError(f"label {labels.max()} >= num_classes {n_classes}")

    m = canonical_csr(n, edges[:, 0], edges[:, 1])
    g = GraphBundle.from_csr(
        m, feats.reshape(n, d).astype(np.float32), labels, n_classes, str(meta.get("name", root.name))
    )
    return g


def save_bundle(g: GraphBundle, path: str | os.PathLike) -> None:
    if g.weights is not None:
        raise ValidationError("weighted graphs cannot be stored as bundles")
    if g.num_nodes and g.labels.max() >= g.num_classes:
        raise LabelOutOfRangeError("bundle labels must not contain the sentinel")
    root = Path(path)
    edges = g.edge_array()
    meta = {
        "name": g.name,
        "num_nodes": g.num_nodes,
        "num_edges": int(edges.shape[0]),
        "num_features": g.num_features,
        "num_classes": g.num_classes,
        "edge_storage": "undirected",
    }
    try:
        root.mkdir(parents=True, exist_ok=True)
        (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
        edges.astype("<u4").tofile(root / "edges.bin")
        g.features.astype("<f4").tofile(root / "features.bin")
        g.labels.astype("<u4").tofile(root / "labels.bin")
    except OSError as exc:
        raise IoFailureError(f"cannot write bundle to {root}: {exc}") from exc


# edits -------------------------------------------------------------------


@dataclass(frozen=True)
class EdgeEdit:
    kind: Literal["add", "remove"]
    u: int
    v: int

    @property
    def key(self) -> tuple[int, int]:
        return (self.u, self.v) if self.u < self.v else (self.v, self.u)


def apply_edits(g: GraphBundle, edits: Sequence[EdgeEdit]) -> GraphBundle:
    """Apply edge additions/removals in order and return a new bundle."""
    if not edits:
        return g
    current = g.edge_set()
    n = g.num_nodes
    for e in edits:
        if not (0 <= e.u < n and 0 <= e.v < n):
            raise InvalidTargetError(f"edit {e} references a node outside [0, {n})")
        if e.u == e.v:
            raise SelfLoopForbiddenError(f"edit {e} is a self-loop")
        if e.kind == "add":
            if e.key in current:
                raise DuplicateAddError(f"edge {e.key} already present")
            current.add(e.key)
        elif e.kind == "remove":
            if e.key not in current:
                raise MissingRemoveError(f"edge {e.key} not present")
            current.remove(e.key)
        else:
            raise ValidationError(f"unknown edit kind {e.kind!r}")
    arr = np.array(sorted(current), dtype=np.int64).reshape(-1, 2)
    m = canonical_csr(n, arr[:, 0], arr[:, 1])
    return g.replace(indptr=m.indptr, indices=m.indices, weights=None)


@dataclass(frozen=True, eq=False)
class InjectionPatch:
    """Nodes to append to a host graph.

    ``edges`` rows are (injected index, host node id); ``internal_edges`` rows
    are (injected index, injected index).
    """

    num_injected: int
    features: np.ndarray
    edges: np.ndarray
    internal_edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self) -> None:
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float32))
        object.__setattr__(self, "edges", np.asarray(self.edges, dtype=np.int64).reshape(-1, 2))
        object.__setattr__(
            self, "internal_edges", np.asarray(self.internal_edges, dtype=np.int64).reshape(-1, 2)
        )
        if self.features.shape[0] != self.num_injected:
            raise ShapeMismatchError("injected feature rows must equal num_injected")

    @classmethod
    def empty(cls, num_features: int) -> "InjectionPatch":
        return cls(0, np.zeros((0, num_features), np.float32), np.zeros((0, 2), np.int64))

    def injected_degrees(self) -> np.ndarray:
        """Distinct-neighbour count of each injected node."""
        n = self.num_injected
        deg = np.zeros(n, dtype=np.int64)
        host = {tuple(p) for p in self.edges.tolist()}
        for i, _ in host:
            deg[i] += 1
        internal = {(min(a, b), max(a, b)) for a, b in self.internal_edges.tolist() if a != b}
        for a, b in internal:
            deg[a] += 1
            deg[b] += 1
        return deg


def apply_injection(g: GraphBundle, patch: InjectionPatch) -> GraphBundle:
    """Append injected nodes. Original rows and edges are kept verbatim.

    Injected nodes get the sentinel label ``g.num_classes``.
    """
    k = patch.num_injected
    if k == 0:
        return g
    n = g.num_nodes
    if patch.features.shape[1] != g.num_features:
        raise ShapeMismatchError(
            f"injected features have {patch.features.shape[1]} columns, host has {g.num_features}"
        )
    e, ie = patch.edges, patch.internal_edges
    if e.size and (e[:, 1].min() < 0 or e[:, 1].max() >= n):
        raise InvalidTargetError("injected edge targets a node outside the host graph")
    if (e.size and (e[:, 0].min() < 0 or e[:, 0].max() >= k)) or (
        ie.size and (ie.min() < 0 or ie.max() >= k)
    ):
        raise InvalidTargetError("injected index outside [0, num_injected)")
    if ie.size and np.any(ie[:, 0] == ie[:, 1]):
        raise SelfLoopForbiddenError("injected node wired to itself")
    touched = np.zeros(k, dtype=bool)
    touched[e[:, 0]] = True
    touched[ie.ravel()] = True
    if not touched.all():
        raise EmptyNeighborhoodError(f"injected node {int(np.argmin(touched))} has no edges")

    base = g.adjacency.tocoo()
    src = np.concatenate([base.row, e[:, 0] + n, ie[:, 0] + n])
    dst = np.concatenate([base.col, e[:, 1], ie[:, 1] + n])
    m = canonical_csr(n + k, src, dst)
    feats = np.vstack([g.features, patch.features])
    labels = np.concatenate([g.labels, np.full(k, g.sentinel, dtype=np.int64)])
    return GraphBundle.from_csr(m, feats, labels, g.num_classes, g.name)
