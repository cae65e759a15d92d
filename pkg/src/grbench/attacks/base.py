"""Attack context/result types, budget checking and result persistence."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..data import AttackBudget
from ..errors import GRBError, IoFailureError, ValidationError
from ..graph import EdgeEdit, GraphBundle, InjectionPatch, apply_edits, apply_injection
from ..models import TrainedModel, predict


@dataclass(frozen=True, eq=False)
class AttackContext:
    """Everything an attacker may use.

    ``host`` should have test-node labels hidden (see
    :meth:`GraphBundle.with_labels_hidden`); only ``surrogate`` is queried.
    """

    surrogate: TrainedModel
    host: GraphBundle
    targets: np.ndarray
    budget: AttackBudget
    seed: int = 0

    def __post_init__(self) -> None:
        t = np.unique(np.asarray(self.targets, dtype=np.int64))
        if t.size == 0:
            raise ValidationError("attack needs at least one target")
        if t.min() < 0 or t.max() >= self.host.num_nodes:
            raise ValidationError("target outside host graph")
        if self.surrogate.input_dim != self.host.num_features:
            raise ValidationError("surrogate input dimension does not match host features")
        object.__setattr__(self, "targets", t)

    def rng(self, stream: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.seed, stream])

    def pseudo_labels(self) -> np.ndarray:
        """Known labels where visible, surrogate predictions elsewhere."""
        pred = predict(self.surrogate, self.host)
        known = self.host.labels < self.host.sentinel
        return np.where(known, self.host.labels, pred)


@dataclass(eq=False)
class AttackResult:
    scenario: str
    method: str
    edits: list[EdgeEdit] = field(default_factory=list)
    patch: InjectionPatch | None = None
    feature_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    feature_rows: np.ndarray | None = None
    surrogate_accuracy_after: float = float("nan")
    iterations_used: int = 0
    exhausted: bool = False
    loss_trace: list[float] = field(default_factory=list, repr=False)
    seed: int = 0

    @property
    def perturbs_features(self) -> bool:
        return self.feature_rows is not None and self.feature_nodes.size > 0

    def equals(self, other: "AttackResult") -> bool:
        if (self.scenario, self.method, self.iterations_used) != (
            other.scenario, other.method, other.iterations_used,
        ):
            return False
        if [(e.kind, e.u, e.v) for e in self.edits] != [(e.kind, e.u, e.v) for e in other.edits]:
            return False
        if (self.patch is None) != (other.patch is None):
            return False
        if self.patch is not None:
            a, b = self.patch, other.patch
            if a.num_injected != b.num_injected:
                return False
            for x, y in ((a.features, b.features), (a.edges, b.edges), (a.internal_edges, b.internal_edges)):
                if x.shape != y.shape or x.tobytes() != y.tobytes():
                    return False
        if self.feature_nodes.tobytes() != other.feature_nodes.tobytes():
            return False
        if (self.feature_rows is None) != (other.feature_rows is None):
            return False
        return self.feature_rows is None or self.feature_rows.tobytes() == other.feature_rows.tobytes()


def perturbed_graph(host: GraphBundle, result: AttackResult) -> GraphBundle:
    """Apply an attack payload to a (label-complete) host graph."""
    if result.scenario == "injection":
        return apply_injection(host, result.patch) if result.patch is not None else host
    g = apply_edits(host, result.edits)
    if result.perturbs_features:
        feats = g.features.copy()
        feats[result.feature_nodes] = result.feature_rows
        g = g.replace(features=feats)
    return g


def _in_range(values: np.ndarray, budget: AttackBudget) -> bool:
    # exact float64 comparison against the declared bounds
    v = np.asarray(values, dtype=np.float32).astype(np.float64)
    return bool(np.all(v >= float(budget.feature_min)) and np.all(v <= float(budget.feature_max)))


def check_budget(original: GraphBundle, result: AttackResult, budget: AttackBudget) -> list[str]:
    """List every budget violation of ``result``; empty means compliant."""
    out: list[str] = []
    n = original.num_nodes
    if result.scenario != budget.scenario:
        return [f"scenario: result is {result.scenario}, budget is {budget.scenario}"]

    if result.scenario == "injection":
        if result.edits:
            out.append("original edges: injection results must not edit existing edges")
        if result.perturbs_features:
            out.append("original features: injection results must not modify existing rows")
        p = result.patch
        if p is None:
            return out
        if p.num_injected > budget.max_injected:
            out.append(f"node count: {p.num_injected} injected > limit {budget.max_injected}")
        if p.features.shape != (p.num_injected, original.num_features):
            out.append("feature shape: injected feature matrix has wrong shape")
        elif p.num_injected and not _in_range(p.features, budget):
            out.append(
                f"feature range: injected values outside [{budget.feature_min}, {budget.feature_max}]"
            )
        e, ie = p.edges, p.internal_edges
        if e.size and (e[:, 1].min() < 0 or e[:, 1].max() >= n):
            out.append("targets: edge to a node outside the host graph")
        if (e.size and (e[:, 0].min() < 0 or e[:, 0].max() >= p.num_injected)) or (
            ie.size and (ie.min() < 0 or ie.max() >= p.num_injected)
        ):
            out.append("injected index: edge references a non-existent injected node")
            return out
        if ie.size and np.any(ie[:, 0] == ie[:, 1]):
            out.append("self-loop: injected node wired to itself")
        deg = p.injected_degrees()
        if np.any(deg > budget.max_edges):
            worst = int(deg.max())
            out.append(f"edge count: injected node with {worst} edges > limit {budget.max_edges}")
        if np.any(deg == 0):
            out.append("isolated: injected node without edges")
        return out

    limit = budget.edge_limit(original.num_edges)
    if result.patch is not None and result.patch.num_injected:
        out.append("injection: modification results must not inject nodes")
    if len(result.edits) > limit:
        out.append(f"edit count: {len(result.edits)} edits > limit {limit}")
    try:
        apply_edits(original, result.edits)
    except GRBError as exc:
        out.append(f"invalid edit: {exc}")
    if result.feature_rows is not None:
        nodes = result.feature_nodes
        if nodes.size and (nodes.min() < 0 or nodes.max() >= n or np.unique(nodes).size != nodes.size):
            out.append("feature nodes: invalid or repeated node ids")
        if result.feature_rows.shape != (nodes.size, original.num_features):
            out.append("feature shape: perturbed rows have wrong shape")
        elif nodes.size and not _in_range(result.feature_rows, budget):
            out.append(
                f"feature range: perturbed values outside [{budget.feature_min}, {budget.feature_max}]"
            )
    return out


# persistence ---------------------------------------------------------------

MANIFEST = "attack.json"
BLOB = "attack.bin"


def save_attack(result: AttackResult, path: str | os.PathLike, extra: dict | None = None) -> None:
    """Write a GRBA1 artifact: JSON manifest plus a float32 feature blob."""
    root = Path(path)
    manifest = {
        "format": "GRBA1",
        "scenario": result.scenario,
        "method": result.method,
        "seed": result.seed,
        "iterations_used": result.iterations_used,
        "surrogate_accuracy_after": result.surrogate_accuracy_after,
        "exhausted": result.exhausted,
        "edits": [[e.kind, e.u, e.v] for e in result.edits],
        "loss_trace": result.loss_trace,
    }
    blobs = []
    if result.patch is not None:
        p = result.patch
        manifest["injection"] = {
            "num_injected": p.num_injected,
            "num_features": int(p.features.shape[1]),
            "edges": p.edges.tolist(),
            "internal_edges": p.internal_edges.tolist(),
        }
        blobs.append(p.features)
    if result.feature_rows is not None:
        manifest["feature_nodes"] = result.feature_nodes.tolist()
        manifest["feature_row_shape"] = list(result.feature_rows.shape)
        blobs.append(np.asarray(result.feature_rows, dtype=np.float32))
    if extra:
        manifest.update(extra)
    try:
        root.mkdir(parents=True, exist_ok=True)
        (root / MANIFEST).write_text(json.dumps(manifest, sort_keys=True) + "\n", encoding="utf-8")
        with open(root / BLOB, "wb") as fh:
            for b in blobs:
                fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
    except OSError as exc:
        raise IoFailureError(f"cannot write attack artifact to {root}: {exc}") from exc


def load_attack(path: str | os.PathLike) -> AttackResult:
    root = Path(path)
    manifest = json.loads((root / MANIFEST).read_text(encoding="utf-8"))
    if manifest.get("format") != "GRBA1":
        raise ValidationError(f"{root} is not a GRBA1 artifact")
    blob = np.fromfile(root / BLOB, dtype="<f4")
    pos = 0
    patch = None
    if "injection" in manifest:
        inj = manifest["injection"]
        k, d = inj["num_injected"], inj["num_features"]
        feats = blob[pos : pos + k * d].reshape(k, d).astype(np.float32)
        pos += k * d
        patch = InjectionPatch(
            k,
            feats,
            np.array(inj["edges"], dtype=np.int64).reshape(-1, 2),
            np.array(inj["internal_edges"], dtype=np.int64).reshape(-1, 2),
        )
    nodes = np.zeros(0, np.int64)
    rows = None
    if "feature_nodes" in manifest:
        nodes = np.array(manifest["feature_nodes"], dtype=np.int64)
        shape = manifest["feature_row_shape"]
        size = int(np.prod(shape))
        rows = blob[pos : pos + size].reshape(shape).astype(np.float32)
    return AttackResult(
        scenario=manifest["scenario"],
        method=manifest["method"],
        edits=[EdgeEdit(k, int(u), int(v)) for k, u, v in manifest["edits"]],
        patch=patch,
        feature_nodes=nodes,
        feature_rows=rows,
        surrogate_accuracy_after=manifest["surrogate_accuracy_after"],
        iterations_used=manifest["iterations_used"],
        exhausted=manifest["exhausted"],
        loss_trace=manifest["loss_trace"],
        seed=manifest["seed"],
    )


def surrogate_agreement(ctx: AttackContext, perturbed: GraphBundle, reference: np.ndarray) -> float:
    """Fraction of targets whose surrogate prediction is unchanged."""
    pred = predict(ctx.surrogate, perturbed)
    return float(np.mean(pred[ctx.targets] == reference[ctx.targets]))
