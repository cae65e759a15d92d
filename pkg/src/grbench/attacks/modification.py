"""Graph-modification attacks: RND, DICE, FLIP, FGA and PGD.

Every structural edit touches at least one target and no node pair is
edited twice. A method that runs out of eligible edits returns what it has
with ``exhausted`` set.
"""

from __future__ import annotations

import numpy as np

from ..autodiff import Tape
from ..errors import GradientUnavailableError, TooLargeForDenseError, ValidationError
from ..graph import EdgeEdit, GraphBundle, apply_edits, degrees
from ..models import bind_params, build_logits, predict, propagation_operator
from .base import AttackContext, AttackResult, check_budget, surrogate_agreement
from .injection import clip_features, pgd_ascent

FGA_RECOMPUTE = 10
FGA_MAX_NODES = 20000
# methods allowed to rewrite feature rows of existing nodes
PERTURBS_FEATURES = {"rnd": False, "dice": False, "flip": False, "fga": False, "pgd": True}


def _require_modification(ctx: AttackContext) -> None:
    if ctx.budget.scenario != "modification":
        raise ValidationError("modification attack needs a modification budget")


def _pair(u: int, v: int) -> tuple[int, int]:
    return (u, v) if u < v else (v, u)


def _candidate_pairs(n: int, k: int) -> int:
    """Distinct unordered pairs with at least one endpoint among k targets."""
    return k * (n - 1) - k * (k - 1) // 2


def _finish(ctx, method, edits, exhausted, reference, feature_nodes=None, feature_rows=None,
            iterations=0, trace=()) -> AttackResult:
    result = AttackResult(
        scenario="modification",
        method=method,
        edits=list(edits),
        exhausted=exhausted,
        iterations_used=iterations,
        loss_trace=[float(v) for v in trace],
        seed=ctx.seed,
    )
    g = apply_edits(ctx.host, result.edits)
    if feature_rows is not None:
        result.feature_nodes = np.asarray(feature_nodes, dtype=np.int64)
        result.feature_rows = np.asarray(feature_rows, dtype=np.float32)
        if result.perturbs_features:
            x = g.features.copy()
            x[result.feature_nodes] = result.feature_rows
            g = g.replace(features=x)
    result.surrogate_accuracy_after = surrogate_agreement(ctx, g, reference)
    violations = check_budget(ctx.host, result, ctx.budget)
    if violations:  # pragma: no cover - construction guarantees compliance
        raise AssertionError(f"{method} produced an over-budget payload: {violations}")
    return result


def random_flips(ctx: AttackContext, rng: np.random.Generator) -> tuple[list[EdgeEdit], bool]:
    """Uniform flips of distinct target-incident pairs, up to the edit limit."""
    g = ctx.host
    n = g.num_nodes
    limit = ctx.budget.edge_limit(g.num_edges)
    available = _candidate_pairs(n, ctx.targets.size)
    count = min(limit, available)
    edges = g.edge_set()
    seen: set[tuple[int, int]] = set()
    out = []
    while len(out) < count:
        t = int(rng.choice(ctx.targets))
        v = int(rng.integers(n))
        if v == t:
            continue
        key = _pair(t, v)
        if key in seen:
            continue
        seen.add(key)
        out.append(EdgeEdit("remove" if key in edges else "add", *key))
    return out, count < limit


def _dice(ctx: AttackContext, rng: np.random.Generator) -> tuple[list[EdgeEdit], bool]:
    g = ctx.host
    n = g.num_nodes
    labels = ctx.pseudo_labels()
    limit = ctx.budget.edge_limit(g.num_edges)
    is_target = np.zeros(n, dtype=bool)
    is_target[ctx.targets] = True

    e = g.edge_array()
    incident = is_target[e[:, 0]] | is_target[e[:, 1]]
    intra = e[incident & (labels[e[:, 0]] == labels[e[:, 1]])]
    deletions = [tuple(map(int, p)) for p in intra[rng.permutation(len(intra))]]

    edges = g.edge_set()
    touched: set[tuple[int, int]] = set()
    additions: list[tuple[int, int]] | None = None  # built lazily when sampling stalls

    def next_addition():
        nonlocal additions
        if additions is None:
            for _ in range(200):
                t = int(rng.choice(ctx.targets))
                v = int(rng.integers(n))
                key = _pair(t, v)
                if v != t and labels[t] != labels[v] and key not in edges and key not in touched:
                    return key
            pool = set()
            for t in ctx.targets:
                for v in np.flatnonzero(labels != labels[t]):
                    key = _pair(int(t), int(v))
                    if key not in edges:
                        pool.add(key)
            additions = sorted(pool)
            additions = [additions[i] for i in rng.permutation(len(additions))]
        while additions:
            key = additions.pop()
            if key not in touched:
                return key
        return None

    out = []
    while len(out) < limit:
        want_delete = rng.random() < 0.5
        key = None
        kind = "remove" if want_delete else "add"
        if want_delete:
            while deletions and deletions[-1] in touched:
                deletions.pop()
            key = deletions.pop() if deletions else None
        else:
            key = next_addition()
        if key is None:
            # fall back to the other operation
            if want_delete:
                key, kind = next_addition(), "add"
            else:
                while deletions and deletions[-1] in touched:
                    deletions.pop()
                key, kind = (deletions.pop() if deletions else None), "remove"
        if key is None:
            return out, True
        touched.add(key)
        out.append(EdgeEdit(kind, *key))
    return out, False


def _flip(ctx: AttackContext) -> tuple[list[EdgeEdit], bool]:
    g = ctx.host
    deg = degrees(g)
    limit = ctx.budget.edge_limit(g.num_edges)
    order = ctx.targets[np.lexsort((ctx.targets, deg[ctx.targets]))]
    removed: set[tuple[int, int]] = set()
    out = []
    for t in order:
        nbrs = g.neighbors(int(t))
        higher = nbrs[deg[nbrs] > deg[t]]
        for v in higher[np.lexsort((higher, deg[higher]))]:
            if len(out) >= limit:
                return out, False
            key = _pair(int(t), int(v))
            if key in removed:
                continue
            removed.add(key)
            out.append(EdgeEdit("remove", *key))
    return out, len(out) < limit


def modify_heuristic(ctx: AttackContext, method: str) -> AttackResult:
    """RND, DICE or FLIP; structure only."""
    _require_modification(ctx)
    method = method.lower()
    reference = predict(ctx.surrogate, ctx.host)
    if method == "rnd":
        edits, exhausted = random_flips(ctx, ctx.rng(0))
    elif method == "dice":
        edits, exhausted = _dice(ctx, ctx.rng(0))
    elif method == "flip":
        edits, exhausted = _flip(ctx)
    else:
        raise ValidationError(f"unknown heuristic {method!r}")
    return _finish(ctx, method, edits, exhausted, reference)


# gradient attacks -----------------------------------------------------------------


def adjacency_gradient(ctx: AttackContext, a: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss and d loss / d A for a dense symmetric 0/1 adjacency ``a``.

    The model sees D^{-1/2}(A+I)D^{-1/2}; the chain rule through the degree
    normalization is applied in closed form. Since A is symmetric the
    returned matrix is the gradient for flipping both (u, v) and (v, u).
    """
    m = ctx.surrogate
    at = a + np.eye(a.shape[0])
    d = at.sum(axis=1)
    s = d**-0.5
    norm = s[:, None] * at * s[None, :]

    tape = Tape()
    op = tape.input(norm, requires_grad=True)
    x = tape.input(ctx.host.features)
    logits = build_logits(tape, m, op, x, bind_params(tape, m))
    rows = tape.gather_rows(logits, ctx.targets)
    loss = tape.nll_loss(tape.log_softmax(rows), labels)
    gs = tape.backward(loss)[op]

    ga = gs * at
    dd = (ga @ s + ga.T @ s) * (-0.5 * d**-1.5)
    g_at = gs * np.outer(s, s) + dd[:, None]
    return float(loss.value[0, 0]), g_at + g_at.T


def modify_fga(ctx: AttackContext, recompute: int = FGA_RECOMPUTE,
               max_nodes: int = FGA_MAX_NODES) -> AttackResult:
    """Greedy flips ranked by the dense adjacency gradient.

    The gradient is recomputed every ``recompute`` flips, and at least ten
    times per run, so small budgets fall back to one flip per gradient.
    """
    _require_modification(ctx)
    g = ctx.host
    n = g.num_nodes
    if n > max_nodes:
        raise TooLargeForDenseError(f"{n} nodes exceeds the dense limit {max_nodes}")
    if ctx.surrogate.spec.arch in ("GIN", "SAGE"):
        raise GradientUnavailableError(
            f"adjacency gradient needs a symmetric-normalized surrogate, got {ctx.surrogate.spec.arch}"
        )
    if recompute < 1:
        raise ValidationError("recompute interval must be >= 1")
    reference = predict(ctx.surrogate, g)
    labels = reference[ctx.targets]
    limit = min(ctx.budget.edge_limit(g.num_edges), _candidate_pairs(n, ctx.targets.size))
    recompute = min(recompute, max(1, limit // 10))

    a = g.adjacency.toarray()
    allowed = np.zeros((n, n), dtype=bool)
    allowed[ctx.targets, :] = True
    allowed[:, ctx.targets] = True
    allowed = np.triu(allowed, k=1)

    edits: list[EdgeEdit] = []
    trace: list[float] = []
    while len(edits) < limit:
        loss, grad = adjacency_gradient(ctx, a, labels)
        trace.append(loss)
        score = np.where(allowed, grad * (1.0 - 2.0 * a), -np.inf)
        flat = np.argsort(-score, axis=None, kind="stable")
        for idx in flat[: min(recompute, limit - len(edits))]:
            u, v = divmod(int(idx), n)
            kind = "remove" if a[u, v] else "add"
            a[u, v] = a[v, u] = 1.0 - a[u, v]
            allowed[u, v] = False
            edits.append(EdgeEdit(kind, u, v))
    exhausted = len(edits) < ctx.budget.edge_limit(g.num_edges)
    return _finish(ctx, "fga", edits, exhausted, reference, iterations=len(trace), trace=trace)


class _RowObjective:
    """Surrogate target loss as a function of selected feature rows."""

    def __init__(self, model, g: GraphBundle, rows, targets, labels):
        self.model = model
        self.op = propagation_operator(model.spec.arch, g)
        self.x = g.features.astype(np.float64)
        self.rows = np.asarray(rows, dtype=np.int64)
        self.targets = targets
        self.labels = labels

    def value_and_grad(self, r: np.ndarray) -> tuple[float, np.ndarray]:
        x = self.x.copy()
        x[self.rows] = r
        tape = Tape()
        xn = tape.input(x, requires_grad=True)
        logits = build_logits(tape, self.model, self.op, xn, bind_params(tape, self.model))
        loss = tape.nll_loss(tape.log_softmax(tape.gather_rows(logits, self.targets)), self.labels)
        return float(loss.value[0, 0]), tape.backward(loss)[xn][self.rows]


def modify_pgd(ctx: AttackContext, step: float = 0.01, iters: int = 1000) -> AttackResult:
    """Random flips, then projected ascent on the target nodes' feature rows."""
    _require_modification(ctx)
    reference = predict(ctx.surrogate, ctx.host)
    edits, exhausted = random_flips(ctx, ctx.rng(0))
    if step == 0 or iters == 0:
        return _finish(ctx, "pgd", edits, exhausted, reference)
    g = apply_edits(ctx.host, edits)
    b = ctx.budget
    obj = _RowObjective(ctx.surrogate, g, ctx.targets, ctx.targets, reference[ctx.targets])
    x0 = g.features[ctx.targets].astype(np.float64)
    trace: list[float] = []
    x = pgd_ascent(obj, x0, step, iters, b.feature_min, b.feature_max, trace)
    rows = clip_features(x, b.feature_min, b.feature_max).astype(np.float32)
    changed = np.any(rows != g.features[ctx.targets], axis=1)
    return _finish(
        ctx, "pgd", edits, exhausted, reference,
        feature_nodes=ctx.targets[changed], feature_rows=rows[changed],
        iterations=iters, trace=trace,
    )


MODIFICATION_ATTACKS = {
    "rnd": lambda ctx, **kw: modify_heuristic(ctx, "rnd"),
    "dice": lambda ctx, **kw: modify_heuristic(ctx, "dice"),
    "flip": lambda ctx, **kw: modify_heuristic(ctx, "flip"),
    "fga": lambda ctx, **kw: modify_fga(ctx, **kw),
    "pgd": lambda ctx, **kw: modify_pgd(ctx, **kw),
}
