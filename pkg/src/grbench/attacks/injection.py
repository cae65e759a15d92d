"""Graph-injection attacks: RND, FGSM, PGD, SPEIT and TDGIA.

All attacks run against the surrogate only. Injected features are
optimized in float64 and emitted as float32, clipped to the float32 images
of the budget bounds so the emitted values always pass the range check.
"""

from __future__ import annotations

import math
from collections import deque

import numpy as np

from ..autodiff import Tape
from ..errors import ValidationError
from ..graph import GraphBundle, InjectionPatch, apply_injection, degrees
from ..models import TrainedModel, bind_params, build_logits, input_stage, predict, propagation_operator
from .base import AttackContext, AttackResult, check_budget, surrogate_agreement

RND_SIGMA = 0.1
SPEIT_WINDOW = 5
TDGIA_LAMBDA = 0.5


def _bounds(lo: float, hi: float) -> tuple[float, float]:
    return float(np.float32(lo)), float(np.float32(hi))


def clip_features(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    a, b = _bounds(lo, hi)
    # compare as float64: numpy would otherwise round ``lo`` to float32 too
    if a < float(lo):
        a = float(np.nextafter(np.float32(a), np.float32(np.inf)))
    if b > float(hi):
        b = float(np.nextafter(np.float32(b), np.float32(-np.inf)))
    return np.clip(x, a, b)


class InjectedObjective:
    """Surrogate loss on ``targets`` as a function of injected features.

    The injected topology is fixed at construction; only the injected
    feature rows vary. ``loss`` is ``"ce"`` (mean cross-entropy against
    ``labels``) or ``"margin"`` (summed hinge on label-vs-runner-up logits).
    """

    def __init__(
        self,
        model: TrainedModel,
        host: GraphBundle,
        patch: InjectionPatch,
        targets: np.ndarray,
        labels: np.ndarray,
        loss: str = "ce",
    ):
        if loss not in ("ce", "margin"):
            raise ValidationError(f"unknown attack loss {loss!r}")
        self.model = model
        self.graph = apply_injection(host, patch)
        self.op = propagation_operator(model.spec.arch, self.graph)
        # host rows of the row-wise input stage never change: evaluate once
        tape = Tape()
        x_host = tape.input(host.features.astype(np.float64))
        self.host_stage = input_stage(tape, model, x_host, bind_params(tape, model)).value
        self.targets = np.asarray(targets, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.loss_kind = loss
        self.evaluations = 0

    def _forward(self, x_inj: np.ndarray, requires_grad: bool):
        tape = Tape()
        p = bind_params(tape, self.model)
        xi = tape.input(x_inj, requires_grad=requires_grad)
        h = tape.input(self.host_stage)
        if x_inj.shape[0]:
            h = tape.concat_rows(h, input_stage(tape, self.model, xi, p))
        logits = build_logits(tape, self.model, self.op, h, p, staged=True)
        return tape, xi, logits

    def logits(self, x_inj: np.ndarray) -> np.ndarray:
        return self._forward(x_inj, False)[2].value

    def value_and_grad(self, x_inj: np.ndarray) -> tuple[float, np.ndarray]:
        self.evaluations += 1
        tape, xi, logits = self._forward(np.asarray(x_inj, dtype=np.float64), True)
        rows = tape.gather_rows(logits, self.targets)
        if self.loss_kind == "ce":
            loss = tape.nll_loss(tape.log_softmax(rows), self.labels)
        else:
            loss = tape.margin_loss(rows, self.labels)
        grads = tape.backward(loss)
        return float(loss.value[0, 0]), grads[xi]

    def value(self, x_inj: np.ndarray) -> float:
        return self.value_and_grad(x_inj)[0]


def fgsm_ascent(obj: InjectedObjective, x0, step: float, iters: int, lo: float, hi: float,
                trace: list | None = None) -> np.ndarray:
    """Iterated sign-gradient ascent with clipping."""
    x = clip_features(np.asarray(x0, dtype=np.float64), lo, hi)
    for _ in range(iters):
        loss, g = obj.value_and_grad(x)
        if trace is not None:
            trace.append(loss)
        x = clip_features(x + step * np.sign(g), lo, hi)
    return x


def pgd_ascent(obj, x0, step: float, iters: int, lo: float, hi: float,
               trace: list | None = None, tol: float = 1e-6) -> np.ndarray:
    """Projected ascent along the inf-norm-scaled gradient.

    A step that lowers the loss by more than ``tol`` is rejected and the
    step size halved; accepted steps let it recover up to ``step``.
    """
    x = clip_features(np.asarray(x0, dtype=np.float64), lo, hi)
    if iters == 0 or step == 0:
        return x
    loss, g = obj.value_and_grad(x)
    if trace is not None:
        trace.append(loss)
    eta = step
    for _ in range(iters):
        scale = np.abs(g).max()
        if scale == 0:
            break
        cand = clip_features(x + eta * g / scale, lo, hi)
        c_loss, c_g = obj.value_and_grad(cand)
        if c_loss >= loss - tol:
            x, loss, g = cand, c_loss, c_g
            eta = min(step, 2.0 * eta)
            if trace is not None:
                trace.append(loss)
        else:
            eta *= 0.5
    return x


# topology ----------------------------------------------------------------------


def random_topology(ctx: AttackContext, rng: np.random.Generator) -> InjectionPatch:
    """``max_injected`` nodes, each wired to ``max_edges`` distinct random targets."""
    b = ctx.budget
    per = min(b.max_edges, ctx.targets.size)
    edges = np.array(
        [(i, int(t)) for i in range(b.max_injected) for t in rng.choice(ctx.targets, size=per, replace=False)],
        dtype=np.int64,
    )
    return InjectionPatch(b.max_injected, np.zeros((b.max_injected, ctx.host.num_features), np.float32), edges)


def speit_topology(ctx: AttackContext, rng: np.random.Generator, group_size: int | None = None) -> InjectionPatch:
    """Groups of injected nodes wired to disjoint target blocks, plus a chain.

    The chain links consecutive injected nodes and needs ``max_edges >= 2``;
    chain edges count against each node's edge limit. Every target is
    covered at most once.
    """
    b = ctx.budget
    n, ne = b.max_injected, b.max_edges
    gs = group_size or math.ceil(n / 8)
    groups = [np.arange(s, min(s + gs, n)) for s in range(0, n, gs)]
    order = rng.permutation(ctx.targets)
    blocks = np.array_split(order, len(groups))

    chain = np.array([(i, i + 1) for i in range(n - 1)], dtype=np.int64) if ne >= 2 else np.zeros((0, 2), np.int64)
    chain_deg = np.zeros(n, dtype=np.int64)
    for a, c in chain:
        chain_deg[a] += 1
        chain_deg[c] += 1

    rows = []
    for members, block in zip(groups, blocks):
        cursor = 0
        for i in members:
            slots = ne - chain_deg[i]
            take = block[cursor : cursor + slots]
            cursor += take.size
            rows.extend((int(i), int(t)) for t in take)
    edges = np.array(rows, dtype=np.int64).reshape(-1, 2)
    # nodes left without any edge (tiny target sets) get one random target
    touched = np.zeros(n, dtype=bool)
    touched[edges[:, 0]] = True
    touched[chain.ravel()] = True
    extra = [(int(i), int(rng.choice(ctx.targets))) for i in np.flatnonzero(~touched)]
    if extra:
        edges = np.vstack([edges, np.array(extra, dtype=np.int64)])
    return InjectionPatch(n, np.zeros((n, ctx.host.num_features), np.float32), edges, chain)


# attacks -------------------------------------------------------------------------


def _finish(ctx: AttackContext, method: str, patch: InjectionPatch, feats, iterations: int,
            trace: list, reference: np.ndarray) -> AttackResult:
    lo, hi = ctx.budget.feature_min, ctx.budget.feature_max
    f32 = clip_features(np.asarray(feats, dtype=np.float64), lo, hi).astype(np.float32)
    patch = InjectionPatch(patch.num_injected, f32, patch.edges, patch.internal_edges)
    result = AttackResult(
        scenario="injection",
        method=method,
        patch=patch,
        iterations_used=iterations,
        loss_trace=[float(v) for v in trace],
        seed=ctx.seed,
    )
    result.surrogate_accuracy_after = surrogate_agreement(ctx, apply_injection(ctx.host, patch), reference)
    violations = check_budget(ctx.host, result, ctx.budget)
    if violations:  # pragma: no cover - construction guarantees compliance
        raise AssertionError(f"{method} produced an over-budget payload: {violations}")
    return result


def _require_injection(ctx: AttackContext) -> None:
    if ctx.budget.scenario != "injection":
        raise ValidationError("injection attack needs an injection budget")


def inject_rnd(ctx: AttackContext) -> AttackResult:
    """Random topology, Gaussian features clipped to the budget range."""
    _require_injection(ctx)
    rng = ctx.rng(0)
    patch = random_topology(ctx, rng)
    feats = ctx.rng(1).normal(0.0, RND_SIGMA, size=patch.features.shape)
    reference = predict(ctx.surrogate, ctx.host)
    return _finish(ctx, "rnd", patch, feats, 0, [], reference)


def inject_fgsm(ctx: AttackContext, step: float = 0.01, iters: int = 1000) -> AttackResult:
    """Iterative FGSM on injected features; zero initialisation."""
    _require_injection(ctx)
    patch = random_topology(ctx, ctx.rng(0))
    reference = predict(ctx.surrogate, ctx.host)
    obj = InjectedObjective(ctx.surrogate, ctx.host, patch, ctx.targets, reference[ctx.targets])
    trace: list[float] = []
    b = ctx.budget
    feats = fgsm_ascent(obj, np.zeros(patch.features.shape), step, iters, b.feature_min, b.feature_max, trace)
    return _finish(ctx, "fgsm", patch, feats, iters, trace, reference)


def inject_pgd(ctx: AttackContext, step: float = 0.01, iters: int = 1000) -> AttackResult:
    """Projected gradient ascent from a uniform random start."""
    _require_injection(ctx)
    patch = random_topology(ctx, ctx.rng(0))
    b = ctx.budget
    lo, hi = _bounds(b.feature_min, b.feature_max)
    x0 = ctx.rng(1).uniform(lo, hi, size=patch.features.shape)
    reference = predict(ctx.surrogate, ctx.host)
    obj = InjectedObjective(ctx.surrogate, ctx.host, patch, ctx.targets, reference[ctx.targets])
    trace: list[float] = []
    feats = pgd_ascent(obj, x0, step, iters, b.feature_min, b.feature_max, trace)
    return _finish(ctx, "pgd", patch, feats, iters, trace, reference)


def inject_speit(ctx: AttackContext, step: float = 0.01, iters: int = 1000,
                 window: int = SPEIT_WINDOW) -> AttackResult:
    """Structured topology, then ascent along the averaged recent gradient signs."""
    _require_injection(ctx)
    patch = speit_topology(ctx, ctx.rng(0))
    reference = predict(ctx.surrogate, ctx.host)
    obj = InjectedObjective(ctx.surrogate, ctx.host, patch, ctx.targets, reference[ctx.targets])
    b = ctx.budget
    x = np.zeros(patch.features.shape)
    recent: deque = deque(maxlen=window)
    trace: list[float] = []
    for _ in range(iters):
        loss, g = obj.value_and_grad(x)
        trace.append(loss)
        recent.append(np.sign(g))
        x = clip_features(x + step * np.mean(recent, axis=0), b.feature_min, b.feature_max)
    return _finish(ctx, "speit", patch, x, iters, trace, reference)


def vulnerability(deg: np.ndarray, max_prob: np.ndarray, lam: float) -> np.ndarray:
    """Higher for low-degree, low-confidence nodes."""
    return lam / (1.0 + deg) + (1.0 - lam) * (1.0 - max_prob)


def inject_tdgia(ctx: AttackContext, step: float = 0.01, iters: int = 1000,
                 batch: int | None = None, lam: float = TDGIA_LAMBDA) -> AttackResult:
    """Sequential injection around the most vulnerable targets.

    Each round scores the not-yet-attacked targets, wires ``batch`` new
    nodes to the top scorers, then runs ``iters`` sign-gradient descent
    steps on the summed margin loss over all injected features.
    """
    _require_injection(ctx)
    b = ctx.budget
    n_total, ne = b.max_injected, min(b.max_edges, ctx.targets.size)
    batch = batch or math.ceil(n_total / 4)
    if batch < 1:
        raise ValidationError("batch must be >= 1")
    rounds = math.ceil(n_total / batch)
    reference = predict(ctx.surrogate, ctx.host)
    labels = reference[ctx.targets]
    d = ctx.host.num_features

    edges = np.zeros((0, 2), dtype=np.int64)
    feats = np.zeros((0, d))
    pool = set(ctx.targets.tolist())
    trace: list[float] = []
    used = 0
    for _ in range(rounds):
        k_new = min(batch, n_total - feats.shape[0])
        current = InjectionPatch(feats.shape[0], feats.astype(np.float32), edges)
        g_now = apply_injection(ctx.host, current)
        logits = InjectedObjective(ctx.surrogate, ctx.host, current, ctx.targets, labels).logits(feats)
        z = logits[ctx.targets]
        prob = np.exp(z - z.max(axis=1, keepdims=True))
        prob /= prob.sum(axis=1, keepdims=True)
        score = vulnerability(degrees(g_now)[ctx.targets], prob.max(axis=1), lam)
        ranked = ctx.targets[np.lexsort((ctx.targets, -score))]

        new_rows = []
        for j in range(k_new):
            if len(pool) < ne:
                pool = set(ctx.targets.tolist())
            chosen = [t for t in ranked if t in pool][:ne]
            pool.difference_update(chosen)
            new_rows.extend((feats.shape[0] + j, int(t)) for t in chosen)
        edges = np.vstack([edges, np.array(new_rows, dtype=np.int64).reshape(-1, 2)])
        feats = np.vstack([feats, np.zeros((k_new, d))])

        patch = InjectionPatch(feats.shape[0], feats.astype(np.float32), edges)
        obj = InjectedObjective(ctx.surrogate, ctx.host, patch, ctx.targets, labels, loss="margin")
        for _ in range(iters):
            loss, g = obj.value_and_grad(feats)
            trace.append(loss)
            used += 1
            if loss == 0:
                # every target already flipped: the hinge has no gradient left
                break
            feats = clip_features(feats - step * np.sign(g), b.feature_min, b.feature_max)
    patch = InjectionPatch(feats.shape[0], feats.astype(np.float32), edges)
    return _finish(ctx, "tdgia", patch, feats, used, trace, reference)


INJECTION_ATTACKS = {
    "rnd": inject_rnd,
    "fgsm": inject_fgsm,
    "pgd": inject_pgd,
    "speit": inject_speit,
    "tdgia": inject_tdgia,
}
