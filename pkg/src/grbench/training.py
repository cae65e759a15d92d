"""Standard and adversarial training loops.

Training is inductive: all forward passes run on the subgraph induced by
the train and validation nodes, so test-node features never enter training.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .autodiff import Tape
from .data import DifficultySplit
from .errors import DivergedError, EmptyTrainSetError, ValidationError
from .graph import GraphBundle, InjectionPatch, apply_injection
from .models import (
    ModelSpec,
    TrainedModel,
    bind_params,
    build_logits,
    forward_logits,
    init_model,
    propagation_operator,
)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 1000
    patience: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if self.patience < 1:
            raise ValidationError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValidationError("max_epochs must be >= 1")


LOSS_TOL = 1e-4


@dataclass(frozen=True)
class AtConfig:
    """Adversarial training with on-the-fly FGSM injection.

    ``steps = 0`` disables the attack (training then matches :func:`train`).
    """

    warmup_epochs: int = 10
    step_size: float = 0.01
    steps: int = 10
    injected: int = 20
    edges: int = 20
    feature_min: float = -0.94
    feature_max: float = 0.94
    init: str = "uniform"

    def __post_init__(self) -> None:
        if self.injected < 1 or self.edges < 1 or self.steps < 0 or self.warmup_epochs < 0:
            raise ValidationError("adversarial-training counts must be positive")
        if not self.feature_min < self.feature_max:
            raise ValidationError("feature range is empty")
        if self.init not in ("uniform", "zeros"):
            raise ValidationError(f"unknown init {self.init!r}")


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m = self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            self.params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _accuracy(logits: np.ndarray, labels: np.ndarray, idx: np.ndarray) -> float:
    if idx.size == 0:
        return 0.0
    return float(np.mean(np.argmax(logits[idx], axis=1) == labels[idx]))


def _as_f32(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    # checkpoints store float32; round now so save/load is lossless
    return {k: v.astype(np.float32).astype(np.float64) for k, v in params.items()}


class _Run:
    """State shared by the standard and adversarial loops."""

    def __init__(self, spec, g, split, cfg, preprocess):
        train_val = split.train_val
        if split.train.size == 0:
            raise EmptyTrainSetError("split has no training nodes")
        sub = g.subgraph(train_val)
        if preprocess is not None:
            sub = preprocess(sub)
        self.sub = sub
        pos = np.searchsorted(train_val, split.train)
        self.train_idx = pos
        self.val_idx = np.searchsorted(train_val, split.val)
        self.labels = sub.labels
        self.op = propagation_operator(spec.arch, sub)
        self.x = sub.features.astype(np.float64)
        init_ss, drop_ss, atk_ss = np.random.SeedSequence(cfg.seed).spawn(3)
        self.model = init_model(spec, g.num_features, g.num_classes, int(init_ss.generate_state(1)[0]))
        self.model.seed = cfg.seed
        self.drop_rng = np.random.default_rng(drop_ss)
        self.attack_rng = np.random.default_rng(atk_ss)
        self.opt = Adam(self.model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        self.cfg = cfg
        self.best_acc = -1.0
        self.best_params = None
        self.bad_epochs = 0
        self.history: list[dict] = []

    def step(self, op, x, labels) -> float:
        tape = Tape(training=True, rng=self.drop_rng)
        p = bind_params(tape, self.model, requires_grad=True)
        logits = build_logits(tape, self.model, op, tape.input(x), p)
        logp = tape.gather_rows(tape.log_softmax(logits), self.train_idx)
        loss = tape.nll_loss(logp, labels[self.train_idx])
        value = float(loss.value[0, 0])
        if not math.isfinite(value):
            raise DivergedError(f"training loss became {value}")
        grads = tape.backward(loss)
        self.opt.step({k: grads[n] for k, n in p.items()})
        return value

    def end_epoch(self, epoch: int, loss: float) -> bool:
        """Track best validation accuracy; return True to stop."""
        logits = forward_logits(self.model, self.op, self.x)
        acc = _accuracy(logits, self.labels, self.val_idx if self.val_idx.size else self.train_idx)
        self.history.append({"epoch": epoch, "train_loss": loss, "val_acc": acc})
        if acc > self.best_acc:
            self.best_acc = acc
            self.best_params = {k: v.copy() for k, v in self.model.params.items()}
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.cfg.patience

    def finish(self) -> TrainedModel:
        m = self.model
        out = TrainedModel(m.spec, _as_f32(self.best_params), m.input_dim, m.output_dim, self.cfg.seed)
        out.history = self.history
        return out


def train(
    spec: ModelSpec,
    g: GraphBundle,
    split: DifficultySplit,
    cfg: TrainConfig = TrainConfig(),
    preprocess: Callable[[GraphBundle], GraphBundle] | None = None,
) -> TrainedModel:
    """Minimize cross-entropy on train nodes; return the best-validation weights.

    ``preprocess`` transforms the training subgraph first (e.g. the low-rank
    defense). The result carries the per-epoch log as ``history``.
    """
    run = _Run(spec, g, split, cfg, preprocess)
    for epoch in range(cfg.max_epochs):
        loss = run.step(run.op, run.x, run.labels)
        if run.end_epoch(epoch, loss):
            break
    return run.finish()


def adversarial_train(
    spec: ModelSpec,
    g: GraphBundle,
    split: DifficultySplit,
    cfg: TrainConfig = TrainConfig(),
    at: AtConfig = AtConfig(),
    preprocess: Callable[[GraphBundle], GraphBundle] | None = None,
) -> TrainedModel:
    """Warm up like :func:`train`, then train while injecting fresh FGSM nodes.

    Every adversarial epoch wires ``at.injected`` zero-initialised nodes to
    uniformly random training nodes, runs ``at.steps`` sign-gradient steps
    on their features against the current weights, then takes one optimizer
    step on the injected graph with the loss restricted to training nodes.
    Injected nodes are discarded afterwards.

    The adversarial phase runs until the training loss stops improving for
    ``cfg.patience`` epochs (or ``max_epochs`` is reached) and returns the
    final weights: selecting on clean validation accuracy would tend to pick
    a checkpoint from before the adversarial phase had any effect. With
    ``at.steps == 0`` or a warm-up covering all epochs the result equals
    :func:`train`.
    """
    from .attacks.injection import InjectedObjective, fgsm_ascent

    run = _Run(spec, g, split, cfg, preprocess)
    full_warmup = at.steps == 0 or at.warmup_epochs >= cfg.max_epochs
    warmup = cfg.max_epochs if full_warmup else at.warmup_epochs
    epoch = 0
    while epoch < warmup:
        loss = run.step(run.op, run.x, run.labels)
        stop = run.end_epoch(epoch, loss)
        epoch += 1
        if stop:
            break
    if full_warmup:
        return run.finish()

    sub = run.sub
    lo, hi = at.feature_min, at.feature_max
    best_loss, stale = math.inf, 0
    for epoch in range(epoch, cfg.max_epochs):
        patch = _random_injection(sub, run.train_idx, at, run.attack_rng)
        frozen = TrainedModel(run.model.spec, run.model.params, run.model.input_dim, run.model.output_dim)
        obj = InjectedObjective(frozen, sub, patch, run.train_idx, sub.labels[run.train_idx])
        if at.init == "uniform":
            x0 = run.attack_rng.uniform(lo, hi, size=patch.features.shape)
        else:
            x0 = np.zeros(patch.features.shape)
        feats = fgsm_ascent(obj, x0, at.step_size, at.steps, lo, hi)
        patch = InjectionPatch(patch.num_injected, feats.astype(np.float32), patch.edges)
        injected = apply_injection(sub, patch)
        op = propagation_operator(spec.arch, injected)
        loss = run.step(op, injected.features.astype(np.float64), injected.labels)
        run.end_epoch(epoch, loss)
        if loss < best_loss - LOSS_TOL:
            best_loss, stale = loss, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    run.best_params = {k: v.copy() for k, v in run.model.params.items()}
    return run.finish()


def _random_injection(sub: GraphBundle, train_idx: np.ndarray, at: AtConfig, rng) -> InjectionPatch:
    per_node = min(at.edges, train_idx.size)
    rows = []
    for i in range(at.injected):
        for t in rng.choice(train_idx, size=per_node, replace=False):
            rows.append((i, int(t)))
    return InjectionPatch(
        at.injected, np.zeros((at.injected, sub.num_features), np.float32), np.array(rows, np.int64)
    )


def write_history(history: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in history:
            fh.write(json.dumps(row) + "\n")


def config_dict(cfg) -> dict:
    return asdict(cfg)
