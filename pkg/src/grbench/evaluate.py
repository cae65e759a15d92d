"""Attack x defense evaluation matrix, robustness metrics and leaderboards.

Accuracies are stored as fractions and rendered as percentages. Defense
metrics are computed over the attack rows of a difficulty (including the
clean "W/O" row); attack metrics over the defense columns.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .attacks import AttackContext, perturbed_graph, run_attack
from .data import DIFFICULTIES, AttackBudget, DifficultySplit
from .defenses import Defense
from .errors import EmptyMaskError, GRBError, ValidationError
from .graph import GraphBundle
from .models import TrainedModel

CLEAN = "W/O"
FORMAT = "GRBL1"


# metrics ---------------------------------------------------------------------


def subset_accuracy(preds, labels, mask, sentinel: int | None = None) -> float:
    """Fraction of ``mask`` nodes predicted correctly.

    Nodes whose label equals ``sentinel`` (injected or hidden) are dropped
    from the denominator.
    """
    mask = np.asarray(mask, dtype=np.int64).ravel()
    labels = np.asarray(labels)
    if sentinel is not None:
        mask = mask[labels[mask] != sentinel]
    if mask.size == 0:
        raise EmptyMaskError("accuracy over an empty node set")
    return float(np.mean(np.asarray(preds)[mask] == labels[mask]))


def inverse_square_weights(n: int) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** 2
    return w / w.sum()


def weighted_score(scores: Sequence[float], order: str = "descending") -> float:
    """Rank-weighted mean: the i-th score after sorting gets weight ~ 1/i^2.

    ``descending`` emphasises the highest scores (attack metric over defense
    accuracies); ``ascending`` the lowest (defense metric over attacks).
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValidationError("weighted_score needs at least one score")
    if order not in ("descending", "ascending"):
        raise ValidationError(f"unknown order {order!r}")
    s = np.sort(s)
    if order == "descending":
        s = s[::-1]
    return float(inverse_square_weights(s.size) @ s)


def avg_k_extreme(scores: Sequence[float], k: int = 3, side: str = "max") -> float:
    """Mean of the k largest (``max``) or smallest (``min``) scores; k is capped at n."""
    s = np.sort(np.asarray(scores, dtype=np.float64).ravel())
    if s.size == 0:
        raise ValidationError("avg_k_extreme needs at least one score")
    if side not in ("max", "min"):
        raise ValidationError(f"unknown side {side!r}")
    k = min(k, s.size)
    return float(s[-k:].mean() if side == "max" else s[:k].mean())


# leaderboard ------------------------------------------------------------------


@dataclass
class LeaderboardCell:
    attack: str
    defense: str
    difficulty: str
    values: list[float] = field(default_factory=list)
    failed: bool = False
    error: str = ""

    @property
    def mean(self) -> float | None:
        return None if self.failed or not self.values else float(np.mean(self.values))

    @property
    def std(self) -> float | None:
        return None if self.failed or not self.values else float(np.std(self.values))

    def to_json(self) -> dict:
        return {
            "attack": self.attack,
            "defense": self.defense,
            "difficulty": self.difficulty,
            "mean": self.mean,
            "std": self.std,
            "values": list(self.values),
            "failed": self.failed,
            "error": self.error,
        }


@dataclass
class Leaderboard:
    dataset: str
    attacks: list[str]
    defenses: list[str]
    cells: dict[tuple[str, str, str], LeaderboardCell] = field(default_factory=dict)
    difficulties: tuple[str, ...] = DIFFICULTIES
    meta: dict = field(default_factory=dict)

    def cell(self, attack: str, defense: str, difficulty: str) -> LeaderboardCell:
        return self.cells[(attack, defense, difficulty)]

    def rows(self) -> list[str]:
        return [CLEAN, *self.attacks]

    def _column(self, defense: str, difficulty: str) -> list[float]:
        out = []
        for a in self.rows():
            c = self.cells.get((a, defense, difficulty))
            if c is not None and c.mean is not None:
                out.append(c.mean)
        return out

    def _row(self, attack: str, difficulty: str) -> list[float]:
        out = []
        for d in self.defenses:
            c = self.cells.get((attack, d, difficulty))
            if c is not None and c.mean is not None:
                out.append(c.mean)
        return out

    def defense_scores(self, difficulty: str = "F") -> dict[str, dict]:
        """Avg, Avg-3-Min and Weighted over the attack rows (clean row included)."""
        out = {}
        for d in self.defenses:
            s = self._column(d, difficulty)
            out[d] = _summary(s, "min", "ascending")
        return out

    def attack_scores(self, difficulty: str = "F") -> dict[str, dict]:
        """Avg, Avg-3-Max and Weighted over the defense columns."""
        out = {}
        for a in self.attacks:
            s = self._row(a, difficulty)
            out[a] = _summary(s, "max", "descending")
        return out

    def defense_ranking(self, difficulty: str = "F") -> list[str]:
        """Most robust first: weighted desc, then Avg desc, then id."""
        sc = self.defense_scores(difficulty)
        return sorted(self.defenses, key=lambda d: (-_key(sc[d]["weighted"]), -_key(sc[d]["avg"]), d))

    def attack_ranking(self, difficulty: str = "F") -> list[str]:
        """Most effective first: weighted asc, then Avg asc, then id."""
        sc = self.attack_scores(difficulty)
        return sorted(self.attacks, key=lambda a: (_key(sc[a]["weighted"], inf=True), _key(sc[a]["avg"], inf=True), a))

    def to_json(self) -> dict:
        return {
            "format": FORMAT,
            "dataset": self.dataset,
            "attacks": list(self.attacks),
            "defenses": list(self.defenses),
            "difficulties": list(self.difficulties),
            "cells": [
                self.cells[(a, d, k)].to_json()
                for k in self.difficulties
                for a in self.rows()
                for d in self.defenses
                if (a, d, k) in self.cells
            ],
            "defense_scores": {k: self.defense_scores(k) for k in self.difficulties},
            "attack_scores": {k: self.attack_scores(k) for k in self.difficulties},
            "rankings": {
                "defenses": self.defense_ranking("F") if "F" in self.difficulties else [],
                "attacks": self.attack_ranking("F") if "F" in self.difficulties else [],
            },
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Leaderboard":
        if obj.get("format") != FORMAT:
            raise ValidationError("not a GRBL1 leaderboard")
        lb = cls(obj["dataset"], list(obj["attacks"]), list(obj["defenses"]),
                 difficulties=tuple(obj["difficulties"]), meta=obj.get("meta", {}))
        for c in obj["cells"]:
            cell = LeaderboardCell(c["attack"], c["defense"], c["difficulty"], list(c["values"]),
                                   c["failed"], c.get("error", ""))
            lb.cells[(cell.attack, cell.defense, cell.difficulty)] = cell
        return lb


def _summary(scores: list[float], side: str, order: str) -> dict:
    if not scores:
        return {"avg": None, f"avg3{side}": None, "weighted": None}
    return {
        "avg": float(np.mean(scores)),
        f"avg3{side}": avg_k_extreme(scores, 3, side),
        "weighted": weighted_score(scores, order),
    }


def _key(v, inf: bool = False) -> float:
    if v is None:
        return math.inf if inf else -math.inf
    return v


# matrix ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttackSpec:
    """An attack entry of the matrix: display id, method name, parameters."""

    id: str
    method: str
    params: dict = field(default_factory=dict)


def cell_seed(base_seed: int, *parts) -> int:
    """Stable 63-bit seed derived from the base seed and job identity."""
    text = "|".join(str(p) for p in (base_seed, *parts))
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def run_matrix(
    g: GraphBundle,
    split: DifficultySplit,
    surrogate: TrainedModel,
    attacks: Sequence[AttackSpec],
    defenses: Sequence[Defense],
    budget: Callable[[str], AttackBudget],
    repeats: int = 10,
    base_seed: int = 0,
    difficulties: Sequence[str] = DIFFICULTIES,
    jobs: int = 1,
) -> Leaderboard:
    """Evaluate every defense on every attack's perturbed graphs.

    For each difficulty and repeat, each attack perturbs ``g`` once using
    only ``surrogate`` and a copy of ``g`` with test labels hidden; every
    defense then classifies the perturbed graph. The attack seed hashes
    (base_seed, attack id, difficulty, repeat), so all defenses face the
    same perturbations. A failing attack or defense turns the affected
    cells into flagged nulls instead of aborting the run.
    """
    if repeats < 1:
        raise ValidationError("repeats must be >= 1")
    ids = [a.id for a in attacks]
    if len(set(ids)) != len(ids) or CLEAN in ids:
        raise ValidationError("attack ids must be unique and differ from the clean row")
    names = [d.name for d in defenses]
    if len(set(names)) != len(names):
        raise ValidationError("defense names must be unique")

    host = g.with_labels_hidden(split.test_full)
    lb = Leaderboard(g.name, ids, names, difficulties=tuple(difficulties))

    # clean row: inference is deterministic, so one evaluation serves all repeats
    for d in defenses:
        try:
            pred = d.predict(g)
            accs = {k: subset_accuracy(pred, g.labels, split.test(k)) for k in difficulties}
            for k in difficulties:
                lb.cells[(CLEAN, d.name, k)] = LeaderboardCell(CLEAN, d.name, k, [accs[k]] * repeats)
        except GRBError as exc:
            for k in difficulties:
                lb.cells[(CLEAN, d.name, k)] = LeaderboardCell(CLEAN, d.name, k, failed=True, error=str(exc))

    def job(spec: AttackSpec, k: str, r: int):
        seed = cell_seed(base_seed, spec.id, k, r)
        try:
            ctx = AttackContext(surrogate, host, split.test(k), budget(k), seed)
            result = run_attack(spec.method, ctx, **spec.params)
            attacked = perturbed_graph(g, result)
        except GRBError as exc:
            return {d.name: exc for d in defenses}
        out = {}
        for d in defenses:
            try:
                out[d.name] = subset_accuracy(d.predict(attacked), attacked.labels, split.test(k), g.sentinel)
            except GRBError as exc:
                out[d.name] = exc
        return out

    keys = [(spec, k, r) for k in difficulties for spec in attacks for r in range(repeats)]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda t: job(*t), keys))
    else:
        results = [job(*t) for t in keys]

    for (spec, k, _), res in zip(keys, results):
        for d in names:
            cell = lb.cells.setdefault((spec.id, d, k), LeaderboardCell(spec.id, d, k))
            v = res[d]
            if isinstance(v, Exception):
                cell.failed, cell.error = True, str(v)
            else:
                cell.values.append(v)
    for cell in lb.cells.values():
        if cell.failed:
            cell.values = []
    lb.meta = {"repeats": repeats, "base_seed": base_seed}
    return lb


# rendering ------------------------------------------------------------------------


def _pct(mean: float | None, std: float | None = None) -> str:
    if mean is None:
        return "—"
    if std is None:
        return f"{100 * mean:.2f}"
    return f"{100 * mean:.2f}±{100 * std:.2f}"


def emit_leaderboard(lb: Leaderboard, fmt: str = "markdown", difficulty: str | None = None) -> str:
    """Render as ``csv`` (one row per cell), ``json`` (GRBL1) or ``markdown``.

    Defenses appear most-robust first and attacks most-effective first,
    ranked at difficulty F (or ``difficulty`` when given).
    """
    rank_k = difficulty or ("F" if "F" in lb.difficulties else lb.difficulties[-1])
    defenses = lb.defense_ranking(rank_k)
    attacks = lb.attack_ranking(rank_k)
    if fmt == "json":
        return json.dumps(lb.to_json(), indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["difficulty", "attack", "defense", "mean", "std", "repeats", "failed"])
        for k in lb.difficulties:
            for a in [CLEAN, *attacks]:
                for d in defenses:
                    c = lb.cells.get((a, d, k))
                    if c is None:
                        continue
                    w.writerow([k, a, d, _num(c.mean), _num(c.std), len(c.values), int(c.failed)])
        return buf.getvalue()
    if fmt == "markdown":
        levels = [difficulty] if difficulty else list(lb.difficulties)
        return "\n".join(_markdown_table(lb, k, attacks, defenses) for k in levels)
    raise ValidationError(f"unknown leaderboard format {fmt!r}")


def _num(v: float | None) -> str:
    return "" if v is None else repr(v)


def _markdown_table(lb: Leaderboard, k: str, attacks: list[str], defenses: list[str]) -> str:
    header = ["Attack", *defenses, "Avg.", "Avg. 3-Max", "Weighted"]
    lines = [f"### {lb.dataset} ({k})", "", "| " + " | ".join(header) + " |",
             "|" + "---|" * len(header)]
    if not defenses:
        return "\n".join(lines) + "\n"
    asc = lb.attack_scores(k)
    for a in [CLEAN, *attacks]:
        row = [a] + [_pct(lb.cells[(a, d, k)].mean, lb.cells[(a, d, k)].std) for d in defenses]
        if a == CLEAN:
            row += ["", "", ""]
        else:
            s = asc[a]
            row += [_pct(s["avg"]), _pct(s["avg3max"]), _pct(s["weighted"])]
        lines.append("| " + " | ".join(row) + " |")
    dsc = lb.defense_scores(k)
    for label, key in (("Avg.", "avg"), ("Avg. 3-Min", "avg3min"), ("Weighted", "weighted")):
        lines.append("| " + " | ".join([label] + [_pct(dsc[d][key]) for d in defenses] + ["", "", ""]) + " |")
    return "\n".join(lines) + "\n"
