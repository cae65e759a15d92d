"""Dataset preparation: feature normalization, degree-based difficulty
splits, attack-budget presets and synthetic stand-in datasets."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import (
    FractionOverflowError,
    IoFailureError,
    TooSmallError,
    UnknownDatasetError,
    ValidationError,
    ZeroVarianceError,
)
from .graph import GraphBundle, degrees, load_bundle

DIFFICULTIES = ("E", "M", "H", "F")


def standardize_arctan(features: np.ndarray, per_column: bool = False) -> np.ndarray:
    """Map features into (-1, 1) by z-scoring then squashing with arctan.

    The mean and standard deviation are taken over the whole matrix unless
    ``per_column`` is set.
    """
    x = np.asarray(features, dtype=np.float64)
    axis = 0 if per_column else None
    mean = x.mean(axis=axis, keepdims=per_column)
    std = x.std(axis=axis, keepdims=per_column)
    if np.any(std == 0):
        raise ZeroVarianceError("feature matrix has zero variance")
    return 2.0 * np.arctan((x - mean) / std) / np.pi


# splits ---------------------------------------------------------------------


@dataclass(frozen=True)
class SplitConfig:
    trim_fraction: float = 0.05
    partition_count: int = 3
    sample_fraction_per_partition: float = 0.1
    train_fraction: float = 0.6
    val_fraction: float = 0.1
    seed: int = 0


@dataclass(frozen=True, eq=False)
class DifficultySplit:
    train: np.ndarray
    val: np.ndarray
    test_easy: np.ndarray
    test_medium: np.ndarray
    test_hard: np.ndarray
    seed: int = 0

    @property
    def test_full(self) -> np.ndarray:
        return np.sort(np.concatenate([self.test_easy, self.test_medium, self.test_hard]))

    def test(self, difficulty: str) -> np.ndarray:
        return {
            "E": self.test_easy,
            "M": self.test_medium,
            "H": self.test_hard,
            "F": self.test_full,
        }[difficulty]

    @property
    def train_val(self) -> np.ndarray:
        return np.sort(np.concatenate([self.train, self.val]))

    def to_json(self) -> dict:
        return {
            "train": self.train.tolist(),
            "val": self.val.tolist(),
            "test_easy": self.test_easy.tolist(),
            "test_medium": self.test_medium.tolist(),
            "test_hard": self.test_hard.tolist(),
            "seed": int(self.seed),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DifficultySplit":
        arr = lambda k: np.asarray(obj[k], dtype=np.int64)  # noqa: E731
        return cls(
            arr("train"), arr("val"), arr("test_easy"), arr("test_medium"), arr("test_hard"),
            int(obj.get("seed", 0)),
        )

    def equals(self, other: "DifficultySplit") -> bool:
        return self.to_json() == other.to_json()


def save_split(split: DifficultySplit, path: str | os.PathLike) -> None:
    try:
        Path(path).write_text(json.dumps(split.to_json()) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailureError(f"cannot write {path}: {exc}") from exc


def load_split(path: str | os.PathLike) -> DifficultySplit:
    return DifficultySplit.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def degree_order(g: GraphBundle) -> np.ndarray:
    """Nodes sorted by ascending degree, ties broken by ascending id."""
    deg = degrees(g)
    return np.lexsort((np.arange(g.num_nodes), deg))


def degree_partitions(g: GraphBundle, cfg: SplitConfig) -> list[np.ndarray]:
    """Contiguous degree-ordered test-candidate partitions (seed independent)."""
    n = g.num_nodes
    trim = int(np.floor(cfg.trim_fraction * n))
    middle = degree_order(g)[trim : n - trim]
    return np.array_split(middle, cfg.partition_count)


def degree_split(g: GraphBundle, cfg: SplitConfig = SplitConfig()) -> DifficultySplit:
    n = g.num_nodes
    if n < 100:
        raise TooSmallError(f"degree_split needs at least 100 nodes, got {n}")
    test_total = cfg.partition_count * cfg.sample_fraction_per_partition
    if cfg.train_fraction + cfg.val_fraction + test_total > 1.0 + 1e-12:
        raise FractionOverflowError("train + val + test fractions exceed 1")
    if cfg.partition_count != 3:
        raise ValidationError("exactly three difficulty partitions (E/M/H) are supported")
    if 2 * cfg.trim_fraction >= 1.0:
        raise FractionOverflowError("trim fraction removes every node")

    per_part = int(np.floor(cfg.sample_fraction_per_partition * n))
    parts = degree_partitions(g, cfg)
    if min(p.size for p in parts) < per_part:
        raise FractionOverflowError(
            f"partition of {min(p.size for p in parts)} nodes cannot supply {per_part} samples"
        )
    rng = np.random.default_rng(cfg.seed)
    tests = [np.sort(rng.choice(p, size=per_part, replace=False)) for p in parts]

    in_test = np.zeros(n, dtype=bool)
    for t in tests:
        in_test[t] = True
    pool = np.flatnonzero(~in_test)
    rng.shuffle(pool)
    ratio = cfg.train_fraction / (cfg.train_fraction + cfg.val_fraction)
    n_train = int(round(pool.size * ratio))
    return DifficultySplit(
        train=np.sort(pool[:n_train]),
        val=np.sort(pool[n_train:]),
        test_easy=tests[0],
        test_medium=tests[1],
        test_hard=tests[2],
        seed=cfg.seed,
    )


# budgets ----------------------------------------------------------------------


@dataclass(frozen=True)
class AttackBudget:
    scenario: Literal["modification", "injection"]
    edge_ratio: float = 0.05
    max_injected: int = 0
    max_edges: int = 0
    feature_min: float = -1.0
    feature_max: float = 1.0

    def __post_init__(self) -> None:
        if self.scenario not in ("modification", "injection"):
            raise ValidationError(f"unknown scenario {self.scenario!r}")
        if not 0.0 < self.edge_ratio <= 1.0:
            raise ValidationError("edge_ratio must lie in (0, 1]")
        if self.scenario == "injection" and (self.max_injected < 1 or self.max_edges < 1):
            raise ValidationError("injection budgets need max_injected, max_edges >= 1")
        if not self.feature_min < self.feature_max:
            raise ValidationError("feature_min must be below feature_max")

    def edge_limit(self, num_edges: int) -> int:
        """Largest whole number of edits allowed on a graph with ``num_edges``."""
        return int(np.floor(self.edge_ratio * num_edges + 1e-9))

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario,
            "edge_ratio": self.edge_ratio,
            "max_injected": self.max_injected,
            "max_edges": self.max_edges,
            "feature_min": self.feature_min,
            "feature_max": self.feature_max,
        }


@dataclass(frozen=True)
class InjectionPreset:
    injected: dict  # difficulty -> node count
    edges: int
    feature_range: tuple[float, float]
    step_size: float = 0.01
    iterations: int = 1000


# graph-injection presets per dataset (E/M/H/F node counts, edges per node, range)
INJECTION_PRESETS: dict[str, InjectionPreset] = {
    "grb-cora": InjectionPreset(dict(E=20, M=20, H=20, F=60), 20, (-0.94, 0.94), 0.01, 1000),
    "grb-citeseer": InjectionPreset(dict(E=30, M=30, H=30, F=90), 20, (-0.96, 0.89), 0.01, 1000),
    "grb-flickr": InjectionPreset(dict(E=200, M=200, H=200, F=600), 100, (-0.47, 0.99), 0.01, 2000),
    "grb-reddit": InjectionPreset(dict(E=500, M=500, H=500, F=1500), 200, (-0.98, 0.99), 0.01, 2000),
    "grb-aminer": InjectionPreset(dict(E=500, M=500, H=500, F=1500), 100, (-0.93, 0.93), 0.01, 5000),
    # synthetic datasets shipped with the package
    "toy": InjectionPreset(dict(E=4, M=4, H=4, F=12), 5, (-0.9, 0.9), 0.01, 100),
    "powerlaw": InjectionPreset(dict(E=30, M=30, H=30, F=90), 20, (-0.94, 0.94), 0.01, 1000),
}
# stand-ins share the preset of the dataset they imitate
PRESET_ALIASES = {"synth-cora": "grb-cora"}


@dataclass(frozen=True)
class AdvTrainPreset:
    step_size: float
    steps: int
    injected: int
    edges: int
    feature_range: tuple[float, float]


ADV_TRAIN_PRESETS: dict[str, AdvTrainPreset] = {
    "grb-cora": AdvTrainPreset(0.01, 10, 20, 20, (-0.94, 0.94)),
    "grb-citeseer": AdvTrainPreset(0.01, 10, 30, 20, (-0.96, 0.89)),
    "grb-flickr": AdvTrainPreset(0.01, 10, 200, 100, (-0.47, 0.99)),
    "grb-reddit": AdvTrainPreset(0.01, 10, 500, 200, (-0.98, 0.99)),
    "grb-aminer": AdvTrainPreset(0.01, 10, 500, 100, (-0.93, 0.93)),
    "toy": AdvTrainPreset(0.01, 10, 4, 5, (-0.9, 0.9)),
    "powerlaw": AdvTrainPreset(0.01, 10, 30, 20, (-0.94, 0.94)),
}


def _resolve(name: str, table: dict):
    key = PRESET_ALIASES.get(name, name)
    if key not in table:
        raise UnknownDatasetError(f"no preset for dataset {name!r}")
    return table[key]


def injection_preset(dataset_name: str) -> InjectionPreset:
    return _resolve(dataset_name, INJECTION_PRESETS)


def adv_train_preset(dataset_name: str) -> AdvTrainPreset:
    return _resolve(dataset_name, ADV_TRAIN_PRESETS)


def budget_preset(
    dataset_name: str,
    scenario: str,
    difficulty: str = "F",
    edge_ratio: float = 0.05,
) -> AttackBudget:
    """Budget for one difficulty level of a known dataset."""
    preset = injection_preset(dataset_name)
    if difficulty not in DIFFICULTIES:
        raise ValidationError(f"unknown difficulty {difficulty!r}")
    lo, hi = preset.feature_range
    if scenario == "injection":
        return AttackBudget(
            "injection",
            edge_ratio=edge_ratio,
            max_injected=preset.injected[difficulty],
            max_edges=preset.edges,
            feature_min=lo,
            feature_max=hi,
        )
    if scenario == "modification":
        return AttackBudget("modification", edge_ratio=edge_ratio, feature_min=lo, feature_max=hi)
    raise ValidationError(f"unknown scenario {scenario!r}")


# synthetic data ----------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    num_nodes: int
    num_edges: int
    num_features: int
    num_classes: int
    homophily: float = 0.8
    degree_exponent: float = 2.5
    feature_signal: float = 0.35
    seed: int = 0


SYNTHETIC = {
    "toy": SyntheticSpec(300, 600, 16, 3, seed=7),
    "powerlaw": SyntheticSpec(3000, 6000, 64, 5, seed=11),
    # same size as grb-cora (2680 nodes, 5148 edges, 302 features, 7 classes)
    "synth-cora": SyntheticSpec(2680, 5148, 302, 7, seed=2021),
}


def make_synthetic(spec: SyntheticSpec, name: str = "synthetic") -> GraphBundle:
    """Degree-heterogeneous, homophilous graph with Gaussian class features.

    Node activity follows a power law, so degrees span the heavy-tailed
    range the difficulty split relies on. Every node gets at least one edge.
    Features are class centroids plus isotropic noise, normalized with
    :func:`standardize_arctan`.
    """
    rng = np.random.default_rng(spec.seed)
    n, L = spec.num_nodes, spec.num_classes
    labels = rng.integers(0, L, size=n)
    ranks = rng.permutation(n) + 1.0
    theta = ranks ** (-1.0 / (spec.degree_exponent - 1.0))
    p = theta / theta.sum()

    by_class = [np.flatnonzero(labels == c) for c in range(L)]
    p_class = [p[idx] / p[idx].sum() for idx in by_class]

    def partner(u: int) -> int:
        if rng.random() < spec.homophily:
            c = labels[u]
            return int(rng.choice(by_class[c], p=p_class[c]))
        return int(rng.choice(n, p=p))

    edges: set[tuple[int, int]] = set()
    for u in range(n):
        v = partner(u)
        while v == u:
            v = partner(u)
        edges.add((min(u, v), max(u, v)))
    while len(edges) < spec.num_edges:
        u = int(rng.choice(n, p=p))
        v = partner(u)
        if u != v:
            edges.add((min(u, v), max(u, v)))
    edge_arr = np.array(sorted(edges), dtype=np.int64)
    if edge_arr.shape[0] > spec.num_edges:
        # the one-edge-per-node pass can overshoot on tiny graphs
        edge_arr = edge_arr[: spec.num_edges]

    centroids = rng.normal(size=(L, spec.num_features))
    raw = spec.feature_signal * centroids[labels] + rng.normal(size=(n, spec.num_features))
    feats = standardize_arctan(raw).astype(np.float32)
    return GraphBundle.from_edges(n, edge_arr, feats, labels, L, name=name)


def synthetic_dataset(name: str) -> GraphBundle:
    if name not in SYNTHETIC:
        raise UnknownDatasetError(f"unknown synthetic dataset {name!r}; known: {sorted(SYNTHETIC)}")
    return make_synthetic(SYNTHETIC[name], name=name)


def open_dataset(name_or_path: str, data_dir: str | os.PathLike | None = None) -> GraphBundle:
    """Resolve a dataset by bundle path, synthetic name, or name under ``data_dir``.

    ``data_dir`` defaults to the ``GRB_DATA_DIR`` environment variable.
    """
    p = Path(name_or_path)
    if (p / "meta.json").is_file():
        return load_bundle(p)
    if name_or_path in SYNTHETIC:
        return synthetic_dataset(name_or_path)
    root = data_dir if data_dir is not None else os.environ.get("GRB_DATA_DIR")
    if root and (Path(root) / name_or_path / "meta.json").is_file():
        return load_bundle(Path(root) / name_or_path)
    raise UnknownDatasetError(
        f"dataset {name_or_path!r} is neither a bundle directory, a synthetic name "
        f"({', '.join(sorted(SYNTHETIC))}), nor present under GRB_DATA_DIR"
    )
