"""Defenses as deployed models: a trained model plus optional preprocessing.

The low-rank defense replaces the adjacency with its top-k spectral
reconstruction before every forward pass, both on the training subgraph and
on whatever (possibly perturbed) graph it is asked to classify.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .errors import RankTooLargeError
from .graph import GraphBundle
from .models import TrainedModel, predict

OVERSAMPLE = 10
POWER_ITERS = 2
DEFAULT_RANK = 50


def low_rank_matrix(a, k: int, seed: int = 0, oversample: int = OVERSAMPLE,
                    power_iters: int = POWER_ITERS) -> np.ndarray:
    """Dense rank-k approximation of a symmetric matrix by randomized subspace iteration.

    The sketch for rank k is a column prefix of the sketch for any larger
    rank (same seed), so the approximating subspaces are nested and the
    error cannot grow with k. When k + oversample >= N the subspace is the
    whole space and the result is the exact truncated eigendecomposition.
    """
    n = a.shape[0]
    if not 1 <= k <= n:
        raise RankTooLargeError(f"rank {k} outside [1, {n}]")
    width = min(k + oversample, n)
    rng = np.random.default_rng(seed)
    omega = rng.standard_normal((width, n)).T
    q, _ = np.linalg.qr(a @ omega)
    for _ in range(power_iters):
        q, _ = np.linalg.qr(a @ q)
    t = q.T @ (a @ q)
    t = 0.5 * (t + t.T)
    lam, v = np.linalg.eigh(t)
    keep = np.argsort(-np.abs(lam), kind="stable")[:k]
    u = q @ v[:, keep]
    out = (u * lam[keep]) @ u.T
    return 0.5 * (out + out.T)


def svd_low_rank(g: GraphBundle, k: int = DEFAULT_RANK, seed: int = 0) -> GraphBundle:
    """Graph whose (weighted) adjacency is the rank-k reconstruction of ``g``'s."""
    a = g.adjacency
    dense = low_rank_matrix(a, k, seed)
    m = sp.csr_matrix(dense)
    m.sort_indices()
    meta = dict(g.meta, low_rank=k)
    return g.replace(indptr=m.indptr, indices=m.indices, weights=m.data, meta=meta)


@dataclass(eq=False)
class Defense:
    """A named, deployed classifier. Only its predictions are ever exposed."""

    name: str
    model: TrainedModel
    preprocess: Callable[[GraphBundle], GraphBundle] | None = None

    def predict(self, g: GraphBundle) -> np.ndarray:
        if self.preprocess is not None:
            g = self.preprocess(g)
        return predict(self.model, g)


def _clamped_low_rank(g: GraphBundle, k: int, seed: int) -> GraphBundle:
    return svd_low_rank(g, max(1, min(k, g.num_nodes)), seed)


def svd_preprocess(k: int = DEFAULT_RANK, seed: int = 0) -> Callable[[GraphBundle], GraphBundle]:
    """Low-rank preprocessing; the rank is capped at the graph size."""
    return partial(_clamped_low_rank, k=k, seed=seed)
