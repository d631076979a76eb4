"""Greedy kernel-herding sub-selection of cells, plus the uniform baseline.

Herding repeatedly picks the cell whose feature vector best aligns with a
running residual of the full-set embedding; the first m picks track the full
embedding far better than m uniform draws. Selection is without replacement
so exactly m distinct cells come back, in greedy order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SampleSet
from .rff import RffMap, featurize_batch, philox_rng

DEFAULT_CACHE_BYTES = 2 << 30  # cache phi(X) up to 2 GiB, else recompute per pass


@dataclass(frozen=True)
class HerdingResult:
    """m distinct row indices into the parent sample, in selection order."""

    selected_indices: tuple[int, ...]
    method: str
    m: int

    def __post_init__(self):
        idx = tuple(int(i) for i in self.selected_indices)
        if len(idx) != self.m:
            raise ValueError(f"{len(idx)} indices for m={self.m}")
        if len(set(idx)) != len(idx):
            raise ValueError("selected indices must be distinct")
        if self.method not in ("herding", "uniform"):
            raise ValueError(f"unknown method {self.method!r}")
        object.__setattr__(self, "selected_indices", idx)


def _check_m(m: int, n: int) -> None:
    if m < 1:
        raise ValueError(f"m must be positive, got {m}")
    if m > n:
        raise ValueError(f"m={m} exceeds set size n={n}")


def herd(rmap: RffMap, sample: SampleSet, m: int,
         max_cache_bytes: int = DEFAULT_CACHE_BYTES) -> HerdingResult:
    """Greedily select m cells whose mean feature vector tracks the full set.

    Deterministic: no randomness in the loop, argmax ties break to the
    smallest index. Feature vectors are cached (n x D memory) when they fit
    in max_cache_bytes, otherwise recomputed chunk-wise each iteration.
    """
    X = sample.cells
    n = X.shape[0]
    _check_m(m, n)
    if n * rmap.D * 8 <= max_cache_bytes:
        selected = _herd_cached(rmap, X, m)
    else:
        selected = _herd_chunked(rmap, X, m)
    return HerdingResult(selected_indices=tuple(selected), method="herding", m=m)


def _herd_cached(rmap, X, m):
    phi = featurize_batch(rmap, X)
    theta0 = phi.mean(axis=0)
    theta = theta0.copy()
    n = X.shape[0]
    taken = np.zeros(n, dtype=bool)
    selected = np.empty(m, dtype=int)
    for t in range(m):
        scores = phi @ theta
        scores[taken] = -np.inf
        i = int(np.argmax(scores))  # first occurrence = smallest index on ties
        selected[t] = i
        taken[i] = True
        theta += theta0 - phi[i]
    return selected


def _herd_chunked(rmap, X, m, chunk: int = 8192):
    n = X.shape[0]
    total = np.zeros(rmap.D)
    for start in range(0, n, chunk):
        total += featurize_batch(rmap, X[start:start + chunk]).sum(axis=0)
    theta0 = total / n
    theta = theta0.copy()
    taken = np.zeros(n, dtype=bool)
    selected = np.empty(m, dtype=int)
    for t in range(m):
        best_score = -np.inf
        best_idx = -1
        for start in range(0, n, chunk):
            scores = featurize_batch(rmap, X[start:start + chunk]) @ theta
            scores[taken[start:start + chunk]] = -np.inf
            j = int(np.argmax(scores))
            if scores[j] > best_score:  # strict: earlier chunks win ties
                best_score = float(scores[j])
                best_idx = start + j
        selected[t] = best_idx
        taken[best_idx] = True
        theta += theta0 - featurize_batch(rmap, X[best_idx:best_idx + 1])[0]
    return selected


def uniform_subsample(sample: SampleSet, m: int, seed: int) -> HerdingResult:
    """m distinct indices drawn uniformly (partial Fisher-Yates, seeded)."""
    n = sample.n
    _check_m(m, n)
    rng = philox_rng(seed)
    idx = np.arange(n)
    for i in range(m):
        j = i + int(rng.integers(0, n - i))
        idx[i], idx[j] = idx[j], idx[i]
    return HerdingResult(selected_indices=tuple(int(i) for i in idx[:m]),
                         method="uniform", m=m)


def subset(sample: SampleSet, result: HerdingResult) -> SampleSet:
    """New sample containing exactly the selected cells, in selection order."""
    idx = np.asarray(result.selected_indices, dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= sample.n):
        raise ValueError(f"index out of range for set of size {sample.n}")
    return SampleSet(cells=sample.cells[idx], sample_id=sample.sample_id,
                     marker_names=sample.marker_names)
