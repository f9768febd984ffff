"""Subset selection over a conditioned kernel.

greedy_map_fast is the production path: each iteration extends a per-candidate
partial Cholesky row so the marginal log-determinant gain of every remaining
candidate is available in O(n) work. greedy_map_naive recomputes every gain
from scratch and exists as the oracle for the fast path. brute_force_map
enumerates subsets exactly on tiny pools, and KdppSampler draws size-k subsets
with probability proportional to det(kernel_S) via eigendecomposition and
elementary symmetric polynomials.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CapabilityError, IndefiniteKernelError, KernelError
from .kernel import (
    SINGULAR_EPS,
    ConditionalKernel,
    SubsetIndex,
    logdet_subset,
    set_score,
)

# Largest subset count brute_force_map will enumerate.
BRUTE_FORCE_BUDGET = 10**6

# Eigenvalues at or below this threshold do not count toward the kernel rank.
RANK_EPS = 1e-8


@dataclass(frozen=True)
class GreedyResult:
    """Selection order, per-step log-determinant gains, and early-stop flag."""

    selected: tuple[int, ...]
    gains: tuple[float, ...]
    early_stopped: bool

    def __iter__(self):
        return iter(self.selected)

    def __len__(self) -> int:
        return len(self.selected)


def _check_k(K: int, n: int) -> None:
    if K < 1 or K > n:
        raise KernelError(f"K={K} out of range for pool size {n}")


def greedy_map_fast(kernel: ConditionalKernel, K: int) -> GreedyResult:
    """Greedy MAP with incremental Cholesky updates, O(n*K) per iteration.

    Each step picks the candidate with the largest residual pivot d2 (the
    determinant ratio of adding it), lowest position on ties, and stops early
    once every remaining gain is numerically zero (max d2 <= SINGULAR_EPS).
    """
    n = kernel.n
    _check_k(K, n)
    Lp = kernel.Lp
    cis = np.zeros((K, n))
    d2s = np.array(np.diag(Lp), dtype=np.float64)
    selected: list[int] = []
    gains: list[float] = []
    while len(selected) < K:
        j = int(np.argmax(d2s))
        dj2 = d2s[j]
        if dj2 <= SINGULAR_EPS:
            return GreedyResult(tuple(selected), tuple(gains), early_stopped=True)
        selected.append(j)
        gains.append(math.log(dj2))
        t = len(selected) - 1
        if len(selected) == K:
            break
        dj = math.sqrt(dj2)
        # new partial Cholesky row: e_i = (Lp[j,i] - <c_j, c_i>) / d_j
        eis = (Lp[j, :] - cis[:t, j] @ cis[:t, :]) / dj
        cis[t, :] = eis
        d2s -= np.square(eis)
        d2s[j] = -np.inf
    return GreedyResult(tuple(selected), tuple(gains), early_stopped=False)


def greedy_map_naive(kernel: ConditionalKernel, K: int) -> GreedyResult:
    """Oracle greedy: recomputes log det from scratch for every candidate.

    Identical contract to greedy_map_fast; candidates whose addition is
    singular or indefinite within tolerance contribute a -inf gain.
    """
    n = kernel.n
    _check_k(K, n)
    Lp = kernel.Lp
    selected: list[int] = []
    gains: list[float] = []
    current = 0.0
    log_stop = math.log(SINGULAR_EPS)
    while len(selected) < K:
        best_pos = -1
        best_gain = -math.inf
        for i in range(n):
            if i in selected:
                continue
            try:
                extended = logdet_subset(Lp, selected + [i])
            except IndefiniteKernelError:
                continue
            gain = extended - current
            if gain > best_gain:
                best_gain = gain
                best_pos = i
        if best_pos < 0 or best_gain <= log_stop:
            return GreedyResult(tuple(selected), tuple(gains), early_stopped=True)
        selected.append(best_pos)
        gains.append(best_gain)
        current += best_gain
    return GreedyResult(tuple(selected), tuple(gains), early_stopped=False)


def brute_force_map(kernel: ConditionalKernel, K: int) -> SubsetIndex:
    """Exhaustive size-K MAP. Ties go to the lexicographically smallest subset."""
    from itertools import combinations

    n = kernel.n
    _check_k(K, n)
    total = math.comb(n, K)
    if total > BRUTE_FORCE_BUDGET:
        raise CapabilityError(
            f"C({n},{K}) = {total} subsets exceeds the enumeration budget"
        )
    best: tuple[int, ...] | None = None
    best_score = -math.inf
    for subset in combinations(range(n), K):
        score = set_score(kernel, subset)
        # strict inequality keeps the lexicographically first maximizer
        if score > best_score:
            best_score = score
            best = subset
    assert best is not None
    return SubsetIndex(best)


class KdppSampler:
    """Exact size-k DPP sampler over a PSD kernel.

    Precomputes the eigendecomposition and the elementary symmetric
    polynomial table E[j][m] (j-th ESP over the first m eigenvalues) once;
    individual draws then cost O(n*k) plus small QR factorizations.
    """

    def __init__(self, kernel: np.ndarray, k: int):
        kernel = np.asarray(kernel, dtype=np.float64)
        if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
            raise KernelError("kernel must be square")
        n = kernel.shape[0]
        if np.max(np.abs(kernel - kernel.T), initial=0.0) > 1e-8:
            raise KernelError("kernel must be symmetric")
        vals, vecs = np.linalg.eigh((kernel + kernel.T) / 2.0)
        vals = np.clip(vals, 0.0, None)
        rank = int(np.count_nonzero(vals > RANK_EPS))
        if k < 1 or k > rank:
            raise KernelError(f"k={k} exceeds numeric kernel rank {rank}")
        self.k = k
        self.eigenvalues = vals
        self.eigenvectors = vecs
        self.esp = self._esp_table(vals, k)

    @staticmethod
    def _esp_table(vals: np.ndarray, k: int) -> np.ndarray:
        n = vals.size
        table = np.zeros((k + 1, n + 1))
        table[0, :] = 1.0
        for j in range(1, k + 1):
            for m in range(1, n + 1):
                table[j, m] = table[j, m - 1] + vals[m - 1] * table[j - 1, m - 1]
        return table

    def _select_eigenvectors(self, rng: np.random.Generator) -> list[int]:
        chosen: list[int] = []
        remaining = self.k
        for m in range(self.eigenvalues.size, 0, -1):
            if remaining == 0:
                break
            if m == remaining:
                chosen.extend(range(m - 1, -1, -1))
                break
            accept = (
                self.eigenvalues[m - 1]
                * self.esp[remaining - 1, m - 1]
                / self.esp[remaining, m]
            )
            if rng.random() < accept:
                chosen.append(m - 1)
                remaining -= 1
        return chosen

    def sample(self, seed: int) -> SubsetIndex:
        """Draw one subset of size exactly k, deterministically from the seed."""
        rng = np.random.default_rng(seed)
        cols = self._select_eigenvectors(rng)
        V = self.eigenvectors[:, cols].copy()
        items: list[int] = []
        for _ in range(self.k):
            probs = np.sum(V * V, axis=1)
            probs = np.clip(probs, 0.0, None)
            probs /= probs.sum()
            item = int(rng.choice(probs.size, p=probs))
            items.append(item)
            if V.shape[1] == 1:
                break
            # project the span onto the complement of e_item, then re-orthonormalize
            pivot_col = int(np.argmax(np.abs(V[item, :])))
            v = V[:, pivot_col].copy()
            V = np.delete(V, pivot_col, axis=1)
            V -= np.outer(v, V[item, :] / v[item])
            V, _ = np.linalg.qr(V)
        return SubsetIndex.of(items)


def kdpp_sample(kernel: np.ndarray, k: int, seed: int) -> SubsetIndex:
    """One-shot size-k DPP draw; builds a sampler and samples once."""
    return KdppSampler(kernel, k).sample(seed)


def order_exemplars(selected: Sequence[int], r: np.ndarray) -> list[int]:
    """Sort positions by ascending relevance so the most similar lands last.

    Ties fall back to ascending position.
    """
    r = np.asarray(r, dtype=np.float64)
    for pos in selected:
        if pos < 0 or pos >= r.size:
            raise KernelError(f"position {pos} outside relevance vector")
    return sorted((int(p) for p in selected), key=lambda p: (r[p], p))
