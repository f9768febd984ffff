"""Base and relevance-conditioned DPP kernels with log-determinant scoring.

The base kernel L is the Gram matrix of unit-normalized feature rows, so its
diagonal is 1 and every entry lies in [-1, 1]. Conditioning rescales L by
per-item relevance factors exp(r_i / (2 * lam)):

    Lp = Diag(exp(r / (2 lam))) @ L @ Diag(exp(r / (2 lam)))

which makes the subset log-determinant decompose into a relevance sum plus a
diversity term:

    log det(Lp_S) = (1 / lam) * sum_{i in S} r_i + log det(L_S)

All math is float64; the decomposition identity is validated at 1e-8.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CapabilityError, IndefiniteKernelError, KernelError

# Cholesky pivot policy: pivots below SINGULAR_EPS count as zero determinant,
# pivots below -INDEFINITE_EPS mean the matrix is not PSD. PSD_JITTER is the
# diagonal shift used only for validation and gradient-side factorizations.
SINGULAR_EPS = 1e-12
INDEFINITE_EPS = 1e-8
PSD_JITTER = 1e-8

SYMMETRY_TOL = 1e-10


@dataclass(frozen=True)
class SubsetIndex:
    """A subset of pool positions, stored strictly increasing."""

    members: tuple[int, ...]

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.members, self.members[1:])):
            raise KernelError("subset members must be strictly increasing")
        if self.members and self.members[0] < 0:
            raise KernelError("subset members must be non-negative")

    @classmethod
    def of(cls, members: Sequence[int]) -> "SubsetIndex":
        return cls(tuple(sorted(int(m) for m in members)))

    def __len__(self) -> int:
        return len(self.members)


def _as_members(subset: "SubsetIndex | Sequence[int]") -> tuple[int, ...]:
    if isinstance(subset, SubsetIndex):
        return subset.members
    members = tuple(int(m) for m in subset)
    if len(set(members)) != len(members):
        raise KernelError("subset members must be distinct")
    return tuple(sorted(members))


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """Scale each row to unit Euclidean norm. Zero rows are an error."""
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise KernelError(f"cannot normalize all-zero row {int(zero[0])}")
    return matrix / norms[:, None]


def build_base_kernel(pool_embeddings: np.ndarray) -> np.ndarray:
    """Gram matrix of unit-norm rows: symmetric, PSD, unit diagonal."""
    rows = np.asarray(pool_embeddings, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1)
    if not np.allclose(norms, 1.0, atol=1e-8):
        raise KernelError("pool embedding rows must be unit-norm")
    gram = rows @ rows.T
    gram = (gram + gram.T) / 2.0
    np.fill_diagonal(gram, 1.0)
    return gram


def relevance_scores(query_vec: np.ndarray, pool_embeddings: np.ndarray) -> np.ndarray:
    """Dot product of the unit-norm query against each unit-norm row, in [-1, 1]."""
    query_vec = np.asarray(query_vec, dtype=np.float64)
    rows = np.asarray(pool_embeddings, dtype=np.float64)
    if query_vec.shape != (rows.shape[1],):
        raise KernelError(
            f"query dim {query_vec.shape} does not match pool dim {rows.shape[1]}"
        )
    return np.clip(rows @ query_vec, -1.0, 1.0)


@dataclass(frozen=True)
class ConditionalKernel:
    """Base kernel L, relevance r, trade-off lam, and the conditioned kernel Lp."""

    L: np.ndarray
    r: np.ndarray
    lam: float
    Lp: np.ndarray

    @property
    def n(self) -> int:
        return int(self.L.shape[0])


def condition_kernel(L: np.ndarray, r: np.ndarray, lam: float) -> ConditionalKernel:
    """Rescale L by exp(r / (2 lam)) on both sides.

    lam = inf is accepted and leaves the kernel unchanged (pure diversity).
    """
    L = np.asarray(L, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if not lam > 0:
        raise KernelError(f"lambda must be positive, got {lam}")
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise KernelError("L must be square")
    if r.shape != (L.shape[0],):
        raise KernelError("relevance vector length must match kernel size")
    if np.max(np.abs(L - L.T), initial=0.0) > SYMMETRY_TOL:
        raise KernelError("L is asymmetric beyond tolerance")
    if np.max(np.abs(np.diag(L) - 1.0), initial=0.0) > SYMMETRY_TOL:
        raise KernelError("L must have unit diagonal")
    if np.max(np.abs(r), initial=0.0) > 1.0 + 1e-9:
        raise KernelError("relevance values must lie in [-1, 1]")
    scale = np.exp(r / (2.0 * lam)) if math.isfinite(lam) else np.ones_like(r)
    Lp = scale[:, None] * L * scale[None, :]
    kern = ConditionalKernel(L=L, r=np.clip(r, -1.0, 1.0), lam=float(lam), Lp=Lp)
    # validation only; scoring paths factor the raw restrictions
    _cholesky_logdet(Lp + PSD_JITTER * np.eye(len(r)))
    return kern


def _cholesky_logdet(matrix: np.ndarray) -> float:
    """Log-determinant via unpivoted Cholesky with an explicit pivot policy.

    Pivots are judged relative to the row's own diagonal magnitude: a pivot
    within [-INDEFINITE_EPS, SINGULAR_EPS] of zero (scaled) marks the matrix
    singular and the function returns -inf; a pivot more negative than the
    scaled -INDEFINITE_EPS raises IndefiniteKernelError. Singular pivots
    leave a zero column, the standard semidefinite continuation, so later
    pivots stay meaningful.
    """
    a = np.asarray(matrix, dtype=np.float64)
    k = a.shape[0]
    low = np.zeros((k, k))
    logdet = 0.0
    singular = False
    for j in range(k):
        # thresholds are relative to the row's own diagonal: conditioning by
        # exp(r/2lam) rescales row i by a factor as extreme as e^50 while
        # preserving relative accuracy, so an absolute cutoff would misread
        # scale as (in)definiteness; at unit diagonal this is absolute;
        # the floor only guards exactly-zero rows
        unit = max(abs(float(a[j, j])), 1e-300)
        pivot = float(a[j, j] - np.dot(low[j, :j], low[j, :j]))
        if pivot < -INDEFINITE_EPS * unit:
            raise IndefiniteKernelError(
                f"negative Cholesky pivot {pivot:.3e} at index {j}"
            )
        if pivot <= SINGULAR_EPS * unit:
            singular = True
            continue
        d = math.sqrt(pivot)
        low[j, j] = d
        logdet += math.log(pivot)
        if j + 1 < k:
            low[j + 1 :, j] = (a[j + 1 :, j] - low[j + 1 :, :j] @ low[j, :j]) / d
    return -math.inf if singular else logdet


def logdet_subset(kernel: np.ndarray, subset: SubsetIndex | Sequence[int]) -> float:
    """log det of the kernel restricted to the subset.

    Returns -inf for restrictions singular within tolerance; raises
    IndefiniteKernelError when a pivot is negative beyond tolerance.
    """
    members = _as_members(subset)
    if not members:
        raise KernelError("subset must be non-empty")
    kernel = np.asarray(kernel, dtype=np.float64)
    if max(members) >= kernel.shape[0]:
        raise KernelError("subset member out of kernel range")
    idx = np.asarray(members, dtype=np.intp)
    return _cholesky_logdet(kernel[np.ix_(idx, idx)])


def set_score(kernel: ConditionalKernel, subset: SubsetIndex | Sequence[int]) -> float:
    """Unnormalized log-probability of a subset under the conditioned kernel.

    Equals (1/lam) * sum of member relevances plus log det(L_S).
    """
    return logdet_subset(kernel.Lp, subset)


def dpp_prob_normalized(
    kernel: np.ndarray, subset: SubsetIndex | Sequence[int] = ()
) -> float:
    """Exact normalized DPP probability det(kernel_S) / det(kernel + I).

    Only supported for n <= 20; larger pools must use unnormalized scores.
    The empty subset has determinant 1.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    n = kernel.shape[0]
    if n > 20:
        raise CapabilityError(
            f"exact normalization limited to n <= 20, got n = {n}; "
            "use set_score for unnormalized log-probabilities"
        )
    members = _as_members(subset) if len(subset) else ()
    if members and max(members) >= n:
        raise KernelError("subset member out of kernel range")
    sign, logdet_z = np.linalg.slogdet(kernel + np.eye(n))
    if sign <= 0:
        raise KernelError("det(kernel + I) must be positive for a PSD kernel")
    if not members:
        return float(np.exp(-logdet_z))
    idx = np.asarray(members, dtype=np.intp)
    sub = kernel[np.ix_(idx, idx)]
    sign_s, logdet_s = np.linalg.slogdet(sub)
    if sign_s <= 0:
        return 0.0
    return float(np.exp(logdet_s - logdet_z))
