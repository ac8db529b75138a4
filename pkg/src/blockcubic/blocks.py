"""Block partitions, restriction operators and uniform block samplings.

A partition splits the coordinates ``0..N-1`` into ``n`` contiguous blocks.
Index sets are sorted integer arrays of block ids. All matrices are dense.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

__all__ = [
    "BlockPartition",
    "SamplingSpec",
    "index_set",
    "restrict_vector",
    "restrict_matrix",
    "blockdiag",
    "submatrix",
    "make_rng",
    "draw",
    "probability_matrix",
    "expected_submatrix",
]


@dataclass(frozen=True)
class BlockPartition:
    """Contiguous partition of ``R^N`` into blocks of the given sizes."""

    sizes: tuple[int, ...]
    offsets: tuple[int, ...] = field(init=False)
    total: int = field(init=False)
    unit: bool = field(init=False, repr=False)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if not sizes:
            raise ValueError("partition needs at least one block")
        if min(sizes) < 1:
            raise ValueError(f"block sizes must be >= 1, got {sizes}")
        offsets = tuple(int(o) for o in np.concatenate([[0], np.cumsum(sizes)[:-1]]))
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "total", int(sum(sizes)))
        object.__setattr__(self, "unit", all(s == 1 for s in sizes))

    @classmethod
    def uniform(cls, n: int, size: int = 1) -> "BlockPartition":
        return cls((size,) * n)

    @property
    def n(self) -> int:
        return len(self.sizes)

    def block_slice(self, i: int) -> slice:
        return slice(self.offsets[i], self.offsets[i] + self.sizes[i])

    def coords(self, S) -> np.ndarray:
        """Coordinate indices covered by the blocks in ``S``, in block order."""
        S = np.asarray(S, dtype=np.intp)
        if S.size == 0:
            return np.zeros(0, dtype=np.intp)
        if self.unit:
            return S.copy()
        return np.concatenate(
            [np.arange(self.offsets[i], self.offsets[i] + self.sizes[i]) for i in S]
        )

    def block_of(self, j: int) -> int:
        """Block id containing coordinate ``j``."""
        return int(np.searchsorted(self.offsets, j, side="right") - 1)

    def block_ids(self) -> np.ndarray:
        """Array of length N mapping each coordinate to its block."""
        return np.repeat(np.arange(self.n), self.sizes)


def index_set(members: Iterable[int], n: int) -> np.ndarray:
    """Validate and normalise a set of block ids to a sorted unique array."""
    S = np.unique(np.asarray(list(members), dtype=np.intp))
    if S.size and (S[0] < 0 or S[-1] >= n):
        raise ValueError(f"block ids must lie in [0, {n}), got {S.tolist()}")
    return S


def _check_vector(x, P: BlockPartition) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (P.total,):
        raise ValueError(f"expected vector of length {P.total}, got shape {x.shape}")
    return x


def _check_matrix(A, P: BlockPartition) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.shape != (P.total, P.total):
        raise ValueError(f"expected {P.total}x{P.total} matrix, got shape {A.shape}")
    return A


def _mask(S, P: BlockPartition) -> np.ndarray:
    mask = np.zeros(P.total, dtype=bool)
    mask[P.coords(index_set(S, P.n))] = True
    return mask


def restrict_vector(x, S, P: BlockPartition) -> np.ndarray:
    """Keep the blocks of ``x`` listed in ``S`` and zero the rest."""
    x = _check_vector(x, P)
    return np.where(_mask(S, P), x, 0.0)


def restrict_matrix(A, S, P: BlockPartition) -> np.ndarray:
    """Keep entries of ``A`` whose row and column both lie in blocks of ``S``."""
    A = _check_matrix(A, P)
    m = _mask(S, P)
    return np.where(np.outer(m, m), A, 0.0)


def submatrix(A, S, P: BlockPartition) -> np.ndarray:
    """Compact ``|S|``-block principal submatrix of ``A`` (rows/cols in block order)."""
    A = _check_matrix(A, P)
    idx = P.coords(index_set(S, P.n))
    return A[np.ix_(idx, idx)]


def blockdiag(A, P: BlockPartition) -> np.ndarray:
    A = _check_matrix(A, P)
    ids = P.block_ids()
    return np.where(ids[:, None] == ids[None, :], A, 0.0)


@dataclass(frozen=True)
class SamplingSpec:
    """Uniform block sampling: ``tau_nice``, ``singleton_uniform`` or ``full``.

    ``tau`` is only read for ``tau_nice``; the other kinds fix it to 1 and ``n``.
    """

    kind: str = "tau_nice"
    tau: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("tau_nice", "singleton_uniform", "full"):
            raise ValueError(f"unknown sampling kind {self.kind!r}")
        if self.kind == "tau_nice" and int(self.tau) < 1:
            raise ValueError("tau must be >= 1")

    def tau_for(self, n: int) -> int:
        if self.kind == "singleton_uniform":
            return 1
        if self.kind == "full":
            return n
        if self.tau > n:
            raise ValueError(f"tau={self.tau} exceeds number of blocks n={n}")
        return int(self.tau)

    def rng(self) -> np.random.Generator:
        return make_rng(self.seed)


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; independent child streams come from ``rng.spawn``."""
    return np.random.Generator(np.random.PCG64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF)))


def draw(spec: SamplingSpec, P: BlockPartition, rng: np.random.Generator) -> np.ndarray:
    """Draw one index set; tau-subsets come from a partial Fisher-Yates shuffle."""
    n = P.n
    tau = spec.tau_for(n)
    if tau == n:
        return np.arange(n, dtype=np.intp)
    if tau == 1:
        return np.array([rng.integers(n)], dtype=np.intp)
    perm = np.arange(n, dtype=np.intp)
    picks = rng.integers(np.arange(tau), n)
    for i, j in enumerate(picks):
        perm[i], perm[j] = perm[j], perm[i]
    return np.sort(perm[:tau])


def _gamma(tau: int, n: int) -> float:
    return 1.0 if n == 1 else (tau - 1) / (n - 1)


def probability_matrix(spec: SamplingSpec, P: BlockPartition) -> np.ndarray:
    n = P.n
    tau = spec.tau_for(n)
    gamma = _gamma(tau, n)
    E = np.ones((P.total, P.total))
    return (tau / n) * ((1.0 - gamma) * blockdiag(E, P) + gamma * E)


def expected_submatrix(A, spec: SamplingSpec, P: BlockPartition) -> np.ndarray:
    """Closed form of ``E[A_[S]]`` for tau-nice sampling."""
    A = _check_matrix(A, P)
    n = P.n
    tau = spec.tau_for(n)
    gamma = _gamma(tau, n)
    return (tau / n) * (1.0 - gamma) * blockdiag(A, P) + (tau / n) * gamma * A

