"""Composite problems ``g + sum phi_i + sum psi_i`` and their randomized cubic models."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np

from .blocks import BlockPartition, index_set
from .losses import ScalarLoss, eval012, hess_lipschitz_constant

__all__ = [
    "QuadraticG",
    "LeastSquaresG",
    "SmoothG",
    "BlockLoss",
    "Box",
    "CompositeProblem",
    "CubicModel",
    "TwiceDifferentiable",
    "objective",
    "build_model",
    "evaluate_model",
    "build_sketched_model",
    "FEAS_TOL",
]

FEAS_TOL = 1e-9
PSD_TOL = 1e-10


class _GBase:
    is_quadratic = False

    def tracker(self, x):
        return _RecomputeTracker(self, x)


@dataclass(frozen=True, eq=False)
class QuadraticG(_GBase):
    """``g(x) = 1/2 <Mx, x> + <q, x> + c0``; curvature bounds ``G = A = M``."""

    M: np.ndarray
    q: Optional[np.ndarray] = None
    c0: float = 0.0
    is_quadratic = True

    def __post_init__(self):
        M = np.asarray(self.M, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise ValueError("M must be square")
        if not np.allclose(M, M.T, rtol=0, atol=1e-12 * (1 + np.abs(M).max(initial=0))):
            raise ValueError("M must be symmetric")
        object.__setattr__(self, "M", 0.5 * (M + M.T))
        q = np.zeros(M.shape[0]) if self.q is None else np.asarray(self.q, dtype=float)
        object.__setattr__(self, "q", q)

    @property
    def G(self):
        return self.M

    @property
    def A(self):
        return self.M

    def value(self, x):
        return float(0.5 * x @ (self.M @ x) + self.q @ x + self.c0)

    def grad(self, x):
        return self.M @ x + self.q

    def tracker(self, x):
        return _QuadraticTracker(self, x)


@dataclass(frozen=True, eq=False)
class LeastSquaresG(_GBase):
    """``g(x) = 1/2 ||C x - d||^2``, tracked through the residual for accuracy."""

    C: np.ndarray
    d: np.ndarray
    is_quadratic = True

    def __post_init__(self):
        object.__setattr__(self, "C", np.asarray(self.C, dtype=float))
        object.__setattr__(self, "d", np.asarray(self.d, dtype=float))

    @cached_property
    def M(self):
        return self.C.T @ self.C

    @cached_property
    def q(self):
        return -self.C.T @ self.d

    @property
    def c0(self):
        return 0.5 * float(self.d @ self.d)

    @property
    def G(self):
        return self.M

    @property
    def A(self):
        return self.M

    def value(self, x):
        r = self.C @ x - self.d
        return 0.5 * float(r @ r)

    def grad(self, x):
        return self.C.T @ (self.C @ x - self.d)

    def tracker(self, x):
        return _LeastSquaresTracker(self, x)


@dataclass(frozen=True, eq=False)
class SmoothG(_GBase):
    """General smooth convex ``g`` given by oracles and curvature bounds ``G <= hess g <= A``."""

    value_fn: Callable[[np.ndarray], float]
    grad_fn: Callable[[np.ndarray], np.ndarray]
    G: np.ndarray
    A: np.ndarray
    hess_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def value(self, x):
        return float(self.value_fn(x))

    def grad(self, x):
        return np.asarray(self.grad_fn(x), dtype=float)


# Trackers keep enough state to evaluate g and block gradients cheaply along
# a sequence of sparse updates; ``refresh`` recomputes from scratch.


class _RecomputeTracker:
    def __init__(self, g, x):
        self.g = g
        self.refresh(x)

    def refresh(self, x):
        self.x = np.array(x, dtype=float)
        self._grad = None

    def value(self):
        return self.g.value(self.x)

    def grad_coords(self, idx):
        if self._grad is None:
            self._grad = self.g.grad(self.x)
        return self._grad[idx]

    def value_after(self, idx, y):
        x = self.x.copy()
        x[idx] += y
        return self.g.value(x)

    def update(self, idx, y):
        self.x[idx] += y
        self._grad = None


class _QuadraticTracker:
    def __init__(self, g, x):
        self.g = g
        self.refresh(x)

    def refresh(self, x):
        self.x = np.array(x, dtype=float)
        self.Mx = self.g.M @ self.x

    def value(self):
        return float(0.5 * self.x @ self.Mx + self.g.q @ self.x + self.g.c0)

    def grad_coords(self, idx):
        return self.Mx[idx] + self.g.q[idx]

    def value_after(self, idx, y):
        Mc = self.g.M[:, idx]
        x = self.x.copy()
        x[idx] += y
        return float(0.5 * x @ (self.Mx + Mc @ y) + self.g.q @ x + self.g.c0)

    def update(self, idx, y):
        self.Mx += self.g.M[:, idx] @ y
        self.x[idx] += y


class _LeastSquaresTracker:
    def __init__(self, g, x):
        self.g = g
        self.refresh(x)

    def refresh(self, x):
        self.x = np.array(x, dtype=float)
        self.r = self.g.C @ self.x - self.g.d

    def value(self):
        return 0.5 * float(self.r @ self.r)

    def grad_coords(self, idx):
        return self.g.C[:, idx].T @ self.r

    def value_after(self, idx, y):
        r = self.r + self.g.C[:, idx] @ y
        return 0.5 * float(r @ r)

    def update(self, idx, y):
        self.r += self.g.C[:, idx] @ y
        self.x[idx] += y


@dataclass(frozen=True, eq=False)
class BlockLoss:
    """Twice differentiable term of one block.

    With ``b`` given the term is ``weight * loss(<b, x_i>)``; otherwise it is the
    separable sum ``weight * sum_j loss_j(x_ij)`` over the block coordinates
    (array loss parameters broadcast against the block).
    """

    loss: ScalarLoss
    b: Optional[np.ndarray] = None
    weight: float = 1.0

    def __post_init__(self):
        if self.b is not None:
            object.__setattr__(self, "b", np.atleast_1d(np.asarray(self.b, dtype=float)))
        if self.weight < 0:
            raise ValueError("weight must be nonnegative")

    def value(self, xb) -> float:
        if self.b is not None:
            return self.weight * float(eval012(self.loss, float(self.b @ xb))[0])
        if len(xb) == 1 and self.loss._scalar:
            return self.weight * eval012(self.loss, xb[0])[0]
        return self.weight * float(np.sum(eval012(self.loss, xb)[0]))

    def grad_hess(self, xb):
        """Gradient vector and Hessian matrix on the block."""
        if self.b is not None:
            _, d1, d2 = eval012(self.loss, float(self.b @ xb))
            return self.weight * d1 * self.b, self.weight * d2 * np.outer(self.b, self.b)
        if len(xb) == 1 and self.loss._scalar:
            _, d1, d2 = eval012(self.loss, xb[0])
            return np.array([self.weight * d1]).ravel(), np.array([self.weight * d2]).reshape(1, 1)
        _, d1, d2 = eval012(self.loss, np.asarray(xb, dtype=float))
        d1 = np.broadcast_to(d1, np.shape(xb))
        d2 = np.broadcast_to(d2, np.shape(xb))
        return self.weight * d1, np.diag(self.weight * d2)

    @property
    def hess_lipschitz(self) -> float:
        H = hess_lipschitz_constant(self.loss)
        if H == 0.0:
            return 0.0
        if self.b is not None:
            return self.weight * H * float(np.linalg.norm(self.b)) ** 3
        return self.weight * H


@dataclass(frozen=True, eq=False)
class Box:
    """Indicator of ``lo <= x_i <= hi`` on one block (``lo == hi`` fixes values)."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if np.any(lo > hi):
            raise ValueError("box needs lo <= hi")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def contains(self, xb, tol=FEAS_TOL) -> bool:
        return bool(np.all(xb >= self.lo - tol) and np.all(xb <= self.hi + tol))


@dataclass(frozen=True, eq=False)
class CompositeProblem:
    """``min F(x) = g(x) + sum_i phi_i(x_(i)) + sum_i psi_i(x_(i))``.

    ``phi`` and ``psi`` are per-block sequences whose entries may be ``None``.
    Box indicators in ``psi`` double as the feasible set; there is no other
    constraint descriptor.
    """

    partition: BlockPartition
    g: Optional[_GBase] = None
    phi: Optional[Sequence[Optional[BlockLoss]]] = None
    psi: Optional[Sequence[Optional[Box]]] = None
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        P = self.partition
        n = P.n
        for name in ("phi", "psi"):
            seq = getattr(self, name)
            if seq is not None:
                seq = tuple(seq)
                if len(seq) != n:
                    raise ValueError(f"{name} must have one entry per block ({n}), got {len(seq)}")
                if all(t is None for t in seq):
                    seq = None
                object.__setattr__(self, name, seq)
        if self.phi is not None:
            for i, t in enumerate(self.phi):
                if t is not None and t.b is not None and t.b.shape != (P.sizes[i],):
                    raise ValueError(f"phi[{i}].b has wrong length for block size {P.sizes[i]}")
        if self.psi is not None:
            boxes = tuple(
                None if t is None else Box(np.broadcast_to(t.lo, (P.sizes[i],)),
                                           np.broadcast_to(t.hi, (P.sizes[i],)))
                for i, t in enumerate(self.psi)
            )
            object.__setattr__(self, "psi", boxes)
        if self.g is not None:
            G, A = np.asarray(self.g.G, float), np.asarray(self.g.A, float)
            if G.shape != (P.total, P.total) or A.shape != (P.total, P.total):
                raise ValueError("curvature matrices must be N x N")
            if self.check:
                if np.linalg.eigvalsh(0.5 * (G + G.T)).min() < -PSD_TOL * (1 + np.abs(G).max()):
                    raise ValueError("G must be positive semidefinite")
                if np.linalg.eigvalsh(0.5 * (A - G + (A - G).T)).min() < -PSD_TOL * (
                    1 + np.abs(A).max()
                ):
                    raise ValueError("need G <= A in the semidefinite order")

    @property
    def n(self) -> int:
        return self.partition.n

    @property
    def N(self) -> int:
        return self.partition.total

    @cached_property
    def block_hess_lipschitz(self) -> np.ndarray:
        """Per-block Hessian-Lipschitz constants (0 where phi_i is absent)."""
        H = np.zeros(self.n)
        if self.phi is not None:
            for i, t in enumerate(self.phi):
                if t is not None:
                    H[i] = t.hess_lipschitz
        return H

    @property
    def H_F(self) -> float:
        return float(self.block_hess_lipschitz.max())

    @cached_property
    def L(self) -> float:
        """``lambda_max(A)``; 0 when g is absent."""
        if self.g is None:
            return 0.0
        return float(np.linalg.eigvalsh(np.asarray(self.g.A, float)).max())

    @cached_property
    def mu(self) -> float:
        """``lambda_min(G)``; 0 when g is absent."""
        if self.g is None:
            return 0.0
        return max(0.0, float(np.linalg.eigvalsh(np.asarray(self.g.G, float)).min()))

    @cached_property
    def bounds(self):
        """Full-length ``(lo, hi)`` arrays from the box terms, or ``None``."""
        if self.psi is None:
            return None
        lo = np.full(self.N, -np.inf)
        hi = np.full(self.N, np.inf)
        for i, t in enumerate(self.psi):
            if t is not None:
                sl = self.partition.block_slice(i)
                lo[sl], hi[sl] = t.lo, t.hi
        return lo, hi

    def is_feasible(self, x, tol=FEAS_TOL) -> bool:
        if self.bounds is None:
            return True
        lo, hi = self.bounds
        return bool(np.all(x >= lo - tol) and np.all(x <= hi + tol))

    def is_feasible_coords(self, idx, values, tol=FEAS_TOL) -> bool:
        """Box check for the coordinates ``idx`` taking ``values``."""
        if self.bounds is None:
            return True
        lo, hi = self.bounds
        return bool(np.all(values >= lo[idx] - tol) and np.all(values <= hi[idx] + tol))

    def g_value(self, x) -> float:
        return 0.0 if self.g is None else self.g.value(x)

    def phi_block_value(self, i: int, xb) -> float:
        t = None if self.phi is None else self.phi[i]
        return 0.0 if t is None else t.value(xb)

    def phi_value(self, x) -> float:
        if self.phi is None:
            return 0.0
        P = self.partition
        return float(sum(self.phi_block_value(i, x[P.block_slice(i)]) for i in range(self.n)))

    def smooth_grad(self, x) -> np.ndarray:
        """Gradient of ``g + phi``."""
        x = np.asarray(x, dtype=float)
        grad = np.zeros(self.N) if self.g is None else self.g.grad(x).astype(float)
        if self.phi is not None:
            P = self.partition
            for i, t in enumerate(self.phi):
                if t is not None:
                    sl = P.block_slice(i)
                    grad[sl] += t.grad_hess(x[sl])[0]
        return grad


def objective(problem: CompositeProblem, x) -> float:
    """``F(x)``; returns ``inf`` when a box term is violated beyond ``FEAS_TOL``."""
    x = np.asarray(x, dtype=float)
    if x.shape != (problem.N,):
        raise ValueError(f"expected vector of length {problem.N}, got shape {x.shape}")
    if not problem.is_feasible(x):
        return math.inf
    return problem.g_value(x) + problem.phi_value(x)


@dataclass(eq=False)
class CubicModel:
    """Compact data of ``M_{H,S}(x; .)`` over the coordinates of the blocks in ``S``.

    ``value(ys)`` evaluates ``F(x) + <grad, ys> + 1/2 <hess ys, ys> + H/6 ||ys||^3``
    plus the box indicator of ``x + y``.
    """

    x: np.ndarray
    S: np.ndarray
    coords: np.ndarray
    H: float
    fx: float
    grad: np.ndarray
    hess: np.ndarray
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return self.coords.size

    @property
    def has_bounds(self) -> bool:
        return self.lo is not None

    def value(self, ys) -> float:
        ys = np.asarray(ys, dtype=float)
        if self.has_bounds and (
            np.any(ys < self.lo - FEAS_TOL) or np.any(ys > self.hi + FEAS_TOL)
        ):
            return math.inf
        nrm = float(np.linalg.norm(ys))
        return (
            self.fx
            + float(self.grad @ ys)
            + 0.5 * float(ys @ self.hess @ ys)
            + self.H / 6.0 * nrm**3
        )

    def decrease(self, ys) -> float:
        """``F(x) - M(x; y)``."""
        return self.fx - self.value(ys)

    def embed(self, ys) -> np.ndarray:
        y = np.zeros_like(self.x)
        y[self.coords] = ys
        return y


def build_model(problem: CompositeProblem, x, S, H: float, *, g_tracker=None, fx=None):
    """Cubic model of ``F`` around ``x`` restricted to blocks ``S``.

    ``g_tracker`` (from ``problem.g.tracker``) and ``fx`` let callers reuse
    state along a run; both are recomputed when omitted.
    """
    x = np.asarray(x, dtype=float)
    S = index_set(S, problem.n)
    if H < 0 or (H == 0 and S.size and problem.block_hess_lipschitz[S].max() > 0):
        raise ValueError("H must be positive when non-quadratic phi terms are sampled")
    if fx is None:
        fx = objective(problem, x)
    return _assemble_model(problem, x, S, H, g_tracker, fx)


def _assemble_model(problem, x, S, H, g_tracker, fx):
    # S must be a sorted array of distinct valid block ids
    P = problem.partition
    idx = P.coords(S)
    d = idx.size
    grad = np.zeros(d)
    hess = np.zeros((d, d))
    if problem.g is not None and d:
        if g_tracker is not None:
            grad += g_tracker.grad_coords(idx)
        else:
            grad += problem.g.grad(x)[idx]
        hess += problem.g.A.take(idx, axis=0).take(idx, axis=1)
    if problem.phi is not None and d:
        pos = 0
        for i in S:
            sz = P.sizes[i]
            t = problem.phi[i]
            if t is not None:
                gi, hi = t.grad_hess(x[P.block_slice(i)])
                grad[pos : pos + sz] += gi
                hess[pos : pos + sz, pos : pos + sz] += hi
            pos += sz
    lo = hi_ = None
    if problem.bounds is not None and d:
        blo, bhi = problem.bounds
        if np.any(np.isfinite(blo[idx])) or np.any(np.isfinite(bhi[idx])):
            lo, hi_ = blo[idx] - x[idx], bhi[idx] - x[idx]
    if d > 1:
        hess = 0.5 * (hess + hess.T)
    return CubicModel(x=x, S=S, coords=idx, H=float(H), fx=float(fx), grad=grad,
                      hess=hess, lo=lo, hi=hi_)


def evaluate_model(model: CubicModel, y) -> float:
    """Model value at a full-length direction ``y`` supported on the model blocks."""
    y = np.asarray(y, dtype=float)
    if y.shape != model.x.shape:
        raise ValueError("direction has wrong length")
    off = np.ones(y.size, dtype=bool)
    off[model.coords] = False
    if np.any(y[off] != 0):
        raise ValueError("direction must be zero outside the sampled blocks")
    return model.value(y[model.coords])


@dataclass(frozen=True, eq=False)
class TwiceDifferentiable:
    """Oracle for a general twice differentiable ``F``; give ``hessian`` or ``hvp``."""

    value: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    hessian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    hvp: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None


def build_sketched_model(oracle: TwiceDifferentiable, x, S, H: float, partition: BlockPartition):
    """Sketched cubic Newton model using the true Hessian restricted to ``S``."""
    x = np.asarray(x, dtype=float)
    S = index_set(S, partition.n)
    idx = partition.coords(S)
    grad = np.asarray(oracle.grad(x), dtype=float)[idx]
    if oracle.hessian is not None:
        hess = np.asarray(oracle.hessian(x), dtype=float)[np.ix_(idx, idx)]
    elif oracle.hvp is not None:
        hess = np.empty((idx.size, idx.size))
        e = np.zeros_like(x)
        for k, j in enumerate(idx):
            e[j] = 1.0
            hess[:, k] = np.asarray(oracle.hvp(x, e), dtype=float)[idx]
            e[j] = 0.0
    else:
        raise ValueError("oracle needs a hessian or hvp callable")
    return CubicModel(x=x, S=S, coords=idx, H=float(H), fx=float(oracle.value(x)),
                      grad=grad, hess=0.5 * (hess + hess.T))
