"""Minimizers of cubically regularized quadratic models.

The basic subproblem is

    min_y  <b, y> + 1/2 <Q y, y> + H/6 ||y||^3

with ``Q`` symmetric positive semidefinite. A coupled subproblem adds an
affine image ``h = B y`` that carries its own quadratic and the cubic term:

    min_y  <b, y> + 1/2 <Q y, y> + <b2, h> + 1/2 <diag(D) h, h> + H/6 ||h||^3,   h = B y.

Both reduce to a scalar fixed point ``tau = ||y(tau)||`` (resp. ``||B y(tau)||``)
solved by :func:`root_find_secular`; a box-constrained variant is handled by
projected gradient with an active-set polish.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np
import scipy.linalg as sla

__all__ = [
    "NumericalFailure",
    "UnboundedSubproblem",
    "Coupling",
    "CubicSubproblem",
    "CubicSolution",
    "SecularRoot",
    "root_find_secular",
    "solve_unconstrained",
    "minimize_cubic",
    "solve_affine_coupled",
    "solve_fallback_composite",
    "solve",
    "coupled_fixed_map",
    "model_scale",
]

PINV_RTOL = 1e-12
ROOT_TOL = 1e-12


class NumericalFailure(RuntimeError):
    """A solver could not reach a consistent answer; ``info`` holds diagnostics."""

    def __init__(self, msg, **info):
        super().__init__(msg)
        self.info = info


class UnboundedSubproblem(NumericalFailure):
    """The model is unbounded below (``H = 0`` and ``b`` outside ``range(Q)``)."""


@dataclass(frozen=True, eq=False)
class Coupling:
    B: np.ndarray
    diag: np.ndarray
    linear: np.ndarray

    def __post_init__(self):
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "diag", np.broadcast_to(np.asarray(self.diag, float), (B.shape[0],)))
        object.__setattr__(self, "linear", np.broadcast_to(np.asarray(self.linear, float), (B.shape[0],)))
        if np.any(self.diag < 0):
            raise ValueError("coupling weights must be nonnegative")


@dataclass(frozen=True, eq=False)
class CubicSubproblem:
    Q: np.ndarray
    b: np.ndarray
    H: float
    coupling: Optional[Coupling] = None
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        d = b.size
        if Q.shape != (d, d):
            raise ValueError(f"Q must be {d}x{d}, got {Q.shape}")
        if np.abs(Q - Q.T).max(initial=0.0) > 1e-12 * (1 + np.abs(Q).max(initial=0.0)):
            raise ValueError("Q must be symmetric")
        if self.H < 0:
            raise ValueError("H must be nonnegative")
        object.__setattr__(self, "Q", 0.5 * (Q + Q.T))
        object.__setattr__(self, "b", b)
        if self.coupling is not None and self.coupling.B.shape[1] != d:
            raise ValueError("coupling matrix has wrong number of columns")
        for name in ("lo", "hi"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.broadcast_to(np.asarray(v, float), (d,)).copy())

    @property
    def dim(self) -> int:
        return self.b.size

    @property
    def has_bounds(self) -> bool:
        return self.lo is not None or self.hi is not None

    def bounds(self):
        lo = np.full(self.dim, -np.inf) if self.lo is None else self.lo
        hi = np.full(self.dim, np.inf) if self.hi is None else self.hi
        return lo, hi

    def value(self, y) -> float:
        y = np.asarray(y, dtype=float)
        v = float(self.b @ y + 0.5 * y @ self.Q @ y)
        if self.coupling is None:
            return v + self.H / 6.0 * float(np.linalg.norm(y)) ** 3
        c = self.coupling
        h = c.B @ y
        return v + float(c.linear @ h + 0.5 * h @ (c.diag * h)) + self.H / 6.0 * float(np.linalg.norm(h)) ** 3

    def gradient(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        g = self.b + self.Q @ y
        if self.coupling is None:
            return g + 0.5 * self.H * float(np.linalg.norm(y)) * y
        c = self.coupling
        h = c.B @ y
        return g + c.B.T @ (c.linear + c.diag * h + 0.5 * self.H * float(np.linalg.norm(h)) * h)


def model_scale(Q, b, H: float, y, coupling: Optional[Coupling] = None) -> float:
    """Rounding scale of the model at ``y``: every product taken in absolute value.

    Errors in ``F(x + y) - F(x)`` and in the model value are a small multiple of
    machine epsilon times this scale, even when the quadratic term cancels.
    """
    a = np.abs(np.asarray(y, dtype=float))
    s = float(np.abs(b) @ a) + 0.5 * float(a @ np.abs(Q) @ a)
    if coupling is None:
        return s + H / 6.0 * float(np.linalg.norm(a)) ** 3
    ah = np.abs(coupling.B) @ a
    return (s + float(np.abs(coupling.linear) @ ah) + 0.5 * float(ah @ (coupling.diag * ah))
            + H / 6.0 * float(np.linalg.norm(coupling.B @ a)) ** 3)


@dataclass
class CubicSolution:
    y: np.ndarray
    tau: float
    model_value: float
    kkt_residual: float
    iterations: dict = field(default_factory=dict)
    converged: bool = True
    h: Optional[np.ndarray] = None
    fixed_point_residual: float = 0.0


class SecularRoot(NamedTuple):
    tau: float
    residual: float
    iterations: int


def root_find_secular(
    fixed_map: Callable,
    lo: float = 0.0,
    hi: Optional[float] = None,
    tol: float = ROOT_TOL,
    maxiter: int = 200,
) -> SecularRoot:
    """Solve ``tau = phi(tau)`` for a continuous non-increasing ``phi``.

    ``fixed_map(tau)`` returns ``phi(tau)`` or a pair ``(phi(tau), phi'(tau))``.
    Safeguarded Newton on ``r(tau) = tau - phi(tau)`` (secant when no derivative
    is supplied) inside a bracket ``[lo, hi]`` with bisection fallback. The
    smallest root in ``[lo, inf)`` is returned; ``hi`` is grown geometrically
    until ``r(hi) >= 0``.
    """

    def resid(t):
        out = fixed_map(t)
        if isinstance(out, tuple):
            p, dp = out
            return t - p, (1.0 - dp) if dp is not None and np.isfinite(dp) else None
        return t - out, None

    r_lo, _ = resid(lo)
    if not np.isnan(r_lo) and r_lo >= -tol * (1 + abs(lo)):
        if r_lo <= tol * (1 + abs(lo)):
            return SecularRoot(lo, abs(r_lo), 0)
        raise NumericalFailure("fixed map lies below the diagonal at the left end", lo=lo, r=r_lo)

    if hi is None or not hi > lo:
        hi = max(2 * lo, 1.0)
    r_hi, dr_hi = resid(hi)
    expansions = 0
    while r_hi < 0:
        expansions += 1
        if expansions > 200 or not np.isfinite(hi):
            raise NumericalFailure("bracket expansion failed", hi=hi, r=r_hi)
        lo, r_lo = hi, r_hi
        hi *= 4.0
        r_hi, dr_hi = resid(hi)

    t, r, dr = hi, r_hi, dr_hi
    best = (abs(r), t)
    prev = None
    for it in range(1, maxiter + 1):
        if abs(r) <= tol * (1 + abs(t)):
            return SecularRoot(t, abs(r), it - 1)
        if r < 0:
            lo, r_lo = t, r
        else:
            hi, r_hi = t, r
        cand = None
        if dr is not None and dr > 0:
            cand = t - r / dr
        elif prev is not None and prev[1] != r and np.isfinite(prev[1]):
            cand = t - r * (t - prev[0]) / (r - prev[1])
        elif np.isfinite(r_lo) and np.isfinite(r_hi) and r_hi != r_lo:
            cand = lo - r_lo * (hi - lo) / (r_hi - r_lo)
        if cand is None or not (lo < cand < hi) or not np.isfinite(cand):
            cand = 0.5 * (lo + hi)
        prev = (t, r)
        if cand == t or hi - lo <= 4 * np.spacing(max(abs(hi), 1e-300)):
            return SecularRoot(best[1], best[0], it)
        t = cand
        r, dr = resid(t)
        if abs(r) < best[0]:
            best = (abs(r), t)
    raise NumericalFailure("secular root finder hit the iteration cap", tau=best[1], residual=best[0])


def _check_convex(lam, scale):
    if lam.size and lam.min() < -1e-10 * max(1.0, scale):
        raise ValueError(f"subproblem matrix is not positive semidefinite (min eig {lam.min():.3e})")
    return np.maximum(lam, 0.0)


def _secular_eig(lam, bt, H, c2=0.0):
    """Root of ``tau = sqrt(||y(tau)||^2 + c2)`` with ``y(tau) = -bt/(lam + H tau/2)``.

    Works in the eigenbasis of ``Q``; returns ``(tau, coefficients of y, iterations)``.
    """
    bb = bt * bt
    bnorm = math.sqrt(float(bb.sum()))
    if H == 0.0:
        thr = PINV_RTOL * max(float(lam.max(initial=0.0)), 1e-300)
        pos = lam > thr
        if np.any(np.abs(bt[~pos]) > 1e-12 * max(bnorm, 1e-300) + 1e-300) and bnorm > 0:
            raise UnboundedSubproblem("H = 0 and linear term outside range(Q)")
        yt = np.zeros_like(bt)
        yt[pos] = -bt[pos] / lam[pos]
        return math.sqrt(float(yt @ yt) + c2), yt, 0
    if bnorm == 0.0:
        return math.sqrt(c2), np.zeros_like(bt), 0
    half = 0.5 * H

    def fixed_map(t):
        den = lam + half * t
        with np.errstate(divide="ignore", invalid="ignore"):
            s2 = float(np.sum(bb / den**2))
            if not np.isfinite(s2):
                return math.inf, None
            s3 = float(np.sum(bb / den**3))
        phi = math.sqrt(s2 + c2)
        return phi, -half * s3 / phi

    hi = math.sqrt(2.0 * bnorm / H) + math.sqrt(c2)
    root = root_find_secular(fixed_map, 0.0, hi * (1 + 1e-12) + 1e-300)
    tau = root.tau
    yt = -bt / (lam + half * tau)
    return tau, yt, root.iterations


def _solve_scalar(q, b, H) -> CubicSolution:
    # stationarity b + q y + (H/2)|y| y = 0 with y = -sign(b) t,
    # t the positive root of (H/2) t^2 + q t - |b| = 0 in cancellation-free form
    if q < 0:
        if q < -1e-10 * max(1.0, -q):
            raise ValueError(f"subproblem matrix is not positive semidefinite (min eig {q:.3e})")
        q = 0.0
    ab = abs(b)
    if ab == 0.0:
        return CubicSolution(np.zeros(1), 0.0, 0.0, 0.0, iterations={"root": 0})
    if H == 0.0 and q == 0.0:
        raise UnboundedSubproblem("linear term with zero curvature", b=b)
    t = 2.0 * ab / (q + math.sqrt(q * q + 2.0 * H * ab))
    y = -math.copysign(t, b)
    val = b * y + 0.5 * q * y * y + H / 6.0 * t**3
    kkt = abs(b + q * y + 0.5 * H * t * y)
    return CubicSolution(np.array([y]), t, val, kkt, iterations={"root": 0})


def solve_unconstrained(sub: CubicSubproblem) -> CubicSolution:
    """Global minimizer of the convex cubic model without coupling or bounds."""
    return minimize_cubic(sub.Q, sub.b, float(sub.H))


def minimize_cubic(Q, b, H: float) -> CubicSolution:
    """:func:`solve_unconstrained` on raw arrays (``Q`` symmetric, no validation)."""
    d = b.size
    if d == 0:
        return CubicSolution(np.zeros(0), 0.0, 0.0, 0.0)
    if d == 1:
        return _solve_scalar(float(Q[0, 0]), float(b[0]), H)
    lam, V = np.linalg.eigh(Q)
    lam = _check_convex(lam, float(np.abs(lam).max(initial=0.0)))
    bt = V.T @ b
    tau, yt, its = _secular_eig(lam, bt, H)
    y = V @ yt
    ny = float(np.linalg.norm(y))
    kkt = float(np.linalg.norm(Q @ y + 0.5 * H * ny * y + b))
    return CubicSolution(
        y=y,
        tau=ny,
        model_value=float(bt @ yt + 0.5 * (lam * yt) @ yt) + H / 6.0 * ny**3,
        kkt_residual=kkt,
        iterations={"root": its},
        fixed_point_residual=abs(tau - ny) if H > 0 else 0.0,
    )


def coupled_fixed_map(sub: CubicSubproblem, tau: float) -> float:
    """``||B Z(tau)^+ btot||`` evaluated directly with an eigenvalue pseudo-inverse."""
    c = sub.coupling
    B = c.B
    Z = sub.Q + B.T @ ((c.diag + 0.5 * sub.H * tau)[:, None] * B)
    lam, V = np.linalg.eigh(0.5 * (Z + Z.T))
    thr = PINV_RTOL * max(float(np.abs(lam).max(initial=0.0)), 1e-300)
    inv = np.where(lam > thr, 1.0 / np.where(lam > thr, lam, 1.0), 0.0)
    btot = sub.b + B.T @ c.linear
    return float(np.linalg.norm(B @ (V @ (inv * (V.T @ btot)))))


class _CholeskyPath:
    """Simultaneous diagonalization of ``K = L L^T`` and ``W = B^T B``."""

    def __init__(self, L, W, btot, H):
        self.L, self.H = L, H
        C = sla.solve_triangular(L, sla.solve_triangular(L, W, lower=True).T, lower=True)
        sig, self.V = np.linalg.eigh(0.5 * (C + C.T))
        self.sig = np.maximum(sig, 0.0)
        self.u = self.V.T @ sla.solve_triangular(L, btot, lower=True)
        self.su2 = self.sig * self.u**2

    def x(self, tau):
        c = 0.5 * self.H * tau
        z = self.V @ (self.u / (1.0 + c * self.sig))
        return -sla.solve_triangular(self.L.T, z, lower=False)

    def __call__(self, tau):
        c = 0.5 * self.H * tau
        den = 1.0 + c * self.sig
        phi = math.sqrt(float(np.sum(self.su2 / den**2)))
        if phi == 0.0:
            return 0.0, 0.0
        return phi, -0.5 * self.H * float(np.sum(self.sig * self.su2 / den**3)) / phi


def _reduced_coupled(K, W, btot, H):
    """Singular ``K``: eliminate ``null(B)`` and solve a plain cubic in ``h`` coordinates.

    With ``W = V diag(w) V^T`` write ``x = T a + N z`` where ``T`` spans
    ``range(W)`` scaled so that ``||B x|| = ||a||`` and ``N`` spans ``null(W)``.
    Minimizing out ``z`` leaves ``<bt, a> + 1/2 <Qt a, a> + H/6 ||a||^3``.
    """
    w, V = np.linalg.eigh(W)
    keep = w > PINV_RTOL * max(float(w.max(initial=0.0)), 1e-300)
    T = V[:, keep] / np.sqrt(w[keep])
    N = V[:, ~keep]
    KNN = N.T @ K @ N
    lamN, VN = np.linalg.eigh(0.5 * (KNN + KNN.T))
    posN = lamN > PINV_RTOL * max(float(np.abs(lamN).max(initial=0.0)), 1e-300)
    bN = VN.T @ (N.T @ btot)
    scale = float(np.linalg.norm(btot))
    if np.any(np.abs(bN[~posN]) > 1e-10 * max(scale, 1e-300)):
        raise UnboundedSubproblem("linear term has a component along a flat direction of the model")
    invN = np.where(posN, 1.0 / np.where(posN, lamN, 1.0), 0.0)

    def knn_pinv(v):
        w_ = VN.T @ v
        return VN @ ((invN if w_.ndim == 1 else invN[:, None]) * w_)

    KTN = T.T @ K @ N
    Qt = T.T @ K @ T - KTN @ knn_pinv(KTN.T)
    bt = T.T @ btot - KTN @ knn_pinv(N.T @ btot)
    if bt.size:
        lam, U = np.linalg.eigh(0.5 * (Qt + Qt.T))
        lam = _check_convex(lam, float(np.abs(lam).max(initial=0.0)))
        tau, at, its = _secular_eig(lam, U.T @ bt, H)
        a = U @ at
    else:
        tau, a, its = 0.0, np.zeros(0), 0
    z = -knn_pinv(N.T @ btot + KTN.T @ a)
    return T @ a + N @ z, tau, its


def solve_affine_coupled(sub: CubicSubproblem) -> CubicSolution:
    """Minimizer of the coupled model via ``tau = ||B Z(tau)^+ btot||``.

    ``Z(tau) = Q + B^T (diag(D) + H tau / 2) B`` and ``btot = b + B^T b2``. When
    ``Z(0)`` is positive definite a single Cholesky factorization serves every
    ``tau`` evaluation. A singular ``Z(0)`` admits spurious fixed points of the
    pseudo-inverse map, so that case is reduced to a plain cubic in ``h``.
    """
    if sub.coupling is None:
        raise ValueError("subproblem has no coupling")
    c = sub.coupling
    Q, b, H, B = sub.Q, sub.b, float(sub.H), c.B
    K = Q + B.T @ (c.diag[:, None] * B)
    K = 0.5 * (K + K.T)
    W = B.T @ B
    btot = b + B.T @ c.linear
    d = sub.dim
    if d == 0 or not np.any(btot):
        y = np.zeros(d)
        return CubicSolution(y, 0.0, 0.0, float(np.linalg.norm(btot)), {"root": 0}, h=B @ y)

    chol = None
    try:
        L = np.linalg.cholesky(K)
        if np.diag(L).min() ** 2 > 1e-10 * max(np.diag(L).max() ** 2, 1e-300):
            chol = _CholeskyPath(L, W, btot, H)
    except np.linalg.LinAlgError:
        pass
    if chol is not None:
        if H == 0.0:
            tau, its = 0.0, 0
        else:
            root = root_find_secular(chol, 0.0, None)
            tau, its = root.tau, root.iterations
        x = chol.x(tau)
        path = "cholesky"
    else:
        x, tau, its = _reduced_coupled(K, W, btot, H)
        path = "reduced"
    h = B @ x
    nh = float(np.linalg.norm(h))
    mu = c.linear + c.diag * h + 0.5 * H * nh * h
    kkt = float(np.linalg.norm(b + Q @ x + B.T @ mu))
    sol = CubicSolution(
        y=x,
        tau=nh,
        model_value=sub.value(x),
        kkt_residual=kkt,
        iterations={"root": its, "path": path},
        h=h,
        fixed_point_residual=abs(tau - nh) if H > 0 else 0.0,
    )
    if kkt > 1e-6 * (1.0 + float(np.linalg.norm(btot))):
        raise NumericalFailure("coupled subproblem: KKT system not satisfied", kkt=kkt, tau=tau)
    return sol


def _projected_grad_norm(y, g, lo, hi):
    return float(np.linalg.norm(y - np.clip(y - g, lo, hi)))


def _polish(sub, y, g, lo, hi, max_rounds=20):
    """Primal-dual active-set refinement seeded by the bound pattern of ``y``."""
    Q, b, H = sub.Q, sub.b, float(sub.H)
    d = sub.dim
    with np.errstate(invalid="ignore"):
        at_lo = (y <= lo + 1e-12 * (1 + np.abs(lo))) & (g > 0)
        at_hi = (y >= hi - 1e-12 * (1 + np.abs(hi))) & (g < 0)
    best = None
    seen = set()
    for _ in range(max_rounds):
        key = (at_lo.tobytes(), at_hi.tobytes())
        if key in seen:
            break
        seen.add(key)
        act = at_lo | at_hi
        free = ~act
        z = np.where(at_lo, lo, np.where(at_hi, hi, 0.0))
        if np.any(free):
            bf = b[free] + Q[np.ix_(free, act)] @ z[act]
            Qf = Q[np.ix_(free, free)]
            lam, V = np.linalg.eigh(Qf)
            lam = np.maximum(lam, 0.0)
            try:
                _, yt = _secular_eig(lam, V.T @ bf, H, c2=float(z[act] @ z[act]))[:2]
            except NumericalFailure:
                break
            z[free] = V @ yt
        gz = sub.gradient(z)
        viol_lo = free & (z < lo)
        viol_hi = free & (z > hi)
        wrong_lo = at_lo & (gz < 0)
        wrong_hi = at_hi & (gz > 0)
        zc = np.clip(z, lo, hi)
        if best is None or sub.value(zc) < best[0]:
            best = (sub.value(zc), zc)
        if not (viol_lo.any() or viol_hi.any() or wrong_lo.any() or wrong_hi.any()):
            return zc
        at_lo = (at_lo & ~wrong_lo) | viol_lo
        at_hi = (at_hi & ~wrong_hi) | viol_hi
    return None if best is None else best[1]


def solve_fallback_composite(
    sub: CubicSubproblem, maxiter: int = 100_000, tol: float = 1e-12, polish_every: int = 25
) -> CubicSolution:
    """Box-constrained cubic model by monotone accelerated projected gradient.

    Every ``polish_every`` iterations the current bound pattern seeds an
    active-set solve that is exact on the free coordinates; the better of the
    two points is kept. Stops once the projected gradient norm is below
    ``tol * (1 + ||b||)``.
    """
    lo, hi = sub.bounds()
    if np.any(lo > hi):
        raise ValueError("empty box")
    d = sub.dim
    f, grad = sub.value, sub.gradient
    stop = tol * (1.0 + float(np.linalg.norm(sub.b)))

    y = np.clip(np.zeros(d), lo, hi)
    fy = f(y)
    z, t_mom = y.copy(), 1.0
    Lc = max(float(np.linalg.norm(sub.Q, 2)), 1e-12) + float(sub.H)
    it = 0
    converged = False
    for it in range(1, maxiter + 1):
        gy = grad(y)
        if _projected_grad_norm(y, gy, lo, hi) <= stop:
            converged = True
            break
        if it == 1 or it % polish_every == 0:
            cand = _polish(sub, y, gy, lo, hi)
            if cand is not None:
                fc = f(cand)
                if fc <= fy:
                    y, fy = cand, fc
                    z, t_mom = y.copy(), 1.0
                    if _projected_grad_norm(y, grad(y), lo, hi) <= stop:
                        converged = True
                        break
        gz = grad(z)
        fz = f(z)
        while True:
            w = np.clip(z - gz / Lc, lo, hi)
            step = w - z
            if f(w) <= fz + float(gz @ step) + 0.5 * Lc * float(step @ step) + 1e-15 * abs(fz):
                break
            Lc *= 2.0
        fw = f(w)
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_mom * t_mom))
        if fw <= fy:
            z = w + ((t_mom - 1.0) / t_new) * (w - y)
            y_new, fy = w, fw
        else:
            # monotone variant: keep y, restart momentum toward w
            z = y + (t_mom / t_new) * (w - y)
            y_new = y
        z = np.clip(z, lo, hi)
        y = y_new
        t_mom = t_new
        Lc = max(Lc * 0.9, 1e-12)
    gy = grad(y)
    kkt = _projected_grad_norm(y, gy, lo, hi)
    return CubicSolution(
        y=y,
        tau=float(np.linalg.norm(y)),
        model_value=fy,
        kkt_residual=kkt,
        iterations={"inner": it},
        converged=converged,
    )


def solve(sub: CubicSubproblem) -> CubicSolution:
    """Dispatch on the subproblem form."""
    if sub.coupling is not None:
        if sub.has_bounds:
            raise ValueError("coupled subproblems with bounds are not supported")
        return solve_affine_coupled(sub)
    if sub.has_bounds:
        return solve_fallback_composite(sub)
    return solve_unconstrained(sub)
