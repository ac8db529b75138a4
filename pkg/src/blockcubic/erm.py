"""Regularized empirical risk minimization through block cubic Newton steps.

The primal problem is

    P(w) = (1/m) sum_i phi_i(b_i^T w) + (lam/2) ||w||^2

with rows ``b_i`` of ``B`` (m x d). Two solvers are provided:

* the constrained form over ``(w, alpha)`` with ``alpha = B w`` kept exactly,
  stepping on sampled coordinates of ``w`` through the coupled cubic solver;
* a dual ascent on

      D(alpha) = -(1/m) sum_i phi_i*(-alpha_i) - ||B^T alpha||^2 / (2 lam m^2)

  with cubic steps on sampled coordinates of ``alpha`` and an adaptive ``H``,
  and the primal point ``w = B^T alpha / (lam m)``.
"""
from __future__ import annotations

import io
import math
import time
from array import array
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .blocks import BlockPartition, SamplingSpec, draw, index_set, make_rng
from .cubsolve import (
    Coupling,
    CubicSubproblem,
    NumericalFailure,
    minimize_cubic,
    model_scale,
    solve_affine_coupled,
    solve_fallback_composite,
)
from .losses import (
    ScalarLoss,
    conjugate012,
    conjugate_domain,
    eval012,
    hess_lipschitz_constant,
    logistic,
    poisson,
    quadratic,
    stack_losses,
)
from .problem import BlockLoss, CompositeProblem, QuadraticG, SmoothG
from .rbcn import AdaptiveH, ConstantH, RbcnConfig, RunTrace
from .tracefmt import fmt_float, read_rows, write_rows

__all__ = [
    "ErmProblem",
    "logistic_erm",
    "poisson_erm",
    "quadratic_erm",
    "primal_value",
    "primal_grad",
    "dual_value",
    "primal_from_dual",
    "duality_gap",
    "initial_dual",
    "primal_problem",
    "dual_problem",
    "ConstrainedErm",
    "constrained_reformulate",
    "ConstrainedStep",
    "constrained_rbcn_step",
    "constrained_rbcn_run",
    "SdcnaConfig",
    "DualTrace",
    "DualResult",
    "sdcna_run",
    "DUAL_TRACE_COLUMNS",
]

DUAL_TRACE_COLUMNS = ("epoch", "primal", "dual", "gap", "H")
NOOP_STEP = 1e-15
ACCEPT_RTOL = 1e-14
# dual steps keep this fraction of the distance to the conjugate domain boundary,
# where the curvature of -D blows up
BOUNDARY_KEEP = 0.01


@dataclass(frozen=True, eq=False)
class ErmProblem:
    """Data ``B`` (m x d), per-sample losses and regularization weight ``lam``.

    ``loss`` is one :class:`ScalarLoss` whose parameters broadcast over the
    ``m`` samples, or a list of ``m`` same-kind losses. ``lam`` defaults to
    ``1/m``.
    """

    B: np.ndarray
    loss: Union[ScalarLoss, Sequence[ScalarLoss]]
    lam: Optional[float] = None

    def __post_init__(self):
        B = np.asarray(self.B, dtype=float)
        if B.ndim != 2 or min(B.shape) < 1:
            raise ValueError("B must be a nonempty m x d matrix")
        object.__setattr__(self, "B", B)
        loss = self.loss
        if not isinstance(loss, ScalarLoss):
            loss = list(loss)
            if len(loss) != B.shape[0]:
                raise ValueError(f"need one loss per row ({B.shape[0]}), got {len(loss)}")
            loss = stack_losses(loss)
        object.__setattr__(self, "loss", loss)
        lam = 1.0 / B.shape[0] if self.lam is None else float(self.lam)
        if not lam > 0:
            raise ValueError("lam must be positive")
        object.__setattr__(self, "lam", lam)

    @property
    def m(self) -> int:
        return self.B.shape[0]

    @property
    def d(self) -> int:
        return self.B.shape[1]

    def loss_at(self, S) -> ScalarLoss:
        """The losses of the samples in ``S`` as one array-parameter loss."""
        L = self.loss
        pick = lambda v: v if np.ndim(v) == 0 else np.asarray(v)[S]  # noqa: E731
        return ScalarLoss(L.kind, a=pick(L.a), t0=pick(L.t0), c=pick(L.c), y=pick(L.y))


def logistic_erm(B, labels, lam=None) -> ErmProblem:
    """``log(1 + exp(-y_i b_i^T w))``; labels in {-1, +1} are folded into the rows."""
    labels = np.asarray(labels, dtype=float)
    if not np.all(np.isin(labels, (-1.0, 1.0))):
        raise ValueError("logistic labels must be -1 or +1")
    return ErmProblem(-labels[:, None] * np.asarray(B, dtype=float), logistic(), lam)


def poisson_erm(B, counts, lam=None) -> ErmProblem:
    """``exp(b_i^T w) - y_i b_i^T w`` for nonnegative integer counts ``y_i``."""
    return ErmProblem(B, poisson(np.asarray(counts, dtype=float)), lam)


def quadratic_erm(B, targets, lam=None, a=1.0) -> ErmProblem:
    """``(a/2) (b_i^T w - y_i)^2``."""
    return ErmProblem(B, quadratic(a=a, t0=np.asarray(targets, dtype=float)), lam)


def primal_value(erm: ErmProblem, w) -> float:
    w = np.asarray(w, dtype=float)
    v = eval012(erm.loss, erm.B @ w)[0]
    return float(np.mean(v)) + 0.5 * erm.lam * float(w @ w)


def primal_grad(erm: ErmProblem, w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    d1 = eval012(erm.loss, erm.B @ w)[1]
    return erm.B.T @ np.asarray(d1) / erm.m + erm.lam * w


def dual_value(erm: ErmProblem, alpha) -> float:
    """``D(alpha)``; ``-inf`` outside the conjugate domain."""
    alpha = np.asarray(alpha, dtype=float)
    c = conjugate012(erm.loss, -alpha, check=False)[0]
    v = erm.B.T @ alpha
    return -float(np.mean(c)) - float(v @ v) / (2.0 * erm.lam * erm.m**2)


def primal_from_dual(erm: ErmProblem, alpha) -> np.ndarray:
    """``w = B^T alpha / (lam m)``, the gradient of the conjugate regularizer."""
    return erm.B.T @ np.asarray(alpha, dtype=float) / (erm.lam * erm.m)


def duality_gap(erm: ErmProblem, w, alpha) -> float:
    """``P(w) - D(alpha)``; nonnegative up to rounding by weak duality."""
    return primal_value(erm, w) - dual_value(erm, alpha)


def initial_dual(erm: ErmProblem) -> np.ndarray:
    """A point strictly inside the dual domain.

    logistic: ``-1/2`` (centre of ``[-1, 0]``); poisson: ``y_i - 1``; otherwise 0.
    """
    k = erm.loss.kind
    if k == "logistic":
        return np.full(erm.m, -0.5)
    if k == "poisson":
        return np.broadcast_to(np.asarray(erm.loss.y, dtype=float), (erm.m,)) - 1.0
    return np.zeros(erm.m)


def _curvature_sup(loss: ScalarLoss) -> float:
    k = loss.kind
    if k == "quadratic":
        return float(np.max(loss.a))
    if k == "logistic":
        return 0.25
    return math.inf


def primal_problem(erm: ErmProblem) -> CompositeProblem:
    """``P`` as a smooth problem over unit blocks of ``w``.

    The curvature bounds are ``lam I <= hess P <= lam I + s B^T B / m`` with
    ``s`` the supremum of ``phi''``; losses without one (poisson) are rejected.
    """
    s = _curvature_sup(erm.loss)
    if not math.isfinite(s):
        raise ValueError(f"{erm.loss.kind} loss has unbounded curvature")
    I = np.eye(erm.d)
    g = SmoothG(
        value_fn=lambda w: primal_value(erm, w),
        grad_fn=lambda w: primal_grad(erm, w),
        G=erm.lam * I,
        A=erm.lam * I + s * (erm.B.T @ erm.B) / erm.m,
    )
    return CompositeProblem(BlockPartition.uniform(erm.d), g=g)


def dual_problem(erm: ErmProblem) -> CompositeProblem:
    """``-D`` over unit blocks of ``alpha`` for quadratic losses, where it is quadratic."""
    L = erm.loss
    if L.kind != "quadratic":
        raise ValueError("dual_problem needs quadratic losses")
    m = erm.m
    a = np.broadcast_to(np.asarray(L.a, float), (m,))
    t0 = np.broadcast_to(np.asarray(L.t0, float), (m,))
    M = erm.B @ erm.B.T / (erm.lam * m * m) + np.diag(1.0 / (m * a))
    return CompositeProblem(BlockPartition.uniform(m), g=QuadraticG(M, -t0 / m))


# ---------------------------------------------------------------- constrained form


@dataclass(frozen=True, eq=False)
class ConstrainedErm:
    """``(w, alpha)`` form: ``lam/2 ||w||^2 + (1/m) sum phi_i(alpha_i)`` on ``alpha = B w``.

    ``problem`` holds the smooth parts over ``d`` unit blocks and one block of
    size ``m``; the affine constraint is checked by :meth:`is_feasible`.
    """

    erm: ErmProblem
    problem: CompositeProblem
    feas_tol: float = 1e-9

    def split(self, z):
        z = np.asarray(z, dtype=float)
        return z[: self.erm.d], z[self.erm.d :]

    def join(self, w, alpha) -> np.ndarray:
        return np.concatenate([np.asarray(w, float), np.asarray(alpha, float)])

    def is_feasible(self, z) -> bool:
        w, alpha = self.split(z)
        r = alpha - self.erm.B @ w
        return bool(np.linalg.norm(r, np.inf) <= self.feas_tol * (1.0 + np.abs(alpha).max(initial=0.0)))

    def objective(self, z) -> float:
        """Objective including the constraint indicator."""
        if not self.is_feasible(z):
            return math.inf
        return self.smooth_value(z)

    def smooth_value(self, z) -> float:
        return self.problem.g_value(z) + self.problem.phi_value(z)

    def smooth_grad(self, z) -> np.ndarray:
        return self.problem.smooth_grad(z)


def constrained_reformulate(erm: ErmProblem) -> ConstrainedErm:
    d, m = erm.d, erm.m
    part = BlockPartition((1,) * d + (m,))
    M = np.zeros((d + m, d + m))
    M[np.arange(d), np.arange(d)] = erm.lam
    phi = [None] * d + [BlockLoss(erm.loss, weight=1.0 / m)]
    return ConstrainedErm(erm, CompositeProblem(part, g=QuadraticG(M), phi=phi))


@dataclass
class ConstrainedStep:
    w: np.ndarray
    alpha: np.ndarray
    objective: float
    H: float
    next_H: float
    trials: int
    accepted: bool
    step_norm: float
    model_decrease: float
    kkt_residual: float = 0.0


class _PrimalState:
    def __init__(self, erm: ErmProblem, w, alpha=None):
        self.erm = erm
        self.w = np.array(w, dtype=float)
        self.alpha = erm.B @ self.w if alpha is None else np.array(alpha, dtype=float)
        self.fx = self.value(self.w, self.alpha)

    def value(self, w, alpha):
        return float(np.mean(eval012(self.erm.loss, alpha)[0])) + 0.5 * self.erm.lam * float(w @ w)

    def refresh(self):
        self.alpha = self.erm.B @ self.w
        self.fx = self.value(self.w, self.alpha)


def _primal_step(state: _PrimalState, S, strat, H_cur) -> ConstrainedStep:
    erm = state.erm
    m, lam = erm.m, erm.lam
    fx = state.fx
    w, alpha = state.w, state.alpha
    if S.size == 0:
        return ConstrainedStep(w, alpha, fx, H_cur, H_cur, 0, True, 0.0, 0.0)
    Bh = erm.B[:, S]
    _, d1, d2 = eval012(erm.loss, alpha)
    Q = m * lam * np.eye(S.size)
    b = m * lam * w[S]

    def attempt(H):
        sub = CubicSubproblem(Q, b, H, coupling=Coupling(Bh, np.asarray(d2), np.asarray(d1)))
        sol = solve_affine_coupled(sub)
        y, h = sol.y, sol.h
        nrm = float(np.linalg.norm(y))
        mstar = fx + sol.model_value / m
        if nrm <= NOOP_STEP:
            return sol, nrm, fx, True
        wn = w.copy()
        wn[S] += y
        fnew = state.value(wn, alpha + h)
        slack = ACCEPT_RTOL * (1.0 + abs(fx) + model_scale(Q, b, H, y, sub.coupling) / m)
        return sol, nrm, fnew, fnew <= mstar + slack

    def finish(H, next_H, trials, sol, nrm, fnew, ok):
        dec = max(-sol.model_value / m, 0.0)
        if ok and nrm > NOOP_STEP:
            state.w[S] += sol.y
            state.alpha += sol.h
            state.fx = fnew
            return ConstrainedStep(state.w, state.alpha, fnew, H, next_H, trials, True, nrm, dec,
                                   sol.kkt_residual)
        return ConstrainedStep(state.w, state.alpha, fx, H, next_H, trials, ok, 0.0, dec,
                               sol.kkt_residual)

    HL = hess_lipschitz_constant(erm.loss)
    if isinstance(strat, ConstantH):
        H = HL if strat.value is None else float(strat.value)
        if not math.isfinite(H):
            raise ValueError("loss has no global Hessian-Lipschitz constant; use AdaptiveH")
        sol, nrm, fnew, ok = attempt(H)
        return finish(H, H, 1, sol, nrm, fnew, ok)
    cap = strat.cap if strat.cap is not None else (2.0 * HL if 0 < HL < math.inf else None)
    H = max(H_cur, strat.H_min)
    if cap is not None:
        H = min(H, cap)
    failures = 0
    while True:
        sol, nrm, fnew, ok = attempt(H)
        if ok:
            next_H = H_cur if nrm <= NOOP_STEP else (
                max(H * strat.shrink, strat.H_min) if failures == 0 else H)
            return finish(H, next_H, failures + 1, sol, nrm, fnew, ok)
        failures += 1
        if (cap is not None and H >= cap) or failures >= strat.max_failures:
            raise NumericalFailure("no H passed the acceptance test", H=H, failures=failures)
        H = H * strat.growth if cap is None else min(H * strat.growth, cap)


def constrained_rbcn_step(erm: ErmProblem, w, S, H: Optional[float] = None, alpha=None) -> ConstrainedStep:
    """One coupled cubic step on the coordinates ``S`` of ``w``.

    ``alpha`` defaults to ``B w``; ``H`` defaults to the loss Hessian-Lipschitz
    constant, for which the model bounds ``P`` from above.
    """
    S = index_set(S, erm.d)
    state = _PrimalState(erm, w, alpha)
    if np.linalg.norm(state.alpha - erm.B @ state.w, np.inf) > 1e-9 * (1 + np.abs(state.alpha).max()):
        raise ValueError("alpha must equal B w on entry")
    return _primal_step(state, S, ConstantH(value=H), 0.0)


def constrained_rbcn_run(
    erm: ErmProblem, config: RbcnConfig, w0=None, f_star: Optional[float] = None
) -> RunTrace:
    """Coordinate-sampled coupled cubic steps on ``w`` with ``alpha = B w`` maintained.

    ``alpha`` is updated by the step's ``h = B_S y`` and recomputed from ``w``
    every ``refresh_every`` iterations (default ``max(d, 256)``).
    """
    d = erm.d
    part = BlockPartition.uniform(d)
    w = np.zeros(d) if w0 is None else np.array(w0, dtype=float)
    state = _PrimalState(erm, w)
    strat = config.h_strategy
    tau = config.sampling.tau_for(d)
    rng = make_rng(config.effective_seed())
    refresh = config.refresh_every or max(d, 256)
    patience = config.stall_window or math.ceil(d / tau)
    H_cur = strat.H0 if isinstance(strat, AdaptiveH) else 0.0
    trace = RunTrace(meta={"tau": tau, "n": d, "seed": config.effective_seed()})
    t0 = time.perf_counter()
    trace.append(0, state.fx, 0.0, math.nan, (), 0.0, math.nan)

    def reached():
        return f_star is not None and config.target_accuracy is not None and (
            state.fx - f_star <= config.target_accuracy)

    if reached():
        trace.status = "target"
    stalled = 0
    k = 0
    while trace.status == "running" and k < config.max_iterations:
        k += 1
        S = draw(config.sampling, part, rng)
        try:
            res = _primal_step(state, S, strat, H_cur)
        except NumericalFailure as e:
            trace.status = "failed"
            trace.x = state.w.copy()
            e.info.update(iteration=k, trace=trace)
            raise
        H_cur = res.next_H
        if k % refresh == 0:
            state.refresh()
        trace.append(k, state.fx, res.step_norm, res.H, S, 1e3 * (time.perf_counter() - t0),
                     res.model_decrease)
        if reached():
            trace.status = "target"
            break
        stalled = stalled + 1 if res.model_decrease < config.stall_tol else 0
        if stalled >= patience:
            trace.status = "stalled"
    if trace.status == "running":
        trace.status = "max_iterations"
    trace.x = state.w.copy()
    trace.meta["alpha"] = state.alpha.copy()
    return trace


# ---------------------------------------------------------------- dual ascent


class _DualState:
    """``alpha`` with cached ``v = B^T alpha`` and per-sample conjugate values."""

    def __init__(self, erm: ErmProblem, alpha):
        self.erm = erm
        self.alpha = np.array(alpha, dtype=float)
        if self.alpha.shape != (erm.m,):
            raise ValueError(f"alpha must have length {erm.m}")
        self.refresh()

    def refresh(self):
        erm = self.erm
        self.v = erm.B.T @ self.alpha
        c = np.asarray(conjugate012(erm.loss, -self.alpha, check=False)[0], dtype=float)
        if not np.all(np.isfinite(c)):
            raise ValueError("alpha lies outside the dual domain")
        self.conj = np.broadcast_to(c, (erm.m,)).copy()
        self.negD = self._neg_dual(self.conj.sum(), self.v)

    def _neg_dual(self, conj_sum, v):
        erm = self.erm
        return conj_sum / erm.m + float(v @ v) / (2.0 * erm.lam * erm.m**2)

    @property
    def w(self) -> np.ndarray:
        return self.v / (self.erm.lam * self.erm.m)

    @property
    def dual(self) -> float:
        return -self.negD

    def derivs(self, S, h=None):
        """Gradient and Hessian of ``-D`` in the coordinates ``S`` at ``alpha + h``."""
        erm = self.erm
        BS = erm.B[S]
        s = -self.alpha[S] if h is None else -(self.alpha[S] + h)
        v = self.v if h is None else self.v + BS.T @ h
        _, c1, c2 = conjugate012(erm.loss_at(S), s, check=False)
        m = erm.m
        grad = (BS @ v / (erm.lam * m) - c1) / m
        hess = BS @ BS.T / (erm.lam * m * m) + np.diag(np.broadcast_to(c2, (S.size,))) / m
        return grad, hess

    def trial(self, S, h):
        """``-D(alpha + h)`` (``inf`` outside the domain) with the new conjugate values."""
        erm = self.erm
        c = conjugate012(erm.loss_at(S), -(self.alpha[S] + h), check=False)[0]
        c = np.broadcast_to(np.asarray(c, float), (S.size,))
        if not np.all(np.isfinite(c)):
            return math.inf, None, None
        v = self.v + erm.B[S].T @ h
        rest = float(self.conj.sum() - self.conj[S].sum())
        return self._neg_dual(rest + float(c.sum()), v), c, v

    def step_box(self, S, keep: float):
        """Bounds on ``h`` keeping at least ``keep`` of the distance to the domain boundary."""
        lo, hi = conjugate_domain(self.erm.loss_at(S))
        s = -self.alpha[S]
        with np.errstate(invalid="ignore"):
            upper = np.where(np.isfinite(lo), (1.0 - keep) * (s - lo), np.inf)
            lower = np.where(np.isfinite(hi), -(1.0 - keep) * (hi - s), -np.inf)
        return np.broadcast_to(lower, (S.size,)), np.broadcast_to(upper, (S.size,))

    def apply(self, S, h, c, v, negD):
        self.alpha[S] += h
        self.conj[S] = c
        self.v = v
        self.negD = negD


@dataclass(frozen=True)
class SdcnaConfig:
    """Dual cubic ascent settings; ``sampling`` draws subsets of the ``m`` samples."""

    sampling: SamplingSpec = field(default_factory=SamplingSpec)
    H0: float = 1.0
    growth: float = 2.0
    shrink: float = 0.5
    H_min: float = 1e-12
    max_failures: int = 60
    max_epochs: float = 100.0
    target_gap: Optional[float] = None
    record_every: int = 1
    seed: Optional[int] = None

    def effective_seed(self) -> int:
        return self.sampling.seed if self.seed is None else int(self.seed)


class DualTrace:
    """Column-wise records ``epoch, primal, dual, gap, H`` of a dual method."""

    def __init__(self, meta: Optional[dict] = None):
        self.epoch = array("d")
        self.primal = array("d")
        self.dual = array("d")
        self.gap = array("d")
        self.H = array("d")
        self.elapsed_ms = array("d")
        self.status = "running"
        self.meta = dict(meta or {})

    def append(self, epoch, primal, dual, H, elapsed_ms):
        self.epoch.append(epoch)
        self.primal.append(primal)
        self.dual.append(dual)
        self.gap.append(primal - dual)
        self.H.append(H)
        self.elapsed_ms.append(elapsed_ms)

    def __len__(self):
        return len(self.epoch)

    def epochs_to(self, gap: float) -> Optional[float]:
        hit = np.nonzero(np.array(self.gap) <= gap)[0]
        return float(self.epoch[hit[0]]) if hit.size else None

    def rows(self):
        for r in range(len(self)):
            yield tuple(fmt_float(getattr(self, c)[r]) for c in DUAL_TRACE_COLUMNS)

    def write_csv(self, f) -> None:
        write_rows(f, DUAL_TRACE_COLUMNS, self.rows())

    def to_csv(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()

    @classmethod
    def read_csv(cls, f) -> "DualTrace":
        tr = cls()
        for epoch, primal, dual, _gap, H in read_rows(f, DUAL_TRACE_COLUMNS):
            tr.append(epoch, primal, dual, H, math.nan)
        tr.status = "loaded"
        return tr


@dataclass
class DualResult:
    w: np.ndarray
    alpha: np.ndarray
    trace: DualTrace


def _dual_cubic_step(state: _DualState, S, cfg: SdcnaConfig, H):
    """One accepted cubic step; returns the ``H`` used and whether ``alpha`` moved."""
    grad, hess = state.derivs(S)
    negD = state.negD
    lo, hi = state.step_box(S, BOUNDARY_KEEP)
    failures = 0
    while True:
        sol = minimize_cubic(hess, grad, H)
        if np.any(sol.y > hi) or np.any(sol.y < lo):
            sol = solve_fallback_composite(CubicSubproblem(hess, grad, H, lo=lo, hi=hi))
        h = sol.y
        if float(np.linalg.norm(h)) <= NOOP_STEP:
            return H, False
        new, c, v = state.trial(S, h)
        slack = ACCEPT_RTOL * (1.0 + abs(negD) + model_scale(hess, grad, H, h))
        if new <= negD + sol.model_value + slack:
            state.apply(S, h, c, v, new)
            return H, True
        # model too optimistic or step left the domain: regularize more, at least
        # enough that the cubic term would have covered the observed miss
        failures += 1
        if failures >= cfg.max_failures:
            raise NumericalFailure("no H passed the acceptance test", H=H, failures=failures,
                                   blocks=S.tolist())
        quad = float(grad @ h) + 0.5 * float(h @ hess @ h)
        needed = 6.0 * (new - negD - quad) / float(np.linalg.norm(h)) ** 3
        H = cfg.growth * max(H, needed if math.isfinite(needed) else H)


def sdcna_run(erm: ErmProblem, config: SdcnaConfig, alpha0=None) -> DualResult:
    """Dual cubic ascent with adaptive ``H``.

    Each sample keeps its own ``H``; an iteration starts from the largest
    over the sampled set, raises it until ``-D(alpha + T) <= M*`` with the
    step inside the domain, then stores half of the accepted value for the
    sampled coordinates. A rejection raises ``H`` by ``growth`` and to at
    least the value whose cubic term would have covered the miss. The cubic model
    is minimized over the box that keeps ``BOUNDARY_KEEP`` of each
    coordinate's distance to the domain boundary. Stops after
    ``max_epochs`` epochs (``m`` coordinate updates each) or when the duality
    gap reaches ``target_gap``.
    """
    m = erm.m
    part = BlockPartition.uniform(m)
    state = _DualState(erm, initial_dual(erm) if alpha0 is None else alpha0)
    tau = config.sampling.tau_for(m)
    rng = make_rng(config.effective_seed())
    trace = DualTrace(meta={"tau": tau, "m": m, "seed": config.effective_seed(), "method": "sdcna"})
    t0 = time.perf_counter()
    H = float(config.H0)
    H_by_sample = np.full(m, H)
    updates = 0

    def record():
        trace.append(updates / m, primal_value(erm, state.w), state.dual, H,
                     1e3 * (time.perf_counter() - t0))

    def done():
        return config.target_gap is not None and trace.gap[-1] <= config.target_gap

    record()
    k = 0
    while not done() and updates < config.max_epochs * m:
        k += 1
        S = draw(config.sampling, part, rng)
        try:
            H, _ = _dual_cubic_step(state, S, config, float(H_by_sample[S].max()))
        except NumericalFailure as e:
            trace.status = "failed"
            e.info.update(iteration=k, trace=trace)
            raise
        H_by_sample[S] = max(H * config.shrink, config.H_min)
        updates += S.size
        if updates % m < S.size:
            state.refresh()
        if k % config.record_every == 0:
            record()
    if len(trace) == 0 or trace.epoch[-1] != updates / m:
        record()
    trace.status = "target" if done() else "max_epochs"
    return DualResult(state.w.copy(), state.alpha.copy(), trace)
