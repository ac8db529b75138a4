"""Randomized block cubic Newton iterations, run traces and rate certificates.

Each iteration samples a set of blocks, minimizes the cubic model of ``F``
over directions supported on them and accepts the step when ``F`` does not
exceed the model value. The regularization ``H`` is either constant or found
by a halving/doubling search.
"""
from __future__ import annotations

import io
import math
import time
from array import array
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .blocks import SamplingSpec, draw, expected_submatrix, index_set, make_rng
from .cubsolve import CubicSubproblem, NumericalFailure, minimize_cubic, model_scale, solve
from .problem import CompositeProblem, _assemble_model
from .tracefmt import fmt_float, read_rows, write_rows

__all__ = [
    "ConstantH",
    "AdaptiveH",
    "RbcnConfig",
    "StepResult",
    "RunTrace",
    "RateCertificate",
    "NotApplicable",
    "DistanceMonitor",
    "rbcn_step",
    "rbcn_run",
    "compute_beta",
    "certificate_iterations",
    "TRACE_COLUMNS",
    "RATES",
]

TRACE_COLUMNS = ("k", "objective", "step_norm", "H", "sample_size", "elapsed_ms")
NOOP_STEP = 1e-15
# acceptance slack relative to |F| and the model term sizes: covers rounding
# in evaluating F and the model, not real increases
ACCEPT_RTOL = 1e-14


@dataclass(frozen=True)
class ConstantH:
    """Fixed regularization.

    ``value`` overrides everything; otherwise ``per_block`` uses
    ``max_{i in S} H_i`` and the global choice uses ``H_F``.
    """

    value: Optional[float] = None
    per_block: bool = True


@dataclass(frozen=True)
class AdaptiveH:
    """Halving/doubling search for ``H`` warm-started from the previous step.

    ``cap`` defaults to ``2 H_F`` when ``H_F`` is finite and positive; without
    a cap at most ``max_failures`` doublings are tried per step.
    """

    H0: float = 1.0
    growth: float = 2.0
    shrink: float = 0.5
    H_min: float = 1e-12
    cap: Optional[float] = None
    max_failures: int = 60

    def __post_init__(self):
        if not (self.H0 > 0 and self.growth > 1 and 0 < self.shrink < 1 and self.H_min > 0):
            raise ValueError("need H0 > 0, growth > 1, 0 < shrink < 1 and H_min > 0")
        if self.cap is not None and self.cap <= 0:
            raise ValueError("cap must be positive")

    def cap_for(self, problem: CompositeProblem) -> Optional[float]:
        if self.cap is not None:
            return float(self.cap)
        HF = problem.H_F
        if 0 < HF < math.inf:
            return 2.0 * HF
        return None


@dataclass(frozen=True)
class RbcnConfig:
    sampling: SamplingSpec = field(default_factory=SamplingSpec)
    h_strategy: Union[ConstantH, AdaptiveH] = field(default_factory=ConstantH)
    max_iterations: int = 10_000
    target_accuracy: Optional[float] = None
    seed: Optional[int] = None
    refresh_every: Optional[int] = None
    stall_tol: float = 1e-15
    stall_window: Optional[int] = None

    def effective_seed(self) -> int:
        return self.sampling.seed if self.seed is None else int(self.seed)


@dataclass
class StepResult:
    x: np.ndarray
    fx: float
    H: float
    next_H: float
    trials: int
    accepted: bool
    step_norm: float
    model_decrease: float
    S: np.ndarray


class _RunState:
    """Current point with cached ``g`` tracker and per-block ``phi`` values."""

    def __init__(self, problem: CompositeProblem, x):
        self.problem = problem
        self.tracker = None if problem.g is None else problem.g.tracker(x)
        self.refresh(x)

    def refresh(self, x=None):
        p = self.problem
        self.x = np.array(self.x if x is None else x, dtype=float)
        if self.tracker is not None:
            self.tracker.refresh(self.x)
        P = p.partition
        self.phi_vals = np.array(
            [p.phi_block_value(i, self.x[P.block_slice(i)]) for i in range(p.n)]
        ) if p.phi is not None else None
        self.fx = self._total()

    def _total(self):
        gv = 0.0 if self.tracker is None else self.tracker.value()
        return gv + (0.0 if self.phi_vals is None else float(self.phi_vals.sum()))

    def trial(self, S, idx, ys):
        """Objective at ``x + y`` and the new ``phi`` values of the blocks in ``S``."""
        p = self.problem
        xn = self.x[idx] + ys
        if p.bounds is not None and not p.is_feasible_coords(idx, xn):
            return math.inf, None
        gv = 0.0 if self.tracker is None else self.tracker.value_after(idx, ys)
        if self.phi_vals is None:
            return gv, None
        P = p.partition
        new = np.empty(S.size)
        pos = 0
        for j, i in enumerate(S):
            sz = P.sizes[i]
            new[j] = p.phi_block_value(i, xn[pos : pos + sz])
            pos += sz
        rest = float(self.phi_vals.sum() - self.phi_vals[S].sum())
        return gv + rest + float(new.sum()), new

    def apply(self, S, idx, ys, fnew, new_phi):
        if self.tracker is not None:
            self.tracker.update(idx, ys)
        self.x[idx] += ys
        if new_phi is not None:
            self.phi_vals[S] = new_phi
        self.fx = fnew


def _constant_H(problem, S, strat: ConstantH) -> float:
    if strat.value is not None:
        H = float(strat.value)
    elif strat.per_block:
        H = float(problem.block_hess_lipschitz[S].max()) if S.size else 0.0
    else:
        H = problem.H_F
    if not math.isfinite(H):
        raise ValueError("constant H is infinite for this problem; use AdaptiveH")
    return H


def _step(state: _RunState, S, strat, H_cur) -> StepResult:
    p = state.problem
    fx = state.fx
    if S.size == 0:
        return StepResult(state.x, fx, H_cur, H_cur, 0, True, 0.0, 0.0, S)
    model_H = _constant_H(p, S, strat) if isinstance(strat, ConstantH) else 1.0
    model = _assemble_model(p, state.x, S, model_H, state.tracker, fx)
    idx = model.coords

    def attempt(H):
        if model.has_bounds:
            sol = solve(CubicSubproblem(model.hess, model.grad, H, lo=model.lo, hi=model.hi))
        else:
            sol = minimize_cubic(model.hess, model.grad, H)
        ys = sol.y
        nrm = float(np.linalg.norm(ys))
        if nrm <= NOOP_STEP:
            return ys, nrm, 0.0, fx, None, True
        fnew, new_phi = state.trial(S, idx, ys)
        mstar = fx + sol.model_value
        ok = fnew <= mstar + ACCEPT_RTOL * (1.0 + abs(fx)) or fnew <= mstar + ACCEPT_RTOL * (
            1.0 + abs(fx) + model_scale(model.hess, model.grad, H, ys))
        return ys, nrm, -sol.model_value, fnew, new_phi, ok

    def finish(H, next_H, trials, ok, ys, nrm, dec, fnew, new_phi):
        if ok and nrm > NOOP_STEP:
            state.apply(S, idx, ys, fnew, new_phi)
            return StepResult(state.x, fnew, H, next_H, trials, True, nrm, dec, S)
        return StepResult(state.x, fx, H, next_H, trials, ok, 0.0, max(dec, 0.0), S)

    if isinstance(strat, ConstantH):
        ys, nrm, dec, fnew, new_phi, ok = attempt(model_H)
        return finish(model_H, model_H, 1, ok, ys, nrm, dec, fnew, new_phi)

    cap = strat.cap_for(p)
    H = max(H_cur, strat.H_min)
    if cap is not None:
        H = min(H, cap)
    failures = 0
    while True:
        ys, nrm, dec, fnew, new_phi, ok = attempt(H)
        if nrm <= NOOP_STEP:
            return finish(H, H_cur, failures + 1, True, ys, nrm, dec, fnew, new_phi)
        if ok:
            next_H = max(H * strat.shrink, strat.H_min) if failures == 0 else H
            return finish(H, next_H, failures + 1, True, ys, nrm, dec, fnew, new_phi)
        failures += 1
        if (cap is not None and H >= cap) or failures >= strat.max_failures:
            raise NumericalFailure(
                "no H passed the acceptance test", H=H, failures=failures,
                objective=fx, trial_objective=fnew, blocks=S.tolist(),
            )
        H = H * strat.growth
        if cap is not None:
            H = min(H, cap)


def rbcn_step(problem: CompositeProblem, x, S, strategy=None, H_prev: Optional[float] = None) -> StepResult:
    """One iteration from ``x`` on the blocks ``S``.

    ``H_prev`` warm-starts the adaptive search (defaults to ``strategy.H0``).
    """
    strategy = ConstantH() if strategy is None else strategy
    x = np.asarray(x, dtype=float)
    if not problem.is_feasible(x):
        raise ValueError("starting point violates the box constraints")
    S = index_set(S, problem.n)
    state = _RunState(problem, x)
    if H_prev is None:
        H_prev = strategy.H0 if isinstance(strategy, AdaptiveH) else 0.0
    return _step(state, S, strategy, H_prev)


class RunTrace:
    """Per-iteration records of one run, stored column-wise.

    Row 0 describes the starting point. ``sampled(k)`` returns the block ids
    drawn at iteration ``k``.
    """

    def __init__(self, meta: Optional[dict] = None):
        self.k = array("q")
        self.objective = array("d")
        self.step_norm = array("d")
        self.H = array("d")
        self.sample_size = array("q")
        self.elapsed_ms = array("d")
        self.model_decrease = array("d")
        self._ids = array("q")
        self.status = "running"
        self.x: Optional[np.ndarray] = None
        self.meta = dict(meta or {})

    def append(self, k, objective, step_norm, H, S, elapsed_ms, model_decrease):
        self.k.append(k)
        self.objective.append(objective)
        self.step_norm.append(step_norm)
        self.H.append(H)
        self.sample_size.append(len(S))
        self.elapsed_ms.append(elapsed_ms)
        self.model_decrease.append(model_decrease)
        self._ids.extend(int(i) for i in S)

    def __len__(self):
        return len(self.k)

    def sampled(self, row: int) -> np.ndarray:
        sizes = np.frombuffer(self.sample_size, dtype=np.int64) if len(self) else np.zeros(0, np.int64)
        start = int(sizes[:row].sum())
        return np.array(self._ids[start : start + int(sizes[row])], dtype=np.intp)

    def objectives(self) -> np.ndarray:
        return np.array(self.objective)

    @property
    def final_objective(self) -> float:
        return self.objective[-1]

    def iterations_to(self, level: float) -> Optional[int]:
        """First ``k`` whose objective is at most ``level`` (``None`` if never)."""
        hit = np.nonzero(self.objectives() <= level)[0]
        return int(self.k[hit[0]]) if hit.size else None

    def rows(self, timing: bool = True):
        for r in range(len(self)):
            yield (
                self.k[r], fmt_float(self.objective[r]), fmt_float(self.step_norm[r]),
                fmt_float(self.H[r]), self.sample_size[r],
                f"{self.elapsed_ms[r]:.3f}" if timing else "",
            )

    def write_csv(self, f, timing: bool = True) -> None:
        """Write the fixed-header CSV; ``timing=False`` blanks ``elapsed_ms``."""
        write_rows(f, TRACE_COLUMNS, self.rows(timing))

    def to_csv(self, timing: bool = True) -> str:
        buf = io.StringIO()
        self.write_csv(buf, timing=timing)
        return buf.getvalue()

    @classmethod
    def read_csv(cls, f) -> "RunTrace":
        tr = cls()
        for k, obj, step, H, size, ms in read_rows(f, TRACE_COLUMNS):
            tr.k.append(int(k))
            tr.objective.append(obj)
            tr.step_norm.append(step)
            tr.H.append(H)
            tr.sample_size.append(int(size))
            tr.elapsed_ms.append(ms)
            tr.model_decrease.append(math.nan)
        tr.status = "loaded"
        return tr


class DistanceMonitor:
    """Run callback keeping ``max_k ||x^k - x_ref||``, a lower estimate of ``D``."""

    def __init__(self, x_ref):
        self.x_ref = np.asarray(x_ref, dtype=float)
        self.max_distance = 0.0

    def __call__(self, k, x, fx):
        self.max_distance = max(self.max_distance, float(np.linalg.norm(x - self.x_ref)))


def rbcn_run(
    problem: CompositeProblem,
    config: RbcnConfig,
    x0=None,
    f_star: Optional[float] = None,
    callback: Optional[Callable[[int, np.ndarray, float], None]] = None,
) -> RunTrace:
    """Run until ``max_iterations``, ``F - f_star <= target_accuracy`` or stalling.

    A run stalls when the model decrease stays below ``config.stall_tol`` for
    ``config.stall_window`` (default ``n/tau``) consecutive iterations; a zero
    tolerance disables the rule. A :class:`NumericalFailure` is re-raised with the
    partial trace and iteration number added to its ``info``.
    """
    P = problem.partition
    x = np.zeros(P.total) if x0 is None else np.array(x0, dtype=float)
    if x.shape != (P.total,):
        raise ValueError(f"x0 must have length {P.total}")
    if not problem.is_feasible(x):
        raise ValueError("starting point violates the box constraints")
    strat = config.h_strategy
    tau = config.sampling.tau_for(P.n)
    rng = make_rng(config.effective_seed())
    refresh = config.refresh_every or max(P.n, 256)
    patience = config.stall_window or math.ceil(P.n / tau)

    state = _RunState(problem, x)
    H_cur = strat.H0 if isinstance(strat, AdaptiveH) else 0.0
    trace = RunTrace(meta={"tau": tau, "n": P.n, "seed": config.effective_seed()})
    t0 = time.perf_counter()
    trace.append(0, state.fx, 0.0, math.nan, (), 0.0, math.nan)
    if callback is not None:
        callback(0, state.x, state.fx)

    def reached():
        return (
            f_star is not None
            and config.target_accuracy is not None
            and state.fx - f_star <= config.target_accuracy
        )

    if reached():
        trace.status = "target"
    stalled = 0
    k = 0
    while trace.status == "running" and k < config.max_iterations:
        k += 1
        S = draw(config.sampling, P, rng)
        try:
            res = _step(state, S, strat, H_cur)
        except NumericalFailure as e:
            trace.status = "failed"
            trace.x = state.x.copy()
            e.info.update(iteration=k, trace=trace)
            raise
        H_cur = res.next_H
        if k % refresh == 0:
            state.refresh()
        trace.append(k, state.fx, res.step_norm, res.H, S,
                     1e3 * (time.perf_counter() - t0), res.model_decrease)
        if callback is not None:
            callback(k, state.x, state.fx)
        if reached():
            trace.status = "target"
            break
        stalled = stalled + 1 if res.model_decrease < config.stall_tol else 0
        if stalled >= patience:
            trace.status = "stalled"
    if trace.status == "running":
        trace.status = "max_iterations"
    trace.x = state.x.copy()
    return trace


def compute_beta(problem: CompositeProblem, spec: SamplingSpec, rtol: float = 1e-12) -> float:
    """Largest ``beta`` with ``beta E[A_[S]] <= (tau/n) G``; ``inf`` if ``E[A_[S]] = 0``.

    The pencil is reduced to the range of ``E[A_[S]]``; on the complement
    ``G`` is eliminated by a Schur complement, which is the worst case over
    the null-space component of a test vector.
    """
    P = problem.partition
    if problem.g is None:
        return math.inf
    G = np.asarray(problem.g.G, dtype=float)
    A = np.asarray(problem.g.A, dtype=float)
    tau = spec.tau_for(P.n)
    EA = expected_submatrix(A, spec, P)
    lam, U = np.linalg.eigh(0.5 * (EA + EA.T))
    scale = float(np.abs(lam).max(initial=0.0))
    if scale == 0.0:
        return math.inf
    keep = lam > rtol * scale
    Ur, Un = U[:, keep], U[:, ~keep]
    lr = lam[keep]
    Grr = Ur.T @ G @ Ur
    if Un.shape[1]:
        Grn = Ur.T @ G @ Un
        Gnn = Un.T @ G @ Un
        Grr = Grr - Grn @ np.linalg.pinv(Gnn, rcond=rtol, hermitian=True) @ Grn.T
    s = 1.0 / np.sqrt(lr)
    M = (s[:, None] * Grr) * s[None, :]
    beta = (tau / P.n) * float(np.linalg.eigvalsh(0.5 * (M + M.T)).min())
    return max(beta, 0.0)


class NotApplicable(ValueError):
    """The requested rate does not apply to the given constants."""


@dataclass(frozen=True)
class RateCertificate:
    rate: str
    K: int
    bound: float
    n: int
    tau: int
    eps: float
    rho: float
    F0_gap: float
    L: float = 0.0
    mu: float = 0.0
    H_F: float = 0.0
    D: Optional[float] = None
    beta: Optional[float] = None
    sigma: Optional[float] = None
    estimated: bool = False

    def report(self) -> str:
        rows = [
            ("rate", self.rate), ("K", self.K), ("bound", repr(self.bound)),
            ("n", self.n), ("tau", self.tau), ("eps", repr(self.eps)), ("rho", repr(self.rho)),
            ("F0_minus_Fstar", repr(self.F0_gap)), ("L", repr(self.L)), ("mu", repr(self.mu)),
            ("H_F", repr(self.H_F)), ("D", repr(self.D)), ("beta", repr(self.beta)),
            ("sigma", repr(self.sigma)), ("D_estimated", str(self.estimated).lower()),
        ]
        return "".join(f"{k} = {v}\n" for k, v in rows)


# bounds are ceilinged after removing relative rounding noise, so that an
# exactly integral formula value is not pushed up by one
_CEIL_RTOL = 1e-12
RATES = ("sublinear", "fast_sublinear", "linear")


def _ceil(v: float) -> int:
    return int(math.ceil(v * (1.0 - _CEIL_RTOL)))


def certificate_iterations(
    rate: str,
    *,
    n: int,
    tau: int,
    eps: float,
    rho: float,
    F0_gap: float,
    L: float = 0.0,
    mu: float = 0.0,
    H_F: float = 0.0,
    D: Optional[float] = None,
    beta: Optional[float] = None,
    estimated: bool = False,
) -> RateCertificate:
    """Iteration count after which ``F - F* <= eps`` holds with probability ``1 - rho``.

    rate : {"sublinear", "fast_sublinear", "linear"}
        ``"sublinear"``: ``O(1/eps)`` for any convex problem; needs ``D`` when
        ``L`` or ``H_F`` is positive. ``"fast_sublinear"``: ``O(1/sqrt(eps))``,
        additionally needs ``beta > 0``. ``"linear"``: ``O(log(1/eps))``,
        additionally needs ``beta > 0`` and ``mu > 0``.
    """
    if not (eps > 0 and 0 < rho < 1 and F0_gap >= 0 and 1 <= tau <= n):
        raise ValueError("need eps > 0, 0 < rho < 1, F0_gap >= 0 and 1 <= tau <= n")
    n, tau = int(n), int(tau)
    eps, rho, F0_gap, L, mu, H_F = (float(v) for v in (eps, rho, F0_gap, L, mu, H_F))
    if D is not None:
        D = float(D)
    if beta is not None:
        beta = float(beta)
    ratio = n / tau
    if rate not in RATES:
        raise ValueError(f"rate must be one of {RATES}, got {rate!r}")
    needs_D = (rate == "sublinear" and (L > 0 or H_F > 0)) or (rate != "sublinear" and H_F > 0)
    if needs_D and D is None:
        raise ValueError(f"the {rate} rate needs the level-set diameter D")
    Dv = 0.0 if D is None else float(D)
    sigma = None
    if rate != "sublinear":
        if beta is None or not beta > 0:
            raise NotApplicable(f"the {rate} rate needs beta > 0 (got {beta})")
        sigma = min(float(beta), 1.0)
    if rate == "sublinear":
        bound = (2.0 / eps) * ratio * (1.0 + math.log(1.0 / rho)) * max(
            L * Dv**2 + H_F * Dv**3, F0_gap
        )
    elif rate == "fast_sublinear":
        bound = (2.0 / math.sqrt(eps)) * ratio / sigma * (2.0 + math.log(1.0 / rho)) * math.sqrt(
            max(H_F * Dv**3, F0_gap)
        )
    else:
        if not mu > 0:
            raise NotApplicable("the linear rate needs mu > 0")
        if F0_gap <= eps * rho:
            bound = 0.0
        else:
            bound = 1.5 * math.log(F0_gap / (eps * rho)) * ratio / sigma * math.sqrt(
                max(H_F * Dv / mu, 1.0)
            )
    return RateCertificate(
        rate=rate, K=max(_ceil(bound), 0), bound=bound, n=n, tau=tau, eps=eps, rho=rho,
        F0_gap=F0_gap, L=L, mu=mu, H_F=H_F, D=D, beta=beta, sigma=sigma, estimated=estimated,
    )
