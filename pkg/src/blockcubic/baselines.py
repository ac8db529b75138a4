"""Comparison methods: block coordinate gradient descent and exact dual block ascent.

``bcgd`` takes projected gradient steps on sampled blocks with an Armijo line
search. ``sdca`` and ``sdna`` maximize the ERM dual exactly over one coordinate
or over a sampled block, using damped Newton iterations.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .blocks import BlockPartition, SamplingSpec, draw, index_set, make_rng
from .erm import DualResult, DualTrace, ErmProblem, _DualState, initial_dual, primal_value
from .problem import CompositeProblem, objective
from .rbcn import RunTrace

__all__ = [
    "BaselineConfig",
    "BcgdStep",
    "DualStep",
    "bcgd_step",
    "bcgd_run",
    "sdca_step",
    "sdna_step",
    "dual_baseline_run",
]

METHODS = ("bcgd", "sdca", "sdna")
_ROUND = 64 * np.finfo(float).eps


@dataclass(frozen=True)
class BaselineConfig:
    method: str = "bcgd"
    sampling: SamplingSpec = field(default_factory=SamplingSpec)
    c1: float = 1e-4
    backtrack: float = 0.5
    max_trials: int = 60
    newton_tol: float = 1e-12
    newton_maxiter: int = 100
    seed: Optional[int] = None
    max_iterations: int = 10_000
    max_epochs: float = 100.0
    target_accuracy: Optional[float] = None
    target_gap: Optional[float] = None
    record_every: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if not (0 < self.c1 < 1 and 0 < self.backtrack < 1 and self.max_trials >= 1):
            raise ValueError("need 0 < c1 < 1, 0 < backtrack < 1 and max_trials >= 1")
        if not (self.newton_tol > 0 and self.newton_maxiter >= 1):
            raise ValueError("newton tolerance and iteration cap must be positive")

    def effective_seed(self) -> int:
        return self.sampling.seed if self.seed is None else int(self.seed)


@dataclass
class BcgdStep:
    x: np.ndarray
    fx: float
    t: float
    accepted: bool
    trials: int


def _bcgd(problem: CompositeProblem, x, fx, S, cfg: BaselineConfig, t0: float) -> BcgdStep:
    idx = problem.partition.coords(S)
    g = problem.smooth_grad(x)[idx]
    if not np.any(g):
        return BcgdStep(x, fx, t0, True, 0)
    lo = hi = None
    if problem.bounds is not None:
        lo, hi = problem.bounds[0][idx], problem.bounds[1][idx]
    t = t0
    xn = x.copy()
    for trial in range(1, cfg.max_trials + 1):
        cand = x[idx] - t * g
        if lo is not None:
            cand = np.clip(cand, lo, hi)
        step = cand - x[idx]
        xn[idx] = cand
        fn = objective(problem, xn)
        # equals c1 t ||g||^2 without projection
        if np.any(step) and fn <= fx - cfg.c1 / t * float(step @ step):
            return BcgdStep(xn, fn, t, True, trial)
        if not np.any(step):
            return BcgdStep(x, fx, t0, True, trial)
        t *= cfg.backtrack
    return BcgdStep(x, fx, t0, False, cfg.max_trials)


def bcgd_step(problem: CompositeProblem, x, S, config: Optional[BaselineConfig] = None,
              t0: float = 1.0) -> BcgdStep:
    """Projected gradient step on the blocks ``S`` with Armijo backtracking from ``t0``.

    A failed line search leaves ``x`` unchanged and sets ``accepted = False``.
    """
    config = BaselineConfig() if config is None else config
    x = np.array(x, dtype=float)
    S = index_set(S, problem.n)
    return _bcgd(problem, x, objective(problem, x), S, config, t0)


def bcgd_run(problem: CompositeProblem, config: BaselineConfig, x0=None,
             f_star: Optional[float] = None) -> RunTrace:
    """Repeated :func:`bcgd_step`; each line search starts from the last accepted step."""
    P = problem.partition
    x = np.zeros(P.total) if x0 is None else np.array(x0, dtype=float)
    fx = objective(problem, x)
    if not math.isfinite(fx):
        raise ValueError("starting point violates the box constraints")
    tau = config.sampling.tau_for(P.n)
    rng = make_rng(config.effective_seed())
    trace = RunTrace(meta={"tau": tau, "n": P.n, "seed": config.effective_seed(), "method": "bcgd"})
    t0 = time.perf_counter()
    trace.append(0, fx, 0.0, math.nan, (), 0.0, math.nan)
    t = 1.0
    failed = 0

    def reached():
        return f_star is not None and config.target_accuracy is not None and (
            fx - f_star <= config.target_accuracy)

    trace.status = "target" if reached() else "running"
    for k in range(1, config.max_iterations + 1):
        if trace.status != "running":
            break
        S = draw(config.sampling, P, rng)
        res = _bcgd(problem, x, fx, S, config, t)
        failed += not res.accepted
        step = float(np.linalg.norm(res.x - x))
        x, fx, t = res.x, res.fx, res.t
        trace.append(k, fx, step, math.nan, S, 1e3 * (time.perf_counter() - t0), math.nan)
        if reached():
            trace.status = "target"
    if trace.status == "running":
        trace.status = "max_iterations"
    trace.x = x
    trace.meta["failed_line_searches"] = failed
    return trace


@dataclass
class DualStep:
    alpha: np.ndarray
    dual: float
    converged: bool
    newton_iterations: int


def _newton_block(state: _DualState, S, cfg: BaselineConfig):
    """Minimize ``-D`` over the coordinates ``S`` by damped Newton; returns (converged, iterations)."""
    h = np.zeros(S.size)
    f = state.negD
    c = v = None
    converged = False
    it = 0
    for it in range(1, cfg.newton_maxiter + 1):
        g, Hs = state.derivs(S, h)
        if float(np.linalg.norm(g)) <= cfg.newton_tol:
            converged = True
            break
        try:
            p = -sla.cho_solve(sla.cho_factor(Hs), g)
        except np.linalg.LinAlgError:
            p = -np.linalg.lstsq(Hs, g, rcond=None)[0]
        slope = float(g @ p)
        if slope >= 0:
            break
        t = 1.0
        # below the rounding level of f the sufficient-decrease test is noise;
        # take the full Newton step as long as it stays in the domain
        tiny = -slope <= _ROUND * (1.0 + abs(f))
        for _ in range(cfg.max_trials):
            fn, cn, vn = state.trial(S, h + t * p)
            if fn <= f + cfg.c1 * t * slope or (tiny and math.isfinite(fn)):
                break
            t *= cfg.backtrack
        else:
            break
        h, f, c, v = h + t * p, fn, cn, vn
    if c is not None and f <= state.negD:
        state.apply(S, h, c, v, f)
    return converged, it


def sdna_step(erm: ErmProblem, alpha, S, config: Optional[BaselineConfig] = None) -> DualStep:
    """Maximize the dual over the block ``S`` to gradient norm ``newton_tol``."""
    config = BaselineConfig(method="sdna") if config is None else config
    S = index_set(S, erm.m)
    if S.size == 0:
        raise ValueError("S must be nonempty")
    state = _DualState(erm, alpha)
    ok, its = _newton_block(state, S, config)
    return DualStep(state.alpha, state.dual, ok, its)


def sdca_step(erm: ErmProblem, alpha, i: int, config: Optional[BaselineConfig] = None) -> DualStep:
    """Maximize the dual over coordinate ``i``."""
    return sdna_step(erm, alpha, [i], BaselineConfig(method="sdca") if config is None else config)


def dual_baseline_run(erm: ErmProblem, config: BaselineConfig, alpha0=None) -> DualResult:
    """SDCA or SDNA over sampled subsets of the ``m`` dual coordinates.

    SDCA with ``tau > 1`` updates the sampled coordinates one after another,
    SDNA updates them jointly.
    """
    if config.method not in ("sdca", "sdna"):
        raise ValueError("dual_baseline_run runs sdca or sdna")
    m = erm.m
    part = BlockPartition.uniform(m)
    state = _DualState(erm, initial_dual(erm) if alpha0 is None else alpha0)
    tau = config.sampling.tau_for(m)
    rng = make_rng(config.effective_seed())
    trace = DualTrace(meta={"tau": tau, "m": m, "seed": config.effective_seed(),
                            "method": config.method})
    t0 = time.perf_counter()
    updates = 0
    unconverged = 0

    def record():
        trace.append(updates / m, primal_value(erm, state.w), state.dual, math.nan,
                     1e3 * (time.perf_counter() - t0))

    def done():
        return config.target_gap is not None and trace.gap[-1] <= config.target_gap

    record()
    k = 0
    while not done() and updates < config.max_epochs * m:
        k += 1
        S = draw(config.sampling, part, rng)
        if config.method == "sdna":
            ok, _ = _newton_block(state, S, config)
            unconverged += not ok
        else:
            for i in S:
                ok, _ = _newton_block(state, np.array([i]), config)
                unconverged += not ok
        updates += S.size
        if updates % m < S.size:
            state.refresh()
        if k % config.record_every == 0:
            record()
    if trace.epoch[-1] != updates / m:
        record()
    trace.status = "target" if done() else "max_epochs"
    trace.meta["unconverged_inner"] = unconverged
    return DualResult(state.w.copy(), state.alpha.copy(), trace)
