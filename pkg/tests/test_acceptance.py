"""Acceptance checks; each test prints one PASS/FAIL line through the ``criterion`` fixture."""
import itertools
import math
import time

import numpy as np
import pytest

from blockcubic.baselines import BaselineConfig, dual_baseline_run, sdna_step
from blockcubic.blocks import (
    BlockPartition,
    SamplingSpec,
    draw,
    expected_submatrix,
    make_rng,
    probability_matrix,
    restrict_matrix,
)
from blockcubic.cubsolve import Coupling, CubicSubproblem, coupled_fixed_map, solve, solve_unconstrained
from blockcubic.erm import (
    SdcnaConfig,
    constrained_rbcn_run,
    dual_problem,
    duality_gap,
    poisson_erm,
    quadratic_erm,
    sdcna_run,
)
from blockcubic.harness.data import gen_synthetic_cubic, gen_synthetic_logistic, gen_synthetic_poisson
from blockcubic.harness.experiment import Instance, reference_optimum
from blockcubic.losses import (
    LOGISTIC_HESS_LIPSCHITZ,
    conjugate012,
    cubed_abs,
    eval012,
    logistic,
    poisson,
    quadratic,
    third_derivative,
)
from blockcubic.problem import BlockLoss, CompositeProblem, QuadraticG, build_model, objective
from blockcubic.rbcn import (
    AdaptiveH,
    ConstantH,
    DistanceMonitor,
    RbcnConfig,
    certificate_iterations,
    compute_beta,
    rbcn_run,
    rbcn_step,
)
from blockcubic.erm import logistic_erm
from problem_factory import random_problem, random_psd


def test_upper_bound_property(criterion):
    t0 = time.perf_counter()
    worst = -math.inf
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        p = random_problem(rng, n_max=8, size_max=3, boxes=bool(seed % 3 == 0))
        x = np.zeros(p.N) if seed % 3 == 0 else rng.normal(size=p.N)
        S = np.flatnonzero(rng.random(p.n) < 0.5)
        if S.size == 0:
            S = np.array([int(rng.integers(p.n))])
        H = float(p.block_hess_lipschitz[S].max())
        M = build_model(p, x, S, H)
        fx = objective(p, x)
        for _ in range(100):
            ys = rng.normal(size=M.dim) * rng.choice([1e-4, 1e-2, 0.3, 2.0])
            if M.lo is not None:
                ys = np.clip(ys, M.lo, M.hi)
            worst = max(worst, (objective(p, x + M.embed(ys)) - M.value(ys)) / (1 + abs(fx)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 10
    criterion(1, ok, f"upper bound: max (F(x+y) - M) / (1+|F|) = {worst:.2e} over 5000 probes, {elapsed:.1f} s")
    assert ok


def _monotone_primal(tr):
    f = tr.objectives()
    return float(np.max(np.diff(f), initial=-math.inf))


def _monotone_dual(tr):
    d = np.array(tr.dual)
    return float(np.max(-np.diff(d), initial=-math.inf))


def test_monotone_descent(criterion):
    rises = []
    for seed in range(10):
        p = random_problem(np.random.default_rng(2000 + seed), boxes=bool(seed % 2))
        for strat in (ConstantH(value=max(p.H_F, 1.0)), AdaptiveH()):
            tr = rbcn_run(p, RbcnConfig(sampling=SamplingSpec(tau=min(1 + seed % 3, p.n), seed=seed), h_strategy=strat,
                                        max_iterations=300, stall_tol=0.0))
            rises.append(_monotone_primal(tr))
    cubic = gen_synthetic_cubic(64, 0)
    for tau in (1, 8, 64):
        rises.append(_monotone_primal(rbcn_run(cubic, RbcnConfig(sampling=SamplingSpec(tau=tau), max_iterations=3000,
                                                                 stall_tol=0.0))))
    ds = gen_synthetic_logistic(40, 60, 0)
    erm = logistic_erm(ds.dense(), ds.labels)
    rises.append(_monotone_primal(constrained_rbcn_run(erm, RbcnConfig(sampling=SamplingSpec(tau=10),
                                                                       max_iterations=500, stall_tol=0.0))))
    primal_worst = max(rises)

    falls = []
    ps = gen_synthetic_poisson(50, 10, 0)
    for e in (poisson_erm(ps.dense(), ps.labels), erm):
        for tau in (1, 8, e.m):
            res = sdcna_run(e, SdcnaConfig(sampling=SamplingSpec(tau=tau, seed=tau), max_epochs=30))
            falls.append(_monotone_dual(res.trace))
    dual_worst = max(falls)
    ok = primal_worst <= 1e-12 and dual_worst <= 1e-12
    criterion(2, ok, f"monotone: max RBCN rise {primal_worst:.2e} ({len(rises)} traces), "
                     f"max SDCNA drop {dual_worst:.2e} ({len(falls)} traces)")
    assert ok


def _grid_min(sub, radius, pts):
    axes = [np.linspace(-radius, radius, pts)] * sub.dim
    Y = np.array(list(itertools.product(*axes)))
    vals = Y @ sub.b + 0.5 * np.einsum("ij,jk,ik->i", Y, sub.Q, Y) + sub.H / 6 * np.linalg.norm(Y, axis=1) ** 3
    return float(vals.min())


def test_cubic_solver_oracles(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3000)
    grid_excess = -math.inf
    for k in range(100):
        d = 1 + k % 3
        Q = random_psd(rng, d, rank=int(rng.integers(0, d + 1)))
        sub = CubicSubproblem(Q, rng.normal(size=d), float(rng.uniform(0.1, 5.0)))
        sol = solve_unconstrained(sub)
        r = 2 * float(np.linalg.norm(sol.y)) + 1
        grid_excess = max(grid_excess, sol.model_value - _grid_min(sub, r, (2001, 201, 61)[d - 1]))
    fp, kkt = 0.0, 0.0
    for k in range(100):
        d, m = int(rng.integers(1, 5)), int(rng.integers(1, 7))
        # bounded: either B has full column rank or Q is positive definite
        Q = random_psd(rng, d, rank=int(rng.integers(0, d + 1)), ridge=0.05 * (m < d or k % 2))
        sub = CubicSubproblem(Q, rng.normal(size=d), float(rng.uniform(0.1, 5.0)),
                              coupling=Coupling(rng.normal(size=(m, d)), rng.uniform(0, 1, m), rng.normal(size=m)))
        sol = solve(sub)
        fp = max(fp, abs(sol.tau - coupled_fixed_map(sub, sol.tau)) / (1 + sol.tau))
        kkt = max(kkt, sol.kkt_residual)
    elapsed = time.perf_counter() - t0
    ok = grid_excess <= 1e-4 and fp <= 1e-10 and kkt <= 1e-8 and elapsed < 30
    criterion(3, ok, f"cubic solver: value - grid min <= {grid_excess:.2e}, coupled fixed-point {fp:.2e}, "
                     f"KKT {kkt:.2e}, {elapsed:.1f} s")
    assert ok


def test_sampling_statistics(criterion):
    n, tau, draws = 10, 3, 100_000
    P = BlockPartition.uniform(n)
    spec = SamplingSpec(tau=tau)
    rng = make_rng(4000)
    counts = np.zeros(n)
    sizes = BlockPartition((2, 1, 3, 1, 2))
    Pm, taum = sizes.n, 2
    co = np.zeros((Pm, Pm))
    spec_m = SamplingSpec(tau=taum)
    for _ in range(draws):
        counts[draw(spec, P, rng)] += 1
        S = draw(spec_m, sizes, rng)
        co[np.ix_(S, S)] += 1
    p = tau / n
    sd = math.sqrt(draws * p * (1 - p))
    z = float(np.max(np.abs(counts - draws * p)) / sd)

    A = np.random.default_rng(4001).standard_normal((sizes.total, sizes.total))
    ids = sizes.block_ids()
    mc = A * (co / draws)[np.ix_(ids, ids)]
    exact = expected_submatrix(A, spec_m, sizes)
    mc_err = float(np.linalg.norm(mc - exact) / np.linalg.norm(exact))

    enum_err = 0.0
    for sz, t in [((1, 1, 1, 1, 1), 2), ((2, 1, 1), 2), ((1, 2, 1, 3), 3), ((2, 2, 1, 1, 1), 4), ((3,), 1)]:
        Q = BlockPartition(sz)
        subs = list(itertools.combinations(range(Q.n), t))
        avg = sum(restrict_matrix(np.ones((Q.total, Q.total)), S, Q) for S in subs) / len(subs)
        enum_err = max(enum_err, float(np.abs(probability_matrix(SamplingSpec(tau=t), Q) - avg).max()))
    ok = z <= 3 and mc_err <= 0.02 and enum_err <= 1e-15
    criterion(4, ok, f"sampling: max inclusion z-score {z:.2f}, Monte Carlo rel. error {mc_err:.2%}, "
                     f"enumeration error {enum_err:.1e}")
    assert ok


def test_logistic_hessian_lipschitz_constant(criterion):
    t = np.linspace(-10, 10, 4_000_001)
    sup = float(np.abs(third_derivative(logistic(), t)).max())
    c = 1 / (6 * math.sqrt(3))
    ok = c - 1e-6 <= sup <= c + 1e-12 and LOGISTIC_HESS_LIPSCHITZ == pytest.approx(c, rel=1e-15)
    criterion(5, ok, f"logistic constant: grid sup |phi'''| = {sup:.12f}, 1/(6 sqrt 3) = {c:.12f}")
    assert ok


def test_sublinear_rate_certificate(criterion):
    t0 = time.perf_counter()
    n, tau, eps, rho, runs = 32, 4, 1e-6, 0.1, 20
    p = gen_synthetic_cubic(n, 0, form="quadratic")
    f_star, x_star = reference_optimum(Instance("synthetic_cubic", "cert", problem=p))
    mon = DistanceMonitor(x_star)
    traces = []
    for seed in range(runs):
        cfg = RbcnConfig(sampling=SamplingSpec(tau=tau, seed=seed), max_iterations=200_000,
                         target_accuracy=eps, stall_tol=0.0)
        traces.append(rbcn_run(p, cfg, f_star=f_star, callback=mon))
    f0 = traces[0].objectives()[0]
    cert = certificate_iterations("sublinear", n=n, tau=tau, eps=eps, rho=rho, F0_gap=f0 - f_star,
                                  L=float(np.linalg.eigvalsh(p.g.A).max()), H_F=p.H_F, D=mon.max_distance,
                                  estimated=True)
    hits = [tr.iterations_to(f_star + eps) for tr in traces]
    within = sum(h is not None and h <= cert.K for h in hits)
    elapsed = time.perf_counter() - t0
    ok = within >= math.ceil(0.9 * runs) and elapsed < 120
    criterion(6, ok, f"sublinear certificate: {within}/{runs} runs reach eps={eps:g} within K={cert.K} "
                     f"(max used {max(h for h in hits if h is not None)}), D~{mon.max_distance:.3f}, {elapsed:.1f} s")
    assert ok


def strongly_convex_instance(N=16, seed=7):
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((N, N))
    M = U.T @ U / N + 0.5 * np.eye(N)
    c = 1 + np.abs(rng.standard_normal(N))
    return CompositeProblem(BlockPartition.uniform(N), g=QuadraticG(M, 2 * rng.standard_normal(N)),
                            phi=[BlockLoss(cubed_abs(c=ci / 2)) for ci in c])


def test_linear_rate_certificate(criterion):
    p = strongly_convex_instance()
    n, tau, eps, rho, runs = p.n, 4, 1e-8, 0.1, 20
    f_star, x_star = reference_optimum(Instance("synthetic_cubic", "sc", problem=p))
    mon = DistanceMonitor(x_star)
    traces = [rbcn_run(p, RbcnConfig(sampling=SamplingSpec(tau=tau, seed=s), max_iterations=100_000,
                                     target_accuracy=eps, stall_tol=0.0), f_star=f_star, callback=mon)
              for s in range(runs)]
    mu = float(np.linalg.eigvalsh(p.g.G).min())
    beta = compute_beta(p, SamplingSpec(tau=tau))
    cert = certificate_iterations("linear", n=n, tau=tau, eps=eps, rho=rho, F0_gap=traces[0].objectives()[0] - f_star,
                                  mu=mu, H_F=p.H_F, D=mon.max_distance, beta=beta, estimated=True)
    slopes = []
    for tr in traces:
        r = tr.objectives() - f_star
        seg = np.flatnonzero((r <= 1e-1 * r[0]) & (r >= 1e-11))
        slopes.append(np.polyfit(tr.k[seg[0]:seg[-1] + 1], np.log(r[seg[0]:seg[-1] + 1]), 1)[0])
    hits = [tr.iterations_to(f_star + eps) for tr in traces]
    all_within = all(h is not None and h <= cert.K for h in hits)
    ok = mu > 0 and max(slopes) < 0 and all_within
    criterion(7, ok, f"linear rate: mu={mu:.3f}, beta={beta:.3f}, slopes in [{min(slopes):.3f}, {max(slopes):.3f}], "
                     f"{sum(h is not None and h <= cert.K for h in hits)}/{runs} within K={cert.K}")
    assert ok


@pytest.mark.slow
def test_synthetic_accuracy_target(criterion):
    p = gen_synthetic_cubic(64, 0)
    f_star, _ = reference_optimum(Instance("synthetic_cubic", "synthetic_cubic_N64_s0", problem=p))
    parts, reached = [], []
    for tau in (1, 8, 64):
        cfg = RbcnConfig(sampling=SamplingSpec(tau=tau, seed=0), max_iterations=1_000_000,
                         target_accuracy=1e-12, stall_tol=0.0)
        tr = rbcn_run(p, cfg, f_star=f_star)
        ok_tau = tr.status == "target" and math.isfinite(tr.elapsed_ms[-1])
        reached.append(ok_tau)
        parts.append(f"tau={tau}: {'reached' if ok_tau else 'missed'} at k={tr.k[-1]}, "
                     f"residual {tr.final_objective - f_star:.2e}, {tr.elapsed_ms[-1] / 1e3:.1f} s")
    ok = all(reached)
    criterion(8, ok, "accuracy 1e-12 on N=64 cubic regression; " + "; ".join(parts))
    assert ok


def test_duality_gap_convergence(criterion):
    ds = gen_synthetic_poisson(50, 10, 0)
    erm = poisson_erm(ds.dense(), ds.labels, lam=1 / 50)
    res = sdcna_run(erm, SdcnaConfig(sampling=SamplingSpec(tau=5, seed=0), max_epochs=500, target_gap=1e-8))
    final_gap = float(res.trace.gap[-1])
    min_gap = float(np.min(res.trace.gap))
    for method in ("sdca", "sdna"):
        tr = dual_baseline_run(erm, BaselineConfig(method=method, sampling=SamplingSpec(tau=5, seed=0),
                                                   max_epochs=100, target_gap=1e-8)).trace
        min_gap = min(min_gap, float(np.min(tr.gap)))
    # the gap at the returned pair, recomputed from scratch
    direct = duality_gap(erm, res.w, res.alpha)
    ok = final_gap <= 1e-8 and direct <= 1e-8 and min_gap >= -1e-10
    criterion(9, ok, f"duality gap: SDCNA final gap {final_gap:.2e} after {res.trace.epoch[-1]:.1f} epochs, "
                     f"min gap over all dual iterates {min_gap:.2e}")
    assert ok


def test_special_case_reductions(criterion):
    rng = np.random.default_rng(5000)
    B = rng.normal(size=(30, 6))
    erm = quadratic_erm(B, rng.normal(size=30), lam=0.1)
    dual = dual_problem(erm)
    worst_a = 0.0
    for seed in range(5):
        spec = SamplingSpec(tau=4, seed=seed)
        seen = []
        rbcn_run(dual, RbcnConfig(sampling=spec, max_iterations=200, stall_tol=0.0),
                 callback=lambda k, x, f: seen.append(x.copy()))
        alpha = np.zeros(erm.m)
        draw_rng = make_rng(seed)
        for k in range(1, len(seen)):
            S = draw(spec, BlockPartition.uniform(erm.m), draw_rng)
            alpha = sdna_step(erm, alpha, S).alpha
            worst_a = max(worst_a, float(np.abs(alpha - seen[k]).max()))

    M = random_psd(rng, 7, ridge=0.2)
    q = rng.normal(size=7)
    p = CompositeProblem(BlockPartition((3, 2, 2)), g=QuadraticG(M, q))
    x_star = np.linalg.solve(M, -q)
    step = rbcn_step(p, np.zeros(7), [0, 1, 2], ConstantH(value=0.0))
    err_b = float(np.linalg.norm(step.x - x_star))
    ok = worst_a <= 1e-9 and err_b <= 1e-8
    criterion(10, ok, f"reductions: RBCN(H=0) vs SDNA max iterate difference {worst_a:.2e}; "
                      f"one full step from 0 is {err_b:.2e} from the quadratic optimum")
    assert ok


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def test_derivative_correctness(criterion):
    rng = np.random.default_rng(6000)
    worst = 0.0
    losses = [quadratic(a=1.7, t0=0.4), logistic(), cubed_abs(c=1.3, t0=-0.5), poisson(y=2)]
    for loss in losses:
        for t in rng.uniform(-3, 3, 50):
            _, d1, d2 = eval012(loss, t)
            h = 1e-5 * (1 + abs(t))
            f = lambda s: eval012(loss, s)
            worst = max(worst, _rel((f(t + h)[0] - f(t - h)[0]) / (2 * h), d1),
                        _rel((f(t + h)[1] - f(t - h)[1]) / (2 * h), d2))
    for loss, pts in [(logistic(), rng.uniform(0.05, 0.95, 20)), (poisson(y=2), rng.uniform(-1.5, 3, 20))]:
        for s in pts:
            _, d1, d2 = conjugate012(loss, s)
            h = 1e-6
            g = lambda u: conjugate012(loss, u)
            worst = max(worst, _rel((g(s + h)[0] - g(s - h)[0]) / (2 * h), d1),
                        _rel((g(s + h)[1] - g(s - h)[1]) / (2 * h), d2))
    for seed in range(20):
        p = random_problem(np.random.default_rng(6100 + seed))
        x = rng.normal(size=p.N)
        S = np.flatnonzero(rng.random(p.n) < 0.6)
        if S.size == 0:
            S = np.array([0])
        M = build_model(p, x, S, max(p.H_F, 1.0))
        for k in range(M.dim):
            e = np.zeros(M.dim)
            e[k] = 1e-6
            worst = max(worst, _rel((M.value(e) - M.value(-e)) / 2e-6, M.grad[k]))
    ok = worst <= 1e-5
    criterion(11, ok, f"derivatives: max relative central-difference mismatch {worst:.2e}")
    assert ok
