import io
import math

import numpy as np
import pytest
from scipy.optimize import minimize

from blockcubic.blocks import SamplingSpec
from blockcubic.cubsolve import NumericalFailure
from blockcubic.erm import (
    DualTrace,
    ErmProblem,
    SdcnaConfig,
    constrained_rbcn_run,
    constrained_rbcn_step,
    constrained_reformulate,
    dual_problem,
    dual_value,
    duality_gap,
    initial_dual,
    logistic_erm,
    poisson_erm,
    primal_from_dual,
    primal_grad,
    primal_problem,
    primal_value,
    quadratic_erm,
    sdcna_run,
)
from blockcubic.losses import logistic
from blockcubic.problem import objective
from blockcubic.rbcn import RbcnConfig


def small_logistic(seed, m=30, d=5):
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(m, d))
    y = np.where(rng.random(m) < 0.5, -1.0, 1.0)
    return logistic_erm(B, y)


def small_poisson(seed, m=30, d=5):
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(m, d)) / np.sqrt(d)
    return poisson_erm(B, rng.poisson(1.0, m))


def small_quadratic(seed, m=20, d=4):
    rng = np.random.default_rng(seed)
    return quadratic_erm(rng.normal(size=(m, d)), rng.normal(size=m), lam=0.3, a=2.0)


def reference_primal(erm):
    res = minimize(lambda w: primal_value(erm, w), np.zeros(erm.d), jac=lambda w: primal_grad(erm, w),
                   method="BFGS", options={"gtol": 1e-12})
    return res.fun, res.x


@pytest.mark.parametrize("make", [small_logistic, small_poisson, small_quadratic])
def test_primal_gradient_matches_differences(make):
    erm = make(0)
    w = np.random.default_rng(1).normal(size=erm.d) * 0.5
    g = primal_grad(erm, w)
    for j in range(erm.d):
        e = np.zeros(erm.d)
        e[j] = 1e-6
        fd = (primal_value(erm, w + e) - primal_value(erm, w - e)) / 2e-6
        assert fd == pytest.approx(g[j], rel=1e-6, abs=1e-8)


def test_logistic_labels_fold_into_rows():
    B = np.array([[1.0, 2.0], [-1.0, 0.5]])
    erm = logistic_erm(B, [1, -1], lam=0.1)
    w = np.array([0.3, -0.2])
    want = np.mean(np.log1p(np.exp(-np.array([1, -1]) * (B @ w)))) + 0.05 * w @ w
    assert primal_value(erm, w) == pytest.approx(want, rel=1e-14)


@pytest.mark.parametrize("make", [small_logistic, small_poisson, small_quadratic])
def test_weak_duality(make):
    erm = make(2)
    rng = np.random.default_rng(3)
    a0 = initial_dual(erm)
    assert math.isfinite(dual_value(erm, a0))
    for _ in range(20):
        w = rng.normal(size=erm.d)
        alpha = a0 + 0.3 * rng.uniform(-1, 1, erm.m) * (0.49 if erm.loss.kind == "logistic" else 1.0)
        assert duality_gap(erm, w, alpha) >= -1e-12


def test_strong_duality_for_quadratic_losses():
    # closed forms: w* solves (a B^T B / m + lam I) w = a B^T y / m and alpha* = -phi'(B w*)
    erm = small_quadratic(4)
    B, m, lam, a, y = erm.B, erm.m, erm.lam, 2.0, erm.loss.t0
    w_star = np.linalg.solve(a * B.T @ B / m + lam * np.eye(erm.d), a * B.T @ y / m)
    alpha_star = -a * (B @ w_star - y)
    np.testing.assert_allclose(primal_from_dual(erm, alpha_star), w_star, rtol=1e-12)
    assert dual_value(erm, alpha_star) == pytest.approx(primal_value(erm, w_star), rel=1e-12)


def test_dual_problem_is_negative_dual():
    erm = small_quadratic(5)
    p = dual_problem(erm)
    rng = np.random.default_rng(0)
    for _ in range(5):
        alpha = rng.normal(size=erm.m)
        assert objective(p, alpha) == pytest.approx(-dual_value(erm, alpha), rel=1e-12, abs=1e-14)
    with pytest.raises(ValueError):
        dual_problem(small_logistic(0))


def test_dual_is_minus_infinity_outside_domain():
    erm = small_logistic(0)
    alpha = initial_dual(erm)
    alpha[0] = 0.5
    assert dual_value(erm, alpha) == -math.inf


def test_primal_problem_curvature_bounds():
    erm = small_logistic(1)
    p = primal_problem(erm)
    np.testing.assert_allclose(p.g.A, erm.lam * np.eye(erm.d) + 0.25 * erm.B.T @ erm.B / erm.m)
    with pytest.raises(ValueError):
        primal_problem(small_poisson(0))


def test_constrained_reformulation_objective():
    erm = small_logistic(2)
    ce = constrained_reformulate(erm)
    w = np.random.default_rng(0).normal(size=erm.d)
    z = ce.join(w, erm.B @ w)
    assert ce.objective(z) == pytest.approx(primal_value(erm, w), rel=1e-13)
    z[-1] += 1e-3
    assert ce.objective(z) == math.inf


def test_constrained_step_keeps_alpha_equal_Bw():
    erm = small_logistic(3)
    w = np.zeros(erm.d)
    alpha = erm.B @ w
    f = primal_value(erm, w)
    rng = np.random.default_rng(4)
    for _ in range(20):
        S = np.sort(rng.choice(erm.d, size=2, replace=False))
        res = constrained_rbcn_step(erm, w, S, alpha=alpha)
        assert res.accepted and res.trials == 1
        np.testing.assert_allclose(res.alpha, erm.B @ res.w, atol=1e-12)
        assert res.objective == pytest.approx(primal_value(erm, res.w), rel=1e-12)
        assert res.objective <= f + 1e-14
        w, alpha, f = res.w.copy(), res.alpha.copy(), res.objective


def test_constrained_step_checks_alpha():
    erm = small_logistic(3)
    with pytest.raises(ValueError):
        constrained_rbcn_step(erm, np.zeros(erm.d), [0], alpha=np.ones(erm.m))


@pytest.mark.parametrize("tau", [1, 3, 5])
def test_constrained_run_reaches_reference_optimum(tau):
    erm = small_logistic(5)
    f_star, _ = reference_primal(erm)
    cfg = RbcnConfig(sampling=SamplingSpec(tau=tau, seed=1), max_iterations=5000,
                     target_accuracy=1e-9, stall_tol=0.0)
    tr = constrained_rbcn_run(erm, cfg, f_star=f_star)
    assert tr.status == "target"
    np.testing.assert_allclose(tr.meta["alpha"], erm.B @ tr.x, atol=1e-10)


@pytest.mark.parametrize("make,tau", [(small_logistic, 1), (small_logistic, 6), (small_poisson, 1),
                                      (small_poisson, 10), (small_quadratic, 4)])
def test_sdcna_dual_is_monotone_and_gap_closes(make, tau):
    erm = make(6)
    res = sdcna_run(erm, SdcnaConfig(sampling=SamplingSpec(tau=tau, seed=2), max_epochs=300, target_gap=1e-8))
    tr = res.trace
    assert tr.status == "target"
    dual = np.array(tr.dual)
    assert np.all(np.diff(dual) >= -1e-13 * (1 + np.abs(dual[1:])))
    assert np.all(np.array(tr.gap) >= -1e-12)
    np.testing.assert_allclose(res.w, primal_from_dual(erm, res.alpha), rtol=1e-10, atol=1e-12)
    f_star, _ = reference_primal(erm)
    assert primal_value(erm, res.w) - f_star <= 1e-8 + 1e-12


def test_sdcna_stays_strictly_inside_the_domain():
    # logistic dual coordinates live in [-1, 0]; the boundary box keeps them off the ends
    erm = small_logistic(7)
    res = sdcna_run(erm, SdcnaConfig(sampling=SamplingSpec(tau=3, seed=0), max_epochs=50))
    assert np.all(res.alpha > -1) and np.all(res.alpha < 0)
    erm = small_poisson(7)
    res = sdcna_run(erm, SdcnaConfig(sampling=SamplingSpec(tau=3, seed=0), max_epochs=50))
    assert np.all(res.alpha < np.asarray(erm.loss.y))


def test_sdcna_rejects_start_outside_domain():
    erm = small_logistic(0)
    with pytest.raises((ValueError, NumericalFailure)):
        sdcna_run(erm, SdcnaConfig(max_epochs=1), alpha0=np.full(erm.m, 0.5))


def test_dual_trace_csv_round_trip():
    erm = small_quadratic(8)
    tr = sdcna_run(erm, SdcnaConfig(sampling=SamplingSpec(tau=2), max_epochs=3)).trace
    text = tr.to_csv()
    assert text.splitlines()[0] == "epoch,primal,dual,gap,H"
    back = DualTrace.read_csv(io.StringIO(text))
    np.testing.assert_array_equal(np.array(back.dual), np.array(tr.dual))
    np.testing.assert_array_equal(np.array(back.epoch), np.array(tr.epoch))
    assert back.epochs_to(np.inf) == 0.0


def test_erm_problem_validation():
    B = np.ones((3, 2))
    with pytest.raises(ValueError):
        logistic_erm(B, [1, 0, 1])
    with pytest.raises(ValueError):
        ErmProblem(B, [logistic()] * 2)
    with pytest.raises(ValueError):
        ErmProblem(B, logistic(), lam=0.0)
    with pytest.raises(ValueError):
        ErmProblem(np.ones(3), logistic())
    assert ErmProblem(B, logistic()).lam == pytest.approx(1 / 3)
