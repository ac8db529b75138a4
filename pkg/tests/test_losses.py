import math

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from blockcubic.losses import (
    LOGISTIC_HESS_LIPSCHITZ,
    DomainError,
    ScalarLoss,
    conjugate012,
    conjugate_domain,
    cubed_abs,
    eval012,
    hess_lipschitz_constant,
    logistic,
    poisson,
    quadratic,
    stack_losses,
    third_derivative,
)

LOSSES = [quadratic(a=2.5, t0=0.3), logistic(), cubed_abs(c=1.7, t0=-0.2), poisson(y=3)]
IDS = [l.kind for l in LOSSES]


def central(f, t, h):
    return (f(t + h) - f(t - h)) / (2 * h)


@pytest.mark.parametrize("loss", LOSSES, ids=IDS)
def test_derivatives_match_central_differences(loss):
    rng = np.random.default_rng(0)
    for t in rng.uniform(-3, 3, 25):
        v, d1, d2 = eval012(loss, t)
        h = 1e-5
        fd1 = central(lambda s: eval012(loss, s)[0], t, h)
        fd2 = central(lambda s: eval012(loss, s)[1], t, h)
        assert abs(fd1 - d1) <= 1e-6 * (1 + abs(d1))
        assert abs(fd2 - d2) <= 1e-6 * (1 + abs(d2))


@pytest.mark.parametrize("loss", LOSSES, ids=IDS)
def test_vector_and_scalar_paths_agree(loss):
    t = np.linspace(-2, 2, 9)
    vec = eval012(loss, t)
    for i, ti in enumerate(t):
        sc = eval012(loss, float(ti))
        for a, b in zip(vec, sc):
            assert a[i] == pytest.approx(b, rel=1e-14, abs=1e-15)


def test_closed_form_values():
    assert eval012(quadratic(a=2.0, t0=1.0), 3.0) == (4.0, 4.0, 2.0)
    assert eval012(logistic(), 0.0)[0] == pytest.approx(math.log(2))
    assert eval012(logistic(), 0.0)[1:] == (0.5, 0.25)
    assert eval012(cubed_abs(c=3.0), -2.0) == (8.0, -12.0, 12.0)
    assert eval012(poisson(y=2), 0.0) == (1.0, -1.0, 1.0)


def test_logistic_is_stable_for_large_arguments():
    v, d1, d2 = eval012(logistic(), np.array([-800.0, 800.0]))
    np.testing.assert_allclose(v, [0.0, 800.0])
    np.testing.assert_allclose(d1, [0.0, 1.0])
    assert np.all(np.isfinite(d2))


@pytest.mark.parametrize("loss", [logistic(), cubed_abs(c=0.8), poisson(y=1)], ids=["logistic", "cubed_abs", "poisson"])
def test_third_derivative_matches_differences(loss):
    for t in (-1.3, -0.4, 0.7, 1.9):
        fd3 = central(lambda s: eval012(loss, s)[2], t, 1e-5)
        assert float(third_derivative(loss, t)) == pytest.approx(fd3, rel=1e-6, abs=1e-9)


def test_hess_lipschitz_constants():
    assert hess_lipschitz_constant(quadratic()) == 0.0
    assert hess_lipschitz_constant(cubed_abs(c=np.array([1.0, 4.0]))) == 8.0
    assert math.isinf(hess_lipschitz_constant(poisson()))
    assert LOGISTIC_HESS_LIPSCHITZ == pytest.approx(1 / (6 * math.sqrt(3)))


def test_logistic_constant_against_dense_grid():
    t = np.linspace(-10, 10, 2_000_001)
    sup = float(np.abs(third_derivative(logistic(), t)).max())
    assert LOGISTIC_HESS_LIPSCHITZ - 1e-9 <= sup <= LOGISTIC_HESS_LIPSCHITZ + 1e-12


def conjugate_by_optimization(loss, s):
    """sup_t s t - phi(t) by bounded scalar minimization."""
    res = minimize_scalar(lambda t: eval012(loss, t)[0] - s * t, bounds=(-40, 40), method="bounded",
                          options={"xatol": 1e-12})
    return -res.fun


@pytest.mark.parametrize(
    "loss,points",
    [
        (quadratic(a=2.0, t0=0.5), [-1.5, 0.0, 2.0]),
        (logistic(), [0.1, 0.5, 0.83]),
        (cubed_abs(c=1.5, t0=0.2), [-2.0, 0.3, 1.1]),
        (poisson(y=2), [-1.5, 0.0, 3.0]),
    ],
    ids=IDS,
)
def test_conjugate_matches_numerical_supremum(loss, points):
    for s in points:
        v, d1, d2 = conjugate012(loss, s)
        assert v == pytest.approx(conjugate_by_optimization(loss, s), abs=1e-8)
        h = 1e-6
        assert d1 == pytest.approx(central(lambda u: conjugate012(loss, u)[0], s, h), abs=1e-6)
        assert d2 == pytest.approx(central(lambda u: conjugate012(loss, u)[1], s, h), rel=1e-5)


def test_conjugate_derivative_inverts_loss_derivative():
    # (phi*)'(phi'(t)) = t
    for loss in (logistic(), poisson(y=1), cubed_abs(c=2.0), quadratic(a=3.0, t0=1.0)):
        for t in (-1.0, 0.4, 1.5):
            assert conjugate012(loss, eval012(loss, t)[1])[1] == pytest.approx(t, abs=1e-9)


def test_conjugate_domain_errors_and_sentinels():
    with pytest.raises(DomainError):
        conjugate012(logistic(), 1.5)
    with pytest.raises(DomainError):
        conjugate012(poisson(y=1), -1.5)
    v = conjugate012(logistic(), np.array([-0.1, 0.5]), check=False)[0]
    assert math.isinf(v[0]) and math.isfinite(v[1])
    assert conjugate012(logistic(), 0.0)[0] == 0.0
    assert conjugate_domain(logistic()) == (0.0, 1.0)


def test_stack_losses_builds_array_parameters():
    L = stack_losses([poisson(y=0), poisson(y=2), poisson(y=5)])
    np.testing.assert_array_equal(L.y, [0, 2, 5])
    v = eval012(L, np.zeros(3))[0]
    np.testing.assert_array_equal(v, [1, 1, 1])
    with pytest.raises(ValueError):
        stack_losses([poisson(), logistic()])


@pytest.mark.parametrize(
    "kwargs", [dict(kind="hinge"), dict(kind="quadratic", a=0.0), dict(kind="cubed_abs", c=-1.0),
               dict(kind="poisson", y=1.5), dict(kind="poisson", y=-1)]
)
def test_invalid_parameters_are_rejected(kwargs):
    with pytest.raises(ValueError):
        ScalarLoss(**kwargs)
