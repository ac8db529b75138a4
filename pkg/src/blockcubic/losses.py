"""Scalar convex losses with derivatives, Hessian-Lipschitz constants and conjugates.

Each :class:`ScalarLoss` describes one of four families. Parameters may be
arrays, in which case the loss is evaluated elementwise, so one descriptor can
stand for the ``m`` per-sample losses of an ERM problem.

    quadratic   (a/2) (t - t0)^2                         a > 0
    logistic    log(1 + exp(t))
    cubed_abs   (c/3) |t - t0|^3                         c > 0
    poisson     exp(t) - y t                             y >= 0 integer counts
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit, xlogy

__all__ = [
    "DomainError",
    "ScalarLoss",
    "LOGISTIC_HESS_LIPSCHITZ",
    "quadratic",
    "logistic",
    "cubed_abs",
    "poisson",
    "eval012",
    "hess_lipschitz_constant",
    "conjugate012",
    "conjugate_domain",
    "stack_losses",
]

KINDS = ("quadratic", "logistic", "cubed_abs", "poisson")

# sup |phi'''| of log(1 + e^t), attained where phi'(t) = 1/2 +- 1/sqrt(12)
LOGISTIC_HESS_LIPSCHITZ = 1.0 / (6.0 * math.sqrt(3.0))

_BOUNDARY_EPS = 1e-12


class DomainError(ValueError):
    """Argument lies outside the domain of a conjugate function."""


@dataclass(frozen=True, eq=False)
class ScalarLoss:
    kind: str
    a: object = 1.0
    t0: object = 0.0
    c: object = 1.0
    y: object = 0.0

    def __post_init__(self):
        object.__setattr__(
            self, "_scalar", all(np.ndim(getattr(self, k)) == 0 for k in ("a", "t0", "c", "y"))
        )
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind == "quadratic" and np.any(np.asarray(self.a) <= 0):
            raise ValueError("quadratic loss needs a > 0")
        if self.kind == "cubed_abs" and np.any(np.asarray(self.c) <= 0):
            raise ValueError("cubed_abs loss needs c > 0")
        if self.kind == "poisson":
            y = np.asarray(self.y, dtype=float)
            if np.any(y < 0) or np.any(y != np.round(y)):
                raise ValueError("poisson counts must be nonnegative integers")

    @property
    def hess_lipschitz(self) -> float:
        return hess_lipschitz_constant(self)

    def __repr__(self):
        params = {"quadratic": ("a", "t0"), "cubed_abs": ("c", "t0"), "poisson": ("y",)}
        args = ", ".join(f"{k}={getattr(self, k)!r}" for k in params.get(self.kind, ()))
        return f"ScalarLoss({self.kind!r}{', ' + args if args else ''})"


def quadratic(a=1.0, t0=0.0) -> ScalarLoss:
    return ScalarLoss("quadratic", a=a, t0=t0)


def logistic() -> ScalarLoss:
    return ScalarLoss("logistic")


def cubed_abs(c=1.0, t0=0.0) -> ScalarLoss:
    return ScalarLoss("cubed_abs", c=c, t0=t0)


def poisson(y=0) -> ScalarLoss:
    return ScalarLoss("poisson", y=y)


def _f(v):
    return np.asarray(v, dtype=float)


def _out(v, scalar):
    return float(v) if scalar and np.ndim(v) == 0 else v


def _eval012_scalar(loss: ScalarLoss, t: float):
    k = loss.kind
    if k == "quadratic":
        a, u = float(loss.a), t - float(loss.t0)
        return 0.5 * a * u * u, a * u, a
    if k == "logistic":
        e = math.exp(-abs(t))
        s = 1.0 / (1.0 + e) if t >= 0 else e / (1.0 + e)
        return max(t, 0.0) + math.log1p(e), s, s * (1.0 - s)
    if k == "cubed_abs":
        c, u = float(loss.c), t - float(loss.t0)
        au = abs(u)
        return c * au**3 / 3.0, c * au * u, 2.0 * c * au
    y = float(loss.y)
    e = math.exp(t) if t < 709.0 else math.inf
    return e - y * t, e - y, e


def eval012(loss: ScalarLoss, t):
    """Value, first and second derivative of ``loss`` at ``t`` (elementwise)."""
    scalar = np.ndim(t) == 0
    if scalar and loss._scalar:
        return _eval012_scalar(loss, float(t))
    t = _f(t)
    k = loss.kind
    if k == "quadratic":
        a, u = _f(loss.a), t - _f(loss.t0)
        v, d1, d2 = 0.5 * a * u * u, a * u, a * np.ones_like(u)
    elif k == "logistic":
        # log(1 + e^t) = max(t, 0) + log1p(e^{-|t|})
        v = np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))
        d1 = expit(t)
        d2 = d1 * expit(-t)
    elif k == "cubed_abs":
        c, u = _f(loss.c), t - _f(loss.t0)
        au = np.abs(u)
        v, d1, d2 = c * au**3 / 3.0, c * au * u, 2.0 * c * au
    else:
        y = _f(loss.y)
        with np.errstate(over="ignore"):
            e = np.exp(t)
        v, d1, d2 = e - y * t, e - y, e
    return _out(v, scalar), _out(d1, scalar), _out(d2, scalar)


def third_derivative(loss: ScalarLoss, t):
    """phi''' where it exists (cubed_abs: one-sided value at t0 taken as 0)."""
    t = _f(t)
    k = loss.kind
    if k == "quadratic":
        return np.zeros_like(t)
    if k == "logistic":
        s = expit(t)
        return s * (1 - s) * (1 - 2 * s)
    if k == "cubed_abs":
        return 2.0 * _f(loss.c) * np.sign(t - _f(loss.t0))
    return np.exp(t)


def hess_lipschitz_constant(loss: ScalarLoss) -> float:
    """Global Lipschitz constant of ``phi''``; ``inf`` when none exists (poisson).

    With array parameters the largest constant is returned.
    """
    k = loss.kind
    if k == "quadratic":
        return 0.0
    if k == "logistic":
        return LOGISTIC_HESS_LIPSCHITZ
    if k == "cubed_abs":
        return float(2.0 * np.max(_f(loss.c)))
    return math.inf


def conjugate_domain(loss: ScalarLoss):
    """Closed interval ``(lo, hi)`` bounding dom phi* (arrays for array params)."""
    k = loss.kind
    if k in ("quadratic", "cubed_abs"):
        return -np.inf, np.inf
    if k == "logistic":
        return 0.0, 1.0
    return -_f(loss.y), np.inf


def conjugate012(loss: ScalarLoss, s, check: bool = True):
    """Value, first and second derivative of the Fenchel conjugate at ``s``.

    Points outside the closed domain raise :class:`DomainError` (or give ``inf``
    values when ``check`` is false). Derivatives are evaluated at ``s`` clamped
    ``1e-12`` inside the boundary, where the conjugate stays finite but its
    derivatives blow up.
    """
    scalar = np.ndim(s) == 0
    s = _f(s)
    k = loss.kind
    lo, hi = conjugate_domain(loss)
    bad = (s < lo) | (s > hi)
    if np.any(bad):
        if check:
            raise DomainError(f"{loss!r}: conjugate argument outside domain")
    if k == "quadratic":
        a, t0 = _f(loss.a), _f(loss.t0)
        v, d1, d2 = s * t0 + s * s / (2 * a), t0 + s / a, np.ones_like(s) / a
    elif k == "cubed_abs":
        c, t0 = _f(loss.c), _f(loss.t0)
        r = np.sqrt(np.abs(s) / c)
        v = s * t0 + (2.0 / 3.0) * np.abs(s) * r
        d1 = t0 + np.sign(s) * r
        with np.errstate(divide="ignore"):
            d2 = 1.0 / (2.0 * np.sqrt(c * np.abs(s)))
    elif k == "logistic":
        sc = np.clip(s, 0.0, 1.0)
        v = xlogy(sc, sc) + xlogy(1 - sc, 1 - sc)
        se = np.clip(s, _BOUNDARY_EPS, 1 - _BOUNDARY_EPS)
        d1 = np.log(se) - np.log1p(-se)
        d2 = 1.0 / (se * (1 - se))
    else:
        y = _f(loss.y)
        z = np.maximum(s + y, 0.0)
        v = xlogy(z, z) - z
        ze = np.maximum(z, _BOUNDARY_EPS)
        d1 = np.log(ze)
        d2 = 1.0 / ze
    if np.any(bad):
        v = np.where(bad, np.inf, v)
    return _out(v, scalar), _out(d1, scalar), _out(d2, scalar)


def stack_losses(losses: Sequence[ScalarLoss]) -> ScalarLoss:
    """Merge same-kind scalar losses into one loss with array parameters."""
    kinds = {l.kind for l in losses}
    if len(kinds) != 1:
        raise ValueError(f"cannot stack losses of different kinds: {sorted(kinds)}")
    k = kinds.pop()
    m = len(losses)

    def col(name):
        return np.array([np.broadcast_to(_f(getattr(l, name)), ()) for l in losses]).reshape(m)

    return ScalarLoss(k, a=col("a"), t0=col("t0"), c=col("c"), y=col("y"))
