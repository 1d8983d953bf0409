"""Motility functions: positive gamma(s) on s > 0, with derivative and primitive.

The catalog covers the qualitative regimes exercised by the simulator:

* ``exp_decay``  -- gamma(s) = exp(-s); decaying motility, the aggregation /
  blow-up contrast case.
* ``linear``     -- gamma(s) = s; monotone and unbounded.
* ``log1p``      -- gamma(s) = log(1+s); monotone and unbounded, slow growth.
* ``sin_offset`` -- gamma(s) = 2 + sin(s); non-monotone with liminf 1 at
  infinity.
* ``constant``   -- gamma(s) = c0; pure diffusion sanity case.
* ``table``      -- user-supplied piecewise-cubic interpolant with derivative
  consistency checks.

The primitive ``Gamma(s) = integral of gamma from v_floor to s`` enters the
energy functionals, where quadrature noise would pollute balance residuals;
it is therefore evaluated from a closed-form antiderivative whenever one is
declared, falling back to adaptive Simpson quadrature at 1e-12 absolute
tolerance.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

log = logging.getLogger(__name__)


class MotilityError(ValueError):
    """Domain error or invalid motility definition."""


@dataclass(frozen=True)
class MotilityFunction:
    name: str
    eval: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray]
    primitive: Optional[Callable[[np.ndarray], np.ndarray]] = None
    declared_monotone: bool = False
    declared_gamma_inf: Optional[float] = None
    params: dict = field(default_factory=dict)

    def __call__(self, s):
        return self.eval(np.asarray(s, dtype=np.float64))


@dataclass(frozen=True)
class GammaValue:
    value: float
    deriv: float


@dataclass(frozen=True)
class MotilityClassification:
    monotone_nondecreasing: bool
    gamma_inf_estimate: float
    nondegenerate_for_tau: bool
    gamma_star_estimate: float
    notes: tuple[str, ...] = ()


def gamma_eval(mf: MotilityFunction, s: float) -> GammaValue:
    if not s > 0:
        raise MotilityError(f"motility is defined for s > 0, got s={s}")
    return GammaValue(value=float(mf.eval(np.float64(s))),
                      deriv=float(mf.deriv(np.float64(s))))


def _adaptive_simpson(fn, a: float, b: float, atol: float) -> float:
    def simpson(x0, x2, f0, f1, f2):
        return (x2 - x0) / 6.0 * (f0 + 4.0 * f1 + f2)

    def recurse(x0, x2, f0, f1, f2, whole, tol, depth):
        xm = 0.5 * (x0 + x2)
        xl = 0.5 * (x0 + xm)
        xr = 0.5 * (xm + x2)
        fl = float(fn(xl))
        fr = float(fn(xr))
        left = simpson(x0, xm, f0, fl, f1)
        right = simpson(xm, x2, f1, fr, f2)
        if depth <= 0:
            return left + right
        if abs(left + right - whole) <= 15.0 * tol:
            return left + right + (left + right - whole) / 15.0
        return (recurse(x0, xm, f0, fl, f1, left, tol / 2.0, depth - 1)
                + recurse(xm, x2, f1, fr, f2, right, tol / 2.0, depth - 1))

    if a == b:
        return 0.0
    fa = float(fn(a))
    fm = float(fn(0.5 * (a + b)))
    fb = float(fn(b))
    whole = simpson(a, b, fa, fm, fb)
    return recurse(a, b, fa, fm, fb, whole, atol, depth=50)


def big_gamma(mf: MotilityFunction, s, v_floor: float, quad_atol: float = 1e-12):
    """Gamma(s) = integral of gamma over [v_floor, s]; vectorized over s.

    Requires s >= v_floor > 0; Gamma(v_floor) = 0 and Gamma is non-decreasing.
    """
    if not v_floor > 0:
        raise MotilityError(f"v_floor must be positive, got {v_floor}")
    arr = np.asarray(s, dtype=np.float64)
    if np.any(arr < v_floor):
        bad = float(arr.min())
        raise MotilityError(f"Gamma needs s >= v_floor={v_floor}, got s={bad}")
    if mf.primitive is not None:
        out = mf.primitive(arr) - mf.primitive(np.float64(v_floor))
    else:
        flat = np.atleast_1d(arr).ravel()
        vals = np.array([_adaptive_simpson(lambda x: mf.eval(np.float64(x)),
                                           v_floor, float(x), quad_atol)
                         for x in flat])
        out = vals.reshape(np.shape(arr))
    if np.ndim(s) == 0:
        return float(out)
    return out


def classify(mf: MotilityFunction, tau: float, v_floor: float,
             s_max: float) -> MotilityClassification:
    """Classify a motility on [v_floor, s_max] relative to the time constant tau.

    Monotonicity comes from dense derivative sampling; the tail minimum over
    [s_max/2, s_max] estimates the liminf at infinity unless a value is
    declared.  Declarations win over contradicting samples; discrepancies are
    reported, not silently dropped.
    """
    if not tau > 0:
        raise MotilityError(f"tau must be positive, got {tau}")
    if not s_max >= 10.0 * v_floor:
        raise MotilityError(f"s_max must be at least 10*v_floor, got {s_max}")
    notes: list[str] = []
    samples = np.concatenate([
        np.linspace(v_floor, s_max, 2001),
        np.geomspace(v_floor, s_max, 512),
    ])
    samples = np.unique(samples)
    derivs = mf.deriv(samples)
    values = mf.eval(samples)
    if np.any(values < 0.0):
        raise MotilityError(f"{mf.name}: gamma must stay positive on the sampled range")
    if np.any(values == 0.0):
        msg = (f"{mf.name}: gamma underflows to zero within [{v_floor:g}, {s_max:g}]; "
               f"treating as positive underflow")
        notes.append(msg)
        log.warning(msg)
    empirical_monotone = bool(np.all(derivs >= -1e-12))
    monotone = mf.declared_monotone
    if mf.declared_monotone and not empirical_monotone:
        msg = (f"{mf.name}: declared monotone but sampled derivative dips to "
               f"{float(derivs.min()):.3e}; keeping the declaration")
        notes.append(msg)
        log.warning(msg)
    elif not mf.declared_monotone and empirical_monotone:
        msg = (f"{mf.name}: not declared monotone but all sampled derivatives are "
               f">= -1e-12; keeping the declaration")
        notes.append(msg)
        log.warning(msg)
    if mf.declared_gamma_inf is not None:
        gamma_inf = float(mf.declared_gamma_inf)
    else:
        tail = samples >= 0.5 * s_max
        gamma_inf = float(values[tail].min())
    gamma_star = float(values.min())
    return MotilityClassification(
        monotone_nondecreasing=monotone,
        gamma_inf_estimate=gamma_inf,
        nondegenerate_for_tau=bool(gamma_inf > 1.0 / tau),
        gamma_star_estimate=gamma_star,
        notes=tuple(notes),
    )


def check_derivative_consistency(mf: MotilityFunction, s_lo: float = 1e-2,
                                 s_hi: float = 1e2, n: int = 100) -> float:
    """Worst mismatch of deriv against central differences at log-spaced points.

    Returns max over samples of |fd - deriv| / (1 + |deriv|); a consistent
    motility stays below 1e-6.
    """
    worst = 0.0
    for s in np.geomspace(s_lo, s_hi, n):
        h = 1e-5 * s
        fd = float((mf.eval(np.float64(s + h)) - mf.eval(np.float64(s - h))) / (2 * h))
        d = float(mf.deriv(np.float64(s)))
        worst = max(worst, abs(fd - d) / (1.0 + abs(d)))
    return worst


# -- catalog -------------------------------------------------------------------


def _exp_decay() -> MotilityFunction:
    return MotilityFunction(
        name="exp_decay",
        eval=lambda s: np.exp(-s),
        deriv=lambda s: -np.exp(-s),
        primitive=lambda s: -np.exp(-s),
        declared_monotone=False,
        declared_gamma_inf=0.0,
    )


def _linear() -> MotilityFunction:
    return MotilityFunction(
        name="linear",
        eval=lambda s: np.asarray(s, dtype=np.float64) + 0.0,
        deriv=lambda s: np.ones_like(np.asarray(s, dtype=np.float64)),
        primitive=lambda s: 0.5 * np.square(s),
        declared_monotone=True,
        declared_gamma_inf=math.inf,
    )


def _log1p() -> MotilityFunction:
    return MotilityFunction(
        name="log1p",
        eval=lambda s: np.log1p(s),
        deriv=lambda s: 1.0 / (1.0 + s),
        primitive=lambda s: (1.0 + s) * np.log1p(s) - s,
        declared_monotone=True,
        declared_gamma_inf=math.inf,
    )


def _sin_offset() -> MotilityFunction:
    return MotilityFunction(
        name="sin_offset",
        eval=lambda s: 2.0 + np.sin(s),
        deriv=lambda s: np.cos(s),
        primitive=lambda s: 2.0 * s - np.cos(s),
        declared_monotone=False,
        declared_gamma_inf=1.0,
    )


def _constant(value: float = 1.0) -> MotilityFunction:
    value = float(value)
    if not value > 0:
        raise MotilityError(f"constant motility needs a positive value, got {value}")
    return MotilityFunction(
        name="constant",
        eval=lambda s: np.full_like(np.asarray(s, dtype=np.float64), value),
        deriv=lambda s: np.zeros_like(np.asarray(s, dtype=np.float64)),
        primitive=lambda s: value * np.asarray(s, dtype=np.float64),
        declared_monotone=True,
        declared_gamma_inf=value,
        params={"value": value},
    )


def _table(knots, values, declared_monotone: bool = False,
           declared_gamma_inf: Optional[float] = None) -> MotilityFunction:
    from scipy.interpolate import CubicSpline

    knots = np.asarray(knots, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if knots.ndim != 1 or knots.size < 4:
        raise MotilityError("table motility needs at least 4 knots")
    if np.any(np.diff(knots) <= 0):
        raise MotilityError("table knots must be strictly increasing")
    if np.any(values <= 0):
        raise MotilityError("table values must be positive")
    if knots[0] <= 0:
        raise MotilityError("table knots must be positive")
    spline = CubicSpline(knots, values, extrapolate=True)
    dspline = spline.derivative()
    pspline = spline.antiderivative()
    mf = MotilityFunction(
        name="table",
        eval=lambda s: spline(s),
        deriv=lambda s: dspline(s),
        primitive=lambda s: pspline(s),
        declared_monotone=declared_monotone,
        declared_gamma_inf=declared_gamma_inf,
        params={"knots": knots.tolist(), "values": values.tolist()},
    )
    mid = np.sqrt(knots[0] * knots[-1])
    worst = check_derivative_consistency(mf, s_lo=max(knots[0], 1e-3 * mid),
                                         s_hi=knots[-1], n=64)
    if worst > 1e-6:
        raise MotilityError(
            f"table motility fails the derivative consistency check ({worst:.3e})"
        )
    return mf


_BUILTINS: dict[str, Callable[..., MotilityFunction]] = {
    "exp_decay": _exp_decay,
    "linear": _linear,
    "log1p": _log1p,
    "sin_offset": _sin_offset,
    "constant": _constant,
    "table": _table,
}


def make_motility(name: str, **params) -> MotilityFunction:
    """Instantiate a catalog motility by name (configuration entry point)."""
    try:
        factory = _BUILTINS[name]
    except KeyError:
        known = ", ".join(sorted(_BUILTINS))
        raise MotilityError(f"unknown motility {name!r}; known: {known}") from None
    return factory(**params)


def motility_names() -> tuple[str, ...]:
    return tuple(sorted(_BUILTINS))
