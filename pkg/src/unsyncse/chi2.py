"""Chi-squared quantiles from the regularized incomplete gamma function."""
from __future__ import annotations

import functools
import math

_EPS = 1e-16
_TINY = 1e-300


def gammainc_lower(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x)."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x <= 0:
        return 0.0
    log_pref = a * math.log(x) - x - math.lgamma(a)
    if x < a + 1.0:
        # series
        term = total = 1.0 / a
        ap = a
        for _ in range(10_000):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * _EPS:
                break
        return min(1.0, total * math.exp(log_pref))
    # continued fraction for Q (modified Lentz)
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = _TINY if abs(d) < _TINY else d
        c = b + an / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return max(0.0, 1.0 - math.exp(log_pref) * h)


def chi2_cdf(x: float, dof: float) -> float:
    return gammainc_lower(0.5 * dof, 0.5 * x)


@functools.lru_cache(maxsize=256)
def chi2_threshold(dof: int, p: float, tol: float = 1e-10) -> float:
    """Value t with P(chi2_dof <= t) = p.

    Newton steps on the CDF, falling back to bisection whenever a step leaves
    the current bracket.
    """
    if not (isinstance(dof, int) or float(dof).is_integer()) or dof < 1:
        raise ValueError("degrees of freedom must be a positive integer")
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie strictly between 0 and 1")
    k = float(dof)
    a = 0.5 * k

    # Wilson-Hilferty start
    z = _normal_quantile(p)
    c = 2.0 / (9.0 * k)
    x = max(k * (1.0 - c + z * math.sqrt(c)) ** 3, 1e-8)

    lo, hi = 0.0, max(2.0 * x, k + 10.0 * math.sqrt(2.0 * k) + 10.0)
    while chi2_cdf(hi, k) < p:
        hi *= 2.0
    for _ in range(200):
        f = chi2_cdf(x, k) - p
        if f > 0:
            hi = x
        else:
            lo = x
        log_pdf = (a - 1.0) * math.log(x) - 0.5 * x - a * math.log(2.0) - math.lgamma(a) if x > 0 else -math.inf
        pdf = math.exp(log_pdf)
        step = f / pdf if pdf > 0 else math.inf
        nxt = x - step
        if not lo < nxt < hi:
            nxt = 0.5 * (lo + hi)
        if abs(nxt - x) <= tol * x or hi - lo <= tol * lo:
            return nxt
        x = nxt
    return x


def _normal_quantile(p: float) -> float:
    # Acklam's rational approximation; only seeds the Newton iteration
    a = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
         1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
    b = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
         6.680131188771972e+01, -1.328068155288572e+01)
    c = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
         -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
    d = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00, 3.754408661907416e+00)
    if p < 0.02425:
        q = math.sqrt(-2 * math.log(p))
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1)
    if p > 1 - 0.02425:
        return -_normal_quantile(1 - p)
    q = p - 0.5
    r = q * q
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / \
           (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1)
