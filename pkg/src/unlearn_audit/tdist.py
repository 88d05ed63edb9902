"""Student t distribution via the regularized incomplete beta function."""
from __future__ import annotations

import math

_TINY = 1e-300


def _betacf(a: float, b: float, x: float, tol: float = 1e-15, max_iter: int = 10_000) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _TINY else _TINY)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf(t: float, df: float) -> float:
    """Upper tail P(T_df > t)."""
    if df <= 0:
        raise ValueError("df must be positive")
    t2 = t * t
    x = df / (df + t2)
    if x > 0.5:
        # near t = 0, 1 - x cancels; use the mirrored form on t^2 / (df + t^2)
        tail = 0.5 - 0.5 * betainc(0.5, 0.5 * df, t2 / (df + t2))
    else:
        tail = 0.5 * betainc(0.5 * df, 0.5, x)
    return tail if t >= 0 else 1.0 - tail


def t_cdf(t: float, df: float) -> float:
    return 1.0 - t_sf(t, df)


def t_quantile(tau: float, df: float, tol: float = 1e-12) -> float:
    """Upper-tail quantile Q with P(T_df > Q) = tau, for tau in (0, 0.5]."""
    if not 0.0 < tau <= 0.5:
        raise ValueError("tau must lie in (0, 0.5]")
    if df < 1:
        raise ValueError("df must be at least 1")
    if tau == 0.5:
        return 0.0
    lo, hi = 0.0, 1.0
    while t_sf(hi, df) > tau:
        lo, hi = hi, hi * 2.0
        if hi > 1e12:
            raise ArithmeticError("quantile bracket overflow")
    # bisection keeps the bracket; a Newton step is taken when it stays inside
    x = 0.5 * (lo + hi)
    for _ in range(200):
        f = t_sf(x, df) - tau
        if f > 0:
            lo = x
        else:
            hi = x
        if hi - lo <= tol * max(1.0, abs(x)):
            break
        pdf = math.exp(math.lgamma(0.5 * (df + 1)) - math.lgamma(0.5 * df)
                       - 0.5 * math.log(df * math.pi)
                       - 0.5 * (df + 1) * math.log1p(x * x / df))
        newton = x + f / pdf if pdf > 0 else None
        x = newton if newton is not None and lo < newton < hi else 0.5 * (lo + hi)
    return x
