from __future__ import annotations

import math
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy import special

from app.core.errors import DegenerateTruncationError, InsufficientValuesError, KernelError, QuadratureError

TAIL_SWITCH: float = 5.0
MIN_INTERVAL_MASS: float = 1e-300
LOG_MIN_INTERVAL_MASS: float = math.log(MIN_INTERVAL_MASS)
_TINY: float = float(np.finfo(float).tiny)


def _check_variance(var: float) -> float:
    if not var > 0 or not np.isfinite(var):
        raise KernelError(f"Variance must be positive and finite, got {var}.")
    return math.sqrt(var)


def normal_cdf(x: float | np.ndarray, mu: float = 0.0, var: float = 1.0) -> float | np.ndarray:
    sd = _check_variance(var)
    values = special.ndtr((np.asarray(x, dtype=float) - mu) / sd)
    return float(values) if np.ndim(values) == 0 else values


def normal_logpdf(x: float | np.ndarray, mu: float, var: float) -> float | np.ndarray:
    _check_variance(var)
    x = np.asarray(x, dtype=float)
    values = -0.5 * (math.log(2.0 * math.pi * var) + (x - mu) ** 2 / var)
    return float(values) if np.ndim(values) == 0 else values


def _log_standard_mass(a: float, b: float) -> float:
    """log(Phi(b) - Phi(a)) for standardized bounds, stable in both tails."""
    if not a < b:
        return -math.inf
    if a > 0.0:
        upper, lower = float(special.log_ndtr(-a)), float(special.log_ndtr(-b))
    elif b < 0.0:
        upper, lower = float(special.log_ndtr(b)), float(special.log_ndtr(a))
    else:
        mass = float(special.ndtr(b) - special.ndtr(a))
        return math.log(mass) if mass > 0.0 else -math.inf
    if lower == -math.inf:
        return upper
    diff = lower - upper
    if diff >= 0.0:
        return -math.inf
    return upper + math.log1p(-math.exp(diff))


def log_interval_mass(lo: float, hi: float, mu: float, var: float) -> float:
    """log P(lo < X <= hi) for X ~ N(mu, var); hi may be +inf."""
    sd = _check_variance(var)
    return _log_standard_mass((lo - mu) / sd, (hi - mu) / sd)


def _exponential_tail(a: float, b: float, rng: np.random.Generator) -> float:
    """Standard normal restricted to [a, b] with a >= TAIL_SWITCH, by exponential tilting."""
    rate = 0.5 * (a + math.sqrt(a * a + 4.0))
    width = b - a
    span = -math.expm1(-rate * width) if math.isfinite(width) else 1.0
    while True:
        u = rng.random()
        z = a - math.log1p(-u * span) / rate
        if z > b:
            continue
        if rng.random() <= math.exp(-0.5 * (z - rate) ** 2):
            return z


def sample_truncated_normal(
    mu: float,
    var: float,
    lo: float,
    hi: float,
    rng: np.random.Generator,
) -> float:
    """Draw from N(mu, var) restricted to (lo, hi]."""
    sd = _check_variance(var)
    if not lo < hi:
        raise DegenerateTruncationError(f"degenerate truncation: empty interval ({lo}, {hi}].")

    a = (lo - mu) / sd
    b = (hi - mu) / sd
    if _log_standard_mass(a, b) < LOG_MIN_INTERVAL_MASS:
        raise DegenerateTruncationError(
            f"degenerate truncation: N({mu}, {var}) has mass below {MIN_INTERVAL_MASS} on ({lo}, {hi}]."
        )

    if a >= TAIL_SWITCH:
        z = _exponential_tail(a, b, rng)
    elif b <= -TAIL_SWITCH:
        z = -_exponential_tail(-b, -a, rng)
    elif a > 0.0:
        upper, lower = special.ndtr(-a), special.ndtr(-b)
        z = -float(special.ndtri(lower + (upper - lower) * rng.random()))
    else:
        lower, upper = special.ndtr(a), special.ndtr(b)
        z = float(special.ndtri(lower + (upper - lower) * rng.random()))

    x = mu + sd * z
    if x <= lo:
        x = float(np.nextafter(lo, math.inf))
    if x > hi:
        x = hi
    return float(x)


@lru_cache(maxsize=None)
def gauss_legendre_nodes(n_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Legendre roots and weights on [-1, 1] by Newton iteration on the three-term recurrence."""
    if n_nodes < 1:
        raise KernelError(f"Gauss-Legendre needs at least one node, got {n_nodes}.")

    k = np.arange(1, n_nodes + 1, dtype=float)
    x = np.cos(math.pi * (k - 0.25) / (n_nodes + 0.5))

    def legendre(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        previous = np.ones_like(points)
        current = points.copy()
        for degree in range(2, n_nodes + 1):
            previous, current = current, ((2 * degree - 1) * points * current - (degree - 1) * previous) / degree
        derivative = n_nodes * (points * current - previous) / (points * points - 1.0)
        return current, derivative

    for _ in range(100):
        value, derivative = legendre(x)
        step = value / derivative
        x = x - step
        if np.max(np.abs(step)) <= 4.0 * np.finfo(float).eps:
            break

    _, derivative = legendre(x)
    weights = 2.0 / ((1.0 - x * x) * derivative * derivative)
    order = np.argsort(x)
    nodes, weights = x[order], weights[order]
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def _mapped_nodes(lo: float, hi: float, n_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
        raise KernelError(f"Quadrature needs finite lo < hi, got ({lo}, {hi}).")
    nodes, weights = gauss_legendre_nodes(n_nodes)
    half = 0.5 * (hi - lo)
    return 0.5 * (hi + lo) + half * nodes, half * weights


def gauss_legendre(
    f: Callable[[np.ndarray], np.ndarray],
    lo: float,
    hi: float,
    n_nodes: int = 20,
) -> float:
    points, weights = _mapped_nodes(lo, hi, n_nodes)
    values = np.asarray(f(points), dtype=float) * np.ones_like(points)
    bad = ~np.isfinite(values)
    if bad.any():
        node = float(points[np.argmax(bad)])
        raise QuadratureError(f"Integrand is not finite at node {node}.", node=node)
    return float(np.dot(weights, values))


def log_gauss_legendre(
    log_f: Callable[[np.ndarray], np.ndarray],
    lo: float,
    hi: float,
    n_nodes: int = 20,
) -> float:
    """log of the integral of exp(log_f) over [lo, hi]; -inf values are zeros of the integrand."""
    points, weights = _mapped_nodes(lo, hi, n_nodes)
    values = np.asarray(log_f(points), dtype=float) * np.ones_like(points)
    bad = np.isnan(values) | (values == math.inf)
    if bad.any():
        node = float(points[np.argmax(bad)])
        raise QuadratureError(f"Log-integrand is not finite at node {node}.", node=node)
    return float(special.logsumexp(values, b=weights))


def sample_gamma(shape: float, rate: float, rng: np.random.Generator) -> float:
    if not shape > 0 or not rate > 0:
        raise KernelError(f"Gamma needs positive shape and rate, got ({shape}, {rate}).")
    return float(rng.gamma(shape, 1.0 / rate))


def sample_inverse_gamma(shape: float, scale: float, rng: np.random.Generator) -> float:
    if not shape > 0 or not scale > 0:
        raise KernelError(f"Inverse gamma needs positive shape and scale, got ({shape}, {scale}).")
    return 1.0 / max(float(rng.gamma(shape, 1.0 / scale)), _TINY)


def jeffreys_normal_update(values: np.ndarray, rng: np.random.Generator) -> tuple[float, float]:
    """(mu, var) draw under the prior proportional to 1/var."""
    values = np.asarray(values, dtype=float)
    n = values.size
    if n < 2:
        raise InsufficientValuesError(f"insufficient distinct values: got {n}, need at least 2.")
    centre = float(values.mean())
    spread = float(np.sum((values - centre) ** 2))
    if not spread > 0:
        raise InsufficientValuesError("insufficient distinct values: all values coincide.")
    var = sample_inverse_gamma(0.5 * (n - 1), 0.5 * spread, rng)
    mu = float(rng.normal(centre, math.sqrt(var / n)))
    return mu, var
