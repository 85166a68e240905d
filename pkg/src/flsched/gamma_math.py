"""Incomplete-gamma and Poisson primitives.

For integer shape ``s`` the regularized upper incomplete gamma function
reduces to a finite Poisson tail sum,

    Q(s, x) = sum_{k=0}^{s-1} x^k e^{-x} / k!,

which also equals the Poisson CDF ``P(X <= s-1)`` for ``X ~ Poiss(x)``.
Everything here is a pure function of scalars.
"""

from __future__ import annotations

import math

from .errors import DomainError

# Probability outputs may drift past [0, 1] by accumulated rounding; anything
# further out is a genuine bug.
_PROB_SLACK = 1e-12

# Above this rate the leading series term e^{-x} underflows double precision,
# so the tail sum is accumulated in log space instead.
_LOG_SPACE_THRESHOLD = 700.0

_MAX_SHAPE = 512


def clamp_probability(value: float) -> float:
    """Clamp ``value`` to [0, 1], rejecting anything beyond rounding slack."""
    if not math.isfinite(value) or value < -_PROB_SLACK or value > 1.0 + _PROB_SLACK:
        raise DomainError(f"not a probability (even within slack): {value!r}")
    return min(max(value, 0.0), 1.0)


def regularized_upper_gamma(s: int, x: float) -> float:
    """Q(s, x) for integer shape ``s >= 1`` and ``x >= 0``.

    Terms are built by the multiplicative recursion
    ``term_{k+1} = term_k * x / (k + 1)`` so no explicit factorial is ever
    formed; shapes are capped at 512.
    """
    if not isinstance(s, (int,)) or isinstance(s, bool):
        raise DomainError(f"shape must be an integer, got {s!r}")
    if s < 1 or s > _MAX_SHAPE:
        raise DomainError(f"shape must be in [1, {_MAX_SHAPE}], got {s}")
    if not math.isfinite(x) or x < 0.0:
        raise DomainError(f"x must be finite and nonnegative, got {x!r}")
    if x == 0.0:
        return 1.0
    if x <= _LOG_SPACE_THRESHOLD:
        term = math.exp(-x)
        total = term
        for k in range(1, s):
            term *= x / k
            total += term
        return clamp_probability(total)
    # Far tail: sum exp(k ln x - x - ln k!) via a stable log-sum-exp.
    log_terms = [k * math.log(x) - x - math.lgamma(k + 1) for k in range(s)]
    peak = max(log_terms)
    if peak == -math.inf:
        return 0.0
    total = math.exp(peak) * sum(math.exp(lt - peak) for lt in log_terms)
    return clamp_probability(total)


def poisson_cdf(k: int, lam: float) -> float:
    """P(X <= k) for ``X ~ Poiss(lam)``; equals ``Q(k + 1, lam)``."""
    if not isinstance(k, (int,)) or isinstance(k, bool):
        raise DomainError(f"k must be an integer, got {k!r}")
    if k < 0:
        raise DomainError(f"k must be nonnegative, got {k}")
    if not math.isfinite(lam) or lam <= 0.0:
        raise DomainError(f"lambda must be finite and positive, got {lam!r}")
    return regularized_upper_gamma(k + 1, lam)


def poisson_pmf(k: int, lam: float) -> float:
    """P(X = k) for ``X ~ Poiss(lam)``, evaluated in log space."""
    if not isinstance(k, (int,)) or isinstance(k, bool):
        raise DomainError(f"k must be an integer, got {k!r}")
    if k < 0:
        raise DomainError(f"k must be nonnegative, got {k}")
    if not math.isfinite(lam) or lam <= 0.0:
        raise DomainError(f"lambda must be finite and positive, got {lam!r}")
    return clamp_probability(math.exp(k * math.log(lam) - lam - math.lgamma(k + 1)))
