"""Hurdle emission: a point mass at zero plus a normal law for log positive stakes.

Densities of positive stakes are taken on the log scale (no ``1/y`` Jacobian).
The convention is the same for every variant, so likelihood differences, AIC
comparisons and PIT values are unaffected by it.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .params import BASELINE, ModelSpec, ParameterSet, SpecError, X1_NAMES, Z_NAMES

_LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)


def _check_arity(arr: np.ndarray, expected: int, what: str) -> None:
    if arr.shape[-1] != expected:
        raise SpecError(f"{what} row has {arr.shape[-1]} components, expected {expected}")


def zero_logit(z, theta: ParameterSet, spec: ModelSpec):
    """Linear predictor of the zero-stake logit on open minutes."""
    if spec.variant == BASELINE:
        z = np.asarray(z, dtype=float)
        shape = z.shape[:-1] if z.ndim else ()
        return np.full(shape, np.log(theta.pi) - np.log1p(-theta.pi))
    z = np.asarray(z, dtype=float)
    _check_arity(z, len(Z_NAMES), "zero-probability covariate")
    return theta.alpha[0] + z @ theta.alpha[1:]


def zero_prob(z, theta: ParameterSet, open_, spec: ModelSpec):
    """Probability of a zero stake; exactly 1 on closed-market minutes."""
    if spec.variant == BASELINE:
        pi = np.broadcast_to(np.asarray(theta.pi, dtype=float), np.shape(open_))
    else:
        pi = expit(zero_logit(z, theta, spec))
    return np.where(open_, pi, 1.0)


def mean_predictor(x1, theta: ParameterSet, spec: ModelSpec):
    """Covariate part ``nu_t`` of the log-stake mean."""
    x1 = np.asarray(x1, dtype=float)
    if spec.variant == BASELINE:
        shape = x1.shape[:-1] if x1.ndim else ()
        return np.full(shape, theta.beta[0])
    _check_arity(x1, len(X1_NAMES), "mean-predictor covariate")
    if theta.beta.size != 1 + len(X1_NAMES):
        raise SpecError(f"beta has {theta.beta.size} entries, expected {1 + len(X1_NAMES)}")
    return theta.beta[0] + x1 @ theta.beta[1:]


def emission_density(y, s, x1, z, open_, theta: ParameterSet, spec: ModelSpec):
    """Hurdle density of stake ``y`` given latent level ``s``.

    Returns ``pi_t`` at ``y = 0`` and ``(1 - pi_t) * N(log y; nu_t + s, sigma)``
    for ``y > 0``.
    """
    y = np.asarray(y, dtype=float)
    open_ = np.asarray(open_, dtype=bool)
    if np.any(y < 0):
        raise ValueError("stakes must be nonnegative")
    if np.any((y > 0) & ~open_):
        raise ValueError("positive stake on a closed market (zero probability is 1 there)")
    pi = zero_prob(z, theta, open_, spec)
    nu = mean_predictor(x1, theta, spec)
    with np.errstate(divide="ignore"):
        logy = np.where(y > 0, np.log(np.where(y > 0, y, 1.0)), 0.0)
    q = (logy - nu - s) / theta.sigma
    pos = (1 - pi) * np.exp(-0.5 * q * q - _LOG_SQRT_2PI) / theta.sigma
    return np.where(y > 0, pos, pi)


def log_emission_density(y, s, x1, z, open_, theta: ParameterSet, spec: ModelSpec):
    """Log of :func:`emission_density`, computed without underflow for remote stakes."""
    y = np.asarray(y, dtype=float)
    open_ = np.asarray(open_, dtype=bool)
    eta = zero_logit(z, theta, spec)
    nu = mean_predictor(x1, theta, spec)
    log_pi = -np.logaddexp(0.0, -eta)
    log_1m_pi = -np.logaddexp(0.0, eta)
    logy = np.log(np.where(y > 0, y, 1.0))
    q = (logy - nu - s) / theta.sigma
    pos = log_1m_pi - 0.5 * q * q - _LOG_SQRT_2PI - np.log(theta.sigma)
    return np.where(~open_, 0.0, np.where(y > 0, pos, log_pi))
