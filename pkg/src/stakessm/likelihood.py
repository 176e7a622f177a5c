"""Approximate likelihood of the discretized state-space model.

The likelihood of one series is the matrix product
``delta P(y_1) Gamma_2 P(y_2) ... Gamma_T P(y_T) 1`` evaluated by the scaled
forward recursion.  Series are stacked into padded batches so every minute is
one matrix product for the whole batch.

The gradient is computed exactly for the discretized likelihood by a scaled
forward-backward pass: the score is the posterior expectation of the
derivative of each log transition/emission/initial term.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .data import TeamMatchSeries
from .grid import ShiftKernel, StateGrid, build_grid, initial_distribution
from .params import BASELINE, ModelSpec, ParameterSet, from_unconstrained, param_names, to_unconstrained

_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)
DEFAULT_CHUNK = 256


class LikelihoodError(ValueError):
    """Likelihood evaluation hit an invalid (non-finite) emission."""


@dataclass
class SeriesBatch:
    """Padded stack of team series in design-matrix form.

    ``X1`` and ``Z`` carry a leading intercept column; for the baseline variant
    they are intercept-only.  ``valid`` marks real (non-padding) minutes;
    ``horizon`` further drops minutes after the last open one, which integrate
    out of the likelihood exactly.
    """

    keys: List[Tuple[str, str]]
    lengths: np.ndarray
    valid: np.ndarray
    open: np.ndarray
    pos: np.ndarray
    logy: np.ndarray
    X1: np.ndarray
    X2: np.ndarray
    Z: np.ndarray

    @property
    def N(self) -> int:
        return len(self.keys)

    @property
    def T(self) -> int:
        return self.valid.shape[1]

    @cached_property
    def horizon(self) -> np.ndarray:
        later_open = np.flip(np.logical_or.accumulate(np.flip(self.open, axis=1), axis=1), axis=1)
        return self.valid & later_open

    @classmethod
    def from_series(cls, series: Sequence[TeamMatchSeries], spec: ModelSpec) -> "SeriesBatch":
        if not series:
            raise ValueError("empty corpus")
        N = len(series)
        T = max(s.T for s in series)
        lengths = np.array([s.T for s in series])
        valid = np.arange(T)[None, :] < lengths[:, None]
        open_ = np.zeros((N, T), dtype=bool)
        y = np.zeros((N, T))
        full_x = spec.variant != BASELINE
        p1 = series[0].x1.shape[1] + 1 if full_x else 1
        pz = series[0].z.shape[1] + 1 if full_x else 1
        p2 = series[0].x2.shape[1] if spec.has_state_covariates else 0
        X1 = np.zeros((N, T, p1))
        Z = np.zeros((N, T, pz))
        X2 = np.zeros((N, T, p2))
        X1[..., 0] = 1.0
        Z[..., 0] = 1.0
        for n, s in enumerate(series):
            L = s.T
            y[n, :L] = s.y
            open_[n, :L] = s.open
            if full_x:
                X1[n, :L, 1:] = s.x1
                Z[n, :L, 1:] = s.z
            if p2:
                X2[n, :L] = s.x2
        if np.any(y < 0):
            raise ValueError("negative stakes in corpus")
        pos = y > 0
        if np.any(pos & ~open_):
            n, t = map(int, np.argwhere(pos & ~open_)[0])
            raise LikelihoodError(f"series {series[n].key}: positive stake on closed market at minute {t + 1}")
        with np.errstate(divide="ignore"):
            logy = np.where(pos, np.log(np.where(pos, y, 1.0)), 0.0)
        return cls([s.key for s in series], lengths, valid, open_ & valid, pos, logy, X1, X2, Z)

    def take(self, rows) -> "SeriesBatch":
        rows = np.asarray(rows)
        Tm = int(self.lengths[rows].max())
        return SeriesBatch(
            [self.keys[i] for i in rows], self.lengths[rows], self.valid[rows, :Tm], self.open[rows, :Tm],
            self.pos[rows, :Tm], self.logy[rows, :Tm], self.X1[rows, :Tm], self.X2[rows, :Tm], self.Z[rows, :Tm],
        )

    def chunks(self, size: int = DEFAULT_CHUNK) -> List["SeriesBatch"]:
        if self.N <= size:
            return [self]
        return [self.take(np.arange(i, min(i + size, self.N))) for i in range(0, self.N, size)]


@dataclass
class _Terms:
    nu: np.ndarray
    eta: np.ndarray
    pi: np.ndarray
    shifts: np.ndarray


def _terms(batch: SeriesBatch, theta: ParameterSet, spec: ModelSpec) -> _Terms:
    nu = batch.X1 @ theta.beta
    if spec.variant == BASELINE:
        eta = np.full(batch.valid.shape, math.log(theta.pi) - math.log1p(-theta.pi))
    else:
        eta = batch.Z @ theta.alpha
    if spec.has_state_covariates:
        shifts = batch.X2 @ theta.omega
        shifts[:, 0] = 0.0
    else:
        shifts = np.zeros(batch.valid.shape)
    return _Terms(nu, eta, expit(eta), shifts)


def log_emission_matrix(batch: SeriesBatch, theta: ParameterSet, grid: StateGrid, terms: _Terms) -> np.ndarray:
    """``log P(y_t | s_t = b_i)`` as an ``(N, T, m)`` array (0 on closed/padded minutes)."""
    b = grid.midpoints
    pos_open = batch.pos & batch.open
    zero_open = batch.open & ~batch.pos
    log_pi = -np.logaddexp(0.0, -terms.eta)
    log_1m = -np.logaddexp(0.0, terms.eta)
    q = (batch.logy - terms.nu)[..., None] - b[None, None, :]
    out = (log_1m - math.log(theta.sigma) - _LOG_SQRT_2PI)[..., None] - 0.5 * (q / theta.sigma) ** 2
    out = np.where(pos_open[..., None], out, np.where(zero_open, log_pi, 0.0)[..., None])
    bad = ~np.isfinite(out).all(axis=2) & batch.valid
    if bad.any():
        n, t = map(int, np.argwhere(bad)[0])
        raise LikelihoodError(f"series {batch.keys[n]}: non-finite emission at minute {t + 1}")
    return out


def _rows(valid_t: np.ndarray):
    return slice(None) if valid_t.all() else np.flatnonzero(valid_t)


def forward(batch: SeriesBatch, theta: ParameterSet, spec: ModelSpec, grid: StateGrid,
            keep: bool = False, keep_predictive: bool = False):
    """Scaled forward recursion over a batch.

    Returns:
        dict with ``loglik`` (per series), and when requested ``alpha`` (normalized
        filtered vectors), ``phat`` (rescaled emissions), ``logc`` (log scale
        factors), ``pred`` (normalized one-step predictive weights), ``terms``,
        ``kernel``.
    """
    terms = _terms(batch, theta, spec)
    kernel = ShiftKernel(grid, theta, terms.shifts)
    logP = log_emission_matrix(batch, theta, grid, terms)
    mx = logP.max(axis=2)
    phat = np.exp(logP - mx[..., None])
    del logP
    N, T, m = phat.shape
    delta = initial_distribution(grid, theta)
    logc = np.zeros((N, T))
    alpha_all = np.zeros((N, T, m)) if keep else None
    pred_all = np.empty((N, T, m)) if keep_predictive else None

    a = delta[None, :] * phat[:, 0]
    if keep_predictive:
        pred_all[:, 0] = delta[None, :]
    c = a.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        logc[:, 0] = np.log(c)
        a = a / c[:, None]
    if keep:
        alpha_all[:, 0] = a
    horizon = batch.horizon
    steps = batch.valid if keep_predictive else horizon
    for t in range(1, T):
        if not steps[:, t].any():
            break
        rows = _rows(steps[:, t])
        f = kernel.forward(a[rows], t, rows)
        if keep_predictive:
            pred_all[rows, t] = f / f.sum(axis=1, keepdims=True)
        f *= phat[rows, t]
        c = f.sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            logc[rows, t] = np.log(c)
            a[rows] = f / c[:, None]
        if keep:
            alpha_all[:, t] = a
    loglik = np.where(horizon, logc + mx, 0.0).sum(axis=1)
    loglik = np.where(np.isnan(loglik), -np.inf, loglik)
    out = {"loglik": loglik, "terms": terms, "kernel": kernel}
    if keep:
        out.update(alpha=alpha_all, phat=phat, logc=logc)
    if keep_predictive:
        out["pred"] = pred_all
    return out


def loglik_and_gradient(batch: SeriesBatch, theta: ParameterSet, spec: ModelSpec, grid: StateGrid):
    """Total log-likelihood of the batch and its gradient on the unconstrained scale."""
    fw = forward(batch, theta, spec, grid, keep=True)
    ll = fw["loglik"]
    if not np.all(np.isfinite(ll)):
        return float(np.sum(ll)), np.full(len(param_names(spec.variant)), np.nan)
    terms, kernel = fw["terms"], fw["kernel"]
    alpha, phat, logc = fw["alpha"], fw["phat"], fw["logc"]
    horizon = batch.horizon
    b = grid.midpoints
    b2 = b * b
    N, T, m = alpha.shape

    Eb = np.zeros((N, T))
    Eb2 = np.zeros((N, T))
    cross = np.zeros((N, T))
    beta_hat = np.ones((N, m))
    for t in range(T - 1, -1, -1):
        gamma = alpha[:, t] * beta_hat
        Eb[:, t] = gamma @ b
        Eb2[:, t] = gamma @ b2
        if t == 0:
            break
        if not horizon[:, t].any():
            continue
        rows = _rows(horizon[:, t])
        w = phat[rows, t] * beta_hat[rows] / np.exp(logc[rows, t])[:, None]
        cross[rows, t] = np.einsum("nj,nj->n", kernel.forward(alpha[rows, t - 1] * b, t, rows), w * b)
        beta_hat[rows] = kernel.backward(w, t, rows)

    trans = horizon.copy()
    trans[:, 0] = False
    phi, s2 = theta.phi, theta.sigma_s**2
    d = terms.shifts
    Ebp = np.zeros_like(Eb)
    Eb2p = np.zeros_like(Eb2)
    Ebp[:, 1:] = Eb[:, :-1]
    Eb2p[:, 1:] = Eb2[:, :-1]
    Er = Eb - phi * Ebp - d
    Erb = cross - phi * Eb2p - d * Ebp
    Er2 = Eb2 + phi**2 * Eb2p + d * d - 2 * phi * cross - 2 * d * Eb + 2 * phi * d * Ebp
    g_phi = np.sum(Erb, where=trans) / s2
    g_logss = np.sum(-1.0 + Er2 / s2, where=trans)
    g_omega = np.einsum("ntk,nt->k", batch.X2, np.where(trans, Er, 0.0)) / s2

    lam = (1.0 - phi**2) / (2.0 * s2)
    delta = initial_distribution(grid, theta)
    g_lam = np.sum(-Eb2[:, 0] + delta @ b2)
    g_phi += g_lam * (-phi / s2)
    g_logss += g_lam * (-2.0 * lam)

    pos_open = batch.pos & batch.open
    zero_open = batch.open & ~batch.pos
    resid = batch.logy - terms.nu
    sig2 = theta.sigma**2
    Eq = np.where(pos_open, resid - Eb, 0.0)
    Eq2 = resid * resid - 2 * resid * Eb + Eb2
    g_beta = np.einsum("ntk,nt->k", batch.X1, Eq) / sig2
    g_logsig = np.sum(-1.0 + Eq2 / sig2, where=pos_open)
    g_eta = np.where(pos_open, -terms.pi, np.where(zero_open, 1.0 - terms.pi, 0.0))
    g_zero = np.einsum("ntk,nt->k", batch.Z, g_eta)

    grad = {"phi": g_phi * (1.0 - phi**2), "sigma_s": g_logss, "sigma": g_logsig}
    for k, v in enumerate(g_beta):
        grad[f"beta{k}"] = v
    for k, v in enumerate(g_omega):
        grad[f"omega{k + 1}"] = v
    if spec.variant == BASELINE:
        grad["pi"] = g_zero[0]
    else:
        for k, v in enumerate(g_zero):
            grad[f"alpha{k}"] = v
    return float(math.fsum(ll)), np.array([grad[n] for n in param_names(spec.variant)])


class LikelihoodEngine:
    """Likelihood of a fixed corpus as a function of the parameters.

    Batches are built once.  With ``threads > 1`` chunks are evaluated in a
    thread pool; per-series values are always reduced with ``math.fsum`` so
    the total does not depend on evaluation order.
    """

    def __init__(self, corpus: Sequence[TeamMatchSeries], spec: ModelSpec, grid: Optional[StateGrid] = None,
                 threads: int = 1, chunk_size: int = DEFAULT_CHUNK):
        if not corpus:
            raise ValueError("empty corpus")
        self.spec = spec
        self.grid = grid if grid is not None else build_grid(spec)
        self.batch = SeriesBatch.from_series(corpus, spec)
        self.chunks = self.batch.chunks(chunk_size)
        self.threads = max(1, int(threads or 1))
        self.n_evals = 0

    def _map(self, fn):
        if self.threads == 1 or len(self.chunks) == 1:
            return [fn(c) for c in self.chunks]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, self.chunks))

    def series_loglik(self, theta: ParameterSet) -> np.ndarray:
        self.n_evals += 1
        parts = self._map(lambda c: forward(c, theta, self.spec, self.grid)["loglik"])
        return np.concatenate(parts)

    def loglik(self, theta: ParameterSet) -> float:
        return float(math.fsum(self.series_loglik(theta)))

    def loglik_grad(self, theta: ParameterSet) -> Tuple[float, np.ndarray]:
        self.n_evals += 1
        parts = self._map(lambda c: loglik_and_gradient(c, theta, self.spec, self.grid))
        total = float(math.fsum(p[0] for p in parts))
        grad = np.sum([p[1] for p in parts], axis=0)
        return total, grad

    def loglik_u(self, x: np.ndarray) -> float:
        return self.loglik(from_unconstrained(x, self.spec.variant))

    def fd_gradient(self, x: np.ndarray, rel_step: float = 1e-5) -> np.ndarray:
        """Central finite-difference gradient over the unconstrained vector."""
        x = np.asarray(x, dtype=float)
        g = np.empty_like(x)
        for k in range(x.size):
            h = rel_step * max(1.0, abs(x[k]))
            xp, xm = x.copy(), x.copy()
            xp[k] += h
            xm[k] -= h
            g[k] = (self.loglik_u(xp) - self.loglik_u(xm)) / (xp[k] - xm[k])
        return g


def forward_loglik(series: TeamMatchSeries, theta: ParameterSet, spec: ModelSpec,
                   grid: Optional[StateGrid] = None) -> float:
    """Approximate log-likelihood of a single team series."""
    grid = grid if grid is not None else build_grid(spec)
    batch = SeriesBatch.from_series([series], spec)
    return float(forward(batch, theta, spec, grid)["loglik"][0])


def total_loglik(corpus: Sequence[TeamMatchSeries], theta: ParameterSet, spec: ModelSpec,
                 grid: Optional[StateGrid] = None, threads: int = 1) -> float:
    """Sum of the series log-likelihoods (series are independent)."""
    return LikelihoodEngine(corpus, spec, grid, threads=threads).loglik(theta)


__all__ = [
    "LikelihoodEngine",
    "LikelihoodError",
    "SeriesBatch",
    "forward",
    "forward_loglik",
    "loglik_and_gradient",
    "log_emission_matrix",
    "total_loglik",
    "to_unconstrained",
]
