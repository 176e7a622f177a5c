"""Discretization of the latent activity level into an approximating HMM.

The state space ``[-B, B]`` is cut into ``m`` equal intervals; transition
probabilities are the midpoint rule ``gamma_ij = h * N(b_j; phi b_i + d_t, sigma_s)``.
Rows are deliberately not renormalized; the lost (truncated) mass is reported.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
from scipy.stats import norm

from .params import ModelSpec, ParameterSet

_SHIFT_QUANTUM = 1e-9

# Half the largest exponent allowed in the split factors of the shifted
# kernel; keeps them well below the float64 overflow limit (~709).
_MAX_SPLIT_EXPONENT = 150.0


@dataclass(frozen=True)
class StateGrid:
    boundaries: np.ndarray

    @property
    def m(self) -> int:
        return len(self.boundaries) - 1

    @property
    def h(self) -> float:
        return float((self.boundaries[-1] - self.boundaries[0]) / self.m)

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.boundaries[:-1] + self.boundaries[1:])


def build_grid(spec: ModelSpec) -> StateGrid:
    m, bound = int(spec.grid_m), float(spec.grid_bound)
    if m < 2:
        raise ValueError(f"grid needs at least 2 intervals, got m={m}")
    if not (np.isfinite(bound) and bound > 0):
        raise ValueError(f"grid bound must be positive and finite, got {bound}")
    return StateGrid(np.linspace(-bound, bound, m + 1))


def state_shift(x2, theta: ParameterSet, spec: ModelSpec):
    """Covariate shift ``d_t`` of the state mean (zero unless the variant has state covariates)."""
    x2 = np.asarray(x2, dtype=float)
    if not spec.has_state_covariates:
        return np.zeros(x2.shape[:-1]) if x2.ndim else 0.0
    return x2 @ theta.omega


def _dense(grid: StateGrid, phi: float, sigma_s: float, shift: float) -> np.ndarray:
    b = grid.midpoints
    return grid.h * norm.pdf(b[None, :], loc=phi * b[:, None] + shift, scale=sigma_s)


class TransitionCache:
    """Dense transition matrices memoized on the quantized shift.

    One instance belongs to one parameter value; create a fresh cache per
    likelihood evaluation (instances are not shared between threads).
    """

    def __init__(self, grid: StateGrid, theta: ParameterSet):
        self.grid = grid
        self.phi = float(theta.phi)
        self.sigma_s = float(theta.sigma_s)
        self._store: Dict[int, np.ndarray] = {}

    def get(self, shift: float) -> np.ndarray:
        key = int(round(shift / _SHIFT_QUANTUM))
        mat = self._store.get(key)
        if mat is None:
            mat = _dense(self.grid, self.phi, self.sigma_s, key * _SHIFT_QUANTUM)
            self._store[key] = mat
        return mat

    def __len__(self) -> int:
        return len(self._store)


def transition_matrix(grid: StateGrid, x2, theta: ParameterSet, spec: ModelSpec,
                      cache: Optional[TransitionCache] = None) -> np.ndarray:
    """Midpoint-rule transition matrix for one minute's state covariates."""
    shift = float(state_shift(x2, theta, spec)) if x2 is not None else 0.0
    if cache is not None:
        return cache.get(shift)
    return _dense(grid, theta.phi, theta.sigma_s, shift)


def exact_transition_matrix(grid: StateGrid, theta: ParameterSet, shift: float = 0.0) -> np.ndarray:
    """Interval probabilities ``P(s_t in B_j | s_{t-1} = b_i*)`` from normal CDF differences."""
    loc = theta.phi * grid.midpoints[:, None] + shift
    cdf = norm.cdf((grid.boundaries[None, :] - loc) / theta.sigma_s)
    return np.diff(cdf, axis=1)


def truncation_mass(gamma: np.ndarray) -> np.ndarray:
    """Per-row probability mass lost outside the grid (``1 - row sum``)."""
    return 1.0 - gamma.sum(axis=1)


def check_truncation(gamma: np.ndarray, spec: ModelSpec, weights: Optional[np.ndarray] = None) -> float:
    """Warn when the lost mass exceeds ``spec.truncation_warn``.

    Without ``weights`` the worst row is checked; with weights (typically the
    initial law) the expected loss per step ``sum_i w_i (1 - row sum_i)`` is.
    """
    lost = truncation_mass(gamma)
    worst = float(lost.max() if weights is None else np.dot(weights, lost))
    if worst > spec.truncation_warn:
        what = "transition rows lose up to" if weights is None else "expected per-step loss is"
        warnings.warn(
            f"{what} {worst:.2e} probability mass outside [-{spec.grid_bound}, {spec.grid_bound}]",
            RuntimeWarning,
            stacklevel=2,
        )
    return worst


def stationary_sd(theta: ParameterSet) -> float:
    return float(theta.sigma_s / np.sqrt(1.0 - theta.phi**2))


def initial_distribution(grid: StateGrid, theta: ParameterSet) -> np.ndarray:
    """Discretized stationary law ``N(0, sigma_s^2 / (1 - phi^2))``, renormalized on the grid."""
    if not abs(theta.phi) < 1:
        raise ValueError(f"stationary law needs |phi| < 1, got {theta.phi}")
    b = grid.midpoints
    lam = (1.0 - theta.phi**2) / (2.0 * theta.sigma_s**2)
    logw = -lam * b * b
    w = np.exp(logw - logw.max())
    return w / w.sum()


class ShiftKernel:
    """Transition operator for a whole batch of minutes with arbitrary shifts.

    Uses the factorization ``Gamma(d0 + e) = diag(u) K(d0) diag(v)`` with
    ``u_i = exp(-e phi b_i / s2)`` and ``v_j = exp(e (b_j - d0) / s2 - e^2 / (2 s2))``,
    so every minute costs one matrix product with a shared kernel ``K(d0)``.
    Shifts are split into an anchor ``d0`` (a multiple of ``width``) and a
    residual ``e`` with ``|e| < width``, small enough that the split factors
    stay representable.

    Args:
        grid: state grid.
        theta: parameter value (uses ``phi`` and ``sigma_s``).
        shifts: array ``(N, T)`` of per-minute shifts ``d_t``.
    """

    def __init__(self, grid: StateGrid, theta: ParameterSet, shifts: np.ndarray):
        self.grid = grid
        self.b = grid.midpoints
        self.phi = float(theta.phi)
        self.s2 = float(theta.sigma_s) ** 2
        self.sigma_s = float(theta.sigma_s)
        shifts = np.asarray(shifts, dtype=float)
        bmax = float(np.abs(self.b).max())
        self.width = 2.0 * _MAX_SPLIT_EXPONENT * self.s2 / ((1.0 + abs(self.phi)) * bmax)
        # anchors are truncated toward zero so K(d0) never sits beyond the true shift
        self.anchor = np.trunc(shifts / self.width).astype(np.int64)
        self.resid = shifts - self.anchor * self.width
        self.trivial = not np.any(shifts)
        self._kernels: Dict[int, np.ndarray] = {}
        self._kernels_T: Dict[int, np.ndarray] = {}
        for key in np.unique(self.anchor):
            k = _dense(grid, self.phi, self.sigma_s, key * self.width)
            self._kernels[int(key)] = k
            self._kernels_T[int(key)] = np.ascontiguousarray(k.T)

    def kernel(self, key: int = 0) -> np.ndarray:
        return self._kernels[key]

    def factors(self, t: int, rows=slice(None)):
        """Split factors ``(u, v)`` for minute ``t`` (arrays ``(n, m)``), or ``(None, None)`` if unshifted."""
        e = self.resid[rows, t]
        if not np.any(e):
            return None, None
        d0 = self.anchor[rows, t] * self.width
        log_u = -(e * self.phi / self.s2)[:, None] * self.b[None, :]
        shift = log_u.max(axis=1, keepdims=True)
        log_u -= shift
        log_v = (e / self.s2)[:, None] * (self.b[None, :] - d0[:, None]) - (0.5 * e * e / self.s2)[:, None] + shift
        # only reachable when the anchor lies far outside the grid, where K(d0) underflows anyway
        np.minimum(log_v, 700.0, out=log_v)
        return np.exp(log_u), np.exp(log_v)

    def _apply(self, a: np.ndarray, t: int, rows, transpose: bool) -> np.ndarray:
        keys = self.anchor[rows, t]
        u, v = self.factors(t, rows)
        left, right = (v, u) if transpose else (u, v)
        mats = self._kernels_T if transpose else self._kernels
        x = a if left is None else a * left
        k0 = int(keys[0]) if keys.size else 0
        if keys.size == 0 or np.all(keys == k0):
            out = x @ mats[k0]
        else:
            out = np.empty_like(x)
            for key in np.unique(keys):
                sel = keys == key
                out[sel] = x[sel] @ mats[int(key)]
        if right is not None:
            out *= right
        return out

    def forward(self, a: np.ndarray, t: int, rows=slice(None)) -> np.ndarray:
        """Row vectors times ``Gamma_t``: ``out[n, j] = sum_i a[n, i] Gamma_t[n](i, j)``."""
        return self._apply(a, t, rows, transpose=False)

    def backward(self, w: np.ndarray, t: int, rows=slice(None)) -> np.ndarray:
        """``Gamma_t`` times column vectors: ``out[n, i] = sum_j Gamma_t[n](i, j) w[n, j]``."""
        return self._apply(w, t, rows, transpose=True)

    def dense(self, n: int, t: int) -> np.ndarray:
        d = self.anchor[n, t] * self.width + self.resid[n, t]
        return _dense(self.grid, self.phi, self.sigma_s, d)
