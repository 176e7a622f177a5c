"""Maximum-likelihood fitting, Hessian-based intervals and AIC comparison."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .data import TeamMatchSeries
from .grid import build_grid, check_truncation, initial_distribution, transition_matrix, truncation_mass
from .likelihood import LikelihoodEngine, SeriesBatch
from .params import (
    BASELINE,
    ModelSpec,
    ParameterSet,
    from_unconstrained,
    param_names,
    to_unconstrained,
    transform_jacobian,
)

log = logging.getLogger(__name__)

Z95 = 1.96
DENSITY_CONVENTION = "log-stake"
_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


class FitError(ValueError):
    """Fitting could not start (empty corpus, invalid start value...)."""


@dataclass
class FitOptions:
    """Optimizer settings.

    Attributes:
        max_iter: BFGS iteration cap; hitting it flags the fit as non-converged.
        gtol: max-norm bound on the log-likelihood gradient (unconstrained scale).
        ftol_rel: relative change of the objective between iterations that also counts as converged.
        gradient: ``"analytic"`` (forward-backward) or ``"fd"`` (central differences).
        fd_step: relative step of the finite-difference gradient.
        hessian_step: relative step of the central-difference Hessian.
        multistart: run ``n_starts`` jittered starts and keep the best.
    """

    max_iter: int = 500
    gtol: float = 1e-5
    ftol_rel: float = 1e-9
    gradient: str = "analytic"
    fd_step: float = 1e-5
    hessian_step: float = 1e-4
    multistart: bool = False
    n_starts: int = 5
    jitter: float = 0.2
    seed: int = 0
    threads: int = 1
    compute_ci: bool = True

    def __post_init__(self):
        if self.gradient not in ("analytic", "fd"):
            raise ValueError(f"gradient must be 'analytic' or 'fd', got {self.gradient!r}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")


@dataclass
class FitResult:
    theta: ParameterSet
    loglik: float
    k: int
    spec: ModelSpec
    converged: bool
    iterations: int
    grad_norm: float
    message: str
    n_evals: int = 0
    se: Optional[Dict[str, float]] = None
    ci: Optional[Dict[str, Tuple[float, float]]] = None
    hessian_pd: Optional[bool] = None
    hessian_condition: Optional[float] = None
    ci_message: str = ""
    corpus_digest: str = ""
    n_series: int = 0
    n_minutes: int = 0
    density: str = DENSITY_CONVENTION
    truncation_max_row: Optional[float] = None
    truncation_stationary: Optional[float] = None
    options: Dict = field(default_factory=dict)
    hessian_u: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def variant(self) -> str:
        return self.spec.variant

    @property
    def aic(self) -> float:
        return aic(self)

    def param_table(self) -> List[Tuple[str, float, Optional[float], Optional[float], Optional[float]]]:
        """Rows ``(name, estimate, se, lower, upper)`` in reporting order."""
        rows = []
        values = self.theta.to_dict()
        for name in param_names(self.variant):
            lo, hi = self.ci[name] if self.ci else (None, None)
            se = self.se[name] if self.se else None
            rows.append((name, values[name], se, lo, hi))
        return rows

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "params": self.theta.to_dict(),
            "se": self.se,
            "ci": {k: list(v) for k, v in self.ci.items()} if self.ci else None,
            "loglik": self.loglik,
            "aic": self.aic,
            "k": self.k,
            "converged": self.converged,
            "iterations": self.iterations,
            "n_evals": self.n_evals,
            "grad_norm": self.grad_norm,
            "message": self.message,
            "hessian_pd": self.hessian_pd,
            "hessian_condition": self.hessian_condition,
            "ci_message": self.ci_message,
            "corpus_digest": self.corpus_digest,
            "n_series": self.n_series,
            "n_minutes": self.n_minutes,
            "density": self.density,
            "truncation_max_row": self.truncation_max_row,
            "truncation_stationary": self.truncation_stationary,
            "options": self.options,
            "spec": self.spec.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        spec = ModelSpec.from_dict(d["spec"])
        return cls(
            theta=ParameterSet.from_dict(d["params"], spec.variant),
            loglik=float(d["loglik"]),
            k=int(d["k"]),
            spec=spec,
            converged=bool(d["converged"]),
            iterations=int(d["iterations"]),
            grad_norm=float(d["grad_norm"]),
            message=str(d.get("message", "")),
            n_evals=int(d.get("n_evals", 0)),
            se=d.get("se"),
            ci={k: tuple(v) for k, v in d["ci"].items()} if d.get("ci") else None,
            hessian_pd=d.get("hessian_pd"),
            hessian_condition=d.get("hessian_condition"),
            ci_message=d.get("ci_message", ""),
            corpus_digest=d.get("corpus_digest", ""),
            n_series=int(d.get("n_series", 0)),
            n_minutes=int(d.get("n_minutes", 0)),
            density=d.get("density", DENSITY_CONVENTION),
            truncation_max_row=d.get("truncation_max_row"),
            truncation_stationary=d.get("truncation_stationary"),
            options=d.get("options", {}),
        )


@dataclass
class StaticFit:
    """Hurdle regression without the latent state (``s_t = 0``)."""

    variant: str
    params: Dict[str, float]
    loglik: float
    k: int
    corpus_digest: str
    n_series: int = 0
    density: str = DENSITY_CONVENTION

    @property
    def aic(self) -> float:
        return aic(self)


def corpus_digest(corpus: Sequence[TeamMatchSeries]) -> str:
    """Order-independent SHA-256 over series keys, stakes and open flags."""
    parts = []
    for s in corpus:
        h = hashlib.sha256()
        h.update(f"{s.match_id}\x00{s.team_id}\x00{s.T}".encode())
        h.update(np.ascontiguousarray(s.y, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(s.open, dtype=np.uint8).tobytes())
        parts.append(h.hexdigest())
    top = hashlib.sha256()
    for p in sorted(parts):
        top.update(p.encode())
    return top.hexdigest()


def _open_log_stakes(corpus: Sequence[TeamMatchSeries]) -> Tuple[np.ndarray, int, int]:
    logs, zeros, opened = [], 0, 0
    for s in corpus:
        pos = (s.y > 0) & s.open
        logs.append(np.log(s.y[pos]))
        zeros += int(np.sum(s.open & (s.y == 0)))
        opened += int(np.sum(s.open))
    return np.concatenate(logs) if logs else np.zeros(0), zeros, opened


def default_init(corpus: Sequence[TeamMatchSeries], spec: ModelSpec) -> ParameterSet:
    """Start value: moderate persistence, moments of log positive stakes, empirical zero share."""
    logs, zeros, opened = _open_log_stakes(corpus)
    if logs.size < 2 or opened == 0:
        raise FitError("corpus has too few positive open-market stakes to initialise a fit")
    pi0 = min(max(zeros / opened, 1e-4), 1 - 1e-4)
    beta = np.zeros(spec.n_beta)
    beta[0] = float(logs.mean())
    kwargs = dict(phi=0.9, sigma_s=0.3, sigma=float(logs.std()), beta=beta)
    if spec.variant == BASELINE:
        kwargs["pi"] = pi0
    else:
        alpha = np.zeros(spec.n_alpha)
        alpha[0] = math.log(pi0) - math.log1p(-pi0)
        kwargs["alpha"] = alpha
    if spec.n_omega:
        kwargs["omega"] = np.zeros(spec.n_omega)
    return ParameterSet(**kwargs)


class _Objective:
    """Negative mean log-likelihood per scored minute, with gradient, on the unconstrained scale."""

    def __init__(self, engine: LikelihoodEngine, options: FitOptions, scale: float):
        self.engine = engine
        self.options = options
        self.scale = scale
        self.variant = engine.spec.variant
        self.last: Tuple[Optional[np.ndarray], float, Optional[np.ndarray]] = (None, np.nan, None)

    def loglik_grad(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        theta = from_unconstrained(x, self.variant)
        if not abs(theta.phi) < 1 or theta.sigma <= 0 or theta.sigma_s <= 0:
            return -np.inf, np.zeros_like(x)
        if self.options.gradient == "fd":
            ll = self.engine.loglik(theta)
            g = self.engine.fd_gradient(x, self.options.fd_step)
        else:
            ll, g = self.engine.loglik_grad(theta)
        return ll, g

    def __call__(self, x: np.ndarray):
        ll, g = self.loglik_grad(x)
        self.last = (x.copy(), ll, g)
        if not np.isfinite(ll) or not np.all(np.isfinite(g)):
            return np.inf, np.zeros_like(x)
        return -ll / self.scale, -g / self.scale


class _StopRule:
    """Callback implementing the relative-objective-change stop."""

    def __init__(self, ftol_rel: float):
        self.ftol_rel = ftol_rel
        self.prev = None
        self.hit = False
        self.iterations = 0

    def __call__(self, intermediate_result):
        self.iterations += 1
        f = float(intermediate_result.fun)
        if self.prev is not None and abs(self.prev - f) <= self.ftol_rel * max(abs(f), 1e-300):
            self.hit = True
            raise StopIteration
        self.prev = f


def _optimize(engine: LikelihoodEngine, x0: np.ndarray, options: FitOptions, scale: float):
    obj = _Objective(engine, options, scale)
    f0, _ = obj(x0)
    if not np.isfinite(f0):
        raise FitError("log-likelihood is not finite at the start value")
    stop = _StopRule(options.ftol_rel)
    res = minimize(
        obj, x0, jac=True, method="BFGS", callback=stop,
        options={"gtol": options.gtol / scale, "norm": np.inf, "maxiter": options.max_iter},
    )
    x = np.asarray(res.x, dtype=float)
    ll, g = obj.loglik_grad(x)
    gnorm = float(np.max(np.abs(g)))
    converged = bool(gnorm <= options.gtol or stop.hit or res.status == 0)
    if res.status == 2 and not stop.hit:
        # line search could not improve: accept only at a numerically flat point
        converged = gnorm <= max(options.gtol, 1e-3)
    if stop.iterations >= options.max_iter and not (stop.hit or gnorm <= options.gtol):
        converged = False
    if stop.hit:
        message = "relative objective change below tolerance"
    else:
        message = str(res.message)
    return x, ll, gnorm, converged, max(int(res.nit), stop.iterations), message


def hessian_unconstrained(engine: LikelihoodEngine, x: np.ndarray, rel_step: float = 1e-4,
                          gradient: str = "analytic", fd_step: float = 1e-5) -> np.ndarray:
    """Central-difference Hessian of the log-likelihood, built from gradients and symmetrized."""
    variant = engine.spec.variant

    def grad(v):
        if gradient == "fd":
            return engine.fd_gradient(v, fd_step)
        return engine.loglik_grad(from_unconstrained(v, variant))[1]

    k = x.size
    H = np.empty((k, k))
    for j in range(k):
        h = rel_step * max(1.0, abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        H[:, j] = (grad(xp) - grad(xm)) / (xp[j] - xm[j])
    return 0.5 * (H + H.T)


def confidence_intervals(theta: ParameterSet, hessian_u: np.ndarray, level_z: float = Z95):
    """Delta-method Wald intervals from the Hessian of the log-likelihood on the unconstrained scale.

    Returns:
        ``(se, ci, pd, condition, message)``; ``se``/``ci`` are ``None`` when the
        negative Hessian is not positive definite.
    """
    info = -np.asarray(hessian_u, dtype=float)
    names = param_names(theta.variant)
    if not np.all(np.isfinite(info)):
        return None, None, False, None, "Hessian has non-finite entries"
    eig = np.linalg.eigvalsh(info)
    cond = float(eig[-1] / eig[0]) if eig[0] > 0 else float("inf")
    if eig[0] <= 0:
        return None, None, False, cond, f"observed information not positive definite (smallest eigenvalue {eig[0]:.3e})"
    cov_u = np.linalg.inv(info)
    jac = transform_jacobian(theta)
    cov = cov_u * np.outer(jac, jac)
    se_vec = np.sqrt(np.diag(cov))
    est = theta.to_vector()
    se = {n: float(s) for n, s in zip(names, se_vec)}
    ci = {n: (float(e - level_z * s), float(e + level_z * s)) for n, e, s in zip(names, est, se_vec)}
    return se, ci, True, cond, ""


def fit(corpus: Sequence[TeamMatchSeries], spec: ModelSpec, init: Optional[ParameterSet] = None,
        options: Optional[FitOptions] = None, engine: Optional[LikelihoodEngine] = None) -> FitResult:
    """Maximize the approximate likelihood by BFGS over the unconstrained parameters.

    Args:
        corpus: team series (all with covariates built under ``spec``).
        spec: model specification; its grid is used for every series.
        init: start value; defaults to :func:`default_init`.
        options: optimizer settings.
        engine: prebuilt likelihood engine for ``corpus`` (reuses its batches).

    Returns:
        FitResult; ``converged`` is False when no stopping rule was met.
    """
    if not corpus:
        raise FitError("empty corpus")
    options = options or FitOptions()
    engine = engine or LikelihoodEngine(corpus, spec, build_grid(spec), threads=options.threads)
    theta0 = init.copy() if init is not None else default_init(corpus, spec)
    theta0.check(spec)
    n_minutes = int(engine.batch.valid.sum())
    scale = float(max(n_minutes, 1))

    starts = [to_unconstrained(theta0)]
    if options.multistart:
        rng = np.random.default_rng(options.seed)
        for _ in range(options.n_starts - 1):
            starts.append(starts[0] + options.jitter * rng.standard_normal(starts[0].size))

    best = None
    for k, x0 in enumerate(starts):
        try:
            out = _optimize(engine, x0, options, scale)
        except FitError:
            if k == 0 and len(starts) == 1:
                raise
            log.warning("start %d skipped: non-finite likelihood", k)
            continue
        log.info("start %d: loglik %.6f converged=%s iterations=%d", k, out[1], out[3], out[4])
        if best is None or (out[3], out[1]) > (best[3], best[1]):
            best = out
    if best is None:
        raise FitError("no start value gave a finite likelihood")
    x, ll, gnorm, converged, nit, message = best
    theta = from_unconstrained(x, spec.variant)

    result = FitResult(
        theta=theta, loglik=float(ll), k=spec.n_params, spec=spec, converged=converged,
        iterations=nit, grad_norm=gnorm, message=message, n_evals=engine.n_evals,
        corpus_digest=corpus_digest(corpus), n_series=len(corpus), n_minutes=n_minutes,
        options=asdict(options),
    )
    gamma = transition_matrix(engine.grid, None, theta, spec)
    lost = truncation_mass(gamma)
    result.truncation_max_row = float(lost.max())
    if lost.min() < -spec.truncation_warn:
        warnings.warn(f"transition rows exceed one by up to {-lost.min():.3e}; sigma_s = {theta.sigma_s:.3g} "
                      f"is below the grid resolution and the likelihood approximation is unreliable",
                      RuntimeWarning, stacklevel=2)
    result.truncation_stationary = check_truncation(gamma, spec, initial_distribution(engine.grid, theta))
    if options.compute_ci:
        if not converged:
            result.ci_message = "fit did not converge; intervals not computed"
        else:
            H = hessian_unconstrained(engine, x, options.hessian_step, options.gradient, options.fd_step)
            result.hessian_u = H
            se, ci, pd, cond, msg = confidence_intervals(theta, H)
            result.se, result.ci, result.hessian_pd, result.hessian_condition, result.ci_message = se, ci, pd, cond, msg
            if msg:
                log.warning("confidence intervals absent: %s", msg)
    result.n_evals = engine.n_evals
    return result


def aic(result) -> float:
    """Akaike information criterion ``2k - 2 loglik``."""
    return 2.0 * result.k - 2.0 * result.loglik


def compare_aic(a, b) -> Tuple[float, str]:
    """``(AIC(b) - AIC(a), winner)`` where winner is ``"a"``, ``"b"`` or ``"tie"``.

    Raises:
        ValueError: the fits were made on different corpora or density conventions.
    """
    if a.corpus_digest != b.corpus_digest:
        raise ValueError("AIC comparison needs fits on the identical corpus")
    if a.density != b.density:
        raise ValueError(f"density conventions differ: {a.density} vs {b.density}")
    delta = aic(b) - aic(a)
    winner = "a" if delta > 0 else "b" if delta < 0 else "tie"
    return delta, winner


def _logistic_fit(Z: np.ndarray, is_zero: np.ndarray) -> Tuple[np.ndarray, float]:
    is_zero = np.asarray(is_zero, dtype=bool)

    def nll(a):
        eta = Z @ a
        val = np.sum(np.logaddexp(0.0, eta)) - np.sum(eta[is_zero])
        grad = Z.T @ (expit(eta) - is_zero)
        return val, grad

    p0 = min(max(is_zero.mean(), 1e-6), 1 - 1e-6)
    a0 = np.zeros(Z.shape[1])
    a0[0] = math.log(p0) - math.log1p(-p0)
    res = minimize(nll, a0, jac=True, method="BFGS", options={"gtol": 1e-8, "maxiter": 1000})
    return res.x, -float(res.fun)


def fit_static(corpus: Sequence[TeamMatchSeries], spec: ModelSpec) -> StaticFit:
    """Closed-form MLE of the hurdle model with the latent state removed.

    The positive part is a Gaussian linear regression of log stakes on the
    mean-predictor design; the zero part is a constant share (baseline) or a
    logistic regression on the zero-probability design.  Parameter count
    excludes ``phi``, ``sigma_s`` and ``omega``.
    """
    if not corpus:
        raise FitError("empty corpus")
    batch = SeriesBatch.from_series(corpus, spec)
    open_ = batch.open
    pos = batch.pos & open_
    X = batch.X1[pos]
    ly = batch.logy[pos]
    if ly.size <= X.shape[1]:
        raise FitError("too few positive stakes for the static fit")
    beta, *_ = np.linalg.lstsq(X, ly, rcond=None)
    resid = ly - X @ beta
    sigma = float(np.sqrt(np.mean(resid**2)))
    ll_pos = float(np.sum(-0.5 * (resid / sigma) ** 2 - math.log(sigma) - _LOG_SQRT_2PI))

    is_zero = (~batch.pos)[open_].astype(float)
    params = {f"beta{k}": float(v) for k, v in enumerate(beta)}
    params["sigma"] = sigma
    if spec.variant == BASELINE:
        n0, n = float(is_zero.sum()), float(is_zero.size)
        pi = n0 / n
        ll_zero = (n0 * math.log(pi) if n0 else 0.0) + ((n - n0) * math.log1p(-pi) if n > n0 else 0.0)
        params["pi"] = pi
        k = len(beta) + 2
    else:
        alpha, ll_zero = _logistic_fit(batch.Z[open_], is_zero)
        params.update({f"alpha{j}": float(v) for j, v in enumerate(alpha)})
        k = len(beta) + 1 + len(alpha)
    return StaticFit(spec.variant, params, ll_pos + ll_zero, k, corpus_digest(corpus), len(corpus))


def format_report(result: FitResult) -> str:
    """Human-readable parameter table with loglik, AIC and a convergence block."""
    lines = [f"model: {result.variant}", "", f"{'parameter':<12}{'estimate':>10}   95% CI"]
    for name, est, se, lo, hi in result.param_table():
        ci = f"[{lo:.3f}; {hi:.3f}]" if lo is not None else "(absent)"
        lines.append(f"{name:<12}{est:>10.3f}   {ci}")
    lines += [
        "",
        f"log-likelihood: {result.loglik:.4f}",
        f"AIC: {result.aic:.4f}  (k = {result.k})",
        f"series: {result.n_series}  scored minutes: {result.n_minutes}",
        f"grid: m = {result.spec.grid_m}, bound = {result.spec.grid_bound}",
        "",
        "convergence:",
        f"  converged: {result.converged}",
        f"  iterations: {result.iterations}",
        f"  likelihood evaluations: {result.n_evals}",
        f"  gradient max-norm: {result.grad_norm:.3e}",
        f"  message: {result.message}",
        f"  Hessian positive definite: {result.hessian_pd}",
        f"  Hessian condition number: {'n/a' if result.hessian_condition is None else f'{result.hessian_condition:.3e}'}",
    ]
    if result.ci_message:
        lines.append(f"  intervals: {result.ci_message}")
    if result.truncation_max_row is not None:
        lines.append(f"  truncation mass (worst row / stationary-weighted): "
                     f"{result.truncation_max_row:.3e} / {result.truncation_stationary:.3e}")
    return "\n".join(lines) + "\n"


def write_report_csv(result: FitResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "estimate", "se", "ci_lower", "ci_upper"])
        for name, est, se, lo, hi in result.param_table():
            w.writerow([name, repr(float(est)), "" if se is None else repr(se),
                        "" if lo is None else repr(lo), "" if hi is None else repr(hi)])


__all__ = [
    "FitError",
    "FitOptions",
    "FitResult",
    "StaticFit",
    "aic",
    "compare_aic",
    "confidence_intervals",
    "corpus_digest",
    "default_init",
    "fit",
    "fit_static",
    "format_report",
    "hessian_unconstrained",
    "write_report_csv",
]
