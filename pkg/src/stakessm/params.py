"""Model specification, parameter containers and the unconstrained reparameterization."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

BASELINE = "baseline"
STATE_DEP = "state-dep"
FULL = "full"
VARIANTS = (BASELINE, STATE_DEP, FULL)

_VARIANT_ALIASES = {
    "baseline": BASELINE,
    "state-dep": STATE_DEP,
    "state-dependent": STATE_DEP,
    "state-dependent-covariates": STATE_DEP,
    "full": FULL,
}

# Covariate names, in design-matrix column order (intercepts are added by the batch builder).
X1_NAMES = (
    "stake_avg_team",
    "improbteam_start",
    "redcard_team",
    "redcard_opponent",
    "scorediff_team",
    "minute",
    "minute_sq",
    "halftime",
)
X2_NAMES = ("surprising", "slightly_surprising", "unsurprising", "xg_diff", "halftime")
Z_NAMES = ("gini", "gini_sq", "minute", "minute_gini", "minute_gini_sq")


class SpecError(ValueError):
    """Invalid model specification or parameter layout."""


def canonical_variant(name: str) -> str:
    try:
        return _VARIANT_ALIASES[name]
    except KeyError:
        raise SpecError(f"unknown model variant {name!r}; expected one of {VARIANTS}") from None


@dataclass
class ModelSpec:
    """Which covariates are active plus every constant frozen at fit time.

    ``minute_mean``/``minute_sd`` and ``team_stake_avg`` are corpus-level
    constants; they are computed once from the fitting corpus and reused
    verbatim when scoring new data.
    """

    variant: str = BASELINE
    grid_m: int = 100
    grid_bound: float = 5.0
    truncation_warn: float = 1e-3
    minute_mean: Optional[float] = None
    minute_sd: Optional[float] = None
    team_stake_avg: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)

    @property
    def n_beta(self) -> int:
        return 1 if self.variant == BASELINE else 1 + len(X1_NAMES)

    @property
    def n_omega(self) -> int:
        return len(X2_NAMES) if self.variant == FULL else 0

    @property
    def n_alpha(self) -> int:
        return 0 if self.variant == BASELINE else 1 + len(Z_NAMES)

    @property
    def has_state_covariates(self) -> bool:
        return self.variant == FULL

    def param_names(self) -> List[str]:
        return param_names(self.variant)

    @property
    def n_params(self) -> int:
        return len(self.param_names())

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "grid_m": self.grid_m,
            "grid_bound": self.grid_bound,
            "truncation_warn": self.truncation_warn,
            "minute_mean": self.minute_mean,
            "minute_sd": self.minute_sd,
            "team_stake_avg": dict(sorted(self.team_stake_avg.items())),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            variant=d["variant"],
            grid_m=int(d["grid_m"]),
            grid_bound=float(d["grid_bound"]),
            truncation_warn=float(d.get("truncation_warn", 1e-3)),
            minute_mean=d.get("minute_mean"),
            minute_sd=d.get("minute_sd"),
            team_stake_avg={str(k): float(v) for k, v in d.get("team_stake_avg", {}).items()},
        )

    def with_variant(self, variant: str) -> "ModelSpec":
        return replace(self, variant=canonical_variant(variant), team_stake_avg=dict(self.team_stake_avg))


def param_names(variant: str) -> List[str]:
    """Parameter names in reporting order (the layout of the published tables)."""
    variant = canonical_variant(variant)
    if variant == BASELINE:
        return ["phi", "sigma_s", "beta0", "sigma", "pi"]
    betas = [f"beta{k}" for k in range(1 + len(X1_NAMES))]
    alphas = [f"alpha{k}" for k in range(1 + len(Z_NAMES))]
    if variant == STATE_DEP:
        return ["phi", "sigma_s", *betas, "sigma", *alphas]
    omegas = [f"omega{k}" for k in range(1, 1 + len(X2_NAMES))]
    return ["phi", "sigma_s", *betas, *omegas, *alphas, "sigma"]


@dataclass
class ParameterSet:
    """All free parameters of one model variant.

    Attributes:
        phi: persistence of the latent AR(1)/ARX(1) process, ``|phi| < 1``.
        sigma_s: innovation sd of the latent process.
        sigma: sd of log positive stakes around ``nu_t + s_t``.
        beta: mean-predictor coefficients, intercept first.
        omega: state-process covariate coefficients (full variant only).
        alpha: zero-probability logit coefficients, intercept first.
        pi: constant zero-stake probability (baseline variant only).
    """

    phi: float
    sigma_s: float
    sigma: float
    beta: np.ndarray
    omega: np.ndarray = field(default_factory=lambda: np.zeros(0))
    alpha: np.ndarray = field(default_factory=lambda: np.zeros(0))
    pi: Optional[float] = None

    def __post_init__(self):
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        self.omega = np.atleast_1d(np.asarray(self.omega, dtype=float))
        self.alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))

    @property
    def variant(self) -> str:
        if self.pi is not None:
            return BASELINE
        return FULL if self.omega.size else STATE_DEP

    def check(self, spec: ModelSpec) -> None:
        if not abs(self.phi) < 1:
            raise SpecError(f"phi must satisfy |phi| < 1, got {self.phi}")
        if not (self.sigma_s > 0 and self.sigma > 0):
            raise SpecError("sigma and sigma_s must be positive")
        if self.beta.size != spec.n_beta or self.omega.size != spec.n_omega or self.alpha.size != spec.n_alpha:
            raise SpecError(
                f"parameter arity (beta={self.beta.size}, omega={self.omega.size}, alpha={self.alpha.size}) "
                f"does not match variant {spec.variant!r}"
            )
        if spec.variant == BASELINE:
            if self.pi is None or not 0 < self.pi < 1:
                raise SpecError("baseline variant requires pi in (0, 1)")
        elif self.pi is not None:
            raise SpecError(f"variant {spec.variant!r} has no constant pi")

    def to_dict(self) -> Dict[str, float]:
        """Map of table-order names to values."""
        return dict(zip(param_names(self.variant), self.to_vector()))

    @classmethod
    def from_dict(cls, values: Dict[str, float], variant: Optional[str] = None) -> "ParameterSet":
        if variant is None:
            variant = BASELINE if "pi" in values else (FULL if "omega1" in values else STATE_DEP)
        names = param_names(variant)
        missing = [n for n in names if n not in values]
        extra = [n for n in values if n not in names]
        if missing or extra:
            raise SpecError(f"parameter names for {variant!r}: missing {missing}, unexpected {extra}")
        return cls.from_vector([float(values[n]) for n in names], variant)

    def to_vector(self) -> np.ndarray:
        v = self.variant
        if v == BASELINE:
            return np.array([self.phi, self.sigma_s, self.beta[0], self.sigma, self.pi])
        head = [self.phi, self.sigma_s, *self.beta]
        if v == STATE_DEP:
            return np.array([*head, self.sigma, *self.alpha])
        return np.array([*head, *self.omega, *self.alpha, self.sigma])

    @classmethod
    def from_vector(cls, vec, variant: str) -> "ParameterSet":
        variant = canonical_variant(variant)
        vec = np.asarray(vec, dtype=float)
        if vec.size != len(param_names(variant)):
            raise SpecError(f"expected {len(param_names(variant))} values for {variant!r}, got {vec.size}")
        if variant == BASELINE:
            return cls(phi=vec[0], sigma_s=vec[1], beta=vec[2:3], sigma=vec[3], pi=vec[4])
        nb, na = 1 + len(X1_NAMES), 1 + len(Z_NAMES)
        beta = vec[2 : 2 + nb]
        if variant == STATE_DEP:
            return cls(phi=vec[0], sigma_s=vec[1], beta=beta, sigma=vec[2 + nb], alpha=vec[3 + nb : 3 + nb + na])
        no = len(X2_NAMES)
        omega = vec[2 + nb : 2 + nb + no]
        alpha = vec[2 + nb + no : 2 + nb + no + na]
        return cls(phi=vec[0], sigma_s=vec[1], beta=beta, omega=omega, alpha=alpha, sigma=vec[-1])

    def copy(self) -> "ParameterSet":
        return ParameterSet.from_vector(self.to_vector(), self.variant)


# Unconstrained reparameterization: phi = tanh(u), sigma = exp(v), sigma_s = exp(w),
# pi = logistic(r); regression coefficients are left as they are.

def _transform_kinds(variant: str) -> List[str]:
    kinds = []
    for name in param_names(variant):
        if name == "phi":
            kinds.append("tanh")
        elif name in ("sigma", "sigma_s"):
            kinds.append("exp")
        elif name == "pi":
            kinds.append("logistic")
        else:
            kinds.append("identity")
    return kinds


def to_unconstrained(theta: ParameterSet) -> np.ndarray:
    vec = theta.to_vector()
    out = vec.copy()
    for k, kind in enumerate(_transform_kinds(theta.variant)):
        if kind == "tanh":
            out[k] = np.arctanh(vec[k])
        elif kind == "exp":
            out[k] = np.log(vec[k])
        elif kind == "logistic":
            out[k] = np.log(vec[k]) - np.log1p(-vec[k])
    return out


def from_unconstrained(x, variant: str) -> ParameterSet:
    x = np.asarray(x, dtype=float)
    vec = x.copy()
    for k, kind in enumerate(_transform_kinds(variant)):
        if kind == "tanh":
            vec[k] = np.tanh(x[k])
        elif kind == "exp":
            vec[k] = np.exp(x[k])
        elif kind == "logistic":
            vec[k] = 1.0 / (1.0 + np.exp(-x[k]))
    return ParameterSet.from_vector(vec, variant)


def transform_jacobian(theta: ParameterSet) -> np.ndarray:
    """d(natural parameter)/d(unconstrained parameter), elementwise."""
    vec = theta.to_vector()
    jac = np.ones_like(vec)
    for k, kind in enumerate(_transform_kinds(theta.variant)):
        if kind == "tanh":
            jac[k] = 1.0 - vec[k] ** 2
        elif kind == "exp":
            jac[k] = vec[k]
        elif kind == "logistic":
            jac[k] = vec[k] * (1.0 - vec[k])
    return jac


# Estimates reported for three seasons of Serie B live-betting data.
REFERENCE_BASELINE = ParameterSet(phi=0.986, sigma_s=0.215, beta=[-0.783], sigma=0.924, pi=0.094)

REFERENCE_STATE_DEP = ParameterSet(
    phi=0.983,
    sigma_s=0.205,
    beta=[-2.304, 0.256, 2.510, -0.422, 1.088, 0.395, 0.037, 0.021, 0.213],
    sigma=0.924,
    alpha=[-4.819, 3.762, 0.964, -0.980, 1.765, -0.501],
)

REFERENCE_FULL = ParameterSet(
    phi=0.983,
    sigma_s=0.196,
    beta=[-2.635, 0.235, 3.493, -0.414, 1.075, 0.420, 0.040, 0.025, 0.210],
    omega=[0.285, -0.027, -0.379, 0.001, 0.005],
    alpha=[-4.818, 3.761, 0.964, -0.980, 1.765, -0.501],
    sigma=0.926,
)

REFERENCE = {BASELINE: REFERENCE_BASELINE, STATE_DEP: REFERENCE_STATE_DEP, FULL: REFERENCE_FULL}
