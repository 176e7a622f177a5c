"""Synthetic match corpora drawn from the generative model.

Match events are plumbing: goals and red cards arrive as per-minute Bernoulli
draws, in-play implied probabilities follow a Poisson-remaining-goals rule on
score and time, and xG accumulates small per-minute increments plus a jump at
each goal.  The latent activity level and the stakes are drawn exactly from the
hurdle state-space model for the chosen variant.  Each match draws from its own
random stream derived from ``(seed, match index)``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.stats import skellam

from .data import MatchRecord, TeamMatchSeries, build_team_series
from .emission import mean_predictor, zero_prob
from .grid import state_shift
from .params import REFERENCE, ModelSpec, ParameterSet, SpecError, canonical_variant

log = logging.getLogger(__name__)

_POOL_KEY = 0
_ANOMALY_KEY = 1
_MATCH_KEY = 2


class ConfigError(ValueError):
    """Invalid simulation configuration."""


@dataclass
class AnomalyConfig:
    count: int = 0
    factor: float = 8.0
    duration: int = 3
    pre_goal: bool = False


@dataclass
class SimConfig:
    """Simulation settings.  Defaults reproduce the calibration targets for the baseline variant."""

    n_matches: int = 1000
    seed: int = 0
    variant: str = "baseline"
    params: Optional[Dict[str, float]] = None
    n_teams: int = 20
    first_half: int = 45
    halftime_minutes: int = 15
    second_half: int = 45
    goals_per_match: float = 2.32
    strength_sd: float = 0.45
    home_advantage: float = 0.3
    red_cards_per_match: float = 0.21
    max_red_cards: int = 2
    closure_minutes: int = 2
    decided_threshold: float = 0.985
    suspension_rate: float = 0.025
    overround: float = 1.03
    odds_time_power: float = 0.15
    sentiment_mean: float = 1.42
    sentiment_sd: float = 0.9
    xg_shot_prob: float = 0.04
    xg_goal_jump: float = 0.5
    draw_stake_scale: float = 0.25
    anomalies: AnomalyConfig = field(default_factory=AnomalyConfig)

    def __post_init__(self):
        if isinstance(self.anomalies, dict):
            unknown = set(self.anomalies) - {f.name for f in fields(AnomalyConfig)}
            if unknown:
                raise ConfigError(f"unknown anomaly config keys: {sorted(unknown)}")
            self.anomalies = AnomalyConfig(**self.anomalies)
        try:
            self.variant = canonical_variant(self.variant)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        rates = ("goals_per_match", "strength_sd", "red_cards_per_match", "suspension_rate", "xg_goal_jump", "sentiment_sd")
        for name in rates:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.n_matches < 1 or self.n_teams < 2:
            raise ConfigError("need at least one match and two teams")
        if not 0 < self.xg_shot_prob <= 1:
            raise ConfigError("xg_shot_prob must lie in (0, 1]")
        if self.anomalies.count > self.n_matches:
            raise ConfigError("more anomalies than matches")
        try:
            self.theta.check(ModelSpec(variant=self.variant))
        except SpecError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def theta(self) -> ParameterSet:
        if self.params is None:
            return REFERENCE[self.variant].copy()
        try:
            return ParameterSet.from_dict(self.params, self.variant)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def minutes(self) -> int:
        return self.first_half + self.halftime_minutes + self.second_half

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown simulation config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["params"] = self.theta.to_dict()
        return out


@dataclass
class TeamPool:
    teams: List[str]
    strength: np.ndarray
    sentiment: np.ndarray

    def sentiment_map(self) -> Dict[str, float]:
        return {t: float(v) for t, v in zip(self.teams, self.sentiment)}


@dataclass
class AnomalyInjection:
    match_id: str
    team: str
    start_minute: int
    duration: int
    factor: float
    pre_goal: bool = False

    def __post_init__(self):
        if not self.factor > 1:
            raise ValueError(f"inflation factor must exceed 1, got {self.factor}")
        if self.duration < 1:
            raise ValueError("window duration must be at least one minute")


@dataclass
class SimulatedMatch:
    record: MatchRecord
    latent: Dict[str, np.ndarray]
    log_mean: Dict[str, np.ndarray]
    mask: Dict[str, np.ndarray]
    injection: Optional[AnomalyInjection] = None


@dataclass
class SimulationResult:
    config: SimConfig
    pool: TeamPool
    spec: ModelSpec
    matches: List[SimulatedMatch]

    @property
    def records(self) -> List[MatchRecord]:
        return [m.record for m in self.matches]

    @property
    def injections(self) -> List[AnomalyInjection]:
        return [m.injection for m in self.matches if m.injection is not None]


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def team_pool(config: SimConfig) -> TeamPool:
    rng = _rng(config.seed, _POOL_KEY)
    teams = [f"T{k + 1:02d}" for k in range(config.n_teams)]
    strength = rng.normal(0.0, config.strength_sd, config.n_teams)
    m, sd = config.sentiment_mean, config.sentiment_sd
    s2 = np.log1p((sd / m) ** 2)
    sentiment = rng.lognormal(np.log(m) - 0.5 * s2, np.sqrt(s2), config.n_teams)
    return TeamPool(teams, strength, sentiment)


def simulation_spec(config: SimConfig, pool: TeamPool) -> ModelSpec:
    """Spec whose constants drive the generator (minute scale of 1..T, sentiment as stake level)."""
    T = config.minutes
    return ModelSpec(
        variant=config.variant,
        minute_mean=(T + 1) / 2.0,
        minute_sd=float(np.sqrt((T * T - 1) / 12.0)),
        team_stake_avg=pool.sentiment_map(),
    )


def outcome_probabilities(score_diff: np.ndarray, mu_home: np.ndarray, mu_away: np.ndarray) -> np.ndarray:
    """True (home, away, draw) probabilities given the current home-minus-away score
    and expected remaining goals per side."""
    mu_home = np.maximum(mu_home, 1e-12)
    mu_away = np.maximum(mu_away, 1e-12)
    k = -np.asarray(score_diff)
    below = skellam.cdf(k - 1, mu_home, mu_away)
    at = skellam.pmf(k, mu_home, mu_away)
    home = np.clip(1.0 - below - at, 0.0, 1.0)
    return np.stack([home, below, at], axis=-1)


def _implied(true_probs: np.ndarray, overround: float) -> np.ndarray:
    return np.clip(true_probs * overround, 1e-3, 0.99)


def _simulate_events(config: SimConfig, pool: TeamPool, index: int, rng: np.random.Generator) -> MatchRecord:
    n_teams = len(pool.teams)
    h, a = rng.choice(n_teams, size=2, replace=False)
    T = config.minutes
    minute = np.arange(1, T + 1)
    ht_start = config.first_half + 1
    ht_end = config.first_half + config.halftime_minutes
    halftime = (minute >= ht_start) & (minute <= ht_end)
    play = ~halftime
    play_minute = np.cumsum(play)  # elapsed play minutes at end of each minute
    regulation = config.first_half + config.second_half

    edge = pool.strength[h] - pool.strength[a] + config.home_advantage
    share = 1.0 / (1.0 + np.exp(-edge))
    lam = np.array([config.goals_per_match * share, config.goals_per_match * (1 - share)])
    p_goal = lam / regulation
    p_card = config.red_cards_per_match / (2.0 * regulation)

    goals = np.zeros((T, 2), dtype=np.int64)
    cards = np.zeros((T, 2), dtype=np.int64)
    xg = np.zeros((T, 2))
    shot_scale = np.maximum(p_goal * (1 - config.xg_goal_jump), 0.0) / config.xg_shot_prob
    n_cards = 0
    g_now = np.zeros(2, dtype=np.int64)
    c_now = np.zeros(2, dtype=np.int64)
    x_now = np.zeros(2)
    event = np.zeros(T, dtype=bool)
    for t in range(T):
        if play[t]:
            scored = rng.random(2) < p_goal
            carded = rng.random(2) < p_card
            shots = rng.random(2) < config.xg_shot_prob
            x_now = x_now + shots * rng.exponential(1.0, 2) * shot_scale + scored * config.xg_goal_jump
            g_now = g_now + scored
            for side in (0, 1):
                if carded[side] and n_cards < config.max_red_cards:
                    c_now[side] += 1
                    n_cards += 1
                    event[t] = True
            event[t] |= bool(scored.any())
        goals[t], cards[t], xg[t] = g_now, c_now, x_now

    remaining = ((regulation - play_minute) / regulation) ** config.odds_time_power
    diff = goals[:, 0] - goals[:, 1]
    true_now = outcome_probabilities(diff, lam[0] * remaining, lam[1] * remaining)
    implied = _implied(true_now, config.overround)
    pre = _implied(outcome_probabilities(np.array([0]), lam[:1], lam[1:]), config.overround)[0]

    closed = np.zeros(T, dtype=bool)
    for t in np.flatnonzero(event):
        closed[t : t + config.closure_minutes] = True
    decided = (true_now.max(axis=1) >= config.decided_threshold) & (minute > ht_end)
    closed |= decided
    closed |= rng.random(T) < config.suspension_rate

    zeros = np.zeros(T)
    return MatchRecord(
        match_id=f"M{index + 1:05d}", home_team=pool.teams[h], away_team=pool.teams[a],
        minute=minute, open=~closed, stake_home=zeros, stake_away=zeros, stake_draw=zeros,
        improb_home=implied[:, 0], improb_away=implied[:, 1], improb_draw=implied[:, 2],
        improb_home_start=pre[0], improb_away_start=pre[1],
        xg_home=xg[:, 0], xg_away=xg[:, 1], goals_home=goals[:, 0], goals_away=goals[:, 1],
        redcards_home=cards[:, 0], redcards_away=cards[:, 1], halftime=halftime,
    )


def simulate_latent(shifts: np.ndarray, theta: ParameterSet, rng: np.random.Generator) -> np.ndarray:
    """ARX(1) path: ``s_1`` from the stationary law, then ``s_t = phi s_{t-1} + d_t + sigma_s eps_t``."""
    T = len(shifts)
    eps = rng.standard_normal(T)
    s = np.empty(T)
    s[0] = eps[0] * theta.sigma_s / np.sqrt(1.0 - theta.phi**2)
    for t in range(1, T):
        s[t] = theta.phi * s[t - 1] + shifts[t] + theta.sigma_s * eps[t]
    return s


def draw_stakes(series: TeamMatchSeries, latent: np.ndarray, theta: ParameterSet, spec: ModelSpec,
                rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Hurdle draws for one series; returns ``(stakes, log_mean)``."""
    pi = zero_prob(series.z, theta, series.open, spec)
    log_mean = mean_predictor(series.x1, theta, spec) + latent
    u = rng.random(series.T)
    eps = rng.standard_normal(series.T)
    y = np.where(u < pi, 0.0, np.exp(log_mean + theta.sigma * eps))
    return y, log_mean


def simulate_match(config: SimConfig, index: int, pool: Optional[TeamPool] = None,
                   spec: Optional[ModelSpec] = None) -> SimulatedMatch:
    """Simulate match ``index`` (0-based) with its own seeded stream."""
    pool = pool if pool is not None else team_pool(config)
    spec = spec if spec is not None else simulation_spec(config, pool)
    theta = config.theta
    rng = _rng(config.seed, _MATCH_KEY, index)
    rec = _simulate_events(config, pool, index, rng)
    home, away = build_team_series(rec, spec)
    latent, log_mean, stakes = {}, {}, {}
    for side, ser in (("home", home), ("away", away)):
        shifts = np.asarray(state_shift(ser.x2, theta, spec), dtype=float)
        latent[side] = simulate_latent(shifts, theta, rng)
        stakes[side], log_mean[side] = draw_stakes(ser, latent[side], theta, spec, rng)
    draw = np.where(rec.open, config.draw_stake_scale * np.exp(rng.normal(0.0, 1.0, len(rec))), 0.0)
    rec.stake_home, rec.stake_away, rec.stake_draw = stakes["home"], stakes["away"], draw
    rec.validate()
    mask = {side: np.zeros(len(rec), dtype=bool) for side in ("home", "away")}
    return SimulatedMatch(rec, latent, log_mean, mask)


def _open_windows(open_: np.ndarray, duration: int) -> np.ndarray:
    """0-based start positions of fully open windows."""
    if len(open_) < duration:
        return np.zeros(0, dtype=np.int64)
    run = np.convolve(open_.astype(int), np.ones(duration, dtype=int), mode="valid")
    return np.flatnonzero(run == duration)


def inject_anomaly(record: MatchRecord, inj: AnomalyInjection, rng: np.random.Generator,
                   log_mean: Optional[np.ndarray] = None, sigma: Optional[float] = None):
    """Inflate stakes on one team over a window of open minutes.

    Positive stakes in the window are multiplied by ``inj.factor``; zero stakes
    are first replaced by draws from the positive branch (``log_mean``/``sigma``
    when given, else the series' own log-stake moments) and then scaled.

    Returns:
        ``(new_record, mask)`` where ``mask`` marks the modified minutes.
    """
    if inj.team in ("home", record.home_team):
        side = "home"
    elif inj.team in ("away", record.away_team):
        side = "away"
    else:
        raise ValueError(f"team {inj.team!r} does not play in match {record.match_id}")
    n = record.retained_length
    open_ = record.open[:n]
    start = inj.start_minute - 1
    if inj.pre_goal:
        goals = [m for m, s in record.goal_events() if s == side and m <= n]
        if not goals:
            raise ValueError(f"match {record.match_id}: no goal by {side} team to place a pre-goal window before")
        start = goals[0] - 1 - inj.duration
    starts = _open_windows(open_, inj.duration)
    if starts.size == 0:
        raise ValueError(f"match {record.match_id}: no open window of {inj.duration} minutes")
    chosen = int(starts[np.argmin(np.abs(starts - start))])
    if chosen != start:
        log.info("match %s: anomaly window moved from minute %d to %d (closed market)",
                 record.match_id, start + 1, chosen + 1)

    stakes = getattr(record, f"stake_{side}").copy()
    window = np.arange(chosen, chosen + inj.duration)
    if log_mean is None or sigma is None:
        pos = stakes[:n] > 0
        lp = np.log(stakes[:n][pos]) if pos.any() else np.zeros(1)
        mu = np.full(len(stakes), lp.mean())
        sd = float(lp.std()) if lp.size > 1 else 1.0
    else:
        mu, sd = np.asarray(log_mean, dtype=float), float(sigma)
    for t in window:
        if stakes[t] == 0:
            stakes[t] = np.exp(mu[t] + sd * rng.standard_normal())
        stakes[t] *= inj.factor
    mask = np.zeros(len(stakes), dtype=bool)
    mask[window] = True
    new = MatchRecord(**{f.name: getattr(record, f.name) for f in fields(MatchRecord)})
    setattr(new, f"stake_{side}", stakes)
    new.validate()
    return new, mask


def simulate_corpus(config: SimConfig) -> SimulationResult:
    pool = team_pool(config)
    spec = simulation_spec(config, pool)
    theta = config.theta
    matches = [simulate_match(config, k, pool, spec) for k in range(config.n_matches)]
    an = config.anomalies
    if an.count:
        rng = _rng(config.seed, _ANOMALY_KEY)
        chosen = np.sort(rng.choice(config.n_matches, size=an.count, replace=False))
        for k in chosen:
            sm = matches[k]
            side = "home" if rng.random() < 0.5 else "away"
            start = int(rng.integers(1, config.minutes - an.duration + 2))
            inj = AnomalyInjection(sm.record.match_id, side, start, an.duration, an.factor, an.pre_goal)
            inj_rng = _rng(config.seed, _ANOMALY_KEY, int(k))
            rec, mask = inject_anomaly(sm.record, inj, inj_rng, sm.log_mean[side], theta.sigma)
            inj.team = getattr(rec, f"{side}_team")
            inj.start_minute = int(np.flatnonzero(mask)[0]) + 1
            sm.record, sm.mask[side], sm.injection = rec, mask, inj
    return SimulationResult(config, pool, spec, matches)
