"""One-step-ahead PIT pseudo-residuals and match-level anomaly ranking.

For minute ``t`` the predictive weights ``w_t`` are the filtered state
distribution at ``t - 1`` pushed through ``Gamma_t`` (``w_1 = delta``).  The
predictive CDF of the stake is
``F(y) = pi_t + (1 - pi_t) * sum_i w_ti Phi((log y - nu_t - b_i) / sigma)``
for ``y > 0`` and ``F(0) = pi_t``.  Zero stakes get a randomized PIT drawn
uniformly on ``[0, F(0)]``.  Only the upper tail is ever flagged.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import ndtr, ndtri

from .data import TeamMatchSeries
from .grid import StateGrid, build_grid
from .likelihood import DEFAULT_CHUNK, SeriesBatch, forward
from .params import ModelSpec, ParameterSet

# The tail probability is floored here so z-scores and logs stay finite.
_TAIL_FLOOR = 1e-300


@dataclass(frozen=True)
class ScoringPolicy:
    """Flagging settings.

    Attributes:
        threshold: flag a minute when its PIT exceeds this (positive stakes only).
        seed: seed of the randomized PIT for zero stakes.
        max_window: longest window considered for the most anomalous stretch.
    """

    threshold: float = 0.999
    seed: int = 0
    max_window: int = 5

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.max_window < 1:
            raise ValueError("max_window must be at least 1")


@dataclass
class SeriesScores:
    """Per-minute scores of one team series (``u``/``tail`` are NaN on closed minutes)."""

    match_id: str
    team_id: str
    minute: np.ndarray
    stake: np.ndarray
    open: np.ndarray
    zero_prob: np.ndarray
    u: np.ndarray
    tail: np.ndarray
    pred_mean_log: np.ndarray
    flag: np.ndarray


@dataclass
class MatchSummary:
    match_id: str
    n_scored: int
    n_flags: int
    max_u: float
    p_star: float
    window_team: str
    window_start: int
    window_end: int
    window_score: float
    rank: int = 0


@dataclass
class AnomalyReport:
    series: List[SeriesScores]
    matches: List[MatchSummary]
    threshold: float
    seed: int

    def match(self, match_id: str) -> MatchSummary:
        for m in self.matches:
            if m.match_id == match_id:
                return m
        raise KeyError(match_id)

    @property
    def ranking(self) -> List[str]:
        return [m.match_id for m in sorted(self.matches, key=lambda m: m.rank)]


def _randomizer(seed: int, match_id: str, team_id: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{match_id}\x00{team_id}".encode()).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + words))


def _predictive(batch: SeriesBatch, theta: ParameterSet, spec: ModelSpec, grid: StateGrid):
    fw = forward(batch, theta, spec, grid, keep_predictive=True)
    return fw["pred"], fw["terms"]


def predictive_weights(series: TeamMatchSeries, theta: ParameterSet, spec: ModelSpec,
                       grid: Optional[StateGrid] = None) -> np.ndarray:
    """``(T, m)`` one-step-ahead predictive state weights; row 0 is the initial law."""
    grid = grid if grid is not None else build_grid(spec)
    pred, _ = _predictive(SeriesBatch.from_series([series], spec), theta, spec, grid)
    return pred[0, : series.T]


def _cdf_parts(y: np.ndarray, w: np.ndarray, nu: np.ndarray, pi: np.ndarray, b: np.ndarray, sigma: float):
    """``(cdf, tail)`` for stakes ``y`` (any shape ``S``) with weights ``w`` of shape ``S + (m,)``."""
    with np.errstate(divide="ignore"):
        logy = np.log(np.where(y > 0, y, 1.0))
    q = (logy - nu)[..., None] - b
    lower = np.einsum("...i,...i->...", w, ndtr(q / sigma))
    upper = np.einsum("...i,...i->...", w, ndtr(-q / sigma))
    cdf = np.where(y > 0, pi + (1 - pi) * lower, pi)
    tail = np.where(y > 0, (1 - pi) * upper, 1 - pi)
    return cdf, tail


def predictive_cdf(series: TeamMatchSeries, t: int, y: float, theta: ParameterSet, spec: ModelSpec,
                   grid: Optional[StateGrid] = None) -> float:
    """Predictive CDF of the stake at minute index ``t`` (1-based) given minutes ``1..t-1``.

    Only the prefix of ``series`` up to ``t`` is used; the stake stored at
    minute ``t`` is replaced by the candidate ``y``.
    """
    if not 1 <= t <= series.T:
        raise ValueError(f"minute index {t} outside 1..{series.T}")
    if y < 0:
        raise ValueError("stakes are nonnegative")
    grid = grid if grid is not None else build_grid(spec)
    prefix = series.prefix(t)
    if not prefix.open[t - 1]:
        return 1.0
    batch = SeriesBatch.from_series([prefix], spec)
    pred, terms = _predictive(batch, theta, spec, grid)
    cdf, _ = _cdf_parts(np.asarray(float(y)), pred[0, t - 1], terms.nu[0, t - 1], terms.pi[0, t - 1],
                        grid.midpoints, theta.sigma)
    return float(cdf)


def _score_batch(batch: SeriesBatch, series: Sequence[TeamMatchSeries], theta: ParameterSet, spec: ModelSpec,
                 grid: StateGrid, policy: ScoringPolicy) -> List[SeriesScores]:
    pred, terms = _predictive(batch, theta, spec, grid)
    b = grid.midpoints
    y = np.exp(batch.logy) * batch.pos
    cdf, tail = _cdf_parts(y, pred, terms.nu, terms.pi, b, theta.sigma)
    mean_log = terms.nu + pred @ b
    out = []
    for n, s in enumerate(series):
        T = s.T
        open_ = s.open.copy()
        zero = open_ & (s.y == 0)
        pi_n = np.where(open_, terms.pi[n, :T], 1.0)
        u = np.where(open_, cdf[n, :T], np.nan)
        tl = np.where(open_, tail[n, :T], np.nan)
        draws = _randomizer(policy.seed, s.match_id, s.team_id).random(T)
        u = np.where(zero, draws * pi_n, u)
        tl = np.where(zero, 1.0 - draws * pi_n, tl)
        flag = open_ & (s.y > 0) & (u > policy.threshold)
        out.append(SeriesScores(s.match_id, s.team_id, s.minute.copy(), s.y.copy(), open_, pi_n,
                                np.clip(u, 0.0, 1.0), np.clip(tl, 0.0, 1.0), mean_log[n, :T], flag))
    return out


def pseudo_residuals(series: TeamMatchSeries, theta: ParameterSet, spec: ModelSpec,
                     grid: Optional[StateGrid] = None, seed: int = 0) -> np.ndarray:
    """PIT values for one series (NaN on closed-market minutes)."""
    return score_series([series], theta, spec, grid, ScoringPolicy(seed=seed))[0].u


def score_series(corpus: Sequence[TeamMatchSeries], theta: ParameterSet, spec: ModelSpec,
                 grid: Optional[StateGrid] = None, policy: Optional[ScoringPolicy] = None,
                 chunk_size: int = DEFAULT_CHUNK) -> List[SeriesScores]:
    """Minute scores for every series, in corpus order."""
    if not corpus:
        raise ValueError("empty corpus")
    grid = grid if grid is not None else build_grid(spec)
    policy = policy or ScoringPolicy()
    theta.check(spec)
    out: List[SeriesScores] = []
    for start in range(0, len(corpus), chunk_size):
        part = list(corpus[start : start + chunk_size])
        batch = SeriesBatch.from_series(part, spec)
        out.extend(_score_batch(batch, part, theta, spec, grid, policy))
    return out


def flag_outliers(u, stake, threshold: float = 0.999) -> np.ndarray:
    """One-sided flags: PIT above ``threshold`` on minutes with positive stakes."""
    u = np.asarray(u, dtype=float)
    stake = np.asarray(stake, dtype=float)
    with np.errstate(invalid="ignore"):
        return (stake > 0) & (u > threshold)


def sidak_p(max_u: float, n: int) -> float:
    """Sidak-adjusted minimum tail p-value ``1 - max_u ** n``."""
    if n <= 0 or max_u <= 0:
        return 1.0
    return float(-math.expm1(n * math.log(max_u))) if max_u < 1 else 0.0


def _sidak_from_tail(min_tail: float, n: int) -> float:
    if n <= 0:
        return 1.0
    return float(-math.expm1(n * math.log1p(-min_tail))) if min_tail < 1 else 1.0


def best_window(tail: np.ndarray, max_window: int) -> Tuple[int, int, float]:
    """Highest scan score ``sum(z) / sqrt(L)`` over runs of scored minutes of length ``<= max_window``.

    Returns 0-based ``(start, end_inclusive, score)``; ``(-1, -1, -inf)`` if nothing is scored.
    """
    z = np.where(np.isfinite(tail), -ndtri(np.clip(tail, _TAIL_FLOOR, 1.0)), np.nan)
    best = (-1, -1, -np.inf)
    T = len(z)
    csum = np.concatenate([[0.0], np.cumsum(np.nan_to_num(z))])
    bad = np.concatenate([[0], np.cumsum(np.isnan(z))])
    for L in range(1, min(max_window, T) + 1):
        sums = csum[L:] - csum[:-L]
        ok = (bad[L:] - bad[:-L]) == 0
        if not ok.any():
            continue
        score = np.where(ok, sums / math.sqrt(L), -np.inf)
        k = int(np.argmax(score))
        if score[k] > best[2]:
            best = (k, k + L - 1, float(score[k]))
    return best


def match_report(scores: Iterable[SeriesScores], policy: Optional[ScoringPolicy] = None) -> AnomalyReport:
    """Aggregate minute scores per match and rank matches by the Sidak-adjusted p-value.

    Ties in ``p*`` are broken by match id so the ranking does not depend on
    corpus order.
    """
    policy = policy or ScoringPolicy()
    scores = list(scores)
    if not scores:
        raise ValueError("no scores to report")
    by_match: Dict[str, List[SeriesScores]] = {}
    for s in scores:
        by_match.setdefault(s.match_id, []).append(s)
    summaries = []
    for mid in sorted(by_match):
        group = by_match[mid]
        n = int(sum(np.sum(s.open) for s in group))
        flags = int(sum(np.sum(s.flag) for s in group))
        tails = np.concatenate([s.tail[s.open] for s in group])
        us = np.concatenate([s.u[s.open] for s in group])
        min_tail = float(tails.min()) if tails.size else 1.0
        max_u = float(us.max()) if us.size else 0.0
        p_star = _sidak_from_tail(min_tail, n)
        win = ("", 0, 0, -np.inf)
        for s in group:
            k0, k1, sc = best_window(s.tail, policy.max_window)
            if k0 >= 0 and sc > win[3]:
                win = (s.team_id, int(s.minute[k0]), int(s.minute[k1]), sc)
        summaries.append(MatchSummary(mid, n, flags, max_u, p_star, *win))
    order = sorted(summaries, key=lambda m: (m.p_star, m.match_id))
    for r, m in enumerate(order, start=1):
        m.rank = r
    return AnomalyReport(scores, summaries, policy.threshold, policy.seed)


def score_corpus(corpus: Sequence[TeamMatchSeries], theta: ParameterSet, spec: ModelSpec,
                 grid: Optional[StateGrid] = None, policy: Optional[ScoringPolicy] = None) -> AnomalyReport:
    policy = policy or ScoringPolicy()
    return match_report(score_series(corpus, theta, spec, grid, policy), policy)


MINUTE_COLUMNS = ["match_id", "team_id", "minute", "stake", "open", "zero_prob", "pit", "tail", "pred_mean_log", "flag"]
MATCH_COLUMNS = ["rank", "match_id", "n_scored", "n_flags", "max_pit", "p_star", "window_team",
                 "window_start", "window_end", "window_score"]


def _header(fh, report: AnomalyReport, extra: Optional[Dict[str, str]] = None) -> None:
    fh.write(f"# threshold={report.threshold!r}\n")
    fh.write(f"# seed={report.seed}\n")
    for k, v in (extra or {}).items():
        fh.write(f"# {k}={v}\n")


def write_minute_csv(report: AnomalyReport, path, extra: Optional[Dict[str, str]] = None) -> int:
    """Minute-grain scores (closed minutes included with empty PIT); returns the row count."""
    rows = 0
    with open(path, "w", newline="") as fh:
        _header(fh, report, extra)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MINUTE_COLUMNS)
        for s in report.series:
            for k in range(len(s.minute)):
                op = bool(s.open[k])
                w.writerow([
                    s.match_id, s.team_id, int(s.minute[k]), repr(float(s.stake[k])), int(op),
                    repr(float(s.zero_prob[k])),
                    repr(float(s.u[k])) if op else "", repr(float(s.tail[k])) if op else "",
                    repr(float(s.pred_mean_log[k])), int(bool(s.flag[k])),
                ])
                rows += 1
    return rows


def write_match_csv(report: AnomalyReport, path, extra: Optional[Dict[str, str]] = None) -> int:
    with open(path, "w", newline="") as fh:
        _header(fh, report, extra)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MATCH_COLUMNS)
        for m in sorted(report.matches, key=lambda m: m.rank):
            w.writerow([m.rank, m.match_id, m.n_scored, m.n_flags, repr(m.max_u), repr(m.p_star), m.window_team,
                        m.window_start, m.window_end, repr(m.window_score)])
    return len(report.matches)


def _read_commented_csv(path) -> Tuple[Dict[str, str], List[Dict[str, str]]]:
    header: Dict[str, str] = {}
    with open(path, newline="") as fh:
        lines = []
        for line in fh:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                header[key.strip()] = value.strip()
            else:
                lines.append(line)
    return header, list(csv.DictReader(lines))


def read_minute_csv(path) -> Tuple[Dict[str, str], List[Dict[str, str]]]:
    """Header block and rows of a minute-grain report."""
    return _read_commented_csv(path)


def read_match_csv(path) -> Tuple[Dict[str, str], List[Dict[str, str]]]:
    return _read_commented_csv(path)


__all__ = [
    "AnomalyReport",
    "MatchSummary",
    "ScoringPolicy",
    "SeriesScores",
    "best_window",
    "flag_outliers",
    "match_report",
    "predictive_cdf",
    "predictive_weights",
    "pseudo_residuals",
    "read_match_csv",
    "read_minute_csv",
    "score_corpus",
    "score_series",
    "sidak_p",
    "write_match_csv",
    "write_minute_csv",
]
