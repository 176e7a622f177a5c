"""Match records, team-perspective series and covariate construction.

A :class:`MatchRecord` holds one match at minute grain (one row per minute
since kick-off, halftime minutes included).  Each record is mirrored into two
:class:`TeamMatchSeries`, one per team, carrying the stakes placed on that team
and the three covariate blocks used by the model:

* ``x1`` -- mean-predictor covariates (:data:`stakessm.params.X1_NAMES`)
* ``x2`` -- state-process covariates (:data:`stakessm.params.X2_NAMES`)
* ``z``  -- zero-probability covariates (:data:`stakessm.params.Z_NAMES`)
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .params import ModelSpec

CSV_COLUMNS = (
    "match_id",
    "home_team",
    "away_team",
    "minute",
    "open",
    "stake_home",
    "stake_away",
    "stake_draw",
    "improb_home",
    "improb_away",
    "improb_draw",
    "improb_home_start",
    "improb_away_start",
    "xg_home",
    "xg_away",
    "goals_home",
    "goals_away",
    "redcards_home",
    "redcards_away",
    "halftime",
)

STAKE_FLOOR = 1e-6
SECOND_HALF_MINUTES = 45
REGULATION_MINUTES = 90

SURPRISING_MAX = 0.25
SLIGHTLY_SURPRISING_MAX = 0.5


class DataError(ValueError):
    """Input data violates the record schema or its invariants."""


class UnknownTeamError(DataError):
    """A team has no stake average in the fitted specification."""


@dataclass
class MatchRecord:
    """One match at one-minute resolution.

    Per-minute arrays all have the same length.  Goals and red cards are
    cumulative counts up to and including the minute; implied probabilities may
    be NaN on closed-market minutes.  ``regulation_end`` is the last retained
    minute; when omitted it is derived as 45 minutes after the end of the
    halftime block (or minute 90 when no halftime minutes are present).
    """

    match_id: str
    home_team: str
    away_team: str
    minute: np.ndarray
    open: np.ndarray
    stake_home: np.ndarray
    stake_away: np.ndarray
    stake_draw: np.ndarray
    improb_home: np.ndarray
    improb_away: np.ndarray
    improb_draw: np.ndarray
    improb_home_start: float
    improb_away_start: float
    xg_home: np.ndarray
    xg_away: np.ndarray
    goals_home: np.ndarray
    goals_away: np.ndarray
    redcards_home: np.ndarray
    redcards_away: np.ndarray
    halftime: np.ndarray
    regulation_end: Optional[int] = None

    def __post_init__(self):
        self.match_id = str(self.match_id)
        self.home_team = str(self.home_team)
        self.away_team = str(self.away_team)
        self.minute = np.asarray(self.minute, dtype=np.int64)
        self.open = np.asarray(self.open, dtype=bool)
        self.halftime = np.asarray(self.halftime, dtype=bool)
        for name in ("stake_home", "stake_away", "stake_draw"):
            arr = np.asarray(getattr(self, name), dtype=float).copy()
            # negatives are kept so validate() can reject them
            arr[(arr >= 0) & (arr < STAKE_FLOOR)] = 0.0
            setattr(self, name, arr)
        for name in ("improb_home", "improb_away", "improb_draw", "xg_home", "xg_away"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        for name in ("goals_home", "goals_away", "redcards_home", "redcards_away"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        self.improb_home_start = float(self.improb_home_start)
        self.improb_away_start = float(self.improb_away_start)

    def __len__(self) -> int:
        return len(self.minute)

    def validate(self) -> None:
        """Raise :class:`DataError` if the record breaks an invariant."""
        tag = f"match {self.match_id}"
        n = len(self.minute)
        if n == 0:
            raise DataError(f"{tag}: no minutes")
        for name in CSV_COLUMNS[3:]:
            if name in ("improb_home_start", "improb_away_start"):
                continue
            if len(getattr(self, name)) != n:
                raise DataError(f"{tag}: column {name} has length {len(getattr(self, name))}, expected {n}")
        if not np.array_equal(self.minute, np.arange(1, n + 1)):
            bad = int(np.flatnonzero(self.minute != np.arange(1, n + 1))[0])
            raise DataError(f"{tag}: minutes must run contiguously from 1; found {self.minute[bad]} at position {bad + 1}")
        for name in ("improb_home_start", "improb_away_start"):
            p = getattr(self, name)
            if not (np.isfinite(p) and 0 < p < 1):
                raise DataError(f"{tag}: missing or invalid pre-match probability {name}={p}")
        for name in ("stake_home", "stake_away", "stake_draw"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise DataError(f"{tag}: {name} must be finite and nonnegative")
            closed_pos = (arr > 0) & ~self.open
            if closed_pos.any():
                raise DataError(f"{tag}: positive {name} on closed market at minute {self.minute[closed_pos][0]}")
        probs = np.stack([self.improb_home, self.improb_away, self.improb_draw])
        ok = np.all(np.isfinite(probs) & (probs > 0) & (probs <= 1), axis=0)
        if np.any(self.open & ~ok):
            raise DataError(
                f"{tag}: open market requires all three implied probabilities at minute "
                f"{self.minute[self.open & ~ok][0]}"
            )

    @property
    def retained_length(self) -> int:
        """Number of minutes kept after dropping second-half injury time."""
        end = self.regulation_end
        if end is None:
            ht = np.flatnonzero(self.halftime)
            end = (int(self.minute[ht[-1]]) + SECOND_HALF_MINUTES) if ht.size else REGULATION_MINUTES
        return int(min(end, len(self.minute)))

    def goal_events(self) -> List[Tuple[int, str]]:
        """(minute, 'home'|'away') for each goal, in time order."""
        events = []
        for side, goals in (("home", self.goals_home), ("away", self.goals_away)):
            inc = np.diff(np.concatenate([[0], goals]))
            for idx in np.flatnonzero(inc > 0):
                events.extend([(int(self.minute[idx]), side)] * int(inc[idx]))
        return sorted(events)


@dataclass
class TeamMatchSeries:
    """One match seen from one team's perspective."""

    match_id: str
    team_id: str
    opponent_id: str
    is_home: bool
    minute: np.ndarray
    y: np.ndarray
    open: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    z: np.ndarray

    @property
    def T(self) -> int:
        return len(self.y)

    @property
    def key(self) -> Tuple[str, str]:
        return (self.match_id, self.team_id)

    def prefix(self, t: int) -> "TeamMatchSeries":
        """The first ``t`` minutes."""
        return TeamMatchSeries(
            self.match_id, self.team_id, self.opponent_id, self.is_home, self.minute[:t],
            self.y[:t], self.open[:t], self.x1[:t], self.x2[:t], self.z[:t],
        )


def compute_gini(probs: Sequence[float]) -> float:
    """Bias-corrected Gini coefficient of the outcome-implied probabilities.

    ``n/(n-1) * sum_ij |p_i - p_j| / (2 n^2 mean(p))``; equals 0 for a uniform
    market and approaches 1 when one outcome is certain.
    """
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1 or p.size < 2:
        raise ValueError("need at least two probabilities")
    if np.any(~np.isfinite(p)) or np.any(p <= 0):
        raise ValueError(f"implied probabilities must be positive, got {p.tolist()}")
    n = p.size
    diffs = np.abs(p[:, None] - p[None, :]).sum()
    return float(n / (n - 1) * diffs / (2 * n * n * p.mean()))


def gini_rows(probs: np.ndarray) -> np.ndarray:
    """Vectorized :func:`compute_gini` over rows of a ``(T, n)`` array; NaN rows give 0."""
    probs = np.asarray(probs, dtype=float)
    n = probs.shape[1]
    good = np.all(np.isfinite(probs) & (probs > 0), axis=1)
    out = np.zeros(len(probs))
    p = probs[good]
    diffs = np.abs(p[:, :, None] - p[:, None, :]).sum(axis=(1, 2))
    out[good] = n / (n - 1) * diffs / (2 * n * n * p.mean(axis=1))
    return out


def standardize_minute(minute, spec: ModelSpec):
    """Centre and scale the match minute with the constants frozen in ``spec``."""
    if spec.minute_mean is None or spec.minute_sd is None:
        raise ValueError("spec carries no minute standardization constants")
    if not spec.minute_sd > 0:
        raise ValueError("minute standard deviation must be positive")
    return (np.asarray(minute, dtype=float) - spec.minute_mean) / spec.minute_sd


def unstandardize_minute(value, spec: ModelSpec):
    return np.asarray(value, dtype=float) * spec.minute_sd + spec.minute_mean


def surprise_category(p_start: float) -> int:
    """1 surprising, 2 slightly surprising, 3 unsurprising (by the scorer's pre-match probability)."""
    if p_start <= SURPRISING_MAX:
        return 1
    if p_start <= SLIGHTLY_SURPRISING_MAX:
        return 2
    return 3


def goal_decay(goals: Sequence[Tuple[int, float]], minute: int) -> Tuple[float, float, float]:
    """Decaying indicators ``I_w / g`` for the most recent goal up to ``minute``.

    Args:
        goals: ``(minute, scorer pre-match probability)`` for every goal, sorted by minute.
        minute: current minute.

    Returns:
        Three terms, at most one non-zero.  ``g`` counts minutes since the goal and is
        clamped to at least 1, so the term is 1 in the goal minute itself.
    """
    last = None
    for gm, p in goals:
        if gm > minute:
            break
        last = (gm, p)
    out = [0.0, 0.0, 0.0]
    if last is not None:
        g = max(minute - last[0], 1)
        out[surprise_category(last[1]) - 1] = 1.0 / g
    return tuple(out)


def _goal_decay_path(goals: Sequence[Tuple[int, float]], minutes: np.ndarray) -> np.ndarray:
    out = np.zeros((len(minutes), 3))
    if not goals:
        return out
    gm = np.array([g[0] for g in goals])
    cats = np.array([surprise_category(g[1]) for g in goals])
    idx = np.searchsorted(gm, minutes, side="right") - 1
    has = idx >= 0
    g = np.maximum(minutes[has] - gm[idx[has]], 1)
    out[np.flatnonzero(has), cats[idx[has]] - 1] = 1.0 / g
    return out


def _side_view(record: MatchRecord, side: str):
    n = record.retained_length
    y = (record.stake_home if side == "home" else record.stake_away)[:n]
    return y, record.open[:n]


def compute_stake_avg_team(series: Iterable) -> float:
    """Total stakes divided by total open-market minutes over a team's series.

    ``series`` items need ``y`` and ``open`` arrays (e.g. :class:`TeamMatchSeries`).
    """
    total, minutes = 0.0, 0
    count = 0
    for s in series:
        count += 1
        total += float(np.sum(s.y))
        minutes += int(np.sum(s.open))
    if count == 0:
        raise ValueError("no series given for team")
    if minutes == 0:
        raise ValueError("team has no open-market minutes; stake average undefined")
    return total / minutes


@dataclass
class _View:
    y: np.ndarray
    open: np.ndarray


def team_stake_averages(records: Sequence[MatchRecord]) -> Dict[str, float]:
    by_team: Dict[str, List[_View]] = {}
    for rec in records:
        for side, team in (("home", rec.home_team), ("away", rec.away_team)):
            by_team.setdefault(team, []).append(_View(*_side_view(rec, side)))
    return {team: compute_stake_avg_team(views) for team, views in sorted(by_team.items())}


def minute_constants(records: Sequence[MatchRecord]) -> Tuple[float, float]:
    """Mean and (population) sd of the minute over all retained series-minutes."""
    minutes = np.concatenate([np.arange(1, r.retained_length + 1) for r in records])
    return float(minutes.mean()), float(minutes.std())


def prepare_spec(records: Sequence[MatchRecord], variant: str = "baseline", **grid) -> ModelSpec:
    """Freeze corpus-level constants (minute scale, team stake averages) into a spec."""
    if not records:
        raise DataError("empty corpus")
    for rec in records:
        rec.validate()
    mean, sd = minute_constants(records)
    return ModelSpec(variant=variant, minute_mean=mean, minute_sd=sd, team_stake_avg=team_stake_averages(records), **grid)


def build_team_series(record: MatchRecord, spec: ModelSpec) -> Tuple[TeamMatchSeries, TeamMatchSeries]:
    """Mirror a record into (home-perspective, away-perspective) series."""
    record.validate()
    n = record.retained_length
    minutes = record.minute[:n]
    mstd = standardize_minute(minutes, spec)
    halftime = record.halftime[:n].astype(float)
    gini = gini_rows(np.stack([record.improb_home, record.improb_away, record.improb_draw], axis=1)[:n])
    z = np.column_stack([gini, gini**2, mstd, mstd * gini, mstd * gini**2])

    p_start = {"home": record.improb_home_start, "away": record.improb_away_start}
    goals = [(m, p_start[side]) for m, side in record.goal_events()]
    decay = _goal_decay_path(goals, minutes)

    out = []
    for side, team, opp in (("home", record.home_team, record.away_team), ("away", record.away_team, record.home_team)):
        if team not in spec.team_stake_avg:
            raise UnknownTeamError(f"unknown team {team!r} (match {record.match_id}): no stake average in spec")
        other = "away" if side == "home" else "home"
        g_team = getattr(record, f"goals_{side}")[:n]
        g_opp = getattr(record, f"goals_{other}")[:n]
        x1 = np.column_stack([
            np.full(n, spec.team_stake_avg[team]),
            np.full(n, p_start[side]),
            getattr(record, f"redcards_{side}")[:n],
            getattr(record, f"redcards_{other}")[:n],
            g_team - g_opp,
            mstd,
            mstd**2,
            halftime,
        ]).astype(float)
        xg_diff = getattr(record, f"xg_{side}")[:n] - getattr(record, f"xg_{other}")[:n]
        x2 = np.column_stack([decay, xg_diff, halftime])
        y, open_ = _side_view(record, side)
        out.append(TeamMatchSeries(record.match_id, team, opp, side == "home", minutes.copy(), y.copy(), open_.copy(), x1, x2, z.copy()))
    return out[0], out[1]


def build_corpus(records: Sequence[MatchRecord], spec: ModelSpec) -> List[TeamMatchSeries]:
    series: List[TeamMatchSeries] = []
    for rec in records:
        series.extend(build_team_series(rec, spec))
    return series


# --- CSV -------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return ""
    return repr(round(x, 10))


def write_corpus_csv(records: Sequence[MatchRecord], path) -> int:
    """Write records in the minute-grain input schema; returns the row count."""
    rows = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            for k in range(len(r)):
                w.writerow([
                    r.match_id, r.home_team, r.away_team, int(r.minute[k]), _fmt(bool(r.open[k])),
                    _fmt(r.stake_home[k]), _fmt(r.stake_away[k]), _fmt(r.stake_draw[k]),
                    _fmt(r.improb_home[k]), _fmt(r.improb_away[k]), _fmt(r.improb_draw[k]),
                    _fmt(r.improb_home_start), _fmt(r.improb_away_start),
                    _fmt(r.xg_home[k]), _fmt(r.xg_away[k]),
                    int(r.goals_home[k]), int(r.goals_away[k]),
                    int(r.redcards_home[k]), int(r.redcards_away[k]), _fmt(bool(r.halftime[k])),
                ])
                rows += 1
    return rows


def _parse_float(text: str, allow_empty=False) -> float:
    text = text.strip()
    if text == "":
        if allow_empty:
            return float("nan")
        raise ValueError("empty value")
    return float(text)


def _parse_flag(text: str) -> bool:
    text = text.strip().lower()
    if text in ("1", "true"):
        return True
    if text in ("0", "false"):
        return False
    raise ValueError(f"expected 0/1, got {text!r}")


def read_corpus_csv(path) -> List[MatchRecord]:
    """Read the minute-grain schema; schema violations raise :class:`DataError` with a line number."""
    groups: Dict[str, dict] = {}
    order: List[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file (header row is mandatory)") from None
        header = [h.strip() for h in header]
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}:1: missing columns {missing}")
        col = {c: header.index(c) for c in CSV_COLUMNS}
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                mid = row[col["match_id"]].strip()
                g = groups.get(mid)
                if g is None:
                    g = groups[mid] = {
                        "home_team": row[col["home_team"]].strip(),
                        "away_team": row[col["away_team"]].strip(),
                        "improb_home_start": _parse_float(row[col["improb_home_start"]], allow_empty=True),
                        "improb_away_start": _parse_float(row[col["improb_away_start"]], allow_empty=True),
                        "rows": [],
                    }
                    order.append(mid)
                g["rows"].append((
                    line_no,
                    int(row[col["minute"]]),
                    _parse_flag(row[col["open"]]),
                    _parse_float(row[col["stake_home"]]),
                    _parse_float(row[col["stake_away"]]),
                    _parse_float(row[col["stake_draw"]]),
                    _parse_float(row[col["improb_home"]], allow_empty=True),
                    _parse_float(row[col["improb_away"]], allow_empty=True),
                    _parse_float(row[col["improb_draw"]], allow_empty=True),
                    _parse_float(row[col["xg_home"]]),
                    _parse_float(row[col["xg_away"]]),
                    int(row[col["goals_home"]]),
                    int(row[col["goals_away"]]),
                    int(row[col["redcards_home"]]),
                    int(row[col["redcards_away"]]),
                    _parse_flag(row[col["halftime"]]),
                ))
            except ValueError as exc:
                raise DataError(f"{path}:{line_no}: {exc}") from None

    records = []
    for mid in order:
        g = groups[mid]
        rows = g["rows"]
        cols = list(zip(*rows))
        rec = MatchRecord(
            match_id=mid, home_team=g["home_team"], away_team=g["away_team"],
            minute=cols[1], open=cols[2], stake_home=cols[3], stake_away=cols[4], stake_draw=cols[5],
            improb_home=cols[6], improb_away=cols[7], improb_draw=cols[8],
            improb_home_start=g["improb_home_start"], improb_away_start=g["improb_away_start"],
            xg_home=cols[9], xg_away=cols[10], goals_home=cols[11], goals_away=cols[12],
            redcards_home=cols[13], redcards_away=cols[14], halftime=cols[15],
        )
        try:
            rec.validate()
        except DataError as exc:
            raise DataError(f"{path}:{rows[0][0]}: {exc}") from None
        records.append(rec)
    return records
