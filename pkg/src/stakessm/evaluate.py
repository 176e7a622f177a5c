"""Detection metrics of an anomaly report against known injections."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence, Set, Tuple

import numpy as np


@dataclass(frozen=True)
class InjectionTruth:
    match_id: str
    team_id: str
    minutes: Tuple[int, ...]


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def detection_metrics(minute_flags: Iterable[Tuple[str, str, int, bool]],
                      match_ranks: Iterable[Tuple[str, int, int]],
                      injections: Sequence[InjectionTruth],
                      top_fraction: float = 0.05) -> Dict[str, Optional[float]]:
    """Precision/recall at minute and match grain plus ranking statistics.

    Args:
        minute_flags: ``(match_id, team_id, minute, flagged)`` for every scored minute.
        match_ranks: ``(match_id, rank, n_flags)`` per match (rank 1 = most anomalous).
        injections: the true injected windows.
        top_fraction: size of the "top of the ranking" used for the hit share.

    Returns:
        Mapping of metric name to value; undefined ratios are ``None``.
    """
    truth_minutes: Set[Tuple[str, str, int]] = set()
    for inj in injections:
        truth_minutes.update((inj.match_id, inj.team_id, int(m)) for m in inj.minutes)
    truth_matches = {inj.match_id for inj in injections}

    flagged = tp = 0
    for mid, team, minute, flag in minute_flags:
        if flag:
            flagged += 1
            tp += (mid, team, int(minute)) in truth_minutes

    ranks = {}
    flagged_matches = set()
    for mid, rank, n_flags in match_ranks:
        ranks[mid] = int(rank)
        if n_flags > 0:
            flagged_matches.add(mid)
    missing = truth_matches - set(ranks)
    if missing:
        raise ValueError(f"injected matches absent from the report: {sorted(missing)[:5]}")
    n_matches = len(ranks)
    match_tp = len(flagged_matches & truth_matches)

    out: Dict[str, Optional[float]] = {
        "n_matches": n_matches,
        "n_injected": len(truth_matches),
        "minute_flagged": flagged,
        "minute_injected": len(truth_minutes),
        "minute_true_positives": tp,
        "minute_precision": _ratio(tp, flagged),
        "minute_recall": _ratio(tp, len(truth_minutes)),
        "match_flagged": len(flagged_matches),
        "match_true_positives": match_tp,
        "match_precision": _ratio(match_tp, len(flagged_matches)),
        "match_recall": _ratio(match_tp, len(truth_matches)),
    }
    inj_ranks = np.array(sorted(ranks[m] for m in truth_matches), dtype=float)
    cutoff = top_fraction * n_matches
    if inj_ranks.size:
        med = float(np.median(inj_ranks))
        out.update(
            injected_rank_median=med,
            injected_rank_median_fraction=med / n_matches,
            injected_rank_mean=float(inj_ranks.mean()),
            injected_top_share=float(np.mean(inj_ranks <= cutoff)),
            median_in_top=float(med <= cutoff),
        )
    else:
        out.update(injected_rank_median=None, injected_rank_median_fraction=None, injected_rank_mean=None,
                   injected_top_share=None, median_in_top=None)
    out["top_fraction"] = top_fraction
    return out


def report_metrics(report, injections: Sequence[InjectionTruth], top_fraction: float = 0.05):
    """:func:`detection_metrics` straight from an in-memory AnomalyReport."""
    flags = []
    for s in report.series:
        for k in np.flatnonzero(s.open):
            flags.append((s.match_id, s.team_id, int(s.minute[k]), bool(s.flag[k])))
    ranks = [(m.match_id, m.rank, m.n_flags) for m in report.matches]
    return detection_metrics(flags, ranks, injections, top_fraction)


def write_metrics_csv(metrics: Dict[str, Optional[float]], path) -> None:
    """Two-column CSV; absent metrics are written as empty values."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in metrics.items():
            w.writerow([k, "" if v is None else repr(v) if isinstance(v, float) else v])


def read_metrics_csv(path) -> Dict[str, Optional[float]]:
    out: Dict[str, Optional[float]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["metric"]] = float(row["value"]) if row["value"] != "" else None
    return out


__all__ = ["InjectionTruth", "detection_metrics", "read_metrics_csv", "report_metrics", "write_metrics_csv"]
