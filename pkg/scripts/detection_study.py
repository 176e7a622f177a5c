"""Injection study: simulate -> fit -> score -> eval through the CLI.

Runs the acceptance configuration (1,000 matches, 50 injected windows of
3 minutes at factor 8) and prints the detection metrics.  With ``--freeze``
the minute/match metrics are written to ``tests/baselines/ac8_detection.json``
as regression baselines.

Usage:
    python scripts/detection_study.py --out runs/detection [--freeze]
"""

import argparse
import json
from pathlib import Path

import yaml

from stakessm.cli import main as cli
from stakessm.evaluate import read_metrics_csv

CONFIG = {"n_matches": 1000, "seed": 11, "anomalies": {"count": 50, "factor": 8.0, "duration": 3}}
FROZEN = Path(__file__).resolve().parents[1] / "tests" / "baselines" / "ac8_detection.json"
KEYS = ("minute_recall", "minute_precision", "match_recall", "match_precision", "injected_rank_median",
        "injected_rank_median_fraction", "injected_top_share")


def run(out: Path, seed: int = 0) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    cfg = out / "sim.yaml"
    cfg.write_text(yaml.safe_dump(CONFIG))
    steps = [
        ["simulate", "--config", str(cfg), "--out", str(out / "sim")],
        ["fit", "--corpus", str(out / "sim" / "corpus.csv"), "--out", str(out / "fit"), "--threads", "1"],
        ["score", "--corpus", str(out / "sim" / "corpus.csv"), "--fit", str(out / "fit" / "fit.json"),
         "--out", str(out / "score"), "--seed", str(seed)],
        ["eval", "--report", str(out / "score"), "--truth", str(out / "sim" / "truth.json"), "--out", str(out / "eval")],
    ]
    for argv in steps:
        code = cli(argv)
        if code != 0:
            raise SystemExit(f"{argv[0]} exited with status {code}")
    return read_metrics_csv(out / "eval" / "metrics.csv")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/detection")
    ap.add_argument("--freeze", action="store_true", help="write the regression baselines")
    args = ap.parse_args()
    metrics = run(Path(args.out))
    for k, v in metrics.items():
        print(f"{k:32s} {v}")
    if args.freeze:
        FROZEN.parent.mkdir(parents=True, exist_ok=True)
        FROZEN.write_text(json.dumps({"config": CONFIG, **{k: metrics[k] for k in KEYS}}, indent=2) + "\n")
        print(f"baselines written to {FROZEN}")


if __name__ == "__main__":
    main()
