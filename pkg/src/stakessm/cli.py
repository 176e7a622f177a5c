"""Command-line interface: ``stakessm {simulate,fit,score,eval}``.

Every subcommand reads an optional YAML/JSON config (``--config``), lets the
shared flags override it, writes its outputs into ``--out`` and finishes with a
``manifest.json`` recording the resolved config, package version and SHA-256
digests of inputs and outputs.

Exit status: 0 success, 2 config error, 3 data error, 4 non-convergence,
5 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

import yaml

from . import __version__
from .data import DataError, build_corpus, prepare_spec, read_corpus_csv, write_corpus_csv
from .evaluate import InjectionTruth, detection_metrics, write_metrics_csv
from .fit import FitError, FitOptions, FitResult, fit, format_report, write_report_csv
from .likelihood import LikelihoodError
from .params import SpecError, canonical_variant
from .scoring import ScoringPolicy, read_match_csv, read_minute_csv, score_corpus, write_match_csv, write_minute_csv
from .simulate import ConfigError, SimConfig, simulate_corpus

log = logging.getLogger("stakessm")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NONCONVERGED = 4
EXIT_IO = 5

CORPUS_FILE = "corpus.csv"
TRUTH_JSON = "truth.json"
TRUTH_CSV = "truth.csv"
FIT_JSON = "fit.json"
FIT_TEXT = "fit_report.txt"
FIT_CSV = "fit_params.csv"
MINUTE_CSV = "scores_minute.csv"
MATCH_CSV = "scores_match.csv"
METRICS_CSV = "metrics.csv"
MANIFEST = "manifest.json"


class CliConfigError(ValueError):
    pass


class CliIOError(OSError):
    pass


# --- helpers ---------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError:
        raise CliIOError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise CliConfigError(f"{path}: not valid YAML/JSON: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise CliConfigError(f"{path}: top level must be a mapping")
    return data


def _check_keys(cfg: dict, allowed, what: str) -> None:
    unknown = sorted(set(cfg) - set(allowed))
    if unknown:
        raise CliConfigError(f"unknown {what} config keys: {unknown}")


def _out_dir(path: Optional[str]) -> Path:
    out = Path(path or ".")
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliIOError(f"output directory {out} is not writable: {exc}") from None
    return out


def _require_file(path: Optional[str], what: str) -> Path:
    if not path:
        raise CliConfigError(f"no {what} given")
    p = Path(path)
    if not p.is_file():
        raise CliIOError(f"{what} not found: {p}")
    return p


def _threads(value) -> int:
    if value is None:
        return os.cpu_count() or 1
    value = int(value)
    if value < 1:
        raise CliConfigError("--threads must be at least 1")
    return value


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def write_manifest(out: Path, command: str, config: dict, inputs: Dict[str, Path], outputs: List[str]) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": {k: {"path": str(v), "sha256": sha256_file(v)} for k, v in sorted(inputs.items())},
        "outputs": {name: sha256_file(out / name) for name in sorted(outputs)},
    }
    write_json(manifest, out / MANIFEST)


def _resolve_int(cli_value, cfg: dict, key: str, default=None):
    return cli_value if cli_value is not None else cfg.get(key, default)


# --- simulate --------------------------------------------------------------

def _write_truth(result, out: Path) -> None:
    cfg = result.config
    injections = []
    for sm in result.matches:
        inj = sm.injection
        if inj is None:
            continue
        side = "home" if inj.team == sm.record.home_team else "away"
        injections.append({
            "match_id": inj.match_id,
            "team_id": inj.team,
            "side": side,
            "start_minute": inj.start_minute,
            "duration": inj.duration,
            "factor": inj.factor,
            "pre_goal": inj.pre_goal,
            "minutes": [int(m) for m in sm.record.minute[sm.mask[side]]],
        })
    write_json({"config": cfg.to_dict(), "params": cfg.theta.to_dict(), "variant": cfg.variant,
                "n_matches": cfg.n_matches, "injections": injections}, out / TRUTH_JSON)
    with open(out / TRUTH_CSV, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["match_id", "team_id", "minute", "latent", "log_mean", "injected"])
        for sm in result.matches:
            rec = sm.record
            for side in ("home", "away"):
                team = getattr(rec, f"{side}_team")
                lat, lm, mask = sm.latent[side], sm.log_mean[side], sm.mask[side]
                for k in range(len(lat)):
                    w.writerow([rec.match_id, team, int(rec.minute[k]), repr(float(lat[k])), repr(float(lm[k])), int(mask[k])])


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.model is not None:
        cfg["variant"] = args.model
    sim = SimConfig.from_dict(cfg)
    out = _out_dir(args.out)
    result = simulate_corpus(sim)
    rows = write_corpus_csv(result.records, out / CORPUS_FILE)
    _write_truth(result, out)
    resolved = sim.to_dict()
    resolved["corpus_rows"] = rows
    resolved["series_minute_rows"] = 2 * sum(r.retained_length for r in result.records)
    write_manifest(out, "simulate", resolved, {}, [CORPUS_FILE, TRUTH_JSON, TRUTH_CSV])
    log.info("simulated %d matches (%d rows) into %s", sim.n_matches, rows, out)
    return EXIT_OK


# --- fit -------------------------------------------------------------------

_FIT_KEYS = {"corpus", "model", "grid_m", "grid_bound", "options", "threads", "seed"}


def _load_records(path: Path):
    records = read_corpus_csv(path)
    if not records:
        raise DataError(f"{path}: corpus has no match rows")
    return records


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    _check_keys(cfg, _FIT_KEYS, "fit")
    corpus_path = _require_file(args.corpus or cfg.get("corpus"), "corpus CSV")
    variant = canonical_variant(args.model or cfg.get("model", "baseline"))
    grid_m = int(_resolve_int(args.grid_m, cfg, "grid_m", 100))
    grid_bound = float(_resolve_int(args.grid_bound, cfg, "grid_bound", 5.0))
    threads = _threads(_resolve_int(args.threads, cfg, "threads"))
    opt_cfg = dict(cfg.get("options") or {})
    if args.seed is not None or "seed" in cfg:
        opt_cfg["seed"] = int(_resolve_int(args.seed, cfg, "seed"))
    opt_cfg["threads"] = threads
    try:
        options = FitOptions(**opt_cfg)
    except TypeError as exc:
        raise CliConfigError(f"invalid fit options: {exc}") from None
    out = _out_dir(args.out)

    records = _load_records(corpus_path)
    spec = prepare_spec(records, variant, grid_m=grid_m, grid_bound=grid_bound)
    corpus = build_corpus(records, spec)
    result = fit(corpus, spec, options=options)

    write_json(result.to_dict(), out / FIT_JSON)
    (out / FIT_TEXT).write_text(format_report(result))
    write_report_csv(result, out / FIT_CSV)
    resolved = {"corpus": str(corpus_path), "model": variant, "grid_m": grid_m, "grid_bound": grid_bound,
                "options": options.__dict__.copy()}
    write_manifest(out, "fit", resolved, {"corpus": corpus_path}, [FIT_JSON, FIT_TEXT, FIT_CSV])
    if not result.converged:
        log.error("fit did not converge: %s", result.message)
        return EXIT_NONCONVERGED
    log.info("fit converged: loglik %.4f, AIC %.4f", result.loglik, result.aic)
    return EXIT_OK


# --- score -----------------------------------------------------------------

_SCORE_KEYS = {"corpus", "fit", "model", "threshold", "seed", "max_window", "grid_m", "grid_bound", "threads"}


def cmd_score(args) -> int:
    cfg = load_config(args.config)
    _check_keys(cfg, _SCORE_KEYS, "score")
    corpus_path = _require_file(args.corpus or cfg.get("corpus"), "corpus CSV")
    fit_path = _require_file(args.fit or cfg.get("fit"), "fit file")
    try:
        with open(fit_path, encoding="utf-8") as fh:
            fitted = FitResult.from_dict(json.load(fh))
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"{fit_path}: not a valid fit file: {exc}") from None
    spec = fitted.spec
    model = args.model or cfg.get("model")
    if model is not None and canonical_variant(model) != spec.variant:
        raise SpecError(f"requested model {canonical_variant(model)!r} but the fit is for {spec.variant!r}")
    for flag, key in ((args.grid_m, "grid_m"), (args.grid_bound, "grid_bound")):
        value = _resolve_int(flag, cfg, key)
        if value is not None and float(value) != float(getattr(spec, key)):
            raise SpecError(f"{key}={value} differs from the fitted grid ({getattr(spec, key)})")
    threshold = float(_resolve_int(args.threshold, cfg, "threshold", 0.999))
    seed = int(_resolve_int(args.seed, cfg, "seed", 0))
    try:
        policy = ScoringPolicy(threshold=threshold, seed=seed, max_window=int(cfg.get("max_window", 5)))
    except ValueError as exc:
        raise CliConfigError(str(exc)) from None
    out = _out_dir(args.out)

    records = _load_records(corpus_path)
    corpus = build_corpus(records, spec)
    report = score_corpus(corpus, fitted.theta, spec, policy=policy)
    extra = {"model": spec.variant, "fit_sha256": sha256_file(fit_path)}
    write_minute_csv(report, out / MINUTE_CSV, extra)
    write_match_csv(report, out / MATCH_CSV, extra)
    resolved = {"corpus": str(corpus_path), "fit": str(fit_path), "model": spec.variant, "threshold": threshold,
                "seed": seed, "max_window": policy.max_window}
    write_manifest(out, "score", resolved, {"corpus": corpus_path, "fit": fit_path}, [MINUTE_CSV, MATCH_CSV])
    n_flags = sum(m.n_flags for m in report.matches)
    log.info("scored %d matches, %d flagged minutes", len(report.matches), n_flags)
    return EXIT_OK


# --- eval ------------------------------------------------------------------

_EVAL_KEYS = {"report", "truth", "top_fraction"}


def _report_paths(path: Path):
    if path.is_dir():
        return path / MINUTE_CSV, path / MATCH_CSV
    return path, path.with_name(MATCH_CSV)


def load_truth(path: Path) -> List[InjectionTruth]:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        return [InjectionTruth(d["match_id"], d["team_id"], tuple(int(m) for m in d["minutes"]))
                for d in data["injections"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: not a valid truth sidecar: {exc}") from None


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    _check_keys(cfg, _EVAL_KEYS, "eval")
    report_arg = args.report or cfg.get("report")
    if not report_arg:
        raise CliConfigError("no report given")
    minute_path, match_path = _report_paths(Path(report_arg))
    minute_path = _require_file(str(minute_path), "minute-grain report")
    match_path = _require_file(str(match_path), "match-grain report")
    truth_arg = args.truth or cfg.get("truth")
    if not truth_arg:
        raise CliConfigError("no truth sidecar given (--truth)")
    truth_path = _require_file(truth_arg, "truth sidecar")
    top_fraction = float(cfg.get("top_fraction", 0.05))
    out = _out_dir(args.out)

    injections = load_truth(truth_path)
    header, minute_rows = read_minute_csv(minute_path)
    _, match_rows = read_match_csv(match_path)
    try:
        flags = [(r["match_id"], r["team_id"], int(r["minute"]), r["flag"] == "1")
                 for r in minute_rows if r["open"] == "1"]
        ranks = [(r["match_id"], int(r["rank"]), int(r["n_flags"])) for r in match_rows]
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed report: {exc}") from None
    metrics = detection_metrics(flags, ranks, injections, top_fraction)
    metrics["threshold"] = float(header["threshold"]) if "threshold" in header else None
    write_metrics_csv(metrics, out / METRICS_CSV)
    resolved = {"report": str(minute_path), "truth": str(truth_path), "top_fraction": top_fraction}
    write_manifest(out, "eval", resolved, {"minute_report": minute_path, "match_report": match_path,
                                           "truth": truth_path}, [METRICS_CSV])
    return EXIT_OK


# --- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="YAML or JSON config file")
    shared.add_argument("--out", help="output directory (default: current directory)")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--threads", type=int, help="worker threads (default: machine parallelism)")
    shared.add_argument("--model", help="baseline | state-dep | full")
    shared.add_argument("--grid-m", dest="grid_m", type=int)
    shared.add_argument("--grid-bound", dest="grid_bound", type=float)
    shared.add_argument("--threshold", type=float)
    shared.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="stakessm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", parents=[shared], help="simulate a synthetic corpus")
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("fit", parents=[shared], help="fit a model variant by maximum likelihood")
    p.add_argument("--corpus")
    p.set_defaults(func=cmd_fit)
    p = sub.add_parser("score", parents=[shared], help="score a corpus against a fitted model")
    p.add_argument("--corpus")
    p.add_argument("--fit", help="fit.json from the fit subcommand")
    p.set_defaults(func=cmd_score)
    p = sub.add_parser("eval", parents=[shared], help="detection metrics against a truth sidecar")
    p.add_argument("--report", help="score output directory or minute-grain CSV")
    p.add_argument("--truth", help="truth.json from the simulate subcommand")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliConfigError, ConfigError, SpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, LikelihoodError, FitError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
