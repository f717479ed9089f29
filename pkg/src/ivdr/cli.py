"""Command-line front end: ``ivdr simulate``, ``ivdr estimate`` and ``ivdr report``.

Exit codes: 0 success, 2 input or configuration error, 3 estimation
degeneracy. Every CSV written carries the digest of the run manifest
written next to it.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from .data import read_csv
from .errors import ConfigError, EstimationError, InputError, IVDRError
from .estimators import METHODS, estimate
from .inference import VARIANCE_MODES, CiConfig
from .simulation import ScenarioConfig, run_scenario, summarize, worker_count

log = logging.getLogger("ivdr")

EXIT_OK, EXIT_INPUT, EXIT_DEGENERATE = 0, 2, 3
FLOAT_FORMAT = "%.12g"
LARGE_N = 5000

SCENARIO_KEYS = {
    "n": int, "reps": int, "seed": int, "bootstrap_B": int, "sl_folds": int, "level": float,
    "misspec_a": bool, "misspec_y": bool, "misspec_m": bool,
    "methods": "methods", "variance_mode": "variance",
}
ESTIMATE_COLUMNS = ["method", "psi_c", "se_c", "ci_c_lo", "ci_c_hi",
                    "psi_v", "se_v", "ci_v_lo", "ci_v_hi", "diagnostics"]
SUMMARY_REQUIRED = ["method", "parameter", "mean_bias", "mc_error", "coverage", "rmse"]
SCENARIO_COLUMNS = ["n", "misspec_a", "misspec_y", "misspec_m"]


# ---------------------------------------------------------------------------
# scenario files


def _parse_bool(key, raw):
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


def _parse_methods(raw):
    raw = raw.strip()
    if raw == "all":
        return METHODS
    items = tuple(m.strip() for m in raw.split(",") if m.strip())
    bad = [m for m in items if m not in METHODS]
    if bad or not items:
        raise ConfigError(f"methods: unknown method(s) {', '.join(bad) or '(none)'}")
    return items


def _parse_variance(raw):
    """A single mode for every method, or ``method:mode`` pairs."""
    raw = raw.strip()
    if raw in ("", "default"):
        return ()
    if raw in VARIANCE_MODES:
        return tuple((m, raw) for m in METHODS)
    pairs = []
    for item in raw.split(","):
        method, _, mode = item.strip().partition(":")
        if method not in METHODS or mode not in VARIANCE_MODES:
            raise ConfigError(f"variance_mode: cannot read {item.strip()!r}")
        pairs.append((method, mode))
    return tuple(pairs)


def parse_assignments(items: dict) -> dict:
    out = {}
    for key, raw in items.items():
        kind = SCENARIO_KEYS.get(key)
        if kind is None:
            raise ConfigError(f"unknown configuration key {key!r}")
        try:
            if kind is bool:
                out[key] = _parse_bool(key, raw)
            elif kind == "methods":
                out["methods"] = _parse_methods(raw)
            elif kind == "variance":
                out["variance"] = _parse_variance(raw)
            else:
                out[key] = kind(raw)
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return out


def read_scenario_file(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        text = Path(path).read_text(encoding="utf-8")
        parser.read_string("[scenario]\n" + text)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration file {path}: {exc}") from None
    return dict(parser["scenario"])


def scenario_from_sources(path, overrides) -> ScenarioConfig:
    items = read_scenario_file(path) if path else {}
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        items[key.strip()] = value.strip()
    return ScenarioConfig(**parse_assignments(items))


# ---------------------------------------------------------------------------
# manifests


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def versions() -> dict:
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"ivdr": own, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pandas": pd.__version__}


def build_manifest(command: str, config: dict, inputs: dict, started: float) -> dict:
    # the digest covers what determines the outputs, not when they were made
    core = {"command": command, "config": config, "inputs": inputs}
    digest = hashlib.sha256(json.dumps(core, sort_keys=True).encode()).hexdigest()
    return {**core, "versions": versions(), "seed": config.get("seed"),
            "wall_clock": {"started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
                           "elapsed_seconds": round(time.time() - started, 3)},
            "digest": digest}


def write_manifest(path: Path, manifest: dict) -> None:
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_csv(frame: pd.DataFrame, path: Path, digest: str) -> None:
    frame = frame.copy()
    frame["manifest_digest"] = digest
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, encoding="utf-8", lineterminator="\n")


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    started = time.time()
    cfg = scenario_from_sources(args.config, args.set)
    if cfg.n > LARGE_N and not args.large:
        raise ConfigError(f"n={cfg.n} exceeds {LARGE_N}; pass --large to run it")
    workers = worker_count()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log.info("simulating %d replicates of n=%d with %d worker(s)", cfg.reps, cfg.n, workers)
    results = run_scenario(cfg, workers=workers)
    summary = summarize(results)
    for col in reversed(SCENARIO_COLUMNS):
        summary.insert(0, col, getattr(cfg, col))

    resolved = cfg.to_dict()
    inputs = {Path(args.config).name: file_digest(args.config)} if args.config else {}
    manifest = build_manifest("simulate", resolved, inputs, started)
    write_csv(results, out / "replicates.csv", manifest["digest"])
    write_csv(summary, out / "summary.csv", manifest["digest"])
    write_manifest(out / "manifest.json", manifest)
    failed = int((~results["ok"]).sum())
    if failed:
        log.warning("%d replicate-method fits failed; see n_failed in summary.csv", failed)
    return EXIT_OK


def _estimate_methods(method: str, sl: str) -> list[str]:
    if method == "all":
        return list(METHODS)
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    if sl == "on" and method in ("ivg", "tmle"):
        return [method + "_sl"]
    return [method]


def _jsonable(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return value


def cmd_estimate(args) -> int:
    started = time.time()
    methods = _estimate_methods(args.method, args.sl)
    ci = CiConfig(level=args.level, bootstrap_B=args.bootstrap_B, bootstrap_seed=args.seed,
                  variance_mode=args.variance, cv_folds=args.folds)
    try:
        ds = read_csv(args.data, args.modifier)
    except FileNotFoundError:
        raise ConfigError(f"cannot read {args.data}") from None
    except IVDRError as exc:
        # anything wrong with the file itself is an input problem
        raise InputError(f"{type(exc).__name__}: {exc}") from exc
    from .nuisance import default_sl_configs
    sl = default_sl_configs(args.folds, args.seed)
    rows = []
    for m in methods:
        log.info("estimating %s", m)
        est = estimate(ds, m, ci, sl)
        diag = {k: _jsonable(v) for k, v in est.diagnostics.items()}
        diag["variance_mode"] = est.variance_mode
        rows.append({"method": m, "psi_c": est.psi_c, "se_c": est.se_c,
                     "ci_c_lo": est.ci_c[0], "ci_c_hi": est.ci_c[1],
                     "psi_v": est.psi_v, "se_v": est.se_v,
                     "ci_v_lo": est.ci_v[0], "ci_v_hi": est.ci_v[1],
                     "diagnostics": json.dumps(diag, sort_keys=True, separators=(",", ":"))})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    config = {"modifier": args.modifier, "methods": methods, "variance": args.variance,
              "level": args.level, "bootstrap_B": args.bootstrap_B, "seed": args.seed,
              "folds": args.folds}
    manifest = build_manifest("estimate", config, {Path(args.data).name: file_digest(args.data)}, started)
    write_csv(pd.DataFrame(rows, columns=ESTIMATE_COLUMNS), out, manifest["digest"])
    write_manifest(out.with_name(out.name + ".manifest.json"), manifest)
    return EXIT_OK


def _read_summary(path) -> pd.DataFrame:
    try:
        df = pd.read_csv(path)
    except FileNotFoundError:
        raise ConfigError(f"cannot read {path}") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise ConfigError(f"malformed summary {path}: {exc}") from None
    missing = [c for c in SUMMARY_REQUIRED if c not in df.columns]
    if missing:
        raise ConfigError(f"summary lacks column(s): {', '.join(missing)}")
    if df.empty:
        raise ConfigError("summary has no rows")
    for c in SUMMARY_REQUIRED[2:]:
        try:
            df[c] = pd.to_numeric(df[c], errors="raise")
        except (ValueError, TypeError):
            raise ConfigError(f"summary column {c!r} is not numeric") from None
    return df


def cmd_report(args) -> int:
    started = time.time()
    df = _read_summary(args.summary)
    keys = [c for c in SCENARIO_COLUMNS if c in df.columns] + ["method", "parameter"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = build_manifest("report", {}, {Path(args.summary).name: file_digest(args.summary)}, started)

    bias = df[keys + ["mean_bias", "mc_error"]].copy()
    bias["lower"] = bias["mean_bias"] - 1.96 * bias["mc_error"]
    bias["upper"] = bias["mean_bias"] + 1.96 * bias["mc_error"]
    coverage = df[keys + ["coverage"]].copy()
    coverage["reference_low"] = 0.925
    coverage["reference_high"] = 0.975
    rmse = df[keys + ["rmse"]].copy()

    for name, frame in (("bias", bias), ("coverage", coverage), ("rmse", rmse)):
        write_csv(frame, out / f"{name}.csv", manifest["digest"])
    write_manifest(out / "report_manifest.json", manifest)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ivdr", description="Doubly robust IV estimation of a "
                                "treatment effect that varies linearly in one modifier.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run one Monte Carlo scenario")
    s.add_argument("config", nargs="?", help="key = value scenario file (optional)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    s.add_argument("--large", action="store_true", help=f"allow n > {LARGE_N}")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("estimate", help="estimate the effect on a CSV file")
    e.add_argument("data", help="CSV with columns y, z, a and covariates")
    e.add_argument("--modifier", required=True, help="covariate column acting as V")
    e.add_argument("--method", default="all", help=f"one of {', '.join(METHODS)} or all")
    e.add_argument("--variance", choices=VARIANCE_MODES, default=None,
                   help="variance estimator (default: per method)")
    e.add_argument("--sl", choices=("on", "off"), default="off",
                   help="use Super Learner nuisances for ivg/tmle")
    e.add_argument("--bootstrap-B", dest="bootstrap_B", type=int, default=1999)
    e.add_argument("--level", type=float, default=0.95)
    e.add_argument("--folds", type=int, default=10, help="cross-validation folds")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True, help="estimates CSV path")
    e.set_defaults(func=cmd_estimate)

    r = sub.add_parser("report", help="turn a summary CSV into plot-data CSVs")
    r.add_argument("summary")
    r.add_argument("--out", required=True, help="output directory")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"ivdr: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except EstimationError as exc:
        print(f"ivdr: estimation failed ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_DEGENERATE


if __name__ == "__main__":
    sys.exit(main())
