"""Command-line entry point.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure
during simulation, 3 validation failure (``infer-validate``/``calibrate``
tolerances missed).
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import tomli

from . import __version__
from .experiments import (
    ConfigError,
    ExperimentConfig,
    calibrate,
    compare_schemes,
    curve_to_json,
    emit_csv,
    load_calibration,
    run_drop,
    sweep_load,
    validate_inference,
    write_calibration,
)
from .mitigation import SCHEMES

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2, 3
WORKERS_ENV = "COEXSIM_WORKERS"
SUBCOMMANDS = ("simulate", "sweep", "mitigation-compare", "infer-validate", "calibrate")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="coexsim", description="LTE/Wi-Fi coexistence and interference-mitigation simulator")
    p.add_argument("--version", action="version", version=f"coexsim {__version__}")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="TOML config file (defaults apply when omitted)")
        s.add_argument("--seed", type=int, help="override the master seed")
        s.add_argument("--drops", type=int, help="override the number of drops")
        s.add_argument("--output", help="output path (stdout when omitted)")
        s.add_argument("--json", help="also write a JSON mirror to this path")
        s.add_argument("--workers", type=int, default=None,
                       help=f"parallel worker processes (default ${WORKERS_ENV} or 1)")
        s.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
        if name == "simulate":
            s.add_argument("--drop", type=int, default=0, help="drop index")
            s.add_argument("--load", type=float, default=None, help="load for swept tiers")
            s.add_argument("--trace", help="write per-subframe JSON-lines trace here")
        if name == "mitigation-compare":
            s.add_argument("--schemes", default=",".join(SCHEMES), help="comma-separated scheme list")
    return p


# -- config loading ------------------------------------------------------------


def locate_key(text: str, key: str) -> int | None:
    """1-based line of a dotted config key such as ``mac.txop`` or ``tiers[1].load``."""
    lines = text.splitlines()
    parts = re.findall(r"[^.\[\]]+|\[\d+\]", key)
    table: list[str] = []
    start, end = 0, len(lines)
    leaf = None
    i = 0
    while i < len(parts):
        part = parts[i]
        nxt = parts[i + 1] if i + 1 < len(parts) else None
        if nxt is not None and nxt.startswith("["):
            # array of tables: the n-th [[name]] header
            idx = int(nxt[1:-1])
            table.append(part)
            pat = re.compile(r"^\s*\[\[\s*" + re.escape(".".join(table)) + r"\s*\]\]")
            hits = [j for j in range(start, end) if pat.match(lines[j])]
            if idx >= len(hits):
                return _line_of(lines, part, 0, len(lines))
            start = hits[idx] + 1
            end = _next_header(lines, start)
            i += 2
            continue
        if nxt is not None:
            table.append(part)
            pat = re.compile(r"^\s*\[\s*" + re.escape(".".join(table)) + r"\s*\]")
            hits = [j for j in range(len(lines)) if pat.match(lines[j])]
            if hits:
                start = hits[0] + 1
                end = _next_header(lines, start)
            i += 1
            continue
        leaf = part
        i += 1
    if leaf is None:
        return start if start else None
    found = _line_of(lines, leaf, start, end)
    if found is None and table:
        return start if start else None
    return found


def _next_header(lines, start):
    for j in range(start, len(lines)):
        if re.match(r"^\s*\[", lines[j]):
            return j
    return len(lines)


def _line_of(lines, name, start, end):
    pat = re.compile(r"^\s*" + re.escape(name) + r"\s*=")
    for j in range(start, end):
        if pat.match(lines[j]):
            return j + 1
    return None


def load_config(path: str | None) -> tuple[ExperimentConfig, str]:
    """Parse and validate; errors carry ``file:line:`` prefixes."""
    if path is None:
        return ExperimentConfig(), ""
    p = Path(path)
    if not p.is_file():
        raise ConfigError("", f"{path}: config file not found")
    text = p.read_text()
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        m = re.search(r"line (\d+)", str(e))
        where = f"{path}:{m.group(1)}" if m else path
        raise ConfigError("", f"{where}: invalid TOML: {e}") from None
    try:
        return ExperimentConfig.from_dict(data), text
    except ConfigError as e:
        line = locate_key(text, e.key)
        where = f"{path}:{line}" if line else path
        raise ConfigError(e.key, f"{where}: {e.key}: {e.message}") from None


def _resolve(args) -> ExperimentConfig:
    config, _ = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.drops is not None:
        changes["drops"] = args.drops
    if changes:
        try:
            config = replace(config, **changes)
        except ConfigError as e:
            raise ConfigError(e.key, f"--{e.key}: {e.message}") from None
    return config


def _workers(args) -> int:
    if args.workers is not None:
        n = args.workers
    else:
        raw = os.environ.get(WORKERS_ENV, "1")
        try:
            n = int(raw)
        except ValueError:
            raise ConfigError("workers", f"${WORKERS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise ConfigError("workers", "must be >= 1")
    return n


def _write(text: str, path: str | None) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# -- subcommands -----------------------------------------------------------------


def _simulate(config: ExperimentConfig, args) -> int:
    trace_fh = open(args.trace, "w") if args.trace else None
    try:
        sink = (lambda row: trace_fh.write(json.dumps(row) + "\n")) if trace_fh else None
        r = run_drop(config, args.drop, args.load, trace=sink)
    finally:
        if trace_fh:
            trace_fh.close()
    summary = {
        "drop": r.drop,
        "load": r.load,
        "scheme": r.scheme,
        "cells": r.cells,
        "capacity_mbps": {k: _num(v / 1e6) for k, v in r.capacity.items()},
        "delivered_mbps": {k: _num(v / 1e6) for k, v in r.delivered.items()},
        "deployment_sha256": r.digest,
    }
    text = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    _write(text, args.output)
    if args.json:
        Path(args.json).write_text(text)
    return EXIT_OK


def _num(x: float):
    return None if x != x else x


def _curve_out(curve, args) -> int:
    _write(emit_csv(curve), args.output)
    if args.json:
        Path(args.json).write_text(curve_to_json(curve) + "\n")
    return EXIT_OK


def _calibration_table(config: ExperimentConfig):
    path = config.inference.calibration_file
    if not path:
        return None
    try:
        return load_calibration(path)
    except (OSError, tomli.TOMLDecodeError, KeyError, TypeError, ValueError) as e:
        raise ConfigError("inference.calibration_file", f"cannot read {path}: {e}") from None


def _infer_validate(config: ExperimentConfig, args) -> int:
    report = validate_inference(config, _calibration_table(config))
    _write(report.to_csv(), args.output)
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n")
    if not report.passed:
        print("coexsim: inference validation failed tolerance", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def _calibrate(config: ExperimentConfig, args) -> int:
    table, report = calibrate(config)
    out = args.output or config.inference.calibration_file or "calibration.toml"
    write_calibration(table, out, config)
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n")
    if not report.passed:
        print("coexsim: calibrated estimator still misses tolerance", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def dispatch(args) -> int:
    config = _resolve(args)
    if args.print_config:
        _write(config.to_toml(), args.output)
        return EXIT_OK
    workers = _workers(args)
    if args.command == "simulate":
        return _simulate(config, args)
    if args.command == "sweep":
        return _curve_out(sweep_load(config, workers), args)
    if args.command == "mitigation-compare":
        schemes = [s.strip() for s in args.schemes.split(",") if s.strip()]
        bad = [s for s in schemes if s not in SCHEMES]
        if bad or len(schemes) < 2:
            raise ConfigError("schemes", f"need >= 2 of {', '.join(SCHEMES)}; got {args.schemes!r}")
        return _curve_out(compare_schemes(config, schemes, workers), args)
    if args.command == "infer-validate":
        return _infer_validate(config, args)
    if args.command == "calibrate":
        return _calibrate(config, args)
    raise UsageError(f"unknown subcommand {args.command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return dispatch(args)
    except ConfigError as e:
        print(f"coexsim: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - any simulation failure maps to exit 2
        print(f"coexsim: runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
