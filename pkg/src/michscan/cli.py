"""michscan command line: simulate, predeploy, check, sweep.

JSON results go to stdout and a one-line summary to stderr. Exit codes are
0 (benign / success), 2 (violation detected) and 1 (any error).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import __version__
from .experiment import (
    PVALUE_COLUMNS,
    SimulationConfig,
    SweepConfig,
    default_simulation_config,
    default_sweep_config,
    run_sweep,
)
from .pipeline import DEFAULT_P_THRESHOLD, EPOCH, PredeployConfig, RuntimeConfig, TemplateBundle, predeploy, runtime_check
from .traces import load_traces, sidecar_path, store_traces

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VIOLATION = 2

EXTENSIONS = {"binary": ".mch", "csv": ".csv"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which would read as "violation"
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2) + "\n")


def _note(msg: str) -> None:
    print(msg, file=sys.stderr)


def _read_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON: {exc}") from exc


def cmd_simulate(args) -> int:
    obj = _read_json(args.config) if args.config else {}
    cfg = SimulationConfig.from_json(obj, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = cfg.generate()
    ext = EXTENSIONS[args.format]
    files = []
    for condition, ts in data.items():
        path = out / f"{condition}{ext}"
        store_traces(ts, path, args.format)
        streams = sorted({t.meta["stream"] for t in ts.traces})
        entry = {
            "path": path.name,
            "condition": condition,
            "n_traces": len(ts),
            "samples_per_trace": ts.common_length,
            "master_seed": cfg.master_seed,
            "stream": streams[0],
        }
        if args.format == "csv":
            entry["sidecar"] = sidecar_path(path).name
        files.append(entry)
    manifest = {
        "format": args.format,
        "master_seed": cfg.master_seed,
        "config": cfg.effective,
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _emit(manifest)
    _note(f"wrote {len(files)} trace sets to {out}")
    return EXIT_OK


def cmd_predeploy(args) -> int:
    ts = load_traces(args.traces, args.format)
    n = args.n_traces if args.n_traces is not None else len(ts)
    if n > len(ts):
        raise ValueError(f"--n-traces {n} exceeds the {len(ts)} traces in {args.traces}")
    cfg = PredeployConfig(
        n_traces=n,
        dc_exclusion_hz=args.dc_exclusion_hz,
        template_selection_seed=args.seed,
        layer_label=args.layer,
    )
    bundle = predeploy(
        ts[:n], cfg, test_input_id=args.test_input_id, device_id=args.device_id, created_at=args.created_at
    )
    bundle.save(args.bundle_out)
    summary = {
        "bundle": str(args.bundle_out),
        "target_frequency_hz": bundle.target_frequency_hz,
        "layer": bundle.layer_label,
        "template_length": len(bundle.golden_template),
        "similarity_values": len(bundle.similarity_sample),
    }
    _emit(summary)
    _note(
        f"bundle from {n} traces: target {bundle.target_frequency_hz:.1f} Hz, "
        f"{len(bundle.similarity_sample)} similarity values"
    )
    return EXIT_OK


def cmd_check(args) -> int:
    bundle = TemplateBundle.load(args.bundle)
    ts = load_traces(args.traces, args.format)
    if len(ts) < args.n_ra:
        raise ValueError(f"--n-ra {args.n_ra} but {args.traces} holds only {len(ts)} traces")
    cfg = RuntimeConfig(args.n_ra, args.pth, args.layer)
    for w in cfg.warnings:
        _note(f"warning: {w}")
    verdict = runtime_check(bundle, ts[: args.n_ra], cfg)
    _emit(verdict.to_json())
    status = "VIOLATION" if verdict.violation_detected else "benign"
    _note(f"{status}: p={verdict.p_value:.3g} (threshold {verdict.threshold:g})")
    return EXIT_VIOLATION if verdict.violation_detected else EXIT_OK


def cmd_sweep(args) -> int:
    obj = _read_json(args.config) if args.config else {}
    if args.trials is not None:
        obj["trials"] = args.trials
    cfg = SweepConfig.from_json(obj, args.seed)
    report = run_sweep(cfg)
    out = Path(args.out_report)
    out.write_text(json.dumps(report.to_json(), indent=2) + "\n")
    table = Path(args.table) if args.table else out.with_name(out.stem + ".pvalues.csv")
    with open(table, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=PVALUE_COLUMNS)
        writer.writeheader()
        for r in report.pvalue_rows:
            writer.writerow({**r, "p_value": repr(r["p_value"])})
    _emit(report.to_json())
    for r in report.rows:
        _note(f"{r['condition']:>20} n_ra={r['n_ra']:<3} {r['detections']}/{r['trials']}")
    return EXIT_OK


def cmd_default_config(args) -> int:
    _emit(default_sweep_config() if args.kind == "sweep" else default_simulation_config())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="michscan", description="Power-trace model integrity checking.")
    p.add_argument("--version", action="version", version=f"michscan {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a simulated dataset")
    s.add_argument("--config", help="simulation config JSON (defaults if omitted)")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int, help="master seed (overrides the config)")
    s.add_argument("--format", choices=sorted(EXTENSIONS), default="binary")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("predeploy", help="build a template bundle from benign traces")
    s.add_argument("traces")
    s.add_argument("--bundle-out", required=True)
    s.add_argument("--format", choices=sorted(EXTENSIONS), default="binary")
    s.add_argument("--layer", help="marker label to analyse (default: last layer)")
    s.add_argument("--n-traces", type=int, help="use the first N traces (default: all)")
    s.add_argument("--seed", type=int, default=0, help="golden-template selection seed")
    s.add_argument("--dc-exclusion-hz", type=float)
    s.add_argument("--test-input-id", default="")
    s.add_argument("--device-id", default="")
    s.add_argument("--created-at", default=EPOCH, help="timestamp recorded in the bundle")
    s.set_defaults(func=cmd_predeploy)

    s = sub.add_parser("check", help="runtime integrity check against a bundle")
    s.add_argument("bundle")
    s.add_argument("traces", help="runtime traces; the first --n-ra are used")
    s.add_argument("--pth", type=float, default=DEFAULT_P_THRESHOLD)
    s.add_argument("--n-ra", type=int, default=5)
    s.add_argument("--layer")
    s.add_argument("--format", choices=sorted(EXTENSIONS), default="binary")
    s.set_defaults(func=cmd_check)

    s = sub.add_parser("sweep", help="detection-rate sweep over attacks and n_ra")
    s.add_argument("--config", help="sweep config JSON (defaults if omitted)")
    s.add_argument("--out-report", required=True)
    s.add_argument("--table", help="per-layer P-value CSV (default: <report>.pvalues.csv)")
    s.add_argument("--trials", type=int, help="override the config trial count")
    s.add_argument("--seed", type=int, help="master seed (overrides the config)")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("default-config", help="print a default config")
    s.add_argument("kind", choices=["simulate", "sweep"])
    s.set_defaults(func=cmd_default_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        # --help and --version
        return EXIT_OK if not exc.code else EXIT_ERROR
    except (UsageError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        _note(f"error: {msg}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
