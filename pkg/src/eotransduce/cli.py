"""Command-line entry point: ``eotransduce <command> [options]``.

Exit codes: 0 ok, 2 config error, 3 numerical failure, 4 degenerate input.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import math
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, config, pipeline
from .errors import CalibrationError, ConfigError, DomainError, FitError, IntegrationError, UndefinedSnrError
from .tomography import WignerGrid

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_DEGENERATE = 0, 2, 3, 4


def jsonable(obj):
    """Plain-Python copy of ``obj``; non-finite floats become None."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    return obj


def dumps(obj) -> str:
    return json.dumps(jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_table(table, path_stem: Path, fmt: str) -> Path:
    if isinstance(table, WignerGrid):
        if fmt == "csv":
            path = path_stem.with_suffix(".csv")
            table.to_csv(path)
        else:
            path = path_stem.with_suffix(".json")
            x0, x1, y0, y1 = table.extent
            path.write_text(dumps({"extent": [x0, x1, y0, y1], "x": table.x, "y": table.y, "values": table.values}))
        return path
    if fmt == "csv":
        path = path_stem.with_suffix(".csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(table.columns)
            for row in table.rows:
                writer.writerow([_cell(v) for v in row])
    else:
        path = path_stem.with_suffix(".json")
        path.write_text(dumps({"columns": list(table.columns), "rows": table.as_records()}))
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eotransduce", description="Electro-optic transduction simulator.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in pipeline.COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", type=Path, default=None, help="TOML or JSON config (default: shipped config)")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads for Monte Carlo stages")
        p.add_argument("--format", choices=("csv", "json"), default="csv", help="table format")
    sub.add_parser("default-config", help="print the shipped default config")
    return parser


def run(args) -> int:
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    cfg = config.load(args.config, args.command)
    seed = cfg["run"]["seed"] if args.seed is None else args.seed
    if seed < 0 or seed >= 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer", "run.seed")
    if args.threads < 1:
        raise ConfigError("threads must be >= 1", "--threads")
    cfg["run"]["seed"] = seed
    result = pipeline.COMMANDS[args.command](cfg, seed, args.threads)

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for name, table in sorted(result.tables.items()):
        files.append(write_table(table, out / name, args.format).name)
    report = {
        "command": args.command,
        "seed": seed,
        "config": cfg,
        "result": result.report,
        "files": files,
    }
    (out / "report.json").write_text(dumps(report))
    provenance = {
        "tool": "eotransduce",
        "version": __version__,
        "command": args.command,
        "seed": seed,
        "config_path": None if args.config is None else str(args.config),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "started_utc": started,
        "finished_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    (out / "provenance.json").write_text(dumps(provenance))
    return result.exit_code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "default-config":
        sys.stdout.write(config.default_config_text())
        return EXIT_OK
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IntegrationError, CalibrationError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FitError, UndefinedSnrError, DomainError) as exc:
        print(f"degenerate input: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE


if __name__ == "__main__":
    sys.exit(main())
