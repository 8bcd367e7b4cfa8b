"""Experiment runner: strict INI configs in, CSV series + metadata out.

Usage:
    qcond --config run.ini [--seed N] [--out DIR] [--workers N]
          [--set SECTION.KEY=VALUE ...]
    qcond --list

Seed precedence: --seed flag, then the QCOND_SEED environment variable,
then [run] master_seed from the config, then a fixed default.  Every
run writes the fully resolved configuration, the seed actually used,
the package version, and the wall time into metadata.json next to the
CSVs, which is enough to reproduce the output byte for byte.

Exit codes: 0 success, 2 configuration error, 3 numerical abort,
4 output I/O failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .core import QcondError
from .experiments import EXPERIMENTS, run_experiment

DEFAULT_SEED = 20240601
ENV_SEED = "QCOND_SEED"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


class ConfigError(Exception):
    pass


def _floats_list(raw: str):
    return [float(tok) for tok in raw.replace(",", " ").split()]


def _boolean(raw: str):
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


# Section schemas: key -> (parser, default); REQUIRED means no default.
REQUIRED = object()

SCHEMA = {
    "experiment": {"name": (str.strip, REQUIRED)},
    "system": {
        "mass": (float, REQUIRED),
        "hbar": (float, 1.0),
        "potential_coeffs": (_floats_list, REQUIRED),
        "drive_amplitude": (float, 0.0),
        "drive_frequency": (float, 0.0),
    },
    "grid": {
        "x_min": (float, REQUIRED),
        "x_max": (float, REQUIRED),
        "n_points": (int, 128),
    },
    "measurement": {"k": (float, REQUIRED)},
    "run": {
        "dt": (float, REQUIRED),
        "horizon": (float, REQUIRED),
        "n_realizations": (int, 1),
        "master_seed": (int, DEFAULT_SEED),
        "sample_stride": (int, 10),
    },
    "isolated": {
        "x0": (float, 0.0),
        "p0": (float, 0.0),
        "sigma_x": (float, REQUIRED),
    },
    "conditioned": {
        "x0": (float, 0.0),
        "p0": (float, 0.0),
        "sigma_x": (float, REQUIRED),
    },
    "passivity": {
        "n_particles": (int, 512),
        "x0": (float, 0.0),
        "p0": (float, 0.0),
        "sigma_x": (float, REQUIRED),
        "sigma_p": (float, REQUIRED),
    },
    "cumulant-compare": {
        "x0": (float, 0.0),
        "p0": (float, 0.0),
        "sigma_x": (float, REQUIRED),
        "include_force_curvature": (_boolean, True),
    },
    "qct-scan": {
        "x0": (float, REQUIRED),
        "p0": (float, 0.0),
        "action": (float, 0.0),   # 0 = derive from the undriven orbit
        "threshold": (float, 10.0),
    },
    "lyapunov": {
        "x0": (float, 0.0),
        "p0": (float, 0.0),
        "sigma_x": (float, REQUIRED),
        "delta0": (float, REQUIRED),
        "renormalize": (_boolean, False),
        "renorm_threshold": (float, 0.0),
    },
    "cooling": {
        "x0": (float, 0.0),
        "p0": (float, 0.0),
        "sigma_x": (float, REQUIRED),
        "policies": (str.strip, "none,direct,estimator"),
        "direct_gain": (float, -1.0),
        "direct_smoothing": (float, 0.8),
        "estimator_gain": (float, 3.0),
        "u_max": (float, 5.0),
    },
}


def load_config(path, overrides=()):
    """Parse and validate; unknown sections or keys are fatal."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path!r}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not SECTION.KEY=VALUE")
        dotted, value = item.split("=", 1)
        if "." not in dotted:
            raise ConfigError(f"override {item!r} is not SECTION.KEY=VALUE")
        section, key = dotted.split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section.strip(), key.strip(), value.strip())

    if not parser.has_section("experiment"):
        raise ConfigError("missing [experiment] section")
    name = parser.get("experiment", "name", fallback=None)
    if name is None:
        raise ConfigError("missing experiment.name")
    name = name.strip()
    if name not in EXPERIMENTS:
        raise ConfigError(
            f"unknown experiment {name!r}; known: {', '.join(sorted(EXPERIMENTS))}"
        )
    _, _, required_sections = EXPERIMENTS[name]
    allowed_sections = {"experiment", *required_sections}

    for section in parser.sections():
        if section not in allowed_sections:
            raise ConfigError(f"unknown section [{section}] for experiment {name!r}")
        schema = SCHEMA[section]
        for key in parser[section]:
            if key not in schema:
                raise ConfigError(f"unknown key {section}.{key}")

    resolved = {"experiment": {"name": name}}
    for section in required_sections:
        schema = SCHEMA[section]
        out = {}
        for key, (convert, default) in schema.items():
            if parser.has_option(section, key):
                raw = parser.get(section, key)
                try:
                    out[key] = convert(raw)
                except ValueError as err:
                    raise ConfigError(f"bad value for {section}.{key}: {err}") from err
            elif default is REQUIRED:
                raise ConfigError(f"missing required key {section}.{key}")
            else:
                out[key] = default
        resolved[section] = out
    return name, resolved


def resolve_seed(args_seed, resolved):
    if args_seed is not None:
        return int(args_seed)
    env = os.environ.get(ENV_SEED)
    if env is not None:
        try:
            return int(env)
        except ValueError as err:
            raise ConfigError(f"{ENV_SEED} must be an integer, got {env!r}") from err
    return int(resolved.get("run", {}).get("master_seed", DEFAULT_SEED))


def _format(value: float) -> str:
    return f"{value:.17g}"


def write_outputs(result, outdir, name, resolved, seed, wall_time, workers):
    os.makedirs(outdir, exist_ok=True)
    written = []
    for series in result.series:
        path = os.path.join(outdir, series.name + ".csv")
        with open(path, "w", newline="") as fh:
            fh.write(",".join(series.columns) + "\r\n")
            for row in np.atleast_2d(series.rows):
                fh.write(",".join(_format(v) for v in row) + "\r\n")
        written.append(os.path.basename(path))
    meta = {
        "experiment": name,
        "seed": seed,
        "version": __version__,
        "wall_time_seconds": wall_time,
        "workers": workers,
        "resolved_config": resolved,
        "outputs": written,
        "result": result.metadata,
    }
    with open(os.path.join(outdir, "metadata.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def list_experiments() -> str:
    lines = ["available experiments:"]
    for name in sorted(EXPERIMENTS):
        _, blurb, sections = EXPERIMENTS[name]
        lines.append(f"  {name:17s} {blurb}")
        lines.append(f"  {'':17s} config sections: {', '.join(sections)}")
    return "\n".join(lines)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="qcond", description="measured-particle simulation experiments"
    )
    parser.add_argument("--config", help="INI experiment configuration")
    parser.add_argument("--seed", type=int, default=None, help="master seed override")
    parser.add_argument("--out", default="qcond-out", help="output directory")
    parser.add_argument("--workers", type=int, default=None,
                        help="worker processes (default: machine parallelism)")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    parser.add_argument("--list", action="store_true", help="list experiments and exit")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.list:
        print(list_experiments())
        return EXIT_OK
    if not args.config:
        print("error: --config is required (or --list)", file=sys.stderr)
        return EXIT_CONFIG
    try:
        name, resolved = load_config(args.config, args.set)
        seed = resolve_seed(args.seed, resolved)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG

    workers = args.workers if args.workers is not None else (os.cpu_count() or 1)
    start = time.perf_counter()
    try:
        result = run_experiment(name, resolved, seed, workers)
    except QcondError as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    wall = time.perf_counter() - start
    try:
        write_outputs(result, args.out, name, resolved, seed, wall, workers)
    except OSError as err:
        print(f"output error: {err}", file=sys.stderr)
        return EXIT_IO
    print(f"{name}: wrote {len(result.series)} series to {args.out} "
          f"(seed {seed}, {wall:.2f}s)")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
