"""``aploc`` command line: gain tables, simulated data, localization and benchmarks.

Exit codes: 0 success, 1 numerical failure, 2 invalid configuration or
geometry, 3 I/O or file-format error.  Human-readable results go to
standard output; logs go to standard error.
"""

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import svg
from .bench import ExperimentPlan, Geometry, export_results, make_trial_sources, match_sources, run_plan
from .errors import AplocError, FormatError
from .forward import (SensorArray, build_spherical_grid, default_sensor_array, load_gain_table,
                      precompute_gain, save_gain_table)
from .linalg import covariance
from .localizers import Method, localize
from .simulate import correlation, load_dataset, make_waveforms, save_dataset, synthesize

log = logging.getLogger("aploc")

EXIT_NUMERIC = 1
EXIT_CONFIG = 2
EXIT_IO = 3

_NUM = {"type": "number"}
_SNR = {"anyOf": [{"type": "number"}, {"type": "null"}]}
PLAN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["methods"],
    "properties": {
        "methods": {
            "type": "array", "minItems": 1,
            "items": {"anyOf": [
                {"type": "string"},
                {"type": "object", "additionalProperties": False, "required": ["kind"],
                 "properties": {"kind": {"type": "string"},
                                "orientation": {"enum": ["fixed", "free"]}}},
            ]},
        },
        "snrGridDb": {"type": "array", "minItems": 1, "items": _SNR},
        "rhoGrid": {"type": "array", "minItems": 1,
                    "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "QGrid": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1}},
        "trials": {"type": "integer", "minimum": 1},
        "N": {"type": "integer", "minimum": 1},
        "masterSeed": {"type": "integer", "minimum": 0},
        "subspaceTruncation": {"anyOf": [{"type": "integer", "minimum": 1}, {"type": "null"}]},
        "maxSweeps": {"type": "integer", "minimum": 1},
        "geometry": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "nSensors": {"type": "integer", "minimum": 4},
                "sensorRadiusMm": _NUM,
                "gridRadiusMm": _NUM,
                "resolutionMm": _NUM,
                "minSeparationMm": {"type": "number", "minimum": 0},
                "minSourceRadiusMm": {"type": "number", "minimum": 0},
                "gainPath": {"anyOf": [{"type": "string"}, {"type": "null"}]},
            },
        },
    },
}


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def resolve_seed(flag, plan_value=0):
    """Seed precedence: command-line flag, then ``AP_SEED``, then the plan/default."""
    if flag is not None:
        return flag
    env = os.environ.get("AP_SEED")
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise CliError(f"AP_SEED must be an integer, got {env!r}", EXIT_CONFIG) from None
    return plan_value


def _read_sensors(source):
    if source in ("default", "102"):
        return default_sensor_array()
    try:
        arr = np.loadtxt(source, ndmin=2)
    except OSError as exc:
        raise CliError(f"cannot read sensor file {source}: {exc}", EXIT_IO) from exc
    except ValueError as exc:
        raise CliError(f"malformed sensor file {source}: {exc}", EXIT_CONFIG) from exc
    if arr.shape[1] != 6:
        raise CliError(f"sensor file {source} needs 6 columns (x y z nx ny nz, mm)", EXIT_CONFIG)
    ori = arr[:, 3:] / np.linalg.norm(arr[:, 3:], axis=1, keepdims=True)
    return SensorArray(arr[:, :3] / 1000.0, ori)


def _load_gain(path):
    try:
        return load_gain_table(path)
    except OSError as exc:
        raise CliError(f"cannot read gain table {path}: {exc}", EXIT_IO) from exc


def cmd_gen_gain(args):
    if not args.radius > 0 or not args.resolution > 0:
        raise CliError("radius and resolution must be positive", EXIT_CONFIG)
    sensors = _read_sensors(args.sensors)
    grid = build_spherical_grid(args.radius / 1000.0, args.resolution / 1000.0)
    space = precompute_gain(grid, sensors)
    try:
        save_gain_table(space, args.out)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}", EXIT_IO) from exc
    print(f"points {space.size}")
    print(f"sensors {space.n_sensors}")
    return 0


def cmd_simulate(args):
    space = _load_gain(args.gain)
    seed = resolve_seed(args.seed)
    if args.q < 1 or args.n < 1 or not 0.0 <= args.rho <= 1.0:
        raise CliError("need q >= 1, n >= 1 and 0 <= rho <= 1", EXIT_CONFIG)
    snr = None if math.isinf(args.snr) else args.snr
    try:
        dips = make_trial_sources(space, args.q, seed, Geometry())
    except AplocError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    ds = synthesize(dips, make_waveforms(args.q, args.n, args.rho, seed), space, snr, seed)
    try:
        save_dataset(ds, args.out)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}", EXIT_IO) from exc
    if snr is None:
        print("realized SNR inf dB (noiseless)")
    else:
        ratio = np.linalg.norm(ds.Y - ds.noise) / np.linalg.norm(ds.noise)
        print(f"realized SNR {ds.realized_snr_db:.12g} dB (ratio {ratio / 10 ** (snr / 20):.12g} of target)")
    S = [d.amplitude for d in ds.truth]
    for i in range(len(S)):
        for j in range(i + 1, len(S)):
            print(f"rho[{i},{j}] = {correlation(S[i], S[j]):.12g}")
    for i, d in enumerate(dips):
        print(f"true source {i}: position_mm {_mm(d.position)} orientation {_vec(d.orientation)}")
    return 0


def _mm(p):
    return " ".join(f"{1000.0 * v:.3f}" for v in p)


def _vec(v):
    return " ".join(f"{x:.6f}" for x in v)


def cmd_localize(args):
    space = _load_gain(args.gain)
    try:
        ds = load_dataset(args.data)
    except OSError as exc:
        raise CliError(f"cannot read dataset {args.data}: {exc}", EXIT_IO) from exc
    if ds.Y.shape[0] != space.n_sensors:
        raise CliError(f"dataset has {ds.Y.shape[0]} channels, gain table {space.n_sensors}",
                       EXIT_CONFIG)
    Q = args.q if args.q is not None else len(ds.truth)
    if Q < 1:
        raise CliError("--q is required when the dataset has no truth block", EXIT_CONFIG)
    orientations = None
    if args.orientation == "fixed":
        if len(ds.truth) != Q:
            raise CliError("fixed orientation needs a truth block with Q dipoles", EXIT_CONFIG)
        orientations = np.array([d.orientation for d in ds.truth])
    res = localize(args.method, covariance(ds.Y), space, Q, orientations, max_sweeps=args.max_sweeps)
    out = {
        "method": res.method,
        "orientation": args.orientation,
        "Q": Q,
        "indices": res.indices.tolist(),
        "positionsMm": (1000.0 * res.positions).tolist(),
        "orientations": res.orientations.tolist(),
        "sweeps": res.sweeps,
        "converged": bool(res.converged),
        "objectiveTrace": res.objective_trace.tolist(),
        "flags": sorted(res.flags),
    }
    for i, (p, o) in enumerate(zip(res.positions, res.orientations)):
        print(f"source {i}: position_mm {_mm(p)} orientation {_vec(o)}")
    print(f"sweeps {res.sweeps} converged {str(res.converged).lower()}")
    print("objective " + " ".join(f"{v:.12g}" for v in res.objective_trace))
    if res.flags:
        print("flags " + " ".join(sorted(res.flags)))
    if ds.truth:
        _, d = match_sources(res.positions, [t.position for t in ds.truth])
        out["errorsMm"] = (1000.0 * d).tolist()
        print("error_mm " + " ".join(f"{1000.0 * v:.3f}" for v in d))
    path = args.out or str(Path(args.data).with_suffix(".result.json"))
    try:
        Path(path).write_text(json.dumps(out, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}", EXIT_IO) from exc
    print(f"result {path}")
    return 0


def load_plan(path):
    """Parse and schema-check a JSON plan file."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read plan {path}: {exc}", EXIT_IO) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"plan {path} is not valid JSON: {exc}", EXIT_CONFIG) from exc
    errors = sorted(jsonschema.Draft7Validator(PLAN_SCHEMA).iter_errors(doc), key=lambda e: list(e.path))
    if errors:
        lines = [f"  {'/'.join(map(str, e.path)) or '<root>'}: {e.message}" for e in errors]
        raise CliError("plan schema violations:\n" + "\n".join(lines), EXIT_CONFIG)
    try:
        return ExperimentPlan.from_dict(doc)
    except (ValueError, TypeError) as exc:
        raise CliError(f"invalid plan: {exc}", EXIT_CONFIG) from exc


def cmd_bench(args):
    plan = load_plan(args.plan)
    seed = resolve_seed(args.seed, plan.masterSeed)
    d = plan.to_dict()
    d["masterSeed"] = seed
    plan = ExperimentPlan.from_dict(d)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {out}: {exc}", EXIT_IO) from exc
    log.info("running %d methods x %d cells x %d trials", len(plan.methods),
             len(plan.snrGridDb) * len(plan.rhoGrid) * len(plan.QGrid), plan.trials)
    records, table = run_plan(plan, threads=args.threads)
    failed = sum(r.failed for r in records)
    if failed:
        log.warning("%d of %d trials failed", failed, len(records))
    try:
        export_results(table, out / "results.csv", "csv")
        export_results(table, out / "results.json", "json")
        (out / "error_vs_snr.svg").write_text(svg.error_chart(table, "snrDb"), encoding="utf-8")
        (out / "error_vs_rho.svg").write_text(svg.error_chart(table, "rho"), encoding="utf-8")
    except OSError as exc:
        raise CliError(str(exc), EXIT_IO) from exc
    print(f"rows {len(table)}")
    print(f"results {out / 'results.csv'}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="aploc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-gain", help="build a spherical grid and its gain table")
    g.add_argument("--sensors", default="default",
                   help="'default' (102-sensor cap) or a text file with rows x y z nx ny nz (mm)")
    g.add_argument("--radius", type=float, required=True, help="grid radius in mm")
    g.add_argument("--resolution", type=float, required=True, help="grid spacing in mm")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_gain)

    s = sub.add_parser("simulate", help="simulate a dataset on a gain table")
    s.add_argument("--gain", required=True)
    s.add_argument("--q", type=int, required=True)
    s.add_argument("--rho", type=float, required=True)
    s.add_argument("--snr", type=float, required=True, help="dB; 'inf' for noiseless")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    loc = sub.add_parser("localize", help="localize sources in a dataset")
    loc.add_argument("--gain", required=True)
    loc.add_argument("--data", required=True)
    loc.add_argument("--method", required=True, choices=[m.value for m in Method])
    loc.add_argument("--q", type=int, default=None)
    loc.add_argument("--orientation", choices=["fixed", "free"], default="free")
    loc.add_argument("--max-sweeps", type=int, default=20)
    loc.add_argument("--out", default=None, help="JSON result path (default: <data>.result.json)")
    loc.set_defaults(func=cmd_localize)

    b = sub.add_parser("bench", help="run a Monte-Carlo plan")
    b.add_argument("--plan", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--seed", type=int, default=None)
    b.set_defaults(func=cmd_bench)
    return p


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time (it may be swapped after setup)."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value):
        pass


def main(argv=None):
    args = build_parser().parse_args(argv)
    handler = _StderrHandler()
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.basicConfig(handlers=[handler], level=logging.WARNING - 10 * min(args.verbose, 2), force=True)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"aploc: {exc}", file=sys.stderr)
        return exc.code
    except (FormatError, OSError) as exc:
        print(f"aploc: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"aploc: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AplocError as exc:
        print(f"aploc: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
