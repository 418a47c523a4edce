"""Command-line interface: ``steerkit run | verify | gradcheck``.

Exit codes: 0 success, 1 failed check, 2 invalid input, 3 non-finite numbers.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, config as cfgmod, descent, verify
from .adjoint import KnnField
from .ensemble import rollout, sample_initial
from .jets import NonFiniteError

SCHEMA_VERSION = 1
GRADCHECK_TOL = 1e-3

EXIT_OK, EXIT_FAIL, EXIT_INVALID, EXIT_NONFINITE = 0, 1, 2, 3


# -- deterministic text output --------------------------------------------------

def _num(x):
    x = float(x)
    if not math.isfinite(x):
        return json.dumps(x)
    return format(x, ".17g")


def dumps(obj):
    """Compact JSON with every float written to 17 significant digits."""
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(str(k))}:{dumps(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(dumps(v) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)) or obj is None:
        return json.dumps(bool(obj) if obj is not None else None)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    return json.dumps(obj)


def iteration_record(rec):
    residuals = [{"t": t, "name": "stationarity", "value": v} for t, v in enumerate(rec.stationarity)]
    residuals += [{"t": t, "name": "recurrence", "value": v}
                  for t, v in enumerate(rec.recurrence, start=1)]
    return {"schema_version": SCHEMA_VERSION, "k": rec.k, "objective": rec.objective,
            "residuals": residuals}


def write_csv(path, header, columns):
    cols = [np.ravel(np.asarray(c)) for c in columns]
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in zip(*cols):
            fh.write(",".join(str(int(v)) if isinstance(v, np.integer) else _num(v) for v in row) + "\n")


def write_samples(out, k, ens, max_rows):
    rows = min(max_rows, ens.size)
    n = ens.states.shape[2]
    header = ["sample_id"] + [f"x{j + 1}" for j in range(n)]
    for t in range(ens.states.shape[0]):
        x = ens.states[t, :rows]
        write_csv(out / f"samples_k{k}_t{t}.csv", header, [np.arange(rows)] + [x[:, j] for j in range(n)])


def write_policy(out, k, pol, mesh):
    pts = mesh.points()
    header = [f"x{j + 1}" for j in range(len(pts))]
    cols = list(pts)
    for t in range(pol.horizon):
        u = pol.eval(t, pts)
        header += [f"t{t}_u{j + 1}" for j in range(len(u))]
        cols += [np.broadcast_to(ui, pts[0].shape) for ui in u]
    write_csv(out / f"policy_k{k}.csv", header, cols)


# -- subcommands ----------------------------------------------------------------

def cmd_run(args):
    try:
        file_cfg = cfgmod.load(args.config)
        run_cfg, mesh = cfgmod.build(file_cfg)
    except cfgmod.ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out_cfg = file_cfg.output
    out = Path(args.out or out_cfg.dir)
    out.mkdir(parents=True, exist_ok=True)
    K = run_cfg.iters
    sample_ks = set(range(K + 1) if out_cfg.sample_iterations is None else out_cfg.sample_iterations)
    policy_ks = set((0, K) if out_cfg.policy_iterations is None else out_cfg.policy_iterations)

    with open(out / "log.jsonl", "w") as log_fh, open(out / "timing.jsonl", "w") as time_fh:
        def on_iteration(rec, pol, ens):
            log_fh.write(dumps(iteration_record(rec)) + "\n")
            log_fh.flush()
            time_fh.write(dumps({"k": rec.k, "wall_ms": round(rec.wall_ms, 3)}) + "\n")
            if out_cfg.emit_samples and rec.k in sample_ks:
                write_samples(out, rec.k, ens, out_cfg.max_sample_rows)
            if mesh is not None and rec.k in policy_ks:
                write_policy(out, rec.k, pol, mesh)
            if not args.quiet:
                print(f"k={rec.k} objective={rec.objective:.6g}", file=sys.stderr)

        try:
            descent.run(run_cfg, on_iteration)
        except NonFiniteError as exc:
            print(f"numerical failure: {exc}", file=sys.stderr)
            return EXIT_NONFINITE
    return EXIT_OK


def cmd_verify(args):
    if args.list:
        print("\n".join(verify.SUITES))
        return EXIT_OK
    try:
        results = verify.run_suites(args.suite)
    except KeyError as exc:
        print(exc.args[0], file=sys.stderr)
        return EXIT_INVALID
    passed = all(r["passed"] for r in results)
    print(json.dumps({"passed": passed, "suites": results}, indent=2))
    return EXIT_OK if passed else EXIT_FAIL


def _eps_list(text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not vals or any(not 0 < v <= 1 for v in vals):
        raise argparse.ArgumentTypeError("eps values must lie in (0, 1]")
    return tuple(vals)


def cmd_gradcheck(args):
    if args.points < 1:
        print("invalid argument: --points must be a positive integer", file=sys.stderr)
        return EXIT_INVALID
    try:
        run_cfg, _ = cfgmod.build(cfgmod.load(args.config))
    except cfgmod.ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    sch, pol, target = run_cfg.schedule, run_cfg.policy0, run_cfg.target
    try:
        x0 = sample_initial(run_cfg.initial_law, args.points, descent.derive_iteration_seed(run_cfg.seed, 0))
        field = run_cfg.resolve_field()
        if isinstance(field, KnnField):
            field = field.fit(rollout(sch, pol, x0, target))
        report = verify.gradcheck(sch, pol, field, target, x0, directions=args.directions,
                                  eps=args.eps, seed=args.seed,
                                  corrupt_input_jacobian=args.scale_input_jacobian)
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except ValueError as exc:
        print(f"invalid argument: {exc}", file=sys.stderr)
        return EXIT_INVALID
    ok = report["max_rel_error"] <= GRADCHECK_TOL
    summary = {"passed": ok, "tolerance": GRADCHECK_TOL, "points": args.points,
               "max_rel_error": report["max_rel_error"], "worst": report["worst"]}
    print(json.dumps(summary, indent=2))
    if not ok:
        w = report["worst"]
        print(f"gradient check failed at step tau={w['tau']} direction {w['direction']}: "
              f"formula {w['formula']:.6g} vs finite difference {w['finite_difference']:.6g}",
              file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


def build_parser():
    parser = argparse.ArgumentParser(prog="steerkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run projected synthetic-gradient descent from a config file")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (overrides output.dir)")
    p.add_argument("-q", "--quiet", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="run the built-in oracle suites")
    p.add_argument("--suite", action="append", help="run only this suite (repeatable)")
    p.add_argument("--list", action="store_true", help="list suite names")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gradcheck", help="compare the synthetic gradient with finite differences")
    p.add_argument("config")
    p.add_argument("--points", type=int, default=50, help="number of sampled initial states")
    p.add_argument("--eps", type=_eps_list, default=(1e-2, 5e-3, 2.5e-3),
                   help="comma-separated finite-difference steps")
    p.add_argument("--directions", type=int, default=3, help="random directions per step")
    p.add_argument("--seed", type=int, default=0, help="seed for the random directions")
    p.add_argument("--scale-input-jacobian", type=float, default=None, metavar="FACTOR",
                   help="diagnostic: scale df/du inside the gradient formula (negative control)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
