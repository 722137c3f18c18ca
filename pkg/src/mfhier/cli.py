"""Command-line interface.

Subcommands: ``model check``, ``evolve``, ``meanfield``, ``errors``,
``expand``, ``study``, ``suite``.  Outputs are CSV/JSON files with
documented headers; the exit code is 0 iff every verdict passed.  The
MFHIER_THREADS environment variable overrides the study thread count
(flags beat config keys, which beat the environment).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import load_model_file, load_study_file
from .errors import MfhierError
from .expansion import build_table, table_csv
from .harness import run_invariant_suite, run_study, write_ledger, write_report
from .hierarchy import correlation_error_trajectory, error_family_csv
from .meanfield import solve_meanfield
from .nbody import (
    Trajectory,
    build_generator,
    evolve,
    evolve_symmetric,
    symmetric_product_state,
    write_diagnostics_csv,
    write_trajectory,
)
from .tensor_core import tensor_power


def _steps(args) -> int:
    return max(1, round(args.steps * args.t))


def _outdir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def cmd_model_check(args) -> int:
    try:
        model, initial = load_model_file(args.file)
    except MfhierError as exc:
        print(f"FAIL {exc}")
        return 1
    print(f"ok backend={model.backend} m={model.m} v_norm={model.v_norm:.6g} "
          f"hash={model.model_hash}")
    if initial is None:
        print("note: no [initial] table; evolve/meanfield/study commands will refuse this file")
    if args.full:
        ledger = run_invariant_suite(args.file, {"N": args.N, "t_final": 0.2})
        bad = [c for c in ledger if not c["passed"]]
        for c in ledger:
            mark = "pass" if c["passed"] else "FAIL"
            print(f"  [{mark}] {c['check']}: {c['value']:.3e} (<= {c['threshold']:.1e})")
        return 1 if bad else 0
    return 0


def _nbody_trajectory(model, initial, args) -> Trajectory:
    n = args.N
    steps = _steps(args)
    stride = args.store_stride or 1
    if model.backend == "kac" and (args.occupation or model.m**n > 4096):
        s0 = symmetric_product_state(initial, n)
        return evolve_symmetric(model, s0, args.t, steps, store_stride=stride)
    gen = build_generator(model, n)
    return evolve(gen, tensor_power(initial, n), args.t, steps, method=args.method,
                  store_stride=stride)


def _require_initial(initial, path):
    if initial is None:
        raise MfhierError(f"{path}: an [initial] table is required for this command")
    return initial


def cmd_evolve(args) -> int:
    model, initial = load_model_file(args.file)
    traj = _nbody_trajectory(model, _require_initial(initial, args.file), args)
    out = _outdir(args.out)
    write_trajectory(traj, os.path.join(out, "trajectory.txt"))
    write_diagnostics_csv(traj, os.path.join(out, "diagnostics.csv"))
    print(f"wrote {out}/trajectory.txt and diagnostics.csv ({len(traj)} nodes)")
    return 0


def cmd_meanfield(args) -> int:
    model, initial = load_model_file(args.file)
    traj = solve_meanfield(model, _require_initial(initial, args.file), args.t, _steps(args))
    out = _outdir(args.out)
    nt = Trajectory(traj.times, traj.states, {
        "backend": model.backend, "model_hash": model.model_hash, "N": 1, "sites": 1,
        "dt": traj.dt, "integrator": "rk4-meanfield",
    })
    write_trajectory(nt, os.path.join(out, "meanfield.txt"))
    write_diagnostics_csv(nt, os.path.join(out, "meanfield_diagnostics.csv"))
    print(f"wrote {out}/meanfield.txt ({len(traj)} nodes)")
    return 0


def cmd_errors(args) -> int:
    model, initial = load_model_file(args.file)
    initial = _require_initial(initial, args.file)
    steps = _steps(args)
    args.store_stride, args.method, args.occupation = 1, "auto", False
    traj = _nbody_trajectory(model, initial, args)
    mf = solve_meanfield(model, initial, args.t, steps)
    err = correlation_error_trajectory(traj, mf, args.jmax)
    out = _outdir(args.out)
    error_family_csv(err, os.path.join(out, "errors.csv"))
    print(f"wrote {out}/errors.csv (j <= {args.jmax}, {len(err)} nodes)")
    return 0


def cmd_expand(args) -> int:
    model, initial = load_model_file(args.file)
    mf = solve_meanfield(model, _require_initial(initial, args.file), args.t, _steps(args))
    table = build_table(model, mf, args.N, args.jmax, args.kmax, mode=args.mode)
    out = _outdir(args.out)
    table_csv(table, os.path.join(out, "table.csv"))
    if args.dump:
        for (j, k), states in table.coeffs.items():
            nt = Trajectory(table.times, states, {
                "backend": model.backend, "model_hash": model.model_hash,
                "N": args.N, "sites": j, "dt": mf.dt,
                "integrator": f"expansion-j{j}-k{k}",
            })
            write_trajectory(nt, os.path.join(out, f"coeff_j{j}_k{k}.txt"))
    print(f"wrote {out}/table.csv ({len(table.coeffs)} coefficients, "
          f"parity defect {table.parity_defect():.2e})")
    return 0


def cmd_study(args) -> int:
    cfg = load_study_file(args.file)
    if args.out:
        cfg.out_dir = args.out
    if args.threads:
        cfg.threads = args.threads
    elif os.environ.get("MFHIER_THREADS"):
        cfg.threads = int(os.environ["MFHIER_THREADS"])
    report = run_study(cfg)
    write_report(report, cfg.out_dir)
    for v in report.verdicts:
        mark = "pass" if v.passed else "FAIL"
        slope = "n/a" if v.slope is None else f"{v.slope:+.3f}"
        print(f"[{mark}] {v.label}: slope {slope} window {v.window} {v.reason}")
    print(f"wrote {cfg.out_dir}/report.json and rows.csv")
    return 0 if report.all_passed else 1


def cmd_suite(args) -> int:
    cfg = load_study_file(args.file)
    sizes = {"steps_per_unit_time": cfg.steps_per_unit_time}
    if args.N:
        sizes["N"] = args.N
    ledger = run_invariant_suite(cfg.model_path, sizes)
    out = _outdir(args.out or cfg.out_dir)
    write_ledger(ledger, os.path.join(out, "invariants.json"))
    bad = [c for c in ledger if not c["passed"]]
    for c in ledger:
        mark = "pass" if c["passed"] else "FAIL"
        print(f"[{mark}] {c['check']}: {c['value']:.3e} (threshold {c['threshold']:.1e})")
    print(f"wrote {out}/invariants.json ({len(ledger)} checks, {len(bad)} failures)")
    return 0 if not bad else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfhier", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    pm = sub.add_parser("model", help="model file utilities")
    subm = pm.add_subparsers(dest="model_command", required=True)
    pc = subm.add_parser("check", help="validate a model file")
    pc.add_argument("file")
    pc.add_argument("--full", action="store_true", help="run the invariant battery too")
    pc.add_argument("--N", type=int, default=5)
    pc.set_defaults(func=cmd_model_check)

    pe = sub.add_parser("evolve", help="exact N-body evolution")
    pe.add_argument("file")
    pe.add_argument("--N", type=int, required=True)
    pe.add_argument("--t", type=float, required=True)
    pe.add_argument("--steps", type=int, default=1000, help="steps per unit time")
    pe.add_argument("--store-stride", type=int, default=1)
    pe.add_argument("--method", default="auto", choices=["auto", "rk4", "exact"])
    pe.add_argument("--occupation", action="store_true",
                    help="force the occupation-sector path (kac)")
    pe.add_argument("--out", required=True)
    pe.set_defaults(func=cmd_evolve)

    pf = sub.add_parser("meanfield", help="one-site mean-field solution")
    pf.add_argument("file")
    pf.add_argument("--t", type=float, required=True)
    pf.add_argument("--steps", type=int, default=1000)
    pf.add_argument("--out", required=True)
    pf.set_defaults(func=cmd_meanfield)

    pr = sub.add_parser("errors", help="correlation-error trajectory CSV")
    pr.add_argument("file")
    pr.add_argument("--N", type=int, required=True)
    pr.add_argument("--jmax", type=int, default=2)
    pr.add_argument("--t", type=float, required=True)
    pr.add_argument("--steps", type=int, default=1000)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_errors)

    px = sub.add_parser("expand", help="expansion-coefficient table")
    px.add_argument("file")
    px.add_argument("--N", type=int, required=True)
    px.add_argument("--jmax", type=int, default=2)
    px.add_argument("--kmax", type=int, default=2)
    px.add_argument("--mode", default="exact-N", choices=["exact-N", "limit"])
    px.add_argument("--t", type=float, required=True)
    px.add_argument("--steps", type=int, default=1000)
    px.add_argument("--dump", action="store_true", help="also dump full coefficient tensors")
    px.add_argument("--out", required=True)
    px.set_defaults(func=cmd_expand)

    ps = sub.add_parser("study", help="convergence study from a study file")
    ps.add_argument("file")
    ps.add_argument("--out", default=None)
    ps.add_argument("--threads", type=int, default=None)
    ps.set_defaults(func=cmd_study)

    pv = sub.add_parser("suite", help="invariant battery for a study's model")
    pv.add_argument("file")
    pv.add_argument("--N", type=int, default=None)
    pv.add_argument("--out", default=None)
    pv.set_defaults(func=cmd_suite)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MfhierError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
