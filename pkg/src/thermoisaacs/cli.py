"""Command-line interface: validate, solve, simulate, verify, relay and export.

Exit codes: 0 success, 1 usage or input error, 2 non-convergence,
3 validation or verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import MaxIterExceeded, ThermoIsaacsError
from .game_sim import FeedbackPolicy, adversarial_gaps, closed_loop_values, start_states
from .grid import build_grid
from .hybrid import HybridState, discounted_cost, simulate
from .io import (fmt, load_solution, read_csv, read_manifest, timestamp, write_csv, write_json,
                 write_manifest, write_value_field)
from .problem import SECTORS, load_problem, sampled_bounds, validate
from .relay import RelayConfig, SampledSignal, relay_evaluate, relay_variation
from .solver import SolverConfig, solve

logger = logging.getLogger("thermoisaacs")

EXIT_OK, EXIT_USAGE, EXIT_NONCONVERGENCE, EXIT_FAILED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _default_threads() -> int:
    env = os.environ.get("THERMOISAACS_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"THERMOISAACS_THREADS must be an integer, got {env!r}")
    return os.cpu_count() or 1


def _load(path):
    if not Path(path).is_file():
        raise UsageError(f"problem file not found: {path}")
    return load_problem(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(args) -> int:
    problem = _load(args.problem)
    report = validate(problem, samples_per_face=args.samples_per_face,
                      isaacs_samples=args.isaacs_samples)
    print(json.dumps(_plain(report.to_dict()), indent=2, sort_keys=True))
    for w in report.warnings:
        logger.warning(w)
    if report.hard_failure:
        print("validation failed:", file=sys.stderr)
        for item in report.controllability_failures:
            print(f"  controllability: {item}", file=sys.stderr)
        for item in report.invariance_failures:
            print(f"  invariance: {item}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def _plain(obj):
    return json.loads(json.dumps(obj, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))


def cmd_solve(args) -> int:
    started = timestamp()
    problem = _load(args.problem)
    grid = build_grid(problem, nx=args.nx, ny=args.ny, h=args.h)
    for msg in grid.warnings:
        logger.warning(msg)
    kinds = ["lower", "upper"] if args.kind == "both" else [args.kind]
    threads = args.threads if args.threads is not None else _default_threads()
    staging = {"plain": "plain_S", "staged": "staged_S3"}[args.staging]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files, fields, status = [], {}, EXIT_OK
    base = None
    for kind in kinds:
        config = SolverConfig(value_kind=kind, staging=staging, tol=args.tol,
                              max_iter=args.max_iter, discount_form=args.discount,
                              order_tol=args.order_tol, threads=threads)
        base = config
        try:
            V, stats = solve(problem, grid, config)
        except MaxIterExceeded as exc:
            logger.error("%s value: %s", kind, exc)
            name = f"{kind}_stats.json"
            write_json(out / name, {"kind": kind, "converged": False,
                                    "final_residual": exc.residual,
                                    "empirical_contraction_factors": exc.factors})
            files.append(name)
            status = EXIT_NONCONVERGENCE
            continue
        files += write_value_field(V, out, kind)
        name = f"{kind}_stats.json"
        write_json(out / name, {"kind": kind, **stats.to_dict()})
        files.append(name)
        fields[kind] = V
        print(f"{kind}: converged in {stats.iterations} iterations, residual "
              f"{stats.final_residual:.3e}, projections {stats.projection_count}, "
              f"V in [{V.min():.6g}, {V.max():.6g}]")
    if len(fields) == 2:
        gap = fields["lower"].sup_diff(fields["upper"])
        write_json(out / "comparison.json", {"max_abs_lower_minus_upper": gap})
        files.append("comparison.json")
        print(f"max |lower - upper| = {gap:.3e}")
    cfg = {
        "kinds": [k for k in kinds if k in fields],
        "solver": {k: v for k, v in base.to_dict().items() if k != "value_kind"},
        # requested node counts; rebuilding from them reproduces the grid exactly
        "grid": {"nx": list(args.nx or problem.grid.nx), "ny": list(args.ny or problem.grid.ny),
                 "h": grid.h},
    }
    write_manifest(out, "solve", args.problem, cfg, files, started)
    return status


def _parse_control(spec: str, ctrls: np.ndarray, label: str):
    """``const:v[,v...]``, ``feedback`` or the path of a CSV with one row per step."""
    if spec == "feedback":
        return "feedback"
    if spec.startswith("const:"):
        vals = _float_list(spec[6:])
        if len(vals) != ctrls.shape[1]:
            raise UsageError(f"{label}: expected {ctrls.shape[1]} values, got {len(vals)}")
        v = np.array(vals)
        return lambda k, s: v
    path = Path(spec)
    if not path.is_file():
        raise UsageError(f"{label}: control file not found: {spec}")
    _, arr = read_csv(path)
    return arr


def cmd_simulate(args) -> int:
    started = timestamp()
    problem = _load(args.problem)
    alpha = _parse_control(args.alpha, problem.A, "--alpha")
    beta = _parse_control(args.beta, problem.B, "--beta")
    policy = None
    if "feedback" in (alpha if isinstance(alpha, str) else "", beta if isinstance(beta, str) else ""):
        if args.solution is None:
            raise UsageError("feedback controls need --solution <dir>")
        _, grid, config, V = load_solution(args.solution, args.kind, args.problem)
        problem = grid.problem
        policy = FeedbackPolicy(V, config)
        memo = {}

        def decide(k, s):
            if k not in memo:
                memo.clear()
                ia, ib = policy.control_indices(s.x, s.y, s.w, s.z)
                memo[k] = (problem.A[ia[0]], problem.B[ib[0]])
            return memo[k]

        if isinstance(alpha, str):
            alpha = lambda k, s: decide(k, s)[0]
        if isinstance(beta, str):
            beta = lambda k, s: decide(k, s)[1]
    s0 = HybridState(args.x0, args.y0, args.w0, args.z0)
    dt = args.dt if args.dt is not None else problem.grid.h
    traj = simulate(problem, s0, alpha, beta, args.T, dt)
    cost = discounted_cost(problem, traj)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n, m = problem.n, problem.m
    ka, kb = problem.A.shape[1], problem.B.shape[1]
    header = (["t"] + [f"x{k + 1}" for k in range(n)] + [f"y{k + 1}" for k in range(m)]
              + ["w", "z"] + [f"a{k + 1}" for k in range(ka)] + [f"b{k + 1}" for k in range(kb)])
    nan_a, nan_b = [math.nan] * ka, [math.nan] * kb
    rows = []
    for k in range(len(traj)):
        a = list(traj.alphas[k]) if k < len(traj.alphas) else nan_a
        b = list(traj.betas[k]) if k < len(traj.betas) else nan_b
        rows.append([traj.times[k], *traj.xs[k], *traj.ys[k], int(traj.ws[k]), int(traj.zs[k]), *a, *b])
    write_csv(out / "trajectory.csv", header, rows)
    write_csv(out / "events.csv", ["time", "kind", "w", "z"],
              [[ev.time, ev.kind, ev.new_wz[0], ev.new_wz[1]] for ev in traj.events])
    write_json(out / "summary.json", {"discounted_cost": cost, "events": len(traj.events),
                                      "clamped_steps": traj.clamp_count, "T": args.T, "dt": dt})
    cfg = {"x0": args.x0, "y0": args.y0, "w0": args.w0, "z0": args.z0, "T": args.T, "dt": dt,
           "alpha": args.alpha, "beta": args.beta, "solution": args.solution, "kind": args.kind}
    write_manifest(out, "simulate", args.problem, cfg,
                   ["trajectory.csv", "events.csv", "summary.json"], started)
    print(f"discounted cost {cost:.10g}; {len(traj.events)} switching events")
    return EXIT_OK


def cmd_verify(args) -> int:
    man = read_manifest(args.solution)
    report = {"solution": str(args.solution), "kinds": {}}
    failed = False
    for kind in man["config"]["kinds"]:
        problem, grid, config, V = load_solution(args.solution, kind, args.problem)
        lam = problem.lam
        gap_tol = (args.gap_tol if args.gap_tol is not None
                   else 0.05 * sampled_bounds(problem)["ell_max"] / lam)
        policy = FeedbackPolicy(V, config)
        states = start_states(problem)
        T = args.T if args.T is not None else 40.0 / lam
        dt = args.dt if args.dt is not None else grid.h
        x = np.stack([s.x for s in states])
        y = np.stack([s.y for s in states])
        w = np.array([s.w for s in states])
        z = np.array([s.z for s in states])
        values = policy.value(x, y, w, z)
        rollouts = closed_loop_values(policy, states, T, dt)
        adv = adversarial_gaps(policy, states, args.trials, T, dt, args.dwell, args.seed).max(axis=1)
        entries = []
        for s, v, c, a in zip(states, values, rollouts, adv):
            entries.append({"x": s.x.tolist(), "y": s.y.tolist(), "w": s.w, "z": s.z,
                            "V": float(v), "closed_loop": float(c),
                            "closed_loop_gap": float(abs(c - v)), "adversarial_gap": float(a)})
        worst_cl = max(e["closed_loop_gap"] for e in entries)
        worst_adv = max(e["adversarial_gap"] for e in entries)
        ok = worst_cl <= gap_tol and worst_adv <= gap_tol
        failed |= not ok
        report["kinds"][kind] = {"gap_tol": gap_tol, "max_closed_loop_gap": worst_cl,
                                 "max_adversarial_gap": worst_adv, "passed": ok,
                                 "trials": args.trials, "T": T, "dt": dt, "states": entries}
        print(f"{kind}: max closed-loop gap {worst_cl:.4g}, max adversarial gap {worst_adv:.4g}, "
              f"tolerance {gap_tol:.4g} -> {'pass' if ok else 'FAIL'}")
    if args.report:
        write_json(args.report, report)
    else:
        print(json.dumps(_plain(report), indent=2, sort_keys=True))
    return EXIT_FAILED if failed else EXIT_OK


def _read_signal(path) -> SampledSignal:
    if not Path(path).is_file():
        raise UsageError(f"signal file not found: {path}")
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            try:
                rows.append((float(parts[0]), float(parts[1])))
            except (ValueError, IndexError):
                if rows:
                    raise UsageError(f"malformed signal row: {line!r}")
                continue  # header
    if not rows:
        raise UsageError("signal file has no samples")
    t, v = np.array(rows).T
    return SampledSignal(t, v)


def cmd_relay(args) -> int:
    signal = _read_signal(args.signal)
    config = RelayConfig(args.lo, args.hi)
    trace = relay_evaluate(signal, config, args.w0, tol=args.tol)
    outputs = trace.outputs_after_switches()
    lines = ["switch_time,new_output"]
    lines += [f"{fmt(t)},{int(o)}" for t, o in zip(trace.switch_times, outputs)]
    t_end = float(signal.times[-1])
    lines.append(f"# initial_output={trace.initial_output}")
    lines.append(f"# final_output={trace.final_output}")
    lines.append(f"# switches={len(trace.switch_times)}")
    lines.append(f"# variation={relay_variation(trace, t_end)}")
    print("\n".join(lines))
    return EXIT_OK


def cmd_export(args) -> int:
    started = timestamp()
    man = read_manifest(args.solution)
    kinds = man["config"]["kinds"] if args.kind == "all" else [args.kind]
    out = Path(args.out) if args.out else Path(args.solution)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for kind in kinds:
        problem, grid, config, V = load_solution(args.solution, kind, args.problem)
        rows = []
        # other coordinates are held at the node nearest the centre of Q
        fix_x = [int(np.argmin(np.abs(ax - ax.mean()))) for ax in grid.nodes_x[1:]]
        fix_y = [int(np.argmin(np.abs(ax - ax.mean()))) for ax in grid.nodes_y[1:]]
        for w, z in SECTORS:
            sx, sy = grid.X[w], grid.Y[z]
            mx = np.stack(np.unravel_index(sx.global_ids, grid.shape_x), axis=-1)
            my = np.stack(np.unravel_index(sy.global_ids, grid.shape_y), axis=-1)
            keep_x = np.flatnonzero(np.all(mx[:, 1:] == fix_x, axis=1))
            keep_y = np.flatnonzero(np.all(my[:, 1:] == fix_y, axis=1))
            for a in keep_x:
                for b in keep_y:
                    rows.append([sx.coords[a, 0], sy.coords[b, 0], w, z, V.data[(w, z)][a, b]])
        name = f"{kind}_long.csv"
        write_csv(out / name, ["x1", "y1", "w", "z", "V"], rows)
        files.append(name)
        print(f"wrote {out / name} ({len(rows)} rows)")
    if out.resolve() == Path(args.solution).resolve():
        prev = read_manifest(out)
        write_manifest(out, prev["command"], prev["problem_file"], prev["config"], files,
                       prev["timestamps"]["started"])
    else:
        write_manifest(out, "export", man["problem_file"],
                       {"solution": str(args.solution), "kinds": kinds}, files, started)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="thermoisaacs", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("validate", help="check a problem file")
    v.add_argument("problem")
    v.add_argument("--samples-per-face", type=int, default=64)
    v.add_argument("--isaacs-samples", type=int, default=4096)
    v.set_defaults(func=cmd_validate)

    s = sub.add_parser("solve", help="compute lower and/or upper value functions")
    s.add_argument("problem")
    s.add_argument("--kind", choices=["lower", "upper", "both"], default="lower")
    s.add_argument("--staging", choices=["plain", "staged"], default="staged")
    s.add_argument("--tol", type=float, default=1e-8)
    s.add_argument("--max-iter", type=int, default=100_000)
    s.add_argument("--out", default="out")
    s.add_argument("--h", type=float, default=None)
    s.add_argument("--nx", type=_int_list, default=None, help="nodes per x axis, e.g. 41 or 41,21")
    s.add_argument("--ny", type=_int_list, default=None)
    s.add_argument("--discount", choices=["one_minus_lambda_h", "exp_minus_lambda_h"],
                   default="one_minus_lambda_h")
    s.add_argument("--order-tol", type=float, default=1e-12)
    s.add_argument("--threads", type=int, default=None,
                   help="worker threads for sweeps (default: THERMOISAACS_THREADS or CPU count)")
    s.set_defaults(func=cmd_solve)

    m = sub.add_parser("simulate", help="integrate one trajectory")
    m.add_argument("problem")
    m.add_argument("--x0", type=_float_list, required=True)
    m.add_argument("--y0", type=_float_list, required=True)
    m.add_argument("--w0", type=int, choices=[-1, 1], required=True)
    m.add_argument("--z0", type=int, choices=[-1, 1], required=True)
    m.add_argument("--T", type=float, required=True)
    m.add_argument("--dt", type=float, default=None)
    m.add_argument("--alpha", default="feedback", help="const:v[,v...] | CSV file | feedback")
    m.add_argument("--beta", default="feedback", help="const:v[,v...] | CSV file | feedback")
    m.add_argument("--solution", default=None, help="solve output directory for feedback controls")
    m.add_argument("--kind", choices=["lower", "upper"], default=None)
    m.add_argument("--out", default="sim")
    m.set_defaults(func=cmd_simulate)

    f = sub.add_parser("verify", help="roll out feedback policies from a solution")
    f.add_argument("problem", nargs="?", default=None,
                   help="problem file (default: the one recorded in the solution)")
    f.add_argument("--solution", required=True)
    f.add_argument("--gap-tol", type=float, default=None)
    f.add_argument("--trials", type=int, default=200)
    f.add_argument("--dwell", type=int, default=5)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--T", type=float, default=None)
    f.add_argument("--dt", type=float, default=None)
    f.add_argument("--report", default=None, help="write the JSON report here instead of stdout")
    f.set_defaults(func=cmd_verify)

    r = sub.add_parser("relay", help="run the delayed relay on a sampled signal")
    r.add_argument("signal", help="CSV of t,X samples")
    r.add_argument("--lo", type=float, required=True)
    r.add_argument("--hi", type=float, required=True)
    r.add_argument("--w0", type=int, choices=[-1, 1], required=True)
    r.add_argument("--tol", type=float, default=0.0)
    r.set_defaults(func=cmd_relay)

    e = sub.add_parser("export", help="long-format (x1, y1, w, z, V) tables")
    e.add_argument("solution")
    e.add_argument("--problem", default=None)
    e.add_argument("--kind", choices=["lower", "upper", "all"], default="all")
    e.add_argument("--out", default=None, help="output directory (default: the solution directory)")
    e.set_defaults(func=cmd_export)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ThermoIsaacsError, ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
