"""Batch front door: solve, verify, and montecarlo subcommands.

Exit codes: 0 success, 1 usage/config error, 2 not converged,
3 verification failure.  The CTSCVX_THREADS environment variable caps the
numeric libraries' internal parallelism.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .config import ConfigError, load_scenario, load_settings
from .montecarlo import run_samples
from .scp import SCPSettings, SolutionReport, evaluate_margins, run

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NOT_CONVERGED = 2
EXIT_VERIFY = 3


def _apply_thread_cap():
    cap = os.environ.get("CTSCVX_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)


class Manifest:
    """Run metadata written to the output directory before and after the
    command body, so partial runs are identifiable."""

    def __init__(self, command: str, out_dir: str, scenario: str,
                 settings, seed):
        self.data = {
            "tool": "ctscvx", "version": __version__, "command": command,
            "scenario": os.path.abspath(scenario),
            "settings": os.path.abspath(settings) if settings else None,
            "output_dir": os.path.abspath(out_dir),
            "master_seed": seed, "status": "running",
            "started_unix": time.time(), "wall_clock_s": None,
        }
        self.out_dir = out_dir

    def write(self):
        with open(os.path.join(self.out_dir, "manifest.json"), "w",
                  encoding="utf-8") as f:
            json.dump(self.data, f, indent=1)

    def finish(self, status: str):
        self.data["status"] = status
        self.data["wall_clock_s"] = time.time() - self.data["started_unix"]
        self.write()


def _say(args, *msg):
    if not args.quiet:
        print(*msg)


def _stamp(d: dict, seed) -> dict:
    return {"tool": "ctscvx", "version": __version__,
            "master_seed": seed, **d}


def _write_margins_csv(path, report, seed):
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# ctscvx {__version__} seed={seed}\n")
        f.write("row,margin,interval,t,tau\n")
        for r in report.rows:
            tau = "" if r.tau is None else repr(float(r.tau))
            f.write(f"{r.row},{r.margin!r},{r.interval},{r.t!r},{tau}\n")


def cmd_solve(args) -> int:
    manifest = Manifest("solve", args.out, args.scenario, args.settings,
                        args.seed)
    try:
        os.makedirs(args.out, exist_ok=True)
        manifest.write()
        cfg = load_scenario(args.scenario)
        settings = (load_settings(args.settings) if args.settings
                    else SCPSettings())
        if args.max_iters is not None:
            settings.max_iters = args.max_iters
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    def progress(it, rep):
        _say(args, f"iter {it:3d}  fuel {rep.fuel:10.4f}  "
                   f"slack {rep.slack_total:9.3e}  "
                   f"step {rep.step_size:9.3e}")

    report = run(cfg, settings, callback=progress)
    sol_path = os.path.join(args.out, "solution.json")
    with open(sol_path, "w", encoding="utf-8") as f:
        json.dump(_stamp(report.to_dict(), args.seed), f, indent=1)
    with open(os.path.join(args.out, "trajectory.csv"), "w",
              encoding="utf-8") as f:
        f.write(f"# ctscvx {__version__} seed={args.seed}\n")
        n = len(report.trajectory.times)
        f.write("t,r1,r2,r3,v1,v2,v3,u1,u2,u3\n")
        for i in range(n):
            u = report.trajectory.u[i] if i < n - 1 else np.zeros(3)
            vals = [report.trajectory.times[i], *report.trajectory.x[i], *u]
            f.write(",".join(repr(float(v)) for v in vals) + "\n")
    if report.margins is not None:
        _write_margins_csv(os.path.join(args.out, "margins.csv"),
                           report.margins, args.seed)
    manifest.finish(report.status)
    _say(args, f"status {report.status}  fuel {report.fuel:.6f}  "
               f"solution {sol_path}")
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


def _load_solution(path):
    try:
        return SolutionReport.load_json(path)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: cannot load solution ({exc})") from exc


def cmd_verify(args) -> int:
    manifest = Manifest("verify", args.out, args.scenario, args.settings,
                        args.seed)
    try:
        os.makedirs(args.out, exist_ok=True)
        manifest.write()
        cfg = load_scenario(args.scenario)
        settings = (load_settings(args.settings) if args.settings
                    else SCPSettings())
        solution = _load_solution(args.solution)
        if len(solution.trajectory.times) != cfg.grid.n_nodes or not \
                np.allclose(solution.trajectory.times, cfg.grid.nodes):
            raise ConfigError("solution grid does not match the scenario")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    tol = args.tolerance
    if tol is None:
        # Converged solutions graze relaxed constraints by up to the
        # pointwise dip of the integral relaxation; allow ten of those.
        tol = 10.0 * float(np.sqrt(settings.eps_relax))
    report = evaluate_margins(cfg, settings, solution.trajectory,
                              refine=args.refine)
    _write_margins_csv(os.path.join(args.out, "margins.csv"), report,
                       args.seed)
    worst = min(report.rows, key=lambda r: r.margin)
    _say(args, f"worst margin {worst.margin:+.6e} ({worst.row}) at "
               f"interval {worst.interval}, t={worst.t:.6g}"
               + (f", tau={worst.tau:.6g}" if worst.tau is not None else ""))
    ok = worst.margin >= -tol
    manifest.finish("verified" if ok else "violation")
    if not ok:
        print(f"verification failure: margin {worst.margin:+.6e} < "
              f"-{tol:.1e} for {worst.row} at interval {worst.interval}, "
              f"t={worst.t:.6g}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_montecarlo(args) -> int:
    manifest = Manifest("montecarlo", args.out, args.scenario,
                        args.settings, args.seed)
    try:
        os.makedirs(args.out, exist_ok=True)
        manifest.write()
        cfg = load_scenario(args.scenario)
        solution = _load_solution(args.solution)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    report, samples = run_samples(solution, cfg, n_samples=args.samples,
                                  master_seed=args.seed)
    with open(os.path.join(args.out, "mc_report.json"), "w",
              encoding="utf-8") as f:
        json.dump(_stamp(report.to_dict(), args.seed), f, indent=1)
    with open(os.path.join(args.out, "control_magnitudes.csv"), "w",
              encoding="utf-8") as f:
        f.write(f"# ctscvx {__version__} seed={args.seed}\n")
        f.write("sample,interval,u_norm\n")
        for s in samples:
            for k, u in enumerate(s.controls):
                f.write(f"{s.index},{k},{float(np.linalg.norm(u))!r}\n")

    # Accept iff each empirical violation rate is consistent with its
    # chance-constraint level: rate <= (1 - beta) + 3 binomial sigmas.
    n = report.n_samples
    ok = True
    for rate_pct, beta, name in (
            (report.ps_violation_pct, cfg.uncertainty.beta_ps,
             "passive_safety"),
            (report.cone_violation_pct, cfg.uncertainty.beta_ac,
             "approach_cone"),
            (report.input_violation_pct, cfg.uncertainty.beta_act,
             "input_bound")):
        p = 1.0 - beta
        bound = p + 3.0 * np.sqrt(p * (1.0 - p) / n)
        _say(args, f"{name}: {rate_pct:.2f}% "
                   f"(bound {100.0 * bound:.2f}%)")
        if rate_pct / 100.0 > bound:
            print(f"montecarlo failure: {name} violation rate "
                  f"{rate_pct:.2f}% exceeds {100.0 * bound:.2f}%",
                  file=sys.stderr)
            ok = False
    manifest.finish("ok" if ok else "violation")
    return EXIT_OK if ok else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctscvx",
        description="Chance-constrained trajectory optimization with "
                    "passive-safety guarantees.")
    parser.add_argument("--version", action="version",
                        version=f"ctscvx {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, solution=False):
        p.add_argument("--scenario", required=True,
                       help="scenario JSON file")
        p.add_argument("--settings", help="solver settings JSON file")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, default=0,
                       help="master random seed")
        p.add_argument("--quiet", action="store_true",
                       help="suppress progress output")
        if solution:
            p.add_argument("--solution", required=True,
                           help="solution JSON from a solve run")

    p = sub.add_parser("solve", help="run the trajectory optimizer")
    common(p)
    p.add_argument("--max-iters", type=int, default=None,
                   help="override the outer iteration limit")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("verify",
                       help="re-check constraints on a refined grid")
    common(p, solution=True)
    p.add_argument("--refine", type=int, default=10,
                   help="quadrature refinement factor")
    p.add_argument("--tolerance", type=float, default=None,
                   help="margin acceptance tolerance (default: ten "
                        "relaxation dips)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("montecarlo",
                       help="closed-loop dispersion analysis")
    common(p, solution=True)
    p.add_argument("--samples", type=int, default=1000,
                   help="number of closed-loop samples")
    p.set_defaults(func=cmd_montecarlo)
    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; remap to the config-error code.
        return EXIT_CONFIG if exc.code not in (0, None) else 0
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
