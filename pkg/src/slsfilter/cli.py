"""Command-line interface: ``slsfilter <subcommand> [options]``.

Exit codes: 0 success, 1 infeasible problem or failed ordering check,
2 configuration error (including an unstabilisable system).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from .baseline_mpsf import NominalMPSF, TubeMPSF
from .config import METHODS, ProblemConfig
from .errors import (
    ConfigError,
    DimensionMismatchError,
    DimensionTooLargeError,
    NotStabilizableError,
    SafetyFilterError,
)
from .explicit_filter import ExplicitFilter, ExplicitSafeSet, RCIFilter, check_learned_input, synthesize
from .polytope import Polytope
from .sim import (
    AdversarialPolicy,
    UniformDisturbance,
    VertexDisturbance,
    ZeroDisturbance,
    constant_policy,
    linear_policy,
    run_episode,
    timing_bench,
    timing_ordering,
    write_json,
    write_timing_csv,
)
from .sl_mpsf import SLMPSF
from .study import SetBundle, grid_study, orderings, render_report

EXIT_OK, EXIT_INFEASIBLE, EXIT_CONFIG = 0, 1, 2


def _vector(text: str) -> np.ndarray:
    try:
        return np.array([float(t) for t in text.split(",")])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _load(args) -> ProblemConfig:
    return ProblemConfig.load(args.config) if args.config else ProblemConfig.default()


def _bundle(cfg: ProblemConfig, args, with_rci: bool | None = None) -> SetBundle:
    d = cfg.data
    rci = not getattr(args, "no_rci", False) if with_rci is None else with_rci
    return SetBundle.compute(cfg.problem(), with_rci=rci, hyperbox=d["explicit"]["hyperbox"],
                             tube_eps=d["tube"]["eps"], settings=cfg.solver_settings())


def _make_filter(method: str, cfg: ProblemConfig, bundle: SetBundle):
    p, s = bundle.problem, cfg.solver_settings()
    if method == "sl":
        return SLMPSF(p, s)
    if method == "tube":
        return TubeMPSF(bundle.tube, s)
    if method == "nominal":
        return NominalMPSF(p, s)
    if method == "explicit":
        return ExplicitFilter(bundle.explicit, p)
    if bundle.rci_hull is None:
        raise DimensionTooLargeError("the invariant-hull filter needs state dimension <= 3")
    return RCIFilter(bundle.rci_hull, p, s)


def cmd_synth(args) -> int:
    cfg = _load(args)
    bundle = _bundle(cfg, args)
    paths = bundle.write(args.out_dir)
    write_json({"config_hash": cfg.digest(), "alpha": bundle.explicit.alpha,
                "artifacts": sorted(os.path.basename(q) for q in paths)},
               os.path.join(args.out_dir, "synth_summary.json"))
    print(f"alpha* = {bundle.explicit.alpha:.6g}; wrote {len(paths) + 1} files to {args.out_dir}")
    return EXIT_OK


def cmd_synth_explicit(args) -> int:
    cfg = _load(args)
    S = synthesize(cfg.problem(terminal=False), hyperbox=cfg.data["explicit"]["hyperbox"],
                   settings=cfg.solver_settings())
    with open(args.out, "w") as fh:
        fh.write(S.to_json())
    print(f"alpha* = {S.alpha:.6g}")
    return EXIT_OK


def _batch_rows(path: str, width: int) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or not "".join(row).strip():
                continue
            try:
                vals = [float(v) for v in row]
            except ValueError:
                if i == 0 and not rows:
                    continue  # header
                raise ConfigError(f"{path}: row {i + 1} is not numeric", i + 1) from None
            if len(vals) != width:
                raise ConfigError(f"{path}: row {i + 1} has {len(vals)} values, expected {width}", i + 1)
            rows.append(vals)
    return np.array(rows).reshape(-1, width)


def cmd_filter(args) -> int:
    cfg = _load(args)
    p = cfg.problem()
    if args.batch:
        return _filter_batch(args, cfg, p)
    if args.x is None or args.u is None:
        raise ConfigError("filter needs --x and --u, or --batch")
    x, u = args.x, args.u
    if x.size != p.n or u.size != p.m:
        raise DimensionMismatchError(f"expected a state of size {p.n} and an input of size {p.m}")
    if args.method == "explicit" and args.safe_set:
        with open(args.safe_set) as fh:
            S = ExplicitSafeSet.from_json(fh.read())
        ok = check_learned_input(x, u, S, p)
        flt = ExplicitFilter(S, p)
        if not S.contains(x):
            print(json.dumps({"method": "explicit", "accepted": bool(ok), "in_safe_set": False}))
            return EXIT_INFEASIBLE
        u_out, info = flt.safe_input(x, u)
        print(json.dumps({"method": "explicit", "accepted": bool(ok), "u_applied": u_out.tolist(), **info}))
        return EXIT_OK
    bundle = _bundle(cfg, args, with_rci=args.method == "rci")
    flt = _make_filter(args.method, cfg, bundle)
    if args.method in ("sl", "tube", "nominal"):
        res = flt.filter_step(x, u)
        print(json.dumps({"method": args.method, **res.to_dict()}))
        return EXIT_OK if res.feasible else EXIT_INFEASIBLE
    if args.method == "explicit" and not bundle.explicit.contains(x):
        print(json.dumps({"method": "explicit", "in_safe_set": False,
                          "accepted": bool(check_learned_input(x, u, bundle.explicit, p))}))
        return EXIT_INFEASIBLE
    u_out, info = flt.safe_input(x, u)
    print(json.dumps({"method": args.method, "u_applied": np.asarray(u_out).tolist(), **info}))
    return EXIT_OK


def _filter_batch(args, cfg: ProblemConfig, p) -> int:
    rows = _batch_rows(args.batch, p.n + p.m)
    if args.method == "explicit" and args.safe_set:
        with open(args.safe_set) as fh:
            S = ExplicitSafeSet.from_json(fh.read())
    else:
        bundle = _bundle(cfg, args, with_rci=args.method == "rci")
        S = bundle.explicit
    flt = SLMPSF(p, cfg.solver_settings()) if args.method == "sl" else None
    if flt is None and args.method != "explicit":
        flt = _make_filter(args.method, cfg, bundle)
    all_ok = True
    for row in rows:
        x, u = row[: p.n], row[p.n:]
        if args.method in ("sl", "tube", "nominal"):
            res = flt.filter_step(x, u)
            out, ok = {"method": args.method, **res.to_dict()}, res.feasible
        elif args.method == "explicit":
            ok = S.contains(x)
            out = {"method": "explicit", "in_safe_set": ok, "accepted": bool(check_learned_input(x, u, S, p))}
            if ok:
                u_out, info = ExplicitFilter(S, p).safe_input(x, u)
                out.update({"u_applied": u_out.tolist(), **info})
        else:
            try:
                out, ok = {"method": "rci", "u_applied": flt.filter_input(x, u).tolist()}, True
            except SafetyFilterError:
                out, ok = {"method": "rci", "u_applied": None}, False
        all_ok &= bool(ok)
        print(json.dumps({"x": x.tolist(), "u_learned": u.tolist(), **out}))
    return EXIT_OK if all_ok else EXIT_INFEASIBLE


def cmd_simulate(args) -> int:
    cfg = _load(args)
    bundle = _bundle(cfg, args, with_rci=args.method == "rci")
    p = bundle.problem
    seed = cfg.data["seed"] if args.seed is None else args.seed
    flt = _make_filter(args.method, cfg, bundle)
    x0 = bundle.explicit.center if args.x0 is None else args.x0
    policies = {
        "adversarial": lambda: AdversarialPolicy(p.U, scale=2.0, seed=seed),
        "zero": lambda: constant_policy(np.zeros(p.m)),
        "lqr": lambda: linear_policy(p.K_f),
    }
    disturbances = {"vertex": VertexDisturbance, "uniform": UniformDisturbance,
                    "zero": lambda W, seed: ZeroDisturbance(W, seed)}
    steps = cfg.data["simulation"]["steps"] if args.steps is None else args.steps
    ep = run_episode(flt, policies[args.policy](), disturbances[args.disturbance](p.W, seed + 1), x0, steps,
                     problem=p)
    os.makedirs(args.out_dir, exist_ok=True)
    data = {"method": args.method, "seed": seed, "config_hash": cfg.digest(), **ep.to_dict()}
    data.pop("step_times")
    write_json(data, os.path.join(args.out_dir, f"episode_{args.method}.json"))
    print(f"{args.method}: {steps} steps, {ep.violations} violations, "
          f"mean intervention {ep.interventions.mean():.4f}")
    return EXIT_OK if ep.violations == 0 else EXIT_INFEASIBLE


def cmd_sets(args) -> int:
    cfg = _load(args)
    bundle = _bundle(cfg, args)
    sets = {"omega_min": bundle.tube.tube, "omega_max": bundle.problem.terminal, "pi_max": bundle.tube.terminal,
            "explicit_box": bundle.explicit.box.to_polytope(), "state_constraints": bundle.problem.X}
    if bundle.xi_max is not None:
        sets["xi_max"] = bundle.xi_max
        sets["rci_hull"] = bundle.rci_hull
    plot = {}
    for name, P in sets.items():
        entry = {"A": P.A.tolist(), "b": P.b.tolist()}
        if P.dim <= 3:
            entry["vertices"] = _ordered_vertices(P).tolist()
        plot[name] = entry
    os.makedirs(args.out_dir, exist_ok=True)
    write_json(plot, os.path.join(args.out_dir, "sets.json"))
    print(f"wrote {len(plot)} sets to {os.path.join(args.out_dir, 'sets.json')}")
    return EXIT_OK


def _ordered_vertices(P: Polytope) -> np.ndarray:
    V = P.vertices()
    if P.dim == 2 and len(V) > 2:
        c = V.mean(axis=0)
        V = V[np.argsort(np.arctan2(V[:, 1] - c[1], V[:, 0] - c[0]))]
    return V


def cmd_reproduce(args) -> int:
    cfg = _load(args)
    d = cfg.data
    tic = time.perf_counter()
    bundle = _bundle(cfg, args)
    if args.no_rci or bundle.xi_max is None:
        print("maximal RCI set skipped")
    counts = d["grid"]["counts"] if args.grid is None else [args.grid] * bundle.problem.n
    study = grid_study(bundle, counts, cfg.solver_settings(), n_jobs=args.jobs)
    result = orderings(bundle, study)
    samples = d["timing"]["samples"] if args.timing_samples is None else args.timing_samples
    timing = _timing(cfg, bundle, samples)
    result["checks"].update({f"timing_{k}": v for k, v in timing_ordering(timing).items()
                             if k != "explicit_faster_than_tube"})
    os.makedirs(args.out_dir, exist_ok=True)
    bundle.write(args.out_dir)
    study.to_csv(os.path.join(args.out_dir, "grid.csv"))
    write_timing_csv(timing, os.path.join(args.out_dir, "timing.csv"))
    write_json({"config_hash": cfg.digest(), "seed": d["seed"], **result, "timing": timing,
                "runtime_s": time.perf_counter() - tic}, os.path.join(args.out_dir, "summary.json"))
    report = render_report(cfg.digest(), d["seed"], result, timing)
    with open(os.path.join(args.out_dir, "report.md"), "w") as fh:
        fh.write(report)
    print(report)
    return EXIT_OK if all(result["checks"].values()) else EXIT_INFEASIBLE


def _timing(cfg: ProblemConfig, bundle: SetBundle, samples: int) -> dict:
    p, s = bundle.problem, cfg.solver_settings()
    sl, tube = SLMPSF(p, s), TubeMPSF(bundle.tube, s)
    S = bundle.explicit

    def run_sl(x, u):
        return sl.filter_step(x, u).solve_time

    def run_tube(x, u):
        return tube.filter_step(x, u).solve_time

    def run_explicit(x, u):
        check_learned_input(x, u, S, p)
        return None

    return timing_bench({"explicit": run_explicit, "tube": run_tube, "sl": run_sl}, p.X, p.m,
                        n_samples=samples, seed=cfg.data["seed"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slsfilter", description="Predictive safety filters for linear systems.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", "--problem", dest="config",
                        help="YAML problem configuration (defaults to the double integrator)")
        sp.set_defaults(func=fn)
        return sp

    sp = add("synth", cmd_synth, "compute gains, invariant sets and the explicit safe set")
    sp.add_argument("--out-dir", default="artifacts")
    sp.add_argument("--no-rci", action="store_true", help="skip the maximal RCI set and the invariant hull")

    sp = add("synth-explicit", cmd_synth_explicit, "synthesise only the explicit safe set")
    sp.add_argument("--out", required=True)

    sp = add("filter", cmd_filter, "filter one learned input at one state")
    sp.add_argument("--method", choices=METHODS, default="sl")
    sp.add_argument("--x", "--state", dest="x", type=_vector, help="state, comma separated")
    sp.add_argument("--u", "--input", dest="u", type=_vector, help="learned input, comma separated")
    sp.add_argument("--batch", help="CSV file with one state followed by one learned input per row")
    sp.add_argument("--safe-set", help="explicit safe set JSON (skips synthesis)")

    sp = add("simulate", cmd_simulate, "closed-loop episode")
    sp.add_argument("--method", choices=METHODS, default="explicit")
    sp.add_argument("--policy", choices=("adversarial", "zero", "lqr"), default="adversarial")
    sp.add_argument("--disturbance", choices=("vertex", "uniform", "zero"), default="vertex")
    sp.add_argument("--x0", type=_vector, help="initial state (default: centre of the explicit safe set)")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out-dir", default="artifacts")

    sp = add("reproduce", cmd_reproduce, "coverage, intervention maps and timing with a markdown report")
    sp.add_argument("--out-dir", default="artifacts")
    sp.add_argument("--no-rci", action="store_true")
    sp.add_argument("--grid", type=int, help="cells per axis (overrides the config)")
    sp.add_argument("--timing-samples", type=int)
    sp.add_argument("--jobs", type=int, default=1, help="worker processes for the grid study")

    sp = add("sets", cmd_sets, "export invariant sets as plot data")
    sp.add_argument("--out-dir", default="artifacts")
    sp.add_argument("--no-rci", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, NotStabilizableError, DimensionMismatchError, DimensionTooLargeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SafetyFilterError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
