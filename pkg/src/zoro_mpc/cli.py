"""Command-line entry point.

Every subcommand takes a scenario given as a JSON path or the name of a
bundled scenario and writes its outputs into ``--out`` (default ``results``):
the fully resolved config, per-run CSV logs and a ``summary.json``.

Exit codes: 0 success, 1 verification failed, 2 invalid configuration,
3 solver did not converge.
"""

import argparse
import csv
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import (ConfigError, build_scenario, bundled_scenario, bundled_scenario_names,
                     dump_scenario, estimate_noise_bounds, load_scenario)
from .model import DiscretizationParams
from .ocp import N_AFFINE, reference_window
from .oracle import solve_exact_robust
from .simulator import (CONTROLLERS, compute_metrics, order_statistics, run_closed_loop,
                        run_monte_carlo)
from .tube import PSDViolation
from .qp import QPError
from .zoro_solver import TubeModel, disregarded_gradient, zoro_solve_to_convergence

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_NO_CONVERGENCE = 3

LOG_COLUMNS = ("step", "t", "x", "y", "theta", "v", "omega", "a_cmd", "alpha_cmd", "w_x", "w_y",
               "w_theta", "w_v", "w_omega", "err_pos", "err_theta", "clearance_min",
               "collision_active", "solve_ms")

VERIFY_U0_TOL = 1e-6
VERIFY_GRAD_TOL = 1e-8


def fmt(x):
    """17 significant digits, enough to round-trip a double."""
    return "%.17g" % x


def write_log_csv(log, path):
    """Write a :class:`~zoro_mpc.simulator.SimLog` with the fixed column order."""
    cmin = log.clearance_min
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(LOG_COLUMNS)
        for k in range(len(log)):
            row = [str(k), fmt(log.time[k])]
            row += [fmt(v) for v in log.states[k]]
            row += [fmt(v) for v in log.commands[k]]
            row += [fmt(v) for v in log.noise[k]]
            row += [fmt(log.err_pos[k]), fmt(log.err_theta[k]), fmt(cmin[k]),
                    str(int(log.collision_active[k])), fmt(log.solve_ms[k])]
            out.writerow(row)


def read_log_csv(path):
    """Columns of a log CSV as float arrays keyed by name."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty log")
    return {c: np.array([float(r[c]) for r in rows]) for c in rows[0]}


def _load(arg, seed=None):
    path = Path(arg)
    if path.exists():
        cfg = load_scenario(path)
    elif arg in bundled_scenario_names():
        cfg = bundled_scenario(arg)
    else:
        raise ConfigError(f"no scenario file or bundled scenario named {arg!r}")
    if seed is not None:
        cfg = cfg.model_copy(update={"seed": int(seed)})
    return cfg


def _write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, default=_json_default) + "\n",
                          encoding="utf-8")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


def _clean(x):
    """JSON-safe float (infinities become strings)."""
    x = float(x)
    return x if math.isfinite(x) else str(x)


def _prepare(args):
    cfg = _load(args.scenario, getattr(args, "seed", None))
    scenario = build_scenario(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(dump_scenario(cfg), encoding="utf-8")
    return cfg, scenario, out


def cmd_simulate(args):
    cfg, sc, out = _prepare(args)
    if args.runs == 1:
        logs = [run_closed_loop(sc, args.controller, rng_seed=cfg.seed)]
        labels = [str(cfg.seed)]
    else:
        logs = run_monte_carlo(sc, args.controller, args.runs, cfg.seed, args.workers)
        labels = [f"{cfg.seed}-{i}" for i in range(args.runs)]
    runs = []
    for log, label in zip(logs, labels):
        write_log_csv(log, out / f"log_{args.controller}_{label}.csv")
        runs.append(compute_metrics(log))
    mins = [r["clearance"]["min"] for r in runs if r["clearance"]["min"] is not None]
    summary = {"scenario": cfg.name, "controller": args.controller, "seed": cfg.seed,
               "runs": runs,
               "collisions": int(sum(m < 0 for m in mins)),
               "min_clearance": min(mins) if mins else None}
    _write_json(out / "summary.json", summary)
    print(f"{cfg.name}: {args.controller}, {len(runs)} run(s), min clearance "
          f"{summary['min_clearance']}, collisions {summary['collisions']}")
    return EXIT_OK


def cmd_compare(args):
    cfg, sc, out = _prepare(args)
    rows = []
    for ctrl in CONTROLLERS:
        log = run_closed_loop(sc, ctrl, rng_seed=cfg.seed)
        write_log_csv(log, out / f"log_{ctrl}_{cfg.seed}.csv")
        m = compute_metrics(log)
        rows.append(m)
        print(f"{ctrl:12s} min clearance {_clean(m['clearance']['min'] or np.inf):>12} "
              f"max err {m['tracking']['max_err_pos']:.4f} final err "
              f"{m['tracking']['final_err_pos']:.4f} median solve {m['solve_ms']['median']:.2f} ms")
    _write_json(out / "summary.json", {"scenario": cfg.name, "seed": cfg.seed, "controllers": rows})
    return EXIT_OK


def _solve_once(sc, controller, t_index):
    window = reference_window(sc.reference, t_index, sc.spec.N)
    if controller == "exact":
        return solve_exact_robust(sc.s0, sc.spec, window, sc.tube, sc.settings)
    tube = {"zoro": sc.tube, "nominal": TubeModel.zero(),
            "scalar-tube": TubeModel(sc.tube.K, sc.tube.W, sc.tube.sigma0, kind="scalar",
                                     scalar=sc.scalar)}[controller]
    return zoro_solve_to_convergence(sc.s0, sc.settings, sc.spec, window, tube)


def cmd_solve(args):
    cfg, sc, out = _prepare(args)
    sol = _solve_once(sc, args.controller, args.t_index)
    result = {"controller": args.controller, "converged": sol.converged, "u0": sol.command,
              "kkt": sol.kkt, "iterations": sol.iterations,
              "outer_iterations": sol.outer_iterations, "objective": sol.objective,
              "collision_active": sol.collision_active, "max_slack": float(sol.slacks.max())}
    _write_json(out / "summary.json", result)
    print(json.dumps(result, default=_json_default))
    return EXIT_OK if sol.converged else EXIT_NO_CONVERGENCE


def cmd_verify_theorem1(args):
    cfg, sc, out = _prepare(args)
    window = reference_window(sc.reference, args.t_index, sc.spec.N)
    zo = zoro_solve_to_convergence(sc.s0, sc.settings, sc.spec, window, sc.tube)
    ex = solve_exact_robust(sc.s0, sc.spec, window, sc.tube, sc.settings)
    _, gnorm = disregarded_gradient(zo, sc.spec, sc.tube)
    dev = float(np.max(np.abs(zo.command - ex.command)))
    coll_mu = float(np.max(zo.mu[:, N_AFFINE:], initial=0.0))
    ok = dev <= VERIFY_U0_TOL and gnorm <= VERIFY_GRAD_TOL
    result = {"u0_deviation": dev, "disregarded_gradient_norm": gnorm,
              "max_collision_multiplier": coll_mu, "zoro_converged": zo.converged,
              "exact_converged": ex.converged, "exact_stationarity": ex.kkt["stationarity"],
              "passed": bool(ok and zo.converged and ex.converged)}
    _write_json(out / "summary.json", result)
    print(f"u0 deviation {dev:.3e} (tol {VERIFY_U0_TOL:g}), disregarded gradient "
          f"{gnorm:.3e} (tol {VERIFY_GRAD_TOL:g}), max collision multiplier {coll_mu:.3e}")
    if not (zo.converged and ex.converged):
        return EXIT_NO_CONVERGENCE
    return EXIT_OK if ok else EXIT_FAILED


def cmd_estimate_noise(args):
    states, inputs = [], []
    for path in args.logs:
        cols = read_log_csv(path)
        states.append(np.column_stack([cols[c] for c in ("x", "y", "theta", "v", "omega")]))
        inputs.append(np.column_stack([cols["a_cmd"], cols["alpha_cmd"]]))
    # logs are estimated separately and pooled by residual count
    sig2, n = np.zeros(5), 0
    for s, u in zip(states, inputs):
        est = estimate_noise_bounds(s, u, DiscretizationParams(dt=args.dt))
        sig2 += est.sigma ** 2 * (est.samples - 1)
        n += est.samples
    sigma = np.sqrt(sig2 / (n - len(states)))
    result = {"sigma": sigma, "W_diag": (3.0 * sigma) ** 2, "samples": n}
    print(json.dumps(result, default=_json_default))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        _write_json(Path(args.out) / "noise_estimate.json", result)
    return EXIT_OK


def cmd_bench(args):
    cfg, sc, out = _prepare(args)
    # zoRO is timed with its real-time schedule whatever the scenario's solve mode
    sc = replace(sc, solve_mode="realtime")
    digests = {}
    for ctrl in ("zoro", "exact"):
        log = run_closed_loop(sc, ctrl, steps=args.samples, rng_seed=cfg.seed)
        digests[ctrl] = order_statistics(log.solve_ms)
        d = digests[ctrl]
        print(f"{ctrl:6s} solve ms  min {d['min']:.3f}  q1 {d['q1']:.3f}  median {d['median']:.3f}"
              f"  q3 {d['q3']:.3f}  max {d['max']:.3f}")
    ratio = digests["exact"]["median"] / digests["zoro"]["median"]
    print(f"median speedup of zoro over exact: {ratio:.1f}x")
    _write_json(out / "summary.json", {"solve_ms": digests, "median_speedup": ratio,
                                       "samples": args.samples})
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="zoro-mpc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def scenario_cmd(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("scenario", help="scenario JSON path or bundled scenario name")
        sp.add_argument("--out", default="results", help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.set_defaults(func=func)
        return sp

    sp = scenario_cmd("simulate", cmd_simulate, "closed-loop simulation")
    sp.add_argument("--controller", choices=CONTROLLERS, default="zoro")
    sp.add_argument("--runs", type=int, default=1, help="Monte Carlo rollouts")
    sp.add_argument("--workers", type=int, default=None,
                    help="worker processes (default: ZORO_THREADS or CPU count)")
    scenario_cmd("compare", cmd_compare, "one closed-loop run per controller")
    sp = scenario_cmd("solve", cmd_solve, "solve one OCP to convergence")
    sp.add_argument("--controller", choices=CONTROLLERS, default="zoro")
    sp.add_argument("--t-index", type=int, default=0, help="reference sample of the window")
    sp = scenario_cmd("verify-theorem1", cmd_verify_theorem1,
                      "compare converged zoRO with the exact robust solution")
    sp.add_argument("--t-index", type=int, default=0)
    sp = scenario_cmd("bench", cmd_bench, "per-sample solve times of zoRO and the exact solver")
    sp.add_argument("--samples", type=int, default=50)

    sp = sub.add_parser("estimate-noise", help="3-sigma noise bounds from log CSV files")
    sp.add_argument("logs", nargs="+")
    sp.add_argument("--dt", type=float, default=0.05)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_estimate_noise)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (QPError, PSDViolation) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
