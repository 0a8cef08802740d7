"""Time the hot paths under the numba and the pure-numpy backend.

Each backend runs in its own interpreter because the backend is fixed at
import time.  Usage::

    python benchmarks/bench_backends.py [--repeats 20]
"""

import argparse
import json
import os
import subprocess
import sys

PROBE = r"""
import json, sys, time
import numpy as np
from zoro_mpc._backend import BACKEND
from zoro_mpc.config import build_scenario, bundled_scenario
from zoro_mpc.model import trajectory_jacobians
from zoro_mpc.ocp import reference_window
from zoro_mpc.oracle import solve_exact_robust
from zoro_mpc.zoro_solver import backoff_jacobian, update_backoffs, zoro_step

repeats = int(sys.argv[1])
sc = build_scenario(bundled_scenario("gauntlet"))
s0 = sc.reference.states[40]
window = reference_window(sc.reference, 40, sc.spec.N)
states, inputs = window


def timed(fn, n=repeats):
    fn()  # compile / warm up
    out = []
    for _ in range(n):
        t = time.perf_counter()
        fn()
        out.append(1e3 * (time.perf_counter() - t))
    return float(np.median(out))


res = {
    "backend": BACKEND,
    "jacobians": timed(lambda: trajectory_jacobians(states, inputs, 0.05, 1)),
    "backoffs": timed(lambda: update_backoffs(states, inputs, sc.spec, sc.tube)),
    "backoff_fd_jacobian": timed(lambda: backoff_jacobian(states, inputs, sc.spec, sc.tube)),
    "zoro_step": timed(lambda: zoro_step(s0, None, sc.settings, sc.spec, window, sc.tube)),
    # the exact solve takes seconds without numba
    "exact_solve": timed(lambda: solve_exact_robust(s0, sc.spec, window, sc.tube, sc.settings),
                         min(repeats, 3)),
}
json.dump(res, sys.stdout)
"""


def run(disable, repeats):
    env = dict(os.environ)
    env.pop("ZORO_DISABLE_NUMBA", None)
    if disable:
        env["ZORO_DISABLE_NUMBA"] = "1"
    out = subprocess.run([sys.executable, "-c", PROBE, str(repeats)], env=env, check=True,
                         capture_output=True, text=True)
    return json.loads(out.stdout)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=20)
    args = p.parse_args(argv)
    fast = run(False, args.repeats)
    slow = run(True, args.repeats)
    print(f"{'kernel':22s} {'numba ms':>10s} {'numpy ms':>10s} {'ratio':>7s}")
    for key in fast:
        if key == "backend":
            continue
        print(f"{key:22s} {fast[key]:10.3f} {slow[key]:10.3f} {slow[key] / fast[key]:7.1f}")


if __name__ == "__main__":
    main()
