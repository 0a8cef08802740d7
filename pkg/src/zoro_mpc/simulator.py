"""Closed-loop simulation of the tracking controllers against a disturbed plant.

At every sample the measured state is forwarded over the computational delay
under the command that is still being applied, the controller solves from that
predicted state, and the plant advances one sampling period.
"""

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .model import (NU, NX, OMEGA, THETA, V, DiffDriveParams, DiscretizationParams,
                    diff_drive_response, integrate_step, rk4_step, wrap_angle)
from .ocp import OcpSpec, ReferenceTrajectory, reference_window
from .oracle import NoConvergence, solve_exact_robust
from .qp import QPError
from .tube import NoiseModel, PSDViolation, ScalarTube, sample_disturbance_trajectory
from .zoro_solver import (TubeModel, ZoroSettings, shift_solution, zoro_solve_to_convergence,
                          zoro_step)

PLANT_MODES = ("ideal", "diff-drive-mismatch")
NOISE_MODES = ("boundary", "interior", "off")
CONTROLLERS = ("zoro", "nominal", "exact", "scalar-tube")
SOLVE_MODES = ("realtime", "converge")

# window length of the steady part of a tracking-error series
STEADY_WINDOW = 50


@dataclass(frozen=True)
class PlantModel:
    """Simulated robot.

    ``ideal`` applies the prediction model plus noise.  ``diff-drive-mismatch``
    integrates the kinematics with the prediction model but lets the
    velocities follow the commanded ones through a first-order lag.
    """

    mode: str = "ideal"
    dd: DiffDriveParams = field(default_factory=DiffDriveParams)
    noise: NoiseModel = field(default_factory=NoiseModel.zero)
    noise_mode: str = "off"

    def __post_init__(self):
        if self.mode not in PLANT_MODES:
            raise ValueError(f"unknown plant mode {self.mode!r}")
        if self.noise_mode not in NOISE_MODES:
            raise ValueError(f"unknown noise mode {self.noise_mode!r}")


@dataclass(frozen=True)
class Scenario:
    """Everything a closed-loop run needs.

    ``sigma0`` of ``tube`` describes the uncertainty of the delay-compensated
    initial state; ``scalar`` parameterizes the scalar-tube controller and
    defaults to the sphere circumscribing ``E(W)``.
    """

    spec: OcpSpec
    reference: ReferenceTrajectory
    tube: TubeModel
    plant: PlantModel = field(default_factory=PlantModel)
    settings: ZoroSettings = field(default_factory=ZoroSettings)
    steps: int = 200
    s0: np.ndarray = None
    delay: float = None
    solve_mode: str = "realtime"
    scalar: ScalarTube = None
    name: str = "scenario"

    def __post_init__(self):
        if self.solve_mode not in SOLVE_MODES:
            raise ValueError(f"unknown solve mode {self.solve_mode!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        delay = self.spec.disc.dt if self.delay is None else float(self.delay)
        if delay not in (0.0, self.spec.disc.dt):
            raise ValueError("delay must be 0 or one sampling period")
        object.__setattr__(self, "delay", delay)
        s0 = self.reference.states[0] if self.s0 is None else self.s0
        object.__setattr__(self, "s0", np.asarray(s0, dtype=float).copy())
        if self.scalar is None:
            object.__setattr__(self, "scalar",
                               ScalarTube.circumscribing(self.tube.W, self.tube.sigma0))

    @property
    def delay_steps(self):
        return int(round(self.delay / self.spec.disc.dt))


@dataclass
class SimLog:
    """Per-step record of one closed-loop run.

    Row ``k`` holds the true state at the start of step ``k``, the command
    applied during the step, the disturbance added at its end and the stats of
    the solve performed at step ``k``.
    """

    controller: str
    seed: object
    dt: float
    time: np.ndarray
    states: np.ndarray            # (T+1, 5), includes the final state
    commands: np.ndarray          # (T, 2)
    noise: np.ndarray             # (T, 5)
    noise_block: np.ndarray       # (T,) index of the sampled disturbance block
    iterations: np.ndarray        # (T,)
    solve_ms: np.ndarray          # (T,)
    err_pos: np.ndarray           # (T,)
    err_theta: np.ndarray         # (T,)
    clearance: np.ndarray         # (T, n_obs)
    collision_active: np.ndarray  # (T,) bool
    failed: np.ndarray            # (T,) bool, command held after a solver failure
    converged: np.ndarray         # (T,) bool
    max_slack: np.ndarray         # (T,)

    def __len__(self):
        return self.time.shape[0]

    @property
    def clearance_min(self):
        if self.clearance.shape[1] == 0:
            return np.full(len(self), np.inf)
        return self.clearance.min(axis=1)

    def noise_within_bound(self, W, tol=1e-9):
        """Post-hoc check that every sampled disturbance block lies in its ellipsoid."""
        noise = W if isinstance(W, NoiseModel) else NoiseModel(W)
        for b in np.unique(self.noise_block):
            if b < 0:
                continue
            if noise.stacked_norm_sq(self.noise[self.noise_block == b]) > 1.0 + tol:
                return False
        return True


class DisturbanceStream:
    """Per-step disturbances drawn according to ``plant.noise_mode``.

    ``boundary`` samples one stacked vector per block of ``horizon`` steps on
    the boundary of the block ellipsoid; ``interior`` draws each step
    independently and uniformly inside ``E(W)``; ``off`` yields zeros.
    """

    def __init__(self, plant, horizon, rng):
        self.plant = plant
        self.horizon = int(horizon)
        self.rng = rng
        self._block = None
        self._pos = 0
        self.block_index = -1

    def next(self):
        mode = self.plant.noise_mode
        if mode == "off":
            return np.zeros(NX), -1
        if mode == "interior":
            self.block_index += 1
            w = sample_disturbance_trajectory(self.plant.noise, 1, self.rng, "interior")[0]
            return w, self.block_index
        if self._block is None or self._pos >= self.horizon:
            self._block = sample_disturbance_trajectory(self.plant.noise, self.horizon, self.rng,
                                                        "boundary")
            self._pos = 0
            self.block_index += 1
        w = self._block[self._pos]
        self._pos += 1
        return w.copy(), self.block_index


def plant_step(s, u, plant, rng=None, disc=DiscretizationParams(), w=None):
    """Advance the plant one sampling period; returns ``(next_state, w)``.

    ``w`` defaults to a one-step draw from the plant's noise mode.
    """
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    if w is None:
        w, _ = DisturbanceStream(plant, 1, _as_rng(rng)).next()
    w = np.asarray(w, dtype=float)
    nxt = integrate_step(s, u, disc)
    if plant.mode == "diff-drive-mismatch":
        v_cmd = s[V] + u[0] * disc.dt
        omega_cmd = s[OMEGA] + u[1] * disc.dt
        nxt[V], nxt[OMEGA] = diff_drive_response(s[V], s[OMEGA], v_cmd, omega_cmd, disc.dt,
                                                 plant.dd)
    return nxt + w, w


def delay_compensate(s_measured, u_pending, delay, disc=DiscretizationParams()):
    """State expected once the computed command takes effect, ``delay`` seconds ahead."""
    if delay < 0:
        raise ValueError("delay must be non-negative")
    s = np.asarray(s_measured, dtype=float)
    if delay == 0:
        return s.copy()
    return rk4_step(s, np.asarray(u_pending, dtype=float), float(delay), int(disc.substeps))


def _as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


class Controller:
    """Receding-horizon wrapper that keeps the warm start between samples."""

    def __init__(self, kind, scenario):
        if kind not in CONTROLLERS:
            raise ValueError(f"unknown controller {kind!r}")
        self.kind = kind
        self.scenario = scenario
        sc = scenario
        if kind == "nominal":
            self.tube = TubeModel.zero()
        elif kind == "scalar-tube":
            self.tube = replace(sc.tube, kind="scalar", scalar=sc.scalar)
        else:
            self.tube = sc.tube
        self.prev = None

    def solve(self, s0, window):
        sc = self.scenario
        warm = shift_solution(self.prev) if self.prev is not None else None
        if self.kind == "exact":
            sol = solve_exact_robust(s0, sc.spec, window, self.tube, sc.settings, prev=warm)
        elif sc.solve_mode == "converge":
            sol = zoro_solve_to_convergence(s0, sc.settings, sc.spec, window, self.tube, prev=warm)
        else:
            sol = zoro_step(s0, warm, sc.settings, sc.spec, window, self.tube)
        self.prev = sol
        return sol


def clearances(s, spec):
    """Signed distance between the robot disc and each obstacle disc."""
    obs = spec.obstacle_array()
    if obs.shape[0] == 0:
        return np.zeros(0)
    d = np.hypot(s[0] - obs[:, 0], s[1] - obs[:, 1])
    return d - obs[:, 2] - spec.robot_radius


def run_closed_loop(scenario, controller, steps=None, rng_seed=None):
    """Simulate ``steps`` samples of ``controller`` on ``scenario``.

    Deterministic given ``rng_seed``.  When a solve raises, the previous
    command is held and the step is flagged in the log.
    """
    sc = scenario
    steps = sc.steps if steps is None else int(steps)
    disc = sc.spec.disc
    dt = disc.dt
    N = sc.spec.N
    rng = _as_rng(rng_seed)
    noise = DisturbanceStream(sc.plant, N, rng)
    ctrl = Controller(controller, sc)
    n_obs = len(sc.spec.obstacles)
    d = sc.delay_steps

    states = np.empty((steps + 1, NX))
    commands = np.empty((steps, NU))
    ws = np.empty((steps, NX))
    blocks = np.empty(steps, dtype=np.int64)
    iters = np.zeros(steps, dtype=np.int64)
    solve_ms = np.zeros(steps)
    clear = np.empty((steps, n_obs))
    active = np.zeros(steps, dtype=bool)
    failed = np.zeros(steps, dtype=bool)
    converged = np.ones(steps, dtype=bool)
    max_slack = np.zeros(steps)

    s = sc.s0.copy()
    pending = reference_window(sc.reference, 0, 1)[1][0]
    held = pending.copy()
    for k in range(steps):
        states[k] = s
        clear[k] = clearances(s, sc.spec)
        s_pred = delay_compensate(s, pending, sc.delay, disc)
        window = reference_window(sc.reference, k + d, N)
        t0 = time.perf_counter()
        try:
            sol = ctrl.solve(s_pred, window)
        except (QPError, PSDViolation, NoConvergence, np.linalg.LinAlgError):
            sol = None
        solve_ms[k] = 1e3 * (time.perf_counter() - t0)
        if sol is None:
            failed[k] = True
            converged[k] = False
            ctrl.prev = None
            command = held
        else:
            command = sol.command
            iters[k] = sol.iterations
            active[k] = sol.collision_active
            converged[k] = sol.converged
            max_slack[k] = float(np.max(sol.slacks, initial=0.0))
        held = command
        if d == 0:
            pending = command
        applied = pending
        commands[k] = applied
        w, blocks[k] = noise.next()
        s, ws[k] = plant_step(s, applied, sc.plant, disc=disc, w=w)
        pending = command
    states[steps] = s

    ref_states = np.array([reference_window(sc.reference, k, 0)[0][0] for k in range(steps)])
    err_pos = np.hypot(states[:steps, 0] - ref_states[:, 0], states[:steps, 1] - ref_states[:, 1])
    err_theta = wrap_angle(states[:steps, THETA] - ref_states[:, THETA])
    return SimLog(controller=controller, seed=rng_seed, dt=dt, time=dt * np.arange(steps),
                  states=states, commands=commands, noise=ws, noise_block=blocks,
                  iterations=iters, solve_ms=solve_ms, err_pos=err_pos, err_theta=err_theta,
                  clearance=clear, collision_active=active, failed=failed, converged=converged,
                  max_slack=max_slack)


def order_statistics(values):
    """Minimum, quartiles, median and maximum as exact order statistics.

    With the sorted sample ``x_0 <= ... <= x_{n-1}`` the ``p``-quantile is
    ``x_floor(p (n-1))``, so the median of an even count is the lower of the
    two middle elements.
    """
    x = np.sort(np.asarray(values, dtype=float).ravel())
    if x.size == 0:
        raise ValueError("empty sample")
    n = x.size
    pick = lambda p: float(x[int(np.floor(p * (n - 1)))])  # noqa: E731
    return {"min": float(x[0]), "q1": pick(0.25), "median": pick(0.5), "q3": pick(0.75),
            "max": float(x[-1])}


def bound_entry_step(err, window=STEADY_WINDOW, factor=2.0):
    """First step after which ``err`` stays below ``factor`` times its steady maximum.

    The steady maximum is taken over the last ``window`` samples.  Returns
    ``(step, bound)``.
    """
    err = np.asarray(err, dtype=float)
    if err.size == 0:
        raise ValueError("empty series")
    bound = factor * float(np.max(err[-window:]))
    above = np.nonzero(err > bound)[0]
    step = int(above[-1] + 1) if above.size else 0
    return step, bound


def compute_metrics(log):
    """Summary digests of a run."""
    if len(log) == 0:
        raise ValueError("empty log")
    entry, bound = bound_entry_step(log.err_pos)
    cmin = log.clearance_min
    finite = np.isfinite(cmin)
    out = {
        "controller": log.controller,
        "steps": len(log),
        "tracking": {
            "max_err_pos": float(np.max(log.err_pos)),
            "final_err_pos": float(log.err_pos[-1]),
            "max_abs_err_theta": float(np.max(np.abs(log.err_theta))),
            "bound": bound,
            "bound_entry_step": entry,
        },
        "clearance": {
            "min_per_obstacle": [float(c) for c in log.clearance.min(axis=0)]
            if log.clearance.shape[1] else [],
            "min": float(np.min(cmin)) if finite.any() else None,
            "distribution": order_statistics(cmin[finite]) if finite.any() else None,
        },
        "solve_ms": order_statistics(log.solve_ms),
        "collision_active_steps": int(np.sum(log.collision_active)),
        "failures": int(np.sum(log.failed)),
        "unconverged": int(np.sum(~log.converged)),
        "max_slack": float(np.max(log.max_slack)),
    }
    return out


def _worker_count(workers=None):
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get("ZORO_THREADS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def _run_one(args):
    scenario, controller, master_seed, index = args
    return run_closed_loop(scenario, controller, rng_seed=[master_seed, index])


def run_monte_carlo(scenario, controller, runs, master_seed=0, workers=None):
    """Independent rollouts; run ``i`` uses the RNG stream ``(master_seed, i)``.

    ``workers`` defaults to ``ZORO_THREADS`` or the CPU count.  Logs come back
    in run order whatever the worker count.
    """
    jobs = [(scenario, controller, int(master_seed), i) for i in range(int(runs))]
    n = min(_worker_count(workers), max(1, len(jobs)))
    if n == 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(_run_one, jobs))
