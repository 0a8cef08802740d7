"""Zero-order robust MPC.

The robust problem keeps its tube out of the decision variables: backoffs are
frozen while a Gauss-Newton SQP subproblem is solved and refreshed from the
tube propagated along the newest iterate in between.  ``zoro_step`` runs the
real-time schedule (a fixed number of QP iterations per sample) and
``zoro_solve_to_convergence`` iterates to a fixed point.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .model import NU, NX, trajectory_jacobians
from .ocp import (INPUT_AFFINE_ROWS, N_AFFINE, backoff_jacobian_fd, backoffs_from_tube,
                  eval_rows, row_mask, tracking_error, trajectory_cost)
from .qp import QProblem, input_stationarity, pack_z, s_index, solve_qp, stage_adjoints, u_index
from .tube import (PSD_TOL, FeedbackGain, NoiseModel, PSDViolation, ScalarTube, propagate_tube,
                   scalar_tube_sigmas)

ACTIVE_TOL = 1e-9


@dataclass(frozen=True)
class ZoroSettings:
    qp_iterations_per_sample: int = 2
    backoff_updates_per_sample: int = 2
    max_outer_iterations: int = 50
    max_sqp_iterations: int = 200
    tol_stationarity: float = 1e-10
    tol_feasibility: float = 1e-10
    levenberg: float = 1e-8
    slack_penalty_l1: float = 1e4
    slack_penalty_l2: float = 1e4
    qp_tol: float = 1e-11

    def __post_init__(self):
        if self.qp_iterations_per_sample < 1 or self.backoff_updates_per_sample < 1:
            raise ValueError("per-sample iteration counts must be >= 1")
        if self.tol_stationarity <= 0 or self.tol_feasibility <= 0:
            raise ValueError("tolerances must be positive")
        if self.levenberg < 0:
            raise ValueError("levenberg must be >= 0")
        if self.slack_penalty_l1 < 0 or self.slack_penalty_l2 <= 0:
            raise ValueError("slack_penalty_l1 must be >= 0 and slack_penalty_l2 > 0")


@dataclass(frozen=True)
class TubeModel:
    """Uncertainty description used to compute backoffs.

    ``kind="ellipsoid"`` propagates shape matrices along the iterate;
    ``kind="scalar"`` uses the hypersphere radii of ``scalar`` instead.
    """

    K: FeedbackGain
    W: NoiseModel
    sigma0: np.ndarray
    kind: str = "ellipsoid"
    scalar: ScalarTube = None

    def __post_init__(self):
        if self.kind not in ("ellipsoid", "scalar"):
            raise ValueError(f"unknown tube kind {self.kind!r}")
        if self.kind == "scalar" and self.scalar is None:
            raise ValueError("scalar tube needs ScalarTube parameters")
        object.__setattr__(self, "sigma0", np.asarray(self.sigma0, dtype=float))

    @classmethod
    def zero(cls):
        return cls(FeedbackGain.zero(), NoiseModel.zero(), np.zeros((NX, NX)))

    @property
    def is_zero(self):
        return (self.kind == "ellipsoid" and not np.any(self.W.W) and not np.any(self.sigma0))

    def sigmas(self, states, inputs, disc):
        N = inputs.shape[0]
        if self.kind == "scalar":
            return scalar_tube_sigmas(self.scalar, N)
        if self.is_zero:
            return np.zeros((N + 1, NX, NX))
        _, As, Bs = trajectory_jacobians(states, inputs, disc.dt, disc.substeps)
        return propagate_tube(self.sigma0, As, Bs, self.K.K, self.W.W)


@dataclass
class OcpSolution:
    """Primal-dual iterate of the fixed-backoff problem.

    ``kkt`` and the dynamics multipliers ``lam`` are evaluated at the stored
    point on first access, so real-time callers that only read the command
    do not pay for them.
    """

    states: np.ndarray
    inputs: np.ndarray
    mu: np.ndarray
    backoffs: np.ndarray
    sigmas: np.ndarray
    slacks: np.ndarray
    row_violation: np.ndarray
    directions: np.ndarray
    iterations: int = 0
    outer_iterations: int = 0
    qp_active_set_iterations: int = 0
    converged: bool = True
    objective: float = np.nan
    _problem: tuple = field(default=None, repr=False)
    _diagnostics: tuple = field(default=None, repr=False)

    @property
    def N(self):
        return self.inputs.shape[0]

    def _diagnose(self):
        if self._diagnostics is None:
            if self._problem is None:
                raise ValueError("solution carries no problem data for diagnostics")
            s0, spec, window, settings, extra_grads = self._problem
            self._diagnostics = kkt_residuals(self.states, self.inputs, s0, spec, window,
                                              self.backoffs, self.mu, settings,
                                              extra_grads=extra_grads,
                                              prev_dirs=self.directions)
        return self._diagnostics

    @property
    def kkt(self):
        """Stationarity, feasibility, complementarity and dynamics residuals (inf-norms)."""
        return self._diagnose()[0]

    @property
    def lam(self):
        """Multipliers of the initial-value and dynamics constraints, (N+1, 5)."""
        return self._diagnose()[1]

    @property
    def command(self):
        """The input applied to the plant (first stage)."""
        return self.inputs[0].copy()

    @property
    def collision_active(self):
        """Whether any collision row is active (positive multiplier or tight)."""
        if self.mu.shape[1] <= N_AFFINE:
            return False
        mu = self.mu[:, N_AFFINE:]
        return bool(np.any(mu > 0.0) or np.any(self.row_violation[:, N_AFFINE:] > -ACTIVE_TOL))

    def z(self):
        return pack_z(self.states, self.inputs)


def _pad_inputs(inputs):
    return np.vstack([inputs, np.zeros((1, NU))])


def _initial_directions(spec):
    n_obs = len(spec.obstacles)
    d = np.zeros((spec.N + 1, n_obs, 2))
    d[..., 0] = 1.0
    return d


def evaluate_rows(states, inputs, spec, prev_dirs=None):
    """Row values ``h`` (N+1, n_rows), 7-vector gradients and collision directions."""
    if prev_dirs is None or prev_dirs.shape != (spec.N + 1, len(spec.obstacles), 2):
        prev_dirs = _initial_directions(spec)
    return eval_rows(states, _pad_inputs(inputs), spec.bounds.as_array(), spec.obstacle_array(),
                     float(spec.robot_radius), prev_dirs)


def update_backoffs(states, inputs, spec, tube, prev_dirs=None):
    """Backoffs of every row along the iterate, and the tube they come from.

    Acceleration rows get zero backoff unless ``spec.apply_accel_backoff``.
    """
    sigmas = tube.sigmas(states, inputs, spec.disc)
    _, G, _ = evaluate_rows(states, inputs, spec, prev_dirs)
    beta, worst = backoffs_from_tube(sigmas, G, tube.K.K, bool(spec.apply_accel_backoff))
    if worst < -PSD_TOL:
        raise PSDViolation(f"propagated tube lost positive semidefiniteness ({worst:.3e})")
    return beta, sigmas


def build_qp(states, inputs, s0, spec, window, backoffs, settings=ZoroSettings(),
             extra_grads=None, prev_dirs=None):
    """Gauss-Newton QP of the fixed-backoff problem around ``(states, inputs)``.

    Row ``i`` at stage ``k`` is linearized as ``grad h . dz <= -h - beta``.
    ``extra_grads`` (N+1, n_rows, nz) adds a gradient contribution of the
    backoffs themselves; the zero-order method passes none.
    """
    N = spec.N
    ref_states, ref_inputs = window
    w = spec.weights
    nxt, As, Bs = trajectory_jacobians(states, inputs, spec.disc.dt, spec.disc.substeps)
    h, G, dirs = evaluate_rows(states, inputs, spec, prev_dirs)

    H_s = np.empty((N + 1, NX, NX))
    H_s[:N] = 2.0 * w.Q
    H_s[N] = 2.0 * w.Q_e
    H_u = np.broadcast_to(2.0 * w.R, (N, NU, NU)).copy()
    e_s = tracking_error(states, ref_states)
    e_u = inputs - ref_inputs
    nz = 7 * N + 5
    g = np.empty(nz)
    g[:7 * N].reshape(N, 7)[:, :NX] = 2.0 * e_s[:N] @ w.Q
    g[:7 * N].reshape(N, 7)[:, NX:] = 2.0 * e_u @ w.R
    g[7 * N:] = 2.0 * w.Q_e @ e_s[N]

    mask = row_mask(spec)
    ks, rs = np.nonzero(mask)
    m = ks.size
    D = np.zeros((m, nz))
    rows = np.arange(m)[:, None]
    D[rows, 7 * ks[:, None] + np.arange(NX)] = G[ks, rs, :NX]
    stage = ks < N
    D[rows[stage], 7 * ks[stage, None] + NX + np.arange(NU)] = G[ks[stage], rs[stage], NX:]
    if extra_grads is not None:
        D += extra_grads[ks, rs]
    e = -h[ks, rs] - backoffs[ks, rs]
    soft = ~np.isin(rs, INPUT_AFFINE_ROWS)

    qp = QProblem(N=N, H_s=H_s, H_u=H_u, g=g, A=As, B=Bs, c=nxt - states[1:],
                  ds0=np.asarray(s0, dtype=float) - states[0], D=D, e=e, soft=soft,
                  row_stage=ks, row_index=rs, slack_l1=settings.slack_penalty_l1,
                  slack_l2=settings.slack_penalty_l2, levenberg=settings.levenberg)
    return qp, dirs


def _stage_slacks(qp, xi, N):
    out = np.zeros(N + 1)
    out[qp.slack_stages] = xi
    return out


def _expand_mu(qp, mu, spec):
    full = np.zeros((spec.N + 1, spec.n_rows))
    full[qp.row_stage, qp.row_index] = mu
    return full


def kkt_residuals(states, inputs, s0, spec, window, backoffs, mu, settings=ZoroSettings(),
                  extra_grads=None, prev_dirs=None):
    """Stationarity, feasibility and complementarity of the fixed-backoff problem at a point.

    Returns the residual dict and the dynamics multipliers recovered from
    stationarity in the states.
    """
    qp, _ = build_qp(states, inputs, s0, spec, window, backoffs, replace(settings, levenberg=0.0),
                     extra_grads=extra_grads, prev_dirs=prev_dirs)
    mu_rows = mu[qp.row_stage, qp.row_index]
    dz = np.zeros(qp.nz)
    lam = stage_adjoints(qp, dz, mu_rows)
    stat = input_stationarity(qp, dz, mu_rows, lam)
    # rows as constraints: D dz <= e at dz = 0 means violation = -e
    slack_viol = -qp.e
    dyn = np.max(np.abs(qp.c)) if qp.c.size else 0.0
    feas = max(float(dyn), float(np.max(np.abs(qp.ds0))),
               float(np.max(slack_viol, initial=0.0)))
    comp = float(np.max(np.abs(mu_rows * slack_viol), initial=0.0))
    return {"stationarity": float(np.max(np.abs(stat), initial=0.0)),
            "feasibility": feas,
            "complementarity": comp,
            "dynamics": float(dyn)}, lam


def _sqp_iteration(states, inputs, s0, spec, window, backoffs, settings, dirs, extra_grads=None):
    qp, dirs = build_qp(states, inputs, s0, spec, window, backoffs, settings,
                        extra_grads=extra_grads, prev_dirs=dirs)
    sol = solve_qp(qp, tol=settings.qp_tol)
    N = spec.N
    new_states = states.copy()
    new_inputs = inputs.copy()
    for k in range(N):
        new_states[k] += sol.dz[s_index(k)]
        new_inputs[k] += sol.dz[u_index(k)]
    new_states[N] += sol.dz[s_index(N)]
    return new_states, new_inputs, qp, sol, dirs


def _finalize(states, inputs, s0, spec, window, backoffs, sigmas, qp, qsol, dirs, settings,
              iterations, outer, qp_iters, converged, extra_grads=None):
    mu = _expand_mu(qp, qsol.mu, spec)
    h, _, dirs = evaluate_rows(states, inputs, spec, dirs)
    viol = np.where(row_mask(spec), h + backoffs, -np.inf)
    slacks = _stage_slacks(qp, qsol.xi, spec.N)
    obj = trajectory_cost(states, inputs, window[0], window[1], spec.weights)
    obj += float(settings.slack_penalty_l1 * slacks.sum() + 0.5 * settings.slack_penalty_l2 * (slacks ** 2).sum())
    return OcpSolution(states=states, inputs=inputs, mu=mu, backoffs=backoffs,
                       sigmas=sigmas, slacks=slacks, row_violation=viol, directions=dirs,
                       iterations=iterations, outer_iterations=outer,
                       qp_active_set_iterations=qp_iters, converged=converged, objective=obj,
                       _problem=(np.array(s0, dtype=float), spec, window, settings, extra_grads))


def initial_guess(window, prev=None):
    """Iterate to start from: the previous solution as given, else the reference window."""
    if prev is not None:
        return prev.states.copy(), prev.inputs.copy(), prev.directions
    return window[0].copy(), window[1].copy(), None


def shift_solution(sol):
    """Warm start for the next sample: drop the first stage and repeat the last."""
    states = np.vstack([sol.states[1:], sol.states[-1:]])
    inputs = np.vstack([sol.inputs[1:], sol.inputs[-1:]])
    dirs = np.concatenate([sol.directions[1:], sol.directions[-1:]], axis=0)
    return replace(sol, states=states, inputs=inputs, directions=dirs, _problem=None,
                   _diagnostics=None)


def zoro_step(s0, prev, settings, spec, window, tube):
    """One real-time sample of zoRO.

    For each of ``qp_iterations_per_sample`` QP iterations the backoffs are
    first refreshed from the current iterate (for the first
    ``backoff_updates_per_sample`` iterations), then one full-step QP iteration
    is taken.  With the defaults this is backoffs from the previous solution,
    QP, backoffs from the new iterate, QP.  ``prev`` is used as the initial
    iterate as given (shift it with :func:`shift_solution` between samples);
    ``None`` starts from the reference window.
    """
    s0 = np.asarray(s0, dtype=float)
    states, inputs, dirs = initial_guess(window, prev)
    backoffs = sigmas = None
    qp_iters = 0
    for i in range(settings.qp_iterations_per_sample):
        if i < settings.backoff_updates_per_sample or backoffs is None:
            backoffs, sigmas = update_backoffs(states, inputs, spec, tube, dirs)
        states, inputs, qp, qsol, dirs = _sqp_iteration(states, inputs, s0, spec, window,
                                                        backoffs, settings, dirs)
        qp_iters += qsol.iterations
    return _finalize(states, inputs, s0, spec, window, backoffs, sigmas, qp, qsol, dirs, settings,
                     iterations=settings.qp_iterations_per_sample, outer=1, qp_iters=qp_iters,
                     converged=True)


def zoro_solve_to_convergence(s0, settings, spec, window, tube, prev=None):
    """Alternate fixed-backoff SQP solves and backoff updates until both settle.

    Stops when the backoffs change by at most ``tol_feasibility`` (inf-norm)
    and the last SQP step is at most ``tol_stationarity``.  On failure the
    last iterate is returned with ``converged=False``.
    """
    s0 = np.asarray(s0, dtype=float)
    states, inputs, dirs = initial_guess(window, prev)
    backoffs, sigmas = update_backoffs(states, inputs, spec, tube, dirs)
    total = 0
    qp_iters = 0
    converged = False
    outer = 0
    for outer in range(1, settings.max_outer_iterations + 1):
        step = np.inf
        for _ in range(settings.max_sqp_iterations):
            states, inputs, qp, qsol, dirs = _sqp_iteration(states, inputs, s0, spec, window,
                                                            backoffs, settings, dirs)
            total += 1
            qp_iters += qsol.iterations
            step = float(np.max(np.abs(qsol.dz)))
            if step <= settings.tol_stationarity:
                break
        new_backoffs, new_sigmas = update_backoffs(states, inputs, spec, tube, dirs)
        change = float(np.max(np.abs(new_backoffs - backoffs)))
        if change <= settings.tol_feasibility and step <= settings.tol_stationarity:
            converged = True
            break
        backoffs, sigmas = new_backoffs, new_sigmas
    return _finalize(states, inputs, s0, spec, window, backoffs, sigmas, qp, qsol, dirs, settings,
                     iterations=total, outer=outer, qp_iters=qp_iters, converged=converged)


def backoff_jacobian(states, inputs, spec, tube, prev_dirs=None, step=1e-6):
    """Derivative of every row backoff w.r.t. ``z`` by central differences, (N+1, n_rows, nz)."""
    if tube.kind != "ellipsoid":
        raise ValueError("backoff gradients are defined for ellipsoidal tubes")
    _, G, _ = evaluate_rows(states, inputs, spec, prev_dirs)
    return backoff_jacobian_fd(states, _pad_inputs(inputs), spec.disc.dt, spec.disc.substeps, G,
                               tube.K.K, tube.W.W, tube.sigma0, spec.obstacle_array(),
                               bool(spec.apply_accel_backoff), float(step))


def disregarded_gradient(sol, spec, tube, step=1e-6):
    """Lagrangian-gradient term that fixing the backoffs drops.

    ``sum_rows mu_row * d beta_row / dz`` over the rows that enter the
    problem.  Returns the vector over ``z`` and its inf-norm.
    """
    jac = backoff_jacobian(sol.states, sol.inputs, spec, tube, sol.directions, step)
    mu = np.where(row_mask(spec), sol.mu, 0.0)
    vec = np.einsum("kr,krz->z", mu, jac)
    return vec, float(np.max(np.abs(vec), initial=0.0))
