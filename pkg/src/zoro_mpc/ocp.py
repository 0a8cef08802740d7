"""Tracking OCP data: references, costs and constraint rows.

Every stage carries the same row layout, ``8 + n_obstacles`` rows::

    0  v - v_max          4  a - a_max
    1  v_min - v          5  a_min - a
    2  omega - omega_max  6  alpha - alpha_max
    3  omega_min - omega  7  alpha_min - alpha
    8+j  (r_j + r) - ||p - c_j||

with ``h <= 0`` feasible.  Rows that do not exist at a stage (inputs at the
terminal stage, state rows at the fixed initial stage) are masked out.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from ._backend import jit
from .model import NU, NX, DiscretizationParams, rk4_step, rk4_step_jac, wrap_angle

N_AFFINE = 8
SINGULAR_DISTANCE = 1e-9


class RowKind(str, Enum):
    AFFINE_LIN = "affine-lin"
    COLLISION = "collision"


AFFINE_ROW_NAMES = ("v_max", "v_min", "omega_max", "omega_min",
                    "a_max", "a_min", "alpha_max", "alpha_min")
STATE_AFFINE_ROWS = (0, 1, 2, 3)
INPUT_AFFINE_ROWS = (4, 5, 6, 7)


@dataclass(frozen=True)
class Obstacle:
    cx: float
    cy: float
    radius: float

    def __post_init__(self):
        if not self.radius >= 0:
            raise ValueError(f"obstacle radius must be >= 0, got {self.radius}")


@dataclass(frozen=True)
class Weights:
    Q: np.ndarray
    R: np.ndarray
    Q_e: np.ndarray

    def __post_init__(self):
        for name, dim, strict in (("Q", NX, False), ("R", NU, True), ("Q_e", NX, False)):
            M = np.asarray(getattr(self, name), dtype=float)
            if M.shape != (dim, dim) or not np.allclose(M, M.T):
                raise ValueError(f"{name} must be a symmetric {dim}x{dim} matrix")
            lo = np.linalg.eigvalsh(M)[0]
            if (strict and lo <= 0) or lo < -1e-12:
                raise ValueError(f"{name} must be {'positive definite' if strict else 'PSD'}")
            object.__setattr__(self, name, 0.5 * (M + M.T))

    @classmethod
    def diagonal(cls, q, r, q_e=None):
        q_e = q if q_e is None else q_e
        return cls(np.diag(np.asarray(q, float)), np.diag(np.asarray(r, float)),
                   np.diag(np.asarray(q_e, float)))


@dataclass(frozen=True)
class Bounds:
    v_min: float = -0.5
    v_max: float = 1.5
    omega_min: float = -1.5
    omega_max: float = 1.5
    a_min: float = -2.0
    a_max: float = 2.0
    alpha_min: float = -3.0
    alpha_max: float = 3.0

    def __post_init__(self):
        for lo, hi in (("v_min", "v_max"), ("omega_min", "omega_max"),
                       ("a_min", "a_max"), ("alpha_min", "alpha_max")):
            if not getattr(self, lo) < getattr(self, hi):
                raise ValueError(f"bounds: {lo} must be < {hi}")

    def as_array(self):
        return np.array([self.v_min, self.v_max, self.omega_min, self.omega_max,
                         self.a_min, self.a_max, self.alpha_min, self.alpha_max])


@dataclass(frozen=True)
class OcpSpec:
    N: int
    weights: Weights
    bounds: Bounds = field(default_factory=Bounds)
    obstacles: tuple = ()
    robot_radius: float = 0.5
    apply_accel_backoff: bool = False
    disc: DiscretizationParams = field(default_factory=DiscretizationParams)

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not self.robot_radius > 0:
            raise ValueError("robot_radius must be positive")
        object.__setattr__(self, "obstacles", tuple(self.obstacles))

    @property
    def n_rows(self):
        return N_AFFINE + len(self.obstacles)

    def obstacle_array(self):
        if not self.obstacles:
            return np.zeros((0, 3))
        return np.array([[o.cx, o.cy, o.radius] for o in self.obstacles], dtype=float)


@dataclass
class ReferenceTrajectory:
    dt: float
    states: np.ndarray
    inputs: np.ndarray
    closed: bool = False

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.inputs = np.asarray(self.inputs, dtype=float).reshape(-1, NU)
        if self.states.shape[0] == 0 or self.states.shape[1] != NX:
            raise ValueError("reference needs at least one 5-dimensional state")
        if self.inputs.shape[0] < self.states.shape[0] - 1:
            raise ValueError("reference needs one input per transition")

    def __len__(self):
        return self.states.shape[0]

    def consistency_residual(self, p=None):
        """Max abs defect ``|psi(s_k, u_k) - s_{k+1}|`` over the reference."""
        p = p or DiscretizationParams(dt=self.dt)
        res = 0.0
        for k in range(self.states.shape[0] - 1):
            nxt = rk4_step(self.states[k], self.inputs[k], p.dt, p.substeps)
            res = max(res, float(np.max(np.abs(nxt - self.states[k + 1]))))
        return res


def reference_window(ref, t_index, N):
    """Reference states ``t..t+N`` and inputs ``t..t+N-1``.

    Open references hold the last state with zero input past their end; closed
    references index modulo their period (the number of inputs).
    """
    if len(ref) == 0:
        raise ValueError("empty reference")
    if t_index < 0:
        raise ValueError("t_index must be >= 0")
    idx = np.arange(t_index, t_index + N + 1)
    if ref.closed:
        period = ref.inputs.shape[0]
        return ref.states[idx % period].copy(), ref.inputs[idx[:-1] % period].copy()
    last = ref.states.shape[0] - 1
    states = ref.states[np.minimum(idx, last)].copy()
    uidx = idx[:-1]
    inputs = np.zeros((N, NU))
    valid = uidx < last
    inputs[valid] = ref.inputs[uidx[valid]]
    return states, inputs


def tracking_error(s, s_ref):
    """State difference with the heading component wrapped to the shortest angle."""
    e = np.asarray(s, dtype=float) - np.asarray(s_ref, dtype=float)
    e[..., 2] = wrap_angle(e[..., 2])
    return e


def stage_cost(s, u, s_ref, u_ref, w):
    e = tracking_error(s, s_ref)
    du = np.asarray(u, dtype=float) - np.asarray(u_ref, dtype=float)
    return float(du @ w.R @ du + e @ w.Q @ e)


def terminal_cost(s, s_ref, w):
    e = tracking_error(s, s_ref)
    return float(e @ w.Q_e @ e)


def trajectory_cost(states, inputs, ref_states, ref_inputs, w):
    N = inputs.shape[0]
    e = tracking_error(states, ref_states)
    du = np.asarray(inputs, dtype=float) - np.asarray(ref_inputs, dtype=float)
    total = np.einsum("ki,ij,kj->", e[:N], w.Q, e[:N]) + np.einsum("ki,ij,kj->", du, w.R, du)
    return float(total) + terminal_cost(states[N], ref_states[N], w)


def collision_constraint(s, obs, robot_radius, fallback_direction=None):
    """Collision row ``h = (r_obs + r) - distance`` and its state gradient.

    Below a center distance of 1e-9 the gradient direction is undefined; the
    supplied fallback direction (unit vector from obstacle to robot, e.g. from
    the previous iterate) is used, else +x.
    """
    dx = s[0] - obs.cx
    dy = s[1] - obs.cy
    dist = float(np.hypot(dx, dy))
    h = obs.radius + robot_radius - dist
    grad = np.zeros(NX)
    if dist < SINGULAR_DISTANCE:
        n = np.array([1.0, 0.0]) if fallback_direction is None else np.asarray(fallback_direction, float)
    else:
        n = np.array([dx, dy]) / dist
    grad[0:2] = -n
    return h, grad


def constraint_blocks(spec):
    """Row tags of one stage; affine rows carry their constant 7-vector gradient."""
    rows = []
    for i, name in enumerate(AFFINE_ROW_NAMES):
        g = np.zeros(NX + NU)
        col = (3, 3, 4, 4, 5, 5, 6, 6)[i]
        g[col] = 1.0 if i % 2 == 0 else -1.0
        rows.append({"kind": RowKind.AFFINE_LIN, "name": name, "grad": g})
    for j in range(len(spec.obstacles)):
        rows.append({"kind": RowKind.COLLISION, "name": f"obstacle_{j}", "grad": None})
    return rows


def row_mask(spec):
    """Rows that enter the optimization, shape (N+1, n_rows)."""
    mask = np.ones((spec.N + 1, spec.n_rows), dtype=bool)
    mask[0, list(STATE_AFFINE_ROWS)] = False
    mask[0, N_AFFINE:] = False
    mask[spec.N, list(INPUT_AFFINE_ROWS)] = False
    return mask


def collision_rows(spec):
    return np.arange(N_AFFINE, spec.n_rows)


# --------------------------------------------------------------------------
# kernels


@jit
def eval_rows(states, inputs, bounds, obstacles, robot_radius, prev_dirs):
    """Row values and (d/ds, d/du) gradients at every stage.

    ``inputs`` has one row per stage including a zero terminal row.
    """
    n1 = states.shape[0]
    n_obs = obstacles.shape[0]
    nr = 8 + n_obs
    h = np.zeros((n1, nr))
    G = np.zeros((n1, nr, 7))
    dirs = np.empty((n1, n_obs, 2))
    for k in range(n1):
        s = states[k]
        u = inputs[k]
        h[k, 0] = s[3] - bounds[1]
        h[k, 1] = bounds[0] - s[3]
        h[k, 2] = s[4] - bounds[3]
        h[k, 3] = bounds[2] - s[4]
        h[k, 4] = u[0] - bounds[5]
        h[k, 5] = bounds[4] - u[0]
        h[k, 6] = u[1] - bounds[7]
        h[k, 7] = bounds[6] - u[1]
        G[k, 0, 3] = 1.0
        G[k, 1, 3] = -1.0
        G[k, 2, 4] = 1.0
        G[k, 3, 4] = -1.0
        G[k, 4, 5] = 1.0
        G[k, 5, 5] = -1.0
        G[k, 6, 6] = 1.0
        G[k, 7, 6] = -1.0
        for j in range(n_obs):
            dx = s[0] - obstacles[j, 0]
            dy = s[1] - obstacles[j, 1]
            d = np.sqrt(dx * dx + dy * dy)
            if d < 1e-9:
                nx_ = prev_dirs[k, j, 0]
                ny_ = prev_dirs[k, j, 1]
            else:
                nx_ = dx / d
                ny_ = dy / d
            dirs[k, j, 0] = nx_
            dirs[k, j, 1] = ny_
            h[k, 8 + j] = obstacles[j, 2] + robot_radius - d
            G[k, 8 + j, 0] = -nx_
            G[k, 8 + j, 1] = -ny_
    return h, G, dirs


@jit
def stage_backoffs(S, Gk, K, accel_backoff, out):
    """Backoffs of one stage's rows; returns the most negative radicand.

    The input gradient enters through ``-K`` (see ``tube.INPUT_FEEDBACK_SIGN``).
    """
    nr = Gk.shape[0]
    worst = 0.0
    q = np.empty(5)
    for r in range(nr):
        out[r] = 0.0
        if (not accel_backoff) and r >= 4 and r < 8:
            continue
        for i in range(5):
            q[i] = Gk[r, i] - (K[0, i] * Gk[r, 5] + K[1, i] * Gk[r, 6])
        rad = q @ (S @ q)
        if rad < worst:
            worst = rad
        if rad > 0.0:
            out[r] = np.sqrt(rad)
    return worst


@jit
def backoffs_from_tube(sigmas, G, K, accel_backoff):
    """Backoff of every row from the tube and the row gradients.

    Returns the backoffs and the most negative radicand seen (for PSD checks).
    """
    n1 = sigmas.shape[0]
    beta = np.zeros((n1, G.shape[1]))
    worst = 0.0
    for k in range(n1):
        w = stage_backoffs(sigmas[k], G[k], K, accel_backoff, beta[k])
        if w < worst:
            worst = w
    return beta, worst


@jit
def _collision_grads(s, obstacles, Gk):
    for j in range(obstacles.shape[0]):
        dx = s[0] - obstacles[j, 0]
        dy = s[1] - obstacles[j, 1]
        d = np.sqrt(dx * dx + dy * dy)
        if d >= 1e-9:
            Gk[8 + j, 0] = -dx / d
            Gk[8 + j, 1] = -dy / d


@jit
def backoff_jacobian_fd(states, inputs, dt, substeps, G, K, W, sigma0, obstacles,
                        accel_backoff, step):
    """Central finite differences of every row backoff w.r.t. ``z = [s_0, u_0, ..., s_N]``.

    Each backoff depends on ``z`` through the tube (stage Jacobians of earlier
    stages) and through the row gradient at its own stage.  ``G`` holds the
    row gradients at the base point; ``inputs`` is padded to N+1 rows.
    """
    n1 = states.shape[0]
    N = n1 - 1
    nr = G.shape[1]
    nz = 7 * N + 5
    jac = np.zeros((n1, nr, nz))
    As = np.empty((N, 5, 5))
    Bs = np.empty((N, 5, 2))
    for k in range(N):
        _, A, B = rk4_step_jac(states[k], inputs[k], dt, substeps)
        As[k] = A
        Bs[k] = B
    sig = np.empty((n1, 5, 5))
    sig[0] = sigma0
    for k in range(N):
        Acl = As[k] - Bs[k] @ K
        S = Acl @ sig[k] @ Acl.T + W
        sig[k + 1] = 0.5 * (S + S.T)
    bp = np.empty(nr)
    bm = np.empty(nr)
    Gj = np.empty((nr, 7))
    for j in range(n1):
        nvar = 7 if j < N else 5
        for i in range(nvar):
            zi = 7 * j + i
            for sgn in range(2):
                delta = step if sgn == 0 else -step
                sj = states[j].copy()
                uj = inputs[j].copy()
                if i < 5:
                    sj[i] += delta
                else:
                    uj[i - 5] += delta
                # own-stage gradient dependence (collision directions)
                if i < 2:
                    Gj[:, :] = G[j]
                    _collision_grads(sj, obstacles, Gj)
                    out = bp if sgn == 0 else bm
                    stage_backoffs(sig[j], Gj, K, accel_backoff, out)
                    for r in range(nr):
                        jac[j, r, zi] += (out[r] if sgn == 0 else -out[r]) / (2.0 * step)
                    continue  # A_j does not depend on position
                if j == N:
                    continue
                _, A, B = rk4_step_jac(sj, uj, dt, substeps)
                Acl = A - B @ K
                S = Acl @ sig[j] @ Acl.T + W
                S = 0.5 * (S + S.T)
                for k in range(j + 1, n1):
                    out = bp if sgn == 0 else bm
                    stage_backoffs(S, G[k], K, accel_backoff, out)
                    for r in range(nr):
                        jac[k, r, zi] += (out[r] if sgn == 0 else -out[r]) / (2.0 * step)
                    if k < N:
                        Acl = As[k] - Bs[k] @ K
                        S = Acl @ S @ Acl.T + W
                        S = 0.5 * (S + S.T)
    return jac
