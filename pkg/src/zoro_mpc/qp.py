"""Dense QP solving for the condensed tracking subproblem.

The stage-structured QP is condensed onto the input increments by eliminating
the linearized dynamics, then solved with the Goldfarb-Idnani dual active-set
method.  The dual method needs no feasible starting point and yields the exact
active set and multipliers.
"""

from dataclasses import dataclass, field

import numpy as np

from ._backend import jit
from .model import NU, NX

NZ_STAGE = NX + NU

QP_OK = 0
QP_INFEASIBLE = 1
QP_MAX_ITER = 2


class QPError(RuntimeError):
    def __init__(self, kind, message):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


def z_size(N):
    return NZ_STAGE * N + NX


def s_index(k):
    return slice(NZ_STAGE * k, NZ_STAGE * k + NX)


def u_index(k):
    return slice(NZ_STAGE * k + NX, NZ_STAGE * (k + 1))


def pack_z(states, inputs):
    N = inputs.shape[0]
    z = np.empty(z_size(N))
    for k in range(N):
        z[s_index(k)] = states[k]
        z[u_index(k)] = inputs[k]
    z[s_index(N)] = states[N]
    return z


def unpack_z(z, N):
    states = np.empty((N + 1, NX))
    inputs = np.empty((N, NU))
    for k in range(N):
        states[k] = z[s_index(k)]
        inputs[k] = z[u_index(k)]
    states[N] = z[s_index(N)]
    return states, inputs


def block_diag_stack(blocks):
    """Block-diagonal matrix from an array of equal square blocks (n, b, b)."""
    n, b, _ = blocks.shape
    out = np.zeros((n, b, n, b))
    idx = np.arange(n)
    out[idx, :, idx, :] = blocks
    return out.reshape(n * b, n * b)


@dataclass
class QProblem:
    """Stage-structured QP in the increments ``dz`` of ``z = [s_0, u_0, ..., s_N]``.

    minimize    1/2 dz^T H dz + g^T dz + sum_k (l1 xi_k + 1/2 l2 xi_k^2)
    subject to  ds_0 = ds0,  ds_{k+1} = A_k ds_k + B_k du_k + c_k
                D dz - xi_{stage(i)} [soft_i] <= e,   xi >= 0
    """

    N: int
    H_s: np.ndarray        # (N+1, 5, 5)
    H_u: np.ndarray        # (N, 2, 2)
    g: np.ndarray          # (nz,)
    A: np.ndarray          # (N, 5, 5)
    B: np.ndarray          # (N, 5, 2)
    c: np.ndarray          # (N, 5)
    ds0: np.ndarray        # (5,)
    D: np.ndarray          # (m, nz)
    e: np.ndarray          # (m,)
    soft: np.ndarray       # (m,) bool
    row_stage: np.ndarray  # (m,) stage index of each row
    row_index: np.ndarray  # (m,) OCP row index within its stage
    slack_l1: float = 1e4
    slack_l2: float = 1e4
    levenberg: float = 0.0
    _condensed: tuple = field(default=None, repr=False)
    _hessian: np.ndarray = field(default=None, repr=False)

    @property
    def nz(self):
        return z_size(self.N)

    @property
    def slack_stages(self):
        return np.unique(self.row_stage[self.soft])

    def hessian_z(self):
        if self._hessian is None:
            N = self.N
            blocks = np.zeros((N, NZ_STAGE, NZ_STAGE))
            blocks[:, :NX, :NX] = self.H_s[:N]
            blocks[:, NX:, NX:] = self.H_u
            H = np.zeros((self.nz, self.nz))
            H[:NZ_STAGE * N, :NZ_STAGE * N] = block_diag_stack(blocks)
            H[NZ_STAGE * N:, NZ_STAGE * N:] = self.H_s[N]
            self._hessian = H
        return self._hessian

    def condense(self):
        """Condensed data ``(Hc, gc, Cc, dc, T, t0)`` over ``x = [du, xi]``.

        ``dz = T du + t0`` reproduces the linearized dynamics.
        """
        if self._condensed is None:
            self._condensed = _condense(self)
        return self._condensed


@jit
def _sensitivity_map(A, B, c, ds0):
    N = A.shape[0]
    nz = 7 * N + 5
    T = np.zeros((nz, 2 * N))
    t0 = np.zeros(nz)
    Gam = np.zeros((5, 2 * N))
    gam = ds0.copy()
    for k in range(N):
        T[7 * k:7 * k + 5, :] = Gam
        t0[7 * k:7 * k + 5] = gam
        T[7 * k + 5, 2 * k] = 1.0
        T[7 * k + 6, 2 * k + 1] = 1.0
        Gam = A[k] @ Gam
        Gam[:, 2 * k:2 * k + 2] += B[k]
        gam = A[k] @ gam + c[k]
    T[7 * N:7 * N + 5, :] = Gam
    t0[7 * N:7 * N + 5] = gam
    return T, t0


def _condense(qp):
    N = qp.N
    nu = NU * N
    T, t0 = _sensitivity_map(qp.A, qp.B, qp.c, qp.ds0)
    Hz = qp.hessian_z()
    stages = qp.slack_stages
    ns = stages.size
    n = nu + ns
    Hc = np.zeros((n, n))
    Hc[:nu, :nu] = T.T @ Hz @ T + qp.levenberg * np.eye(nu)
    Hc[nu:, nu:] = qp.slack_l2 * np.eye(ns)
    gc = np.zeros(n)
    gc[:nu] = T.T @ (qp.g + Hz @ t0)
    gc[nu:] = qp.slack_l1
    m = qp.D.shape[0]
    Cc = np.zeros((m + ns, n))
    Cc[:m, :nu] = qp.D @ T
    dc = np.empty(m + ns)
    dc[:m] = qp.e - qp.D @ t0
    soft = np.nonzero(qp.soft)[0]
    Cc[soft, nu + np.searchsorted(stages, qp.row_stage[soft])] = -1.0
    Cc[m:, nu:] = -np.eye(ns)
    dc[m:] = 0.0
    return Hc, gc, Cc, dc, T, t0


@jit
def goldfarb_idnani(G, a, C, d, tol, max_iter):
    """Minimize ``1/2 x'Gx + a'x`` subject to ``Cx <= d`` for positive definite G.

    Returns ``(x, mu, status, iterations)`` with ``Gx + a + C'mu = 0`` at the
    solution.
    """
    n = G.shape[0]
    m = C.shape[0]
    L = np.linalg.cholesky(G)
    Jt = np.ascontiguousarray(np.linalg.inv(L))  # rows are columns of J = L^-T
    x = -(Jt.T @ (Jt @ a))
    R = np.zeros((n, n))
    act = np.full(n, -1, dtype=np.int64)
    u = np.zeros(n + 1)
    is_act = np.zeros(m, dtype=np.bool_)
    mu = np.zeros(m)
    q = 0
    it = 0
    status = QP_MAX_ITER
    dvec = np.empty(n)
    z = np.empty(n)
    r = np.empty(n)
    while it < max_iter:
        it += 1
        # most violated inactive constraint
        p = -1
        worst = -tol
        for i in range(m):
            if is_act[i]:
                continue
            si = d[i] - C[i] @ x
            scale = 1.0 + abs(d[i])
            if si / scale < worst:
                worst = si / scale
                p = i
        if p < 0:
            status = QP_OK
            break
        np_ = -C[p]
        sp = d[p] - C[p] @ x
        up = 0.0
        added = False
        while not added:
            it += 1
            if it > max_iter:
                break
            dvec[:] = Jt @ np_
            for i in range(n):
                z[i] = 0.0
            for j in range(q, n):
                z += dvec[j] * Jt[j]
            for j in range(q - 1, -1, -1):
                acc = dvec[j]
                for kk in range(j + 1, q):
                    acc -= R[j, kk] * r[kk]
                r[j] = acc / R[j, j]
            t1 = np.inf
            lpos = -1
            for j in range(q):
                if r[j] > 1e-13:
                    ratio = u[j] / r[j]
                    if ratio < t1:
                        t1 = ratio
                        lpos = j
            zn = z @ np_
            if abs(zn) <= 1e-14 * (1.0 + np_ @ np_):
                t2 = np.inf
            else:
                t2 = -sp / zn
            t = min(t1, t2)
            if t == np.inf:
                status = QP_INFEASIBLE
                return x, mu, status, it
            if t2 != np.inf:
                x += t * z
            for j in range(q):
                u[j] -= t * r[j]
            up += t
            if t2 <= t1:
                # add p to the active set
                dvec[:] = Jt @ np_
                for j in range(n - 1, q, -1):
                    b = dvec[j]
                    if b == 0.0:
                        continue
                    aa = dvec[j - 1]
                    hh = np.hypot(aa, b)
                    cc = aa / hh
                    ss = b / hh
                    dvec[j - 1] = hh
                    dvec[j] = 0.0
                    rowa = Jt[j - 1].copy()
                    rowb = Jt[j].copy()
                    Jt[j - 1] = cc * rowa + ss * rowb
                    Jt[j] = -ss * rowa + cc * rowb
                if dvec[q] < 0.0:
                    dvec[q] = -dvec[q]
                    Jt[q] = -Jt[q]
                for j in range(q + 1):
                    R[j, q] = dvec[j]
                act[q] = p
                u[q] = up
                is_act[p] = True
                q += 1
                added = True
            else:
                # drop the blocking constraint at position lpos
                is_act[act[lpos]] = False
                for j in range(lpos, q - 1):
                    act[j] = act[j + 1]
                    u[j] = u[j + 1]
                    for i in range(q):
                        R[i, j] = R[i, j + 1]
                for i in range(n):
                    R[i, q - 1] = 0.0
                act[q - 1] = -1
                u[q - 1] = 0.0
                q -= 1
                for j in range(lpos, q):
                    aa = R[j, j]
                    b = R[j + 1, j]
                    if b == 0.0:
                        continue
                    hh = np.hypot(aa, b)
                    cc = aa / hh
                    ss = b / hh
                    for kk in range(j, q):
                        ra = R[j, kk]
                        rb = R[j + 1, kk]
                        R[j, kk] = cc * ra + ss * rb
                        R[j + 1, kk] = -ss * ra + cc * rb
                    R[j + 1, j] = 0.0
                    rowa = Jt[j].copy()
                    rowb = Jt[j + 1].copy()
                    Jt[j] = cc * rowa + ss * rowb
                    Jt[j + 1] = -ss * rowa + cc * rowb
                for j in range(q):
                    if R[j, j] < 0.0:
                        for kk in range(j, q):
                            R[j, kk] = -R[j, kk]
                        Jt[j] = -Jt[j]
                sp = d[p] - C[p] @ x
    for j in range(q):
        mu[act[j]] = u[j]
    return x, mu, status, it


def solve_dense_qp(H, g, C, d, tol=1e-11, max_iter=None):
    """Solve ``min 1/2 x'Hx + g'x  s.t.  Cx <= d``; returns ``(x, mu, iterations)``."""
    H = np.ascontiguousarray(H, dtype=float)
    g = np.ascontiguousarray(g, dtype=float)
    C = np.ascontiguousarray(np.atleast_2d(C), dtype=float).reshape(-1, H.shape[0])
    d = np.ascontiguousarray(d, dtype=float).reshape(-1)
    if max_iter is None:
        max_iter = 20 * (H.shape[0] + C.shape[0]) + 100
    x, mu, status, it = goldfarb_idnani(H, g, C, d, float(tol), int(max_iter))
    if status == QP_INFEASIBLE:
        raise QPError("infeasible-after-slacks", "QP constraints are inconsistent")
    if status == QP_MAX_ITER:
        raise QPError("max-iterations", f"active-set method stopped after {it} iterations")
    return x, mu, it


@dataclass
class QPSolution:
    dz: np.ndarray
    xi: np.ndarray          # slack per slack stage
    mu: np.ndarray          # multiplier per row of D
    mu_slack: np.ndarray    # multiplier of xi >= 0
    lam: np.ndarray         # (N+1, 5) dynamics / initial-value multipliers
    iterations: int


def _try_without_slacks(qp, Hc, gc, Cc, dc, tol):
    """Solve with all soft rows hard; ``None`` unless that is the soft optimum.

    A hard solution is optimal for the slack problem exactly when, per slack
    stage, the soft-row multipliers sum to at most ``slack_l1`` (the slack
    bound multiplier takes the remainder).
    """
    nu = NU * qp.N
    m = qp.D.shape[0]
    n = Hc.shape[0]
    x, mu, status, it = goldfarb_idnani(Hc[:nu, :nu].copy(), gc[:nu].copy(),
                                        np.ascontiguousarray(Cc[:m, :nu]), dc[:m].copy(),
                                        float(tol), 20 * (nu + m) + 100)
    if status != QP_OK:
        return None
    stages = qp.slack_stages
    sums = np.zeros(stages.size)
    slot = np.searchsorted(stages, qp.row_stage[qp.soft])
    np.add.at(sums, slot, mu[qp.soft])
    if np.any(sums > qp.slack_l1):
        return None
    full_x = np.zeros(n)
    full_x[:nu] = x
    return full_x, np.concatenate([mu, qp.slack_l1 - sums]), it


def solve_qp(qp, tol=1e-11):
    """Solve a :class:`QProblem`; raises :class:`QPError` on failure.

    The problem is first solved with the soft rows hard, which is exact
    whenever the slacks stay at zero, and only otherwise with the slacks.
    """
    Hc, gc, Cc, dc, T, t0 = qp.condense()
    nu = NU * qp.N
    m = qp.D.shape[0]
    found = _try_without_slacks(qp, Hc, gc, Cc, dc, tol) if qp.slack_stages.size else None
    if found is None:
        found = solve_dense_qp(Hc, gc, Cc, dc, tol=tol)
    x, mu_all, it = found
    dz = T @ x[:nu] + t0
    mu = mu_all[:m]
    lam = stage_adjoints(qp, dz, mu)
    return QPSolution(dz=dz, xi=x[nu:], mu=mu, mu_slack=mu_all[m:], lam=lam, iterations=it)


@jit
def _adjoint_recursion(grad, A):
    N = A.shape[0]
    lam = np.zeros((N + 1, 5))
    lam[N] = grad[7 * N:7 * N + 5]
    for k in range(N - 1, -1, -1):
        lam[k] = grad[7 * k:7 * k + 5] + A[k].T @ lam[k + 1]
    return lam


def stage_adjoints(qp, dz, mu):
    """Multipliers of ``ds_{k+1} = A ds_k + B du_k + c`` (and of ``ds_0``) from stationarity in ``ds``."""
    grad = qp.hessian_z() @ dz + qp.g + qp.D.T @ mu
    return _adjoint_recursion(grad, qp.A)


def input_stationarity(qp, dz, mu, lam):
    """Residual of stationarity in the input increments (length 2N)."""
    grad = qp.hessian_z() @ dz + qp.g + qp.D.T @ mu
    N = qp.N
    grad_u = grad[:NZ_STAGE * N].reshape(N, NZ_STAGE)[:, NX:]
    return (grad_u + np.einsum("kij,ki->kj", qp.B, lam[1:])).ravel()
