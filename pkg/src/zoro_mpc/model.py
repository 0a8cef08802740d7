"""Differential-drive robot model.

State ``s = [x, y, theta, v, omega]`` and input ``u = [a, alpha]``.  The
kinematic part ``(x, y, theta)`` is nonlinear; the velocity part ``(v, omega)``
is a double integrator of the accelerations, which RK4 with piecewise-constant
input integrates exactly.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._backend import jit

NX = 5
NU = 2
N_KIN = 3
N_LIN = 2

X, Y, THETA, V, OMEGA = range(NX)
A_IDX, ALPHA_IDX = range(NU)


class RobotState(NamedTuple):
    x: float
    y: float
    theta: float
    v: float
    omega: float

    def as_array(self):
        return np.array(self, dtype=float)


class ControlInput(NamedTuple):
    a: float
    alpha: float

    def as_array(self):
        return np.array(self, dtype=float)


@dataclass(frozen=True)
class DiscretizationParams:
    dt: float = 0.05
    substeps: int = 1
    rk_stages: int = 4

    def __post_init__(self):
        if not self.dt >= 0.0 or not np.isfinite(self.dt):
            raise ValueError(f"dt must be finite and non-negative, got {self.dt}")
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise ValueError(f"substeps must be an integer >= 1, got {self.substeps}")
        if self.rk_stages != 4:
            raise ValueError("only classical RK4 (rk_stages=4) is supported")


@dataclass(frozen=True)
class DiffDriveParams:
    tau: float = 0.1

    def __post_init__(self):
        if not self.tau > 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")


# --------------------------------------------------------------------------
# kernels


@jit
def _rhs(s, u):
    out = np.empty(5)
    out[0] = s[3] * np.cos(s[2])
    out[1] = s[3] * np.sin(s[2])
    out[2] = s[4]
    out[3] = u[0]
    out[4] = u[1]
    return out


@jit
def _rhs_state_jac(s):
    J = np.zeros((5, 5))
    c = np.cos(s[2])
    sn = np.sin(s[2])
    J[0, 2] = -s[3] * sn
    J[0, 3] = c
    J[1, 2] = s[3] * c
    J[1, 3] = sn
    J[2, 4] = 1.0
    return J


@jit
def rk4_step(s, u, dt, substeps):
    h = dt / substeps
    x = s.copy()
    for _ in range(substeps):
        k1 = _rhs(x, u)
        k2 = _rhs(x + 0.5 * h * k1, u)
        k3 = _rhs(x + 0.5 * h * k2, u)
        k4 = _rhs(x + h * k3, u)
        x = x + h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
    return x


@jit
def rk4_step_jac(s, u, dt, substeps):
    """RK4 step together with its exact state and input sensitivities."""
    h = dt / substeps
    x = s.copy()
    A = np.eye(5)
    B = np.zeros((5, 2))
    Fu = np.zeros((5, 2))
    Fu[3, 0] = 1.0
    Fu[4, 1] = 1.0
    I5 = np.eye(5)
    for _ in range(substeps):
        k1 = _rhs(x, u)
        F1 = _rhs_state_jac(x)
        dk1_ds = F1
        dk1_du = Fu.copy()

        x2 = x + 0.5 * h * k1
        k2 = _rhs(x2, u)
        F2 = _rhs_state_jac(x2)
        dk2_ds = F2 @ (I5 + 0.5 * h * dk1_ds)
        dk2_du = F2 @ (0.5 * h * dk1_du) + Fu

        x3 = x + 0.5 * h * k2
        k3 = _rhs(x3, u)
        F3 = _rhs_state_jac(x3)
        dk3_ds = F3 @ (I5 + 0.5 * h * dk2_ds)
        dk3_du = F3 @ (0.5 * h * dk2_du) + Fu

        x4 = x + h * k3
        k4 = _rhs(x4, u)
        F4 = _rhs_state_jac(x4)
        dk4_ds = F4 @ (I5 + h * dk3_ds)
        dk4_du = F4 @ (h * dk3_du) + Fu

        x = x + h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
        As = I5 + h * (dk1_ds + 2.0 * dk2_ds + 2.0 * dk3_ds + dk4_ds) / 6.0
        Bs = h * (dk1_du + 2.0 * dk2_du + 2.0 * dk3_du + dk4_du) / 6.0
        A = As @ A
        B = As @ B + Bs
    return x, A, B


@jit
def trajectory_jacobians(states, inputs, dt, substeps):
    """Successor states and sensitivities along a trajectory, one per stage."""
    N = inputs.shape[0]
    nxt = np.empty((N, 5))
    As = np.empty((N, 5, 5))
    Bs = np.empty((N, 5, 2))
    for k in range(N):
        x, A, B = rk4_step_jac(states[k], inputs[k], dt, substeps)
        nxt[k] = x
        As[k] = A
        Bs[k] = B
    return nxt, As, Bs


@jit
def rollout(s0, inputs, dt, substeps):
    N = inputs.shape[0]
    out = np.empty((N + 1, 5))
    out[0] = s0
    for k in range(N):
        out[k + 1] = rk4_step(out[k], inputs[k], dt, substeps)
    return out


# --------------------------------------------------------------------------
# public API


def continuous_dynamics(s, u):
    """Time derivative ``(v cos(theta), v sin(theta), omega, a, alpha)``."""
    return _rhs(np.asarray(s, dtype=float), np.asarray(u, dtype=float))


def integrate_step(s, u, p=DiscretizationParams()):
    """One sampling interval of RK4 with the input held constant."""
    return rk4_step(np.asarray(s, dtype=float), np.asarray(u, dtype=float),
                    float(p.dt), int(p.substeps))


def discrete_jacobians(s, u, p=DiscretizationParams()):
    """Exact sensitivities ``(A, B)`` of :func:`integrate_step`.

    These differentiate the RK4 map itself, stage by stage, so they agree with
    the integrator to rounding rather than to discretization error.
    """
    _, A, B = rk4_step_jac(np.asarray(s, dtype=float), np.asarray(u, dtype=float),
                           float(p.dt), int(p.substeps))
    return A, B


def linear_subsystem_matrices(p=DiscretizationParams()):
    """Constant ``(A_lin, B_lin)`` of the velocity subsystem."""
    return np.eye(N_LIN), p.dt * np.eye(N_LIN, NU)


def diff_drive_response(v_rob, omega_rob, v_cmd, omega_cmd, dt, dd=DiffDriveParams()):
    """First-order response of the inner velocity controller over ``dt``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    decay = np.exp(-dt / dd.tau)
    v = v_cmd + (v_rob - v_cmd) * decay
    omega = omega_cmd + (omega_rob - omega_cmd) * decay
    return v, omega


def wrap_angle(a):
    """Map angles to [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi
