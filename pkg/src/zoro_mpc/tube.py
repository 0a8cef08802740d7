"""Ellipsoidal uncertainty tubes and constraint backoffs."""

from dataclasses import dataclass, field

import numpy as np

from ._backend import jit
from .model import NU, NX, N_KIN, DiffDriveParams, DiscretizationParams, linear_subsystem_matrices

# Input deviations follow du = INPUT_FEEDBACK_SIGN * K ds, matching the
# closed-loop matrix (A - B K) of the tube recursion.
INPUT_FEEDBACK_SIGN = -1.0

PSD_TOL = 1e-10
EIG_NULL_TOL = 1e-12


class PSDViolation(ValueError):
    pass


def _check_psd(M, name):
    M = np.asarray(M, dtype=float)
    if M.shape != (NX, NX):
        raise ValueError(f"{name} must be {NX}x{NX}, got {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} has non-finite entries")
    if np.max(np.abs(M - M.T)) > 1e-9 * max(1.0, np.max(np.abs(M))):
        raise ValueError(f"{name} is not symmetric")
    M = 0.5 * (M + M.T)
    if np.linalg.eigvalsh(M)[0] < -PSD_TOL:
        raise PSDViolation(f"{name} is not positive semidefinite")
    return M


@dataclass(frozen=True)
class NoiseModel:
    """One-step disturbance shape matrix ``W``.

    A horizon of disturbances ``w_0..w_{N-1}`` is admissible when the stacked
    vector lies in the ellipsoid with block-diagonal shape ``diag(W, ..., W)``.
    """

    W: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "W", _check_psd(self.W, "W"))

    @classmethod
    def diagonal(cls, d):
        return cls(np.diag(np.asarray(d, dtype=float)))

    @classmethod
    def zero(cls):
        return cls(np.zeros((NX, NX)))

    def factor(self):
        """Range basis ``L`` with ``W = L L^T`` (columns only for eigenvalues > 1e-12)."""
        lam, V = np.linalg.eigh(self.W)
        keep = lam > EIG_NULL_TOL
        return V[:, keep] * np.sqrt(lam[keep])

    def stacked_norm_sq(self, ws):
        """``w^T diag(W,...,W)^+ w`` of a disturbance trajectory, shape (N, 5)."""
        ws = np.atleast_2d(np.asarray(ws, dtype=float))
        lam, V = np.linalg.eigh(self.W)
        keep = lam > EIG_NULL_TOL
        proj = ws @ V
        null_part = proj[:, ~keep]
        if null_part.size and np.max(np.abs(null_part)) > 1e-12:
            return np.inf
        return float(np.sum(proj[:, keep] ** 2 / lam[keep]))


@dataclass(frozen=True)
class FeedbackGain:
    K_lin: np.ndarray
    K: np.ndarray = field(init=False)

    def __post_init__(self):
        K_lin = np.asarray(self.K_lin, dtype=float).reshape(NU, NX - N_KIN)
        K = np.zeros((NU, NX))
        K[:, N_KIN:] = K_lin
        object.__setattr__(self, "K_lin", K_lin)
        object.__setattr__(self, "K", K)

    @classmethod
    def zero(cls):
        return cls(np.zeros((NU, NX - N_KIN)))


@dataclass(frozen=True)
class ScalarTube:
    eps0: float
    rho: float
    eps_step: float

    def __post_init__(self):
        if self.eps0 < 0 or self.rho < 0 or self.eps_step < 0:
            raise ValueError("scalar tube parameters must be non-negative")

    @classmethod
    def circumscribing(cls, W, sigma0=None, rho=1.0):
        """Hypersphere tube whose per-step radius circumscribes ``E(W)``."""
        W = W.W if isinstance(W, NoiseModel) else np.asarray(W, dtype=float)
        eps_step = float(np.sqrt(max(np.linalg.eigvalsh(W)[-1], 0.0)))
        eps0 = 0.0
        if sigma0 is not None:
            eps0 = float(np.sqrt(max(np.linalg.eigvalsh(np.asarray(sigma0, dtype=float))[-1], 0.0)))
        return cls(eps0=eps0, rho=float(rho), eps_step=eps_step)


# --------------------------------------------------------------------------
# kernels


@jit
def propagate_kernel(sigma, A, B, K, W):
    Acl = A - B @ K
    out = Acl @ sigma @ Acl.T + W
    return 0.5 * (out + out.T)


@jit
def propagate_tube(sigma0, As, Bs, K, W):
    N = As.shape[0]
    out = np.empty((N + 1, 5, 5))
    out[0] = sigma0
    for k in range(N):
        out[k + 1] = propagate_kernel(out[k], As[k], Bs[k], K, W)
    return out


# --------------------------------------------------------------------------
# public API


def propagate(sigma_k, A, B, K, W):
    """One step of ``Sigma' = (A - B K) Sigma (A - B K)^T + W``, symmetrized."""
    K = K.K if isinstance(K, FeedbackGain) else np.asarray(K, dtype=float)
    W = W.W if isinstance(W, NoiseModel) else np.asarray(W, dtype=float)
    return propagate_kernel(np.asarray(sigma_k, dtype=float), np.asarray(A, dtype=float),
                            np.asarray(B, dtype=float), K, W)


def propagate_trajectory(sigma0, jacs, K, W):
    """Tube ``Sigma_0..Sigma_N`` along the stage Jacobians ``jacs = [(A_k, B_k)]``."""
    if len(jacs) < 1:
        raise ValueError("need at least one stage")
    As = np.ascontiguousarray([np.asarray(a, dtype=float) for a, _ in jacs])
    Bs = np.ascontiguousarray([np.asarray(b, dtype=float) for _, b in jacs])
    K = K.K if isinstance(K, FeedbackGain) else np.asarray(K, dtype=float)
    W = W.W if isinstance(W, NoiseModel) else np.asarray(W, dtype=float)
    return propagate_tube(np.asarray(sigma0, dtype=float), As, Bs, K, W)


def feedback_gain(dd=DiffDriveParams(), p=DiscretizationParams()):
    """Constant gain acting on ``(v, omega)`` that reproduces the inner controller.

    ``K_lin`` solves ``B_lin K_lin = (1 - exp(-dt/tau)) I``; the kinematic
    columns are zero.
    """
    if p.dt <= 0:
        raise ValueError("degenerate discretization: dt must be positive")
    _, B_lin = linear_subsystem_matrices(p)
    kappa = 1.0 - np.exp(-p.dt / dd.tau)
    return FeedbackGain(np.linalg.solve(B_lin, kappa * np.eye(NU)))


def _radicand_sqrt(r):
    if r < -PSD_TOL:
        raise PSDViolation(f"PSD violation: backoff radicand {r:.3e}")
    return float(np.sqrt(r)) if r > 0.0 else 0.0


def backoff(grad_h, sigma, K):
    """Backoff of one constraint row with gradient ``(d/ds, d/du)`` (length 7)."""
    g = np.asarray(grad_h, dtype=float)
    K = K.K if isinstance(K, FeedbackGain) else np.asarray(K, dtype=float)
    q = g[:NX] + INPUT_FEEDBACK_SIGN * (K.T @ g[NX:NX + NU])
    return _radicand_sqrt(q @ np.asarray(sigma, dtype=float) @ q)


def terminal_backoff(grad_hN, sigmaN):
    g = np.asarray(grad_hN, dtype=float)[:NX]
    return _radicand_sqrt(g @ np.asarray(sigmaN, dtype=float) @ g)


def scalar_tube_radius(k, st):
    """Radius after ``k`` steps of ``eps_{k+1} = rho eps_k + eps_step``."""
    if k < 0:
        raise ValueError("k must be non-negative")
    eps = st.eps0
    for _ in range(int(k)):
        eps = st.rho * eps + st.eps_step
    return eps


def scalar_tube_sigmas(st, N):
    """Hypersphere tube expressed as shape matrices ``eps_k^2 I``."""
    radii = np.array([scalar_tube_radius(k, st) for k in range(N + 1)])
    return radii[:, None, None] ** 2 * np.eye(NX)[None, :, :]


def sample_disturbance_trajectory(W, N, rng=None, mode="boundary"):
    """Draw ``w_0..w_{N-1}`` with the stacked vector inside ``E(diag(W,...,W))``.

    ``boundary`` returns a point on the ellipsoid surface, ``interior`` a point
    uniformly distributed in the ellipsoid.  Components in the null space of
    ``W`` are zero.
    """
    if mode not in ("boundary", "interior"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    if N < 1:
        raise ValueError("N must be >= 1")
    noise = W if isinstance(W, NoiseModel) else NoiseModel(W)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    L = noise.factor()
    r = L.shape[1]
    if r == 0:
        return np.zeros((N, NX))
    z = rng.standard_normal((N, r))
    z /= np.linalg.norm(z)
    if mode == "interior":
        z *= rng.uniform() ** (1.0 / (N * r))
    return z @ L.T
