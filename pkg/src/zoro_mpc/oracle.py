"""Reference solvers used to validate the zero-order scheme.

``solve_exact_robust`` treats the tube as a function of the trajectory and
keeps the backoff gradients in every constraint linearization, so its fixed
points are stationary points of the exact robust problem.  It is slow and
meant for validation only.
"""

import numpy as np

from .zoro_solver import (TubeModel, ZoroSettings, _finalize, _sqp_iteration, backoff_jacobian,
                          initial_guess, update_backoffs, zoro_solve_to_convergence)


class NoConvergence(RuntimeError):
    pass


def solve_exact_robust(s0, spec, window, tube, settings=ZoroSettings(), prev=None, fd_step=1e-6,
                       tol_stationarity=1e-8, tol_step=1e-8, raise_on_failure=False):
    """SQP on the robust problem with the tube eliminated by forward propagation.

    Each iteration linearizes ``h(z) + beta(g(z), z) <= 0`` with the full
    gradient ``grad h + grad beta`` (the latter by central differences) and
    takes a full Gauss-Newton step.  Converged when the step is below
    ``tol_step`` and the KKT stationarity below ``tol_stationarity``.  The
    differenced Jacobian leaves a step noise floor near 1e-9, so ``tol_step``
    is looser than the zero-order solver's step tolerance.
    """
    if tube.kind != "ellipsoid":
        raise ValueError("the exact robust oracle needs an ellipsoidal tube")
    s0 = np.asarray(s0, dtype=float)
    states, inputs, dirs = initial_guess(window, prev)
    converged = False
    qp_iters = 0
    it = 0
    sol = None
    for it in range(1, settings.max_sqp_iterations + 1):
        backoffs, sigmas = update_backoffs(states, inputs, spec, tube, dirs)
        jac = backoff_jacobian(states, inputs, spec, tube, dirs, fd_step)
        lin_states, lin_inputs = states, inputs
        states, inputs, qp, qsol, dirs = _sqp_iteration(states, inputs, s0, spec, window, backoffs,
                                                        settings, dirs, extra_grads=jac)
        qp_iters += qsol.iterations
        step = float(np.max(np.abs(qsol.dz)))
        if step <= max(tol_step, settings.tol_stationarity):
            # KKT of the exact problem, evaluated at the linearization point
            sol = _finalize(lin_states, lin_inputs, s0, spec, window, backoffs, sigmas, qp, qsol,
                            dirs, settings, iterations=it, outer=1, qp_iters=qp_iters,
                            converged=True, extra_grads=jac)
            if sol.kkt["stationarity"] <= tol_stationarity:
                converged = True
                break
    if not converged:
        backoffs, sigmas = update_backoffs(states, inputs, spec, tube, dirs)
        jac = backoff_jacobian(states, inputs, spec, tube, dirs, fd_step)
        sol = _finalize(states, inputs, s0, spec, window, backoffs, sigmas, qp, qsol, dirs, settings,
                        iterations=it, outer=1, qp_iters=qp_iters, converged=False,
                        extra_grads=jac)
        if raise_on_failure:
            raise NoConvergence(f"exact robust SQP did not converge in {it} iterations")
    return sol


def solve_nominal(s0, spec, window, settings=ZoroSettings(), prev=None):
    """Nominal MPC: the zero-order machinery with a zero tube, run to convergence."""
    return zoro_solve_to_convergence(s0, settings, spec, window, TubeModel.zero(), prev=prev)
