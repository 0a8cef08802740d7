"""Acceptance criteria, one test per criterion.

Each test prints a single ``[PASS]``/``[FAIL]`` line with the measured
quantities (collected again in the terminal summary) and then asserts.
"""

import json
import time

import numpy as np
import pytest

from conftest import make_spec, window_at
from oracles import arc_solution, enumerate_qp, fd_jacobian, random_convex_qp
from zoro_mpc.cli import main as cli_main
from zoro_mpc.config import (build_scenario, bundled_scenario, estimate_noise_bounds,
                             generate_reference)
from zoro_mpc.model import (DiffDriveParams, DiscretizationParams, discrete_jacobians,
                            integrate_step, rollout)
from zoro_mpc.ocp import N_AFFINE, Obstacle, reference_window
from zoro_mpc.oracle import solve_exact_robust
from zoro_mpc.qp import solve_dense_qp
from zoro_mpc.simulator import (STEADY_WINDOW, PlantModel, Scenario, bound_entry_step,
                                run_closed_loop, run_monte_carlo)
from zoro_mpc.tube import NoiseModel, backoff, feedback_gain, propagate
from zoro_mpc.zoro_solver import (TubeModel, ZoroSettings, disregarded_gradient, update_backoffs,
                                  zoro_solve_to_convergence, zoro_step)

pytestmark = pytest.mark.acceptance


def test_criterion_1_converged_zoro_matches_exact(report):
    t0 = time.perf_counter()
    sc = build_scenario(bundled_scenario("theorem1"))
    window = reference_window(sc.reference, 0, sc.spec.N)
    zo = zoro_solve_to_convergence(sc.s0, sc.settings, sc.spec, window, sc.tube)
    ex = solve_exact_robust(sc.s0, sc.spec, window, sc.tube, sc.settings)
    _, gnorm = disregarded_gradient(zo, sc.spec, sc.tube)
    dev = float(np.max(np.abs(zo.command - ex.command)))
    coll = float(np.max(zo.mu[:, N_AFFINE:], initial=0.0))
    elapsed = time.perf_counter() - t0
    ok = (zo.converged and ex.converged and dev <= 1e-6 and gnorm <= 1e-8 and coll == 0.0
          and sc.spec.N == 20 and elapsed < 30)
    report("1 converged zoRO vs exact robust solve", ok,
           f"|du0|={dev:.2e} (<=1e-6), disregarded gradient {gnorm:.2e} (<=1e-8), "
           f"max collision mu {coll:g}, max velocity-row mu {zo.mu[:, :4].max():.3g}, "
           f"{elapsed:.1f}s")
    assert ok


def test_criterion_2_closed_loop_agreement_and_bounded_error(report):
    t0 = time.perf_counter()
    cfg = bundled_scenario("convergence")
    sc = build_scenario(cfg)
    lz = run_closed_loop(sc, "zoro", rng_seed=cfg.seed)
    le = run_closed_loop(sc, "exact", rng_seed=cfg.seed)
    active = lz.collision_active | le.collision_active
    diff = float(np.max(np.abs(lz.err_pos - le.err_pos)[~active]))
    last = int(np.nonzero(lz.collision_active)[0][-1])
    post = lz.err_pos[last + 1:]
    entry, bound = bound_entry_step(post, STEADY_WINDOW)
    settles = entry <= post.size - STEADY_WINDOW
    decreases = float(np.max(post[-STEADY_WINDOW:])) < float(np.max(post))
    elapsed = time.perf_counter() - t0
    ok = (active.any() and diff <= 1e-5 and settles and decreases and elapsed < 300
          and not lz.failed.any() and not le.failed.any())
    report("2 closed loop: zoRO vs exact tracking", ok,
           f"max |e_zoro-e_exact| off-collision {diff:.2e} (<=1e-5) over {int((~active).sum())}"
           f" steps; post-obstacle peak {post.max():.4f}, bound {bound:.4f} held from step "
           f"{entry} of {post.size}; {elapsed:.0f}s")
    assert ok


def test_criterion_3_gauntlet_monte_carlo(report):
    t0 = time.perf_counter()
    cfg = bundled_scenario("gauntlet")
    sc = build_scenario(cfg)
    assert sc.plant.noise_mode == "boundary"
    zo = run_monte_carlo(sc, "zoro", 100, master_seed=cfg.seed)
    nom = run_monte_carlo(sc, "nominal", 100, master_seed=cfg.seed)
    zmin = np.array([lg.clearance_min.min() for lg in zo])
    nmin = np.array([lg.clearance_min.min() for lg in nom])
    fails = sum(int(lg.failed.sum()) for lg in zo + nom)
    elapsed = time.perf_counter() - t0
    ok = bool(np.all(zmin >= 0) and np.sum(nmin < 0) >= 1 and elapsed < 600)
    report("3 gauntlet robustness", ok,
           f"zoRO min clearance {zmin.min():.4f} ({int(np.sum(zmin >= 0))}/100 >= 0); nominal "
           f"collided in {int(np.sum(nmin < 0))}/100 (min {nmin.min():.4f}); solver failures "
           f"{fails}; {elapsed:.0f}s")
    assert ok


def test_criterion_4_gap_ellipsoid_vs_scalar_tube(report):
    cfg = bundled_scenario("gap")
    sc = build_scenario(cfg)
    lz = run_closed_loop(sc, "zoro", rng_seed=cfg.seed)
    ls = run_closed_loop(sc, "scalar-tube", rng_seed=cfg.seed)
    gate_x = min(o.cx for o in sc.spec.obstacles)
    z_final = float(lz.err_pos[-1])
    z_lat = float(np.max(np.abs(lz.states[:, 1] - sc.reference.states[0, 1])))
    s_lat = float(np.max(np.abs(ls.states[:, 1] - sc.reference.states[0, 1])))
    s_passed = bool(np.max(ls.states[:, 0]) > gate_x)
    ratio = s_lat / z_lat if z_lat > 0 else np.inf
    scalar_fails = (not s_passed) or ratio >= 3.0
    ok = z_final < 0.1 and lz.clearance_min.min() >= 0 and scalar_fails
    report("4 gap: ellipsoid vs scalar tube", ok,
           f"zoRO final position error {z_final:.4f} m (<0.1), min clearance "
           f"{lz.clearance_min.min():.3f}; scalar tube furthest x {ls.states[:, 0].max():.2f} "
           f"(gate at x={gate_x:g}, passed={s_passed}), lateral ratio {ratio:.2f}")
    assert ok


def test_criterion_5_tube_properties(report):
    rng = np.random.default_rng(5)
    K = feedback_gain(DiffDriveParams(0.1), DiscretizationParams(0.05))

    def rand_psd(scale=1.0):
        # random rank so that singular shape matrices are covered
        M = rng.standard_normal((5, int(rng.integers(1, 6)))) * scale
        return M @ M.T

    def rand_jac():
        s = np.concatenate([rng.uniform(-3, 3, 2), [rng.uniform(-np.pi, np.pi)],
                            rng.uniform(-1, 2, 2)])
        return discrete_jacobians(s, rng.uniform(-2, 2, 2))

    worst_sym, worst_eig = 0.0, np.inf
    for _ in range(1000):
        A, B = rand_jac()
        out = propagate(rand_psd(), A, B, K, rand_psd())
        scale = max(1.0, np.abs(out).max())
        worst_sym = max(worst_sym, np.abs(out - out.T).max() / scale)
        worst_eig = min(worst_eig, np.linalg.eigvalsh(out)[0] / scale)
    psd_ok = worst_sym == 0.0 and worst_eig >= -1e-10

    worst_loewner = np.inf
    for _ in range(200):
        A, B = rand_jac()
        S, W1 = rand_psd(), rand_psd()
        W2 = W1 + rand_psd()
        d = propagate(S, A, B, K, W2) - propagate(S, A, B, K, W1)
        worst_loewner = min(worst_loewner, np.linalg.eigvalsh(0.5 * (d + d.T))[0])
    loewner_ok = worst_loewner >= -1e-10

    spec = make_spec(N=20, obstacles=(Obstacle(3.0, 0.9, 0.5), Obstacle(6.0, -0.9, 0.5)))
    tube = TubeModel(K, NoiseModel(rand_psd(0.05)), rand_psd(0.05))
    b1, _ = update_backoffs(rng.standard_normal((21, 5)), rng.standard_normal((20, 2)), spec, tube)
    b2, _ = update_backoffs(rng.standard_normal((21, 5)), rng.standard_normal((20, 2)), spec, tube)
    bitwise_ok = np.array_equal(b1[:, :N_AFFINE], b2[:, :N_AFFINE])

    worst_hom = 0.0
    for _ in range(200):
        g, S, c = rng.standard_normal(7), rand_psd(), rng.uniform(0, 10)
        worst_hom = max(worst_hom, abs(backoff(g, c * S, K) - np.sqrt(c) * backoff(g, S, K)))
    hom_ok = worst_hom <= 1e-10

    ok = psd_ok and loewner_ok and bitwise_ok and hom_ok
    report("5 tube properties", ok,
           f"1000 steps: max asym {worst_sym:.1e}, min rel eig {worst_eig:.1e}; Loewner min eig "
           f"{worst_loewner:.1e} on 200 pairs; affine backoffs bitwise equal: {bitwise_ok}; "
           f"homogeneity err {worst_hom:.1e}")
    assert ok


def test_criterion_6_solver_verification(report):
    rng = np.random.default_rng(6)
    worst_qp = 0.0
    for _ in range(50):
        H, g, C, d = random_convex_qp(rng, int(rng.integers(2, 9)), int(rng.integers(1, 10)))
        x, _, _ = solve_dense_qp(H, g, C, d)
        _, f_ref = enumerate_qp(H, g, C, d)
        worst_qp = max(worst_qp, abs(0.5 * x @ H @ x + g @ x - f_ref))

    ref = generate_reference("line", {"speed": 1.0, "duration": 6.0})
    w = window_at(ref, 10, 20)
    sol = zoro_step(w[0][0], None, ZoroSettings(), make_spec(N=20), w, TubeModel.zero())
    gn_err = float(np.max(np.abs(sol.command - w[1][0])))

    worst_jac = 0.0
    for _ in range(100):
        s = np.concatenate([rng.uniform(-5, 5, 2), [rng.uniform(-np.pi, np.pi)],
                            [rng.uniform(-0.5, 1.5), rng.uniform(-1.5, 1.5)]])
        u = np.array([rng.uniform(-2, 2), rng.uniform(-3, 3)])
        A, B = discrete_jacobians(s, u)
        worst_jac = max(worst_jac,
                        np.abs(A - fd_jacobian(lambda x: integrate_step(x, u), s)).max(),
                        np.abs(B - fd_jacobian(lambda v: integrate_step(s, v), u)).max())

    s0 = np.array([0.2, -0.1, 0.3, 1.0, 0.8])
    errs = []
    for n in (10, 20, 40):
        states = rollout(s0, np.zeros((n, 2)), 2.0 / n, 1)
        errs.append(np.abs(states[-1] - arc_solution(s0, 2.0)).max())
    order = float(np.min(np.log2(np.array(errs[:-1]) / np.array(errs[1:]))))

    ok = worst_qp <= 1e-6 and gn_err <= 1e-8 and worst_jac <= 1e-6 and order >= 3.5
    report("6 solver verification", ok,
           f"QP objective err {worst_qp:.1e} (50 QPs), GN |u0-uref| {gn_err:.1e}, Jacobian FD "
           f"err {worst_jac:.1e} (100 pts), RK4 order {order:.2f}")
    assert ok


def test_criterion_7_noise_estimation(report):
    rng = np.random.default_rng(7)
    n = 10_000
    inputs = rng.uniform(-0.5, 0.5, (n, 2))
    states = np.empty((n + 1, 5))
    states[0] = [0, 0, 0, 1.0, 0]
    for k in range(n):
        states[k + 1] = integrate_step(states[k], inputs[k])
        states[k + 1, 3] += 0.02 * rng.standard_normal()
    sv = float(estimate_noise_bounds(states, inputs).sigma[3])
    recovery_ok = 0.019 <= sv <= 0.021

    ref = generate_reference("figure-eight", {"speed": 0.8, "period": 20.0,
                                              "speed_modulation": 0.3})
    plant = PlantModel(mode="diff-drive-mismatch", dd=DiffDriveParams(0.1),
                       noise=NoiseModel.diagonal([1e-6] * 5), noise_mode="interior")
    tube = TubeModel(feedback_gain(DiffDriveParams(0.1), DiscretizationParams()),
                     NoiseModel.diagonal([0.006 ** 2] * 3 + [0.06 ** 2] * 2),
                     np.diag([0.006 ** 2] * 3 + [0.06 ** 2] * 2))
    sc = Scenario(spec=make_spec(N=20), reference=ref, tube=tube, plant=plant, steps=300)
    log = run_closed_loop(sc, "zoro", rng_seed=7)
    sig = estimate_noise_bounds(log.states, log.commands).sigma
    dominance = float(min(sig[3], sig[4]) / max(sig[0], sig[1]))
    ok = recovery_ok and dominance >= 5.0
    report("7 noise estimation", ok,
           f"sigma_v {sv:.5f} in [0.019, 0.021]; mismatch plant sigma {np.round(sig, 5).tolist()}"
           f", velocity/position ratio {dominance:.1f} (>=5)")
    assert ok


def test_criterion_8_timing(report, tmp_path, capsys):
    code = cli_main(["bench", "gauntlet", "--out", str(tmp_path), "--samples", "40"])
    text = capsys.readouterr().out
    summary = json.loads((tmp_path / "summary.json").read_text())
    digest_ok = all(set(summary["solve_ms"][c]) == {"min", "q1", "median", "q3", "max"}
                    for c in ("zoro", "exact")) and "median" in text
    speedup = float(summary["median_speedup"])
    ok = code == 0 and digest_ok and speedup >= 10.0
    z, e = summary["solve_ms"]["zoro"], summary["solve_ms"]["exact"]
    report("8 timing", ok,
           f"N=20 median zoRO {z['median']:.2f} ms vs exact {e['median']:.1f} ms, speedup "
           f"{speedup:.1f}x (>=10); digest min/q1/median/q3/max emitted: {digest_ok}")
    assert ok
