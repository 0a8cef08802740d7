import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from zoro_mpc.model import DiffDriveParams, DiscretizationParams, discrete_jacobians
from zoro_mpc.tube import (INPUT_FEEDBACK_SIGN, FeedbackGain, NoiseModel, PSDViolation, ScalarTube,
                           backoff, feedback_gain, propagate, propagate_trajectory,
                           sample_disturbance_trajectory, scalar_tube_radius, scalar_tube_sigmas,
                           terminal_backoff)

K = feedback_gain(DiffDriveParams(0.1), DiscretizationParams(0.05))
entries = st.floats(-2.0, 2.0, allow_nan=False)


def random_psd(rng, scale=1.0, rank=5):
    M = rng.standard_normal((5, rank)) * scale
    return M @ M.T


def random_jac(rng):
    s = np.array([rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-np.pi, np.pi),
                  rng.uniform(-0.5, 1.5), rng.uniform(-1.5, 1.5)])
    return discrete_jacobians(s, rng.uniform(-1, 1, 2))


def test_propagate_zero_tube_gives_W():
    rng = np.random.default_rng(0)
    A, B = random_jac(rng)
    W = random_psd(rng)
    np.testing.assert_allclose(propagate(np.zeros((5, 5)), A, B, K, W), W, atol=1e-15)


def test_propagate_identity():
    rng = np.random.default_rng(1)
    S = random_psd(rng)
    np.testing.assert_allclose(propagate(S, np.eye(5), np.zeros((5, 2)), K, np.zeros((5, 5))), S,
                               atol=1e-15)


def test_propagate_hand_value():
    A = np.eye(5)
    A[3, 3] = 0.5
    S = np.zeros((5, 5))
    S[3, 3] = 1.0
    W = np.zeros((5, 5))
    W[3, 3] = 0.1
    out = propagate(S, A, np.zeros((5, 2)), FeedbackGain.zero(), W)
    assert out[3, 3] == pytest.approx(0.35, abs=1e-15)


def test_propagate_trajectory_n1_and_zero():
    rng = np.random.default_rng(2)
    A, B = random_jac(rng)
    S0, W = random_psd(rng), random_psd(rng)
    traj = propagate_trajectory(S0, [(A, B)], K, W)
    assert traj.shape == (2, 5, 5)
    np.testing.assert_array_equal(traj[0], S0)
    np.testing.assert_array_equal(traj[1], propagate(S0, A, B, K, W))
    zero = propagate_trajectory(np.zeros((5, 5)), [random_jac(rng) for _ in range(4)], K,
                                np.zeros((5, 5)))
    np.testing.assert_array_equal(zero, 0.0)
    with pytest.raises(ValueError):
        propagate_trajectory(S0, [], K, W)


def test_linear_block_converges_to_fixed_point():
    dt, tau = 0.05, 0.1
    kappa = 1.0 - np.exp(-dt / tau)
    W = NoiseModel.diagonal([1e-4] * 3 + [0.0036, 0.0025])
    rng = np.random.default_rng(3)
    traj = propagate_trajectory(np.zeros((5, 5)), [random_jac(rng) for _ in range(60)], K, W)
    # brute-force iteration of the 2x2 recursion with A_lin - B_lin K_lin = (1 - kappa) I
    S = np.zeros((2, 2))
    for _ in range(50):
        S = (1 - kappa) ** 2 * S + W.W[3:, 3:]
    np.testing.assert_allclose(traj[50][3:, 3:], S, rtol=1e-12)
    fixed = W.W[3:, 3:] / (1 - (1 - kappa) ** 2)
    np.testing.assert_allclose(traj[-1][3:, 3:], fixed, rtol=1e-12)


def test_linear_block_is_trajectory_independent():
    rng = np.random.default_rng(4)
    W = random_psd(rng, 0.1)
    S0 = random_psd(rng, 0.1)
    t1 = propagate_trajectory(S0, [random_jac(rng) for _ in range(20)], K, W)
    t2 = propagate_trajectory(S0, [random_jac(rng) for _ in range(20)], K, W)
    np.testing.assert_array_equal(t1[:, 3:, 3:], t2[:, 3:, 3:])


def test_feedback_gain_values():
    g = feedback_gain(DiffDriveParams(0.05), DiscretizationParams(0.05))
    np.testing.assert_allclose(g.K_lin, (1 - np.exp(-1)) / 0.05 * np.eye(2), rtol=1e-14)
    assert g.K_lin[0, 0] == pytest.approx(12.642, abs=1e-3)
    np.testing.assert_array_equal(g.K[:, :3], 0.0)
    np.testing.assert_allclose(0.05 * np.eye(2) @ g.K_lin, (1 - np.exp(-1)) * np.eye(2), atol=1e-12)
    slow = feedback_gain(DiffDriveParams(1e12), DiscretizationParams(0.05))
    assert np.max(np.abs(slow.K_lin)) < 1e-9


def test_feedback_gain_degenerate():
    with pytest.raises(ValueError, match="degenerate discretization"):
        feedback_gain(DiffDriveParams(0.1), DiscretizationParams(0.0))


def test_backoff_examples():
    g = np.zeros(7)
    g[0] = 1.0
    assert backoff(g, np.diag([0.04, 0, 0, 0, 0]), K) == pytest.approx(0.2, abs=1e-15)
    assert backoff(np.ones(7), np.zeros((5, 5)), K) == 0.0
    gv = np.zeros(7)
    gv[3] = 1.0
    assert backoff(gv, np.diag([0, 0, 0, 0.01, 0]), K) == pytest.approx(0.1, abs=1e-15)


def test_backoff_input_rows_use_feedback_sign():
    # an input bound a <= a_max sees the tube through du = -K ds
    ga = np.zeros(7)
    ga[5] = 1.0
    S = np.diag([0, 0, 0, 0.01, 0])
    expected = abs(INPUT_FEEDBACK_SIGN * K.K[0, 3]) * 0.1
    assert backoff(ga, S, K) == pytest.approx(expected, rel=1e-14)
    g_mixed = np.zeros(7)
    g_mixed[3], g_mixed[5] = 1.0, 1.0 / K.K[0, 3]
    assert backoff(g_mixed, S, K) == pytest.approx(0.0, abs=1e-9)


def test_terminal_backoff():
    g = np.zeros(5)
    g[1] = 1.0
    assert terminal_backoff(g, np.diag([0, 0.09, 0, 0, 0])) == pytest.approx(0.3, abs=1e-15)
    assert terminal_backoff(g, np.zeros((5, 5))) == 0.0
    rng = np.random.default_rng(5)
    S = random_psd(rng)
    gs = rng.standard_normal(5)
    assert terminal_backoff(gs, S) == backoff(np.concatenate([gs, [0, 0]]), S,
                                              FeedbackGain.zero())


def test_backoff_psd_violation():
    S = -1e-6 * np.eye(5)
    with pytest.raises(PSDViolation):
        backoff(np.eye(7)[0], S, K)
    # tiny negative radicand from rounding is clamped to zero
    assert backoff(np.eye(7)[0], -1e-13 * np.eye(5), K) == 0.0


def test_noise_model_validation():
    with pytest.raises(PSDViolation):
        NoiseModel(-np.eye(5))
    with pytest.raises(ValueError):
        NoiseModel(np.eye(4))
    A = np.eye(5)
    A[0, 1] = 1.0
    with pytest.raises(ValueError):
        NoiseModel(A)


def test_scalar_tube_radius():
    st_ = ScalarTube(eps0=0.3, rho=0.9, eps_step=0.1)
    assert scalar_tube_radius(0, st_) == 0.3
    lin = ScalarTube(eps0=0.0, rho=1.0, eps_step=0.01)
    for k in range(10):
        assert scalar_tube_radius(k, lin) == pytest.approx(0.01 * k, abs=1e-15)
    geo = ScalarTube(eps0=0.0, rho=0.5, eps_step=0.1)
    assert abs(scalar_tube_radius(10, geo) - 0.2) < 1e-3
    with pytest.raises(ValueError):
        scalar_tube_radius(-1, geo)
    with pytest.raises(ValueError):
        ScalarTube(eps0=-1.0, rho=1.0, eps_step=0.0)


def test_scalar_tube_sigmas_and_circumscribing():
    W = NoiseModel.diagonal([0.01, 0.04, 0.0, 0.09, 0.0])
    st_ = ScalarTube.circumscribing(W, sigma0=np.diag([0.16, 0, 0, 0, 0]))
    assert st_.eps_step == pytest.approx(0.3)
    assert st_.eps0 == pytest.approx(0.4)
    sig = scalar_tube_sigmas(st_, 3)
    np.testing.assert_allclose(sig[2], (0.4 + 2 * 0.3) ** 2 * np.eye(5))
    # the sphere contains the one-step ellipsoid: r^2 I - W is PSD
    assert np.linalg.eigvalsh(st_.eps_step ** 2 * np.eye(5) - W.W)[0] >= -1e-15


def test_sampler_boundary_and_zero():
    W = NoiseModel.diagonal([0.01, 0.02, 0.003, 0.4, 0.05])
    rng = np.random.default_rng(6)
    for N in (1, 5, 20):
        w = sample_disturbance_trajectory(W, N, rng, "boundary")
        assert w.shape == (N, 5)
        assert W.stacked_norm_sq(w) == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_array_equal(sample_disturbance_trajectory(NoiseModel.zero(), 4, rng), 0.0)
    with pytest.raises(ValueError):
        sample_disturbance_trajectory(W, 0, rng)
    with pytest.raises(ValueError):
        sample_disturbance_trajectory(W, 3, rng, "edge")


def test_sampler_interior_coverage():
    W = NoiseModel.diagonal([0.01, 0.02, 0.003, 0.4, 0.05])
    rng = np.random.default_rng(7)
    norms = np.array([W.stacked_norm_sq(sample_disturbance_trajectory(W, 3, rng, "interior"))
                      for _ in range(1000)])
    assert norms.max() <= 1.0 + 1e-12
    assert np.mean(np.sqrt(norms) >= 0.9) > 0


def test_sampler_singular_W_stays_in_range():
    W = NoiseModel.diagonal([0.0, 0.0, 0.0, 0.04, 0.01])
    w = sample_disturbance_trajectory(W, 10, np.random.default_rng(8), "boundary")
    np.testing.assert_array_equal(w[:, :3], 0.0)
    assert W.stacked_norm_sq(w) == pytest.approx(1.0, abs=1e-9)
    assert NoiseModel(W.W).stacked_norm_sq(np.ones((1, 5))) == np.inf


def test_sampler_is_deterministic_given_seed():
    W = NoiseModel.diagonal([0.01] * 5)
    a = sample_disturbance_trajectory(W, 7, 42)
    b = sample_disturbance_trajectory(W, 7, 42)
    np.testing.assert_array_equal(a, b)


@given(arrays(float, (5, 5), elements=entries), arrays(float, (5, 5), elements=entries),
       st.floats(-np.pi, np.pi), st.floats(-1.0, 2.0))
def test_propagate_preserves_psd_property(M, N, theta, v):
    S = M @ M.T
    W = N @ N.T
    A, B = discrete_jacobians(np.array([0.0, 0.0, theta, v, 0.3]), np.array([0.2, -0.1]))
    out = propagate(S, A, B, K, W)
    assert np.max(np.abs(out - out.T)) <= 1e-12 * max(1.0, np.max(np.abs(out)))
    assert np.linalg.eigvalsh(out)[0] >= -1e-10 * max(1.0, np.max(np.abs(out)))


@given(arrays(float, (5, 5), elements=entries), arrays(float, (5, 3), elements=entries),
       arrays(float, (7,), elements=entries), st.floats(0.0, 100.0))
def test_backoff_homogeneity_property(M, P, g, c):
    S = M @ M.T
    base = backoff(g, S, K)
    assert backoff(g, c * S, K) == pytest.approx(np.sqrt(c) * base, abs=1e-10)
    assert backoff(c * g, S, K) == pytest.approx(c * base, rel=1e-10, abs=1e-10)


@given(arrays(float, (5, 5), elements=entries), arrays(float, (5, 2), elements=entries),
       arrays(float, (5, 5), elements=entries), st.floats(-np.pi, np.pi))
def test_loewner_monotonicity_property(M, P, S_, theta):
    W1 = M @ M.T
    W2 = W1 + P @ P.T
    S = S_ @ S_.T
    A, B = discrete_jacobians(np.array([0.0, 0.0, theta, 1.0, 0.1]), np.zeros(2))
    diff = propagate(S, A, B, K, W2) - propagate(S, A, B, K, W1)
    assert np.linalg.eigvalsh(0.5 * (diff + diff.T))[0] >= -1e-10 * max(1.0, np.abs(W2).max())
