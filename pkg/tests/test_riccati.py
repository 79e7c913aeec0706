import numpy as np
import pytest

import koopman_ddpc as kd
from koopman_ddpc.riccati import _log_linear_fit

A_S, B_S, Q_S, R_S = [[0.5]], [[1.0]], [[1.0]], [[1.0]]


def test_scalar_recursion_hand_values():
    sol = kd.riccati_recursion(A_S, B_S, Q_S, R_S, T=2)
    np.testing.assert_allclose(sol.P_at(2), [[1.0]])
    np.testing.assert_allclose(sol.K_at(1), [[0.25]])      # (1+1)^-1 * 1 * 1 * 0.5
    np.testing.assert_allclose(sol.P_at(1), [[1.125]])     # 1 + 0.25 - 0.5*0.25*0.5
    np.testing.assert_allclose(sol.Sigma_at(1), [[2.0]])


def test_zero_cost_recursion():
    sol = kd.riccati_recursion(A_S, B_S, np.zeros((1, 1)), R_S, T=6)
    np.testing.assert_allclose(sol.P, np.zeros((6, 1, 1)), atol=1e-15)
    np.testing.assert_allclose(sol.K, np.zeros((5, 1, 1)), atol=1e-15)


def test_no_input_recursion_is_geometric_sum():
    T = 8
    sol = kd.riccati_recursion(A_S, np.zeros((1, 1)), Q_S, R_S, T=T)
    for t in range(1, T + 1):
        expected = sum(0.25 ** k for k in range(T - t + 1))
        np.testing.assert_allclose(sol.P_at(t), [[expected]], rtol=1e-14)
        if t < T:
            np.testing.assert_allclose(sol.K_at(t), [[0.0]], atol=1e-15)


def test_recursion_identity_residual_per_step(quartic, quartic_weights):
    lin = quartic.lifted
    Q = quartic_weights.lifted_state_cost(lin.C)
    sol = kd.riccati_recursion(lin.A, lin.B, Q, quartic_weights.R, T=50)
    for t in range(1, 50):
        P_next = sol.P_at(t + 1)
        Sigma = quartic_weights.R + lin.B.T @ P_next @ lin.B
        K = np.linalg.solve(Sigma, lin.B.T @ P_next @ lin.A)
        P_expect = Q + lin.A.T @ P_next @ lin.A - lin.A.T @ P_next @ lin.B @ K
        assert np.linalg.norm(sol.P_at(t) - 0.5 * (P_expect + P_expect.T)) <= 1e-9
        np.testing.assert_allclose(sol.K_at(t), K, atol=1e-12)
        # P_t symmetric PSD, Sigma_t above R
        assert np.linalg.eigvalsh(sol.P_at(t)).min() >= -1e-9 * (1 + np.linalg.norm(sol.P_at(t)))
        assert np.linalg.eigvalsh(sol.Sigma_at(t) - quartic_weights.R).min() >= -1e-12


def test_recursion_requires_valid_inputs():
    with pytest.raises(ValueError):
        kd.riccati_recursion(A_S, B_S, Q_S, R_S, T=1)
    with pytest.raises(ValueError):
        kd.riccati_recursion(A_S, B_S, [[-1.0]], R_S, T=3)
    with pytest.raises(ValueError):
        kd.riccati_recursion(A_S, B_S, Q_S, [[0.0]], T=3)


def test_scalar_dare_closed_form():
    dare = kd.solve_dare(A_S, B_S, Q_S, R_S)
    p_expected = (0.25 + np.sqrt(4.0625)) / 2  # root of p^2 - 0.25 p - 1 = 0
    np.testing.assert_allclose(dare.P_inf, [[p_expected]], rtol=1e-10)
    k_expected = 0.5 * p_expected / (1.0 + p_expected)
    np.testing.assert_allclose(dare.K_inf, [[k_expected]], rtol=1e-10)
    np.testing.assert_allclose(dare.spectral_radius, 0.5 - k_expected, rtol=1e-9)
    assert dare.spectral_radius < 1.0


def test_dare_zero_cost():
    dare = kd.solve_dare(A_S, B_S, np.zeros((1, 1)), R_S)
    np.testing.assert_allclose(dare.P_inf, [[0.0]], atol=1e-12)
    np.testing.assert_allclose(dare.K_inf, [[0.0]], atol=1e-12)


def test_dare_quartic_invariants(quartic, quartic_weights):
    lin = quartic.lifted
    Q = quartic_weights.lifted_state_cost(lin.C)
    dare = kd.solve_dare(lin.A, lin.B, Q, quartic_weights.R)
    res = kd.dare_residual(dare.P_inf, lin.A, lin.B, Q, quartic_weights.R)
    assert res <= 1e-10 * (1 + np.linalg.norm(dare.P_inf, 2))
    assert dare.spectral_radius < 1.0
    assert np.linalg.eigvalsh(dare.P_inf).min() >= -1e-10


@pytest.mark.filterwarnings("ignore:overflow")
def test_dare_divergence_raises():
    # Unstabilizable and undetectable growth: B = 0 with unstable A.
    with pytest.raises(kd.DareConvergenceError):
        kd.solve_dare([[1.5]], [[0.0]], [[1.0]], [[1.0]], max_iter=2000)


def test_closed_loop_transition_conventions():
    sol = kd.riccati_recursion(A_S, B_S, Q_S, R_S, T=4)
    np.testing.assert_array_equal(kd.closed_loop_transition(sol, 1, 1), np.eye(1))
    direct = sol.A_cl(3) @ sol.A_cl(2)
    np.testing.assert_allclose(kd.closed_loop_transition(sol, 1, 3), direct)
    with pytest.raises(IndexError):
        kd.closed_loop_transition(sol, 1, 4)  # t2 must stay below T


def test_feedforward_gain_conventions(quartic, quartic_weights):
    lin = quartic.lifted
    Q = quartic_weights.lifted_state_cost(lin.C)
    sol = kd.riccati_recursion(lin.A, lin.B, Q, quartic_weights.R, T=12)
    # i = t: K_{t->t} = Sigma_t^{-1} B' P_{t+1}, and K_t = K_{t->t} A.
    for t in (1, 5, 10):
        ktt = kd.feedforward_gain(sol, t, t)
        direct = np.linalg.solve(sol.Sigma_at(t), lin.B.T @ sol.P_at(t + 1))
        np.testing.assert_allclose(ktt, direct, atol=1e-13)
        np.testing.assert_allclose(sol.K_at(t), ktt @ lin.A, atol=1e-12)
    # General index: brute-force product.
    t, i = 3, 9
    prod = np.eye(lin.n_x)
    for k in range(t + 1, i + 1):
        prod = sol.A_cl(k) @ prod
    expected = np.linalg.solve(sol.Sigma_at(t), lin.B.T @ prod.T @ sol.P_at(i + 1))
    np.testing.assert_allclose(kd.feedforward_gain(sol, t, i), expected, atol=1e-13)
    with pytest.raises(IndexError):
        kd.feedforward_gain(sol, 5, 12)


def test_feedforward_gain_scalar_hand_value():
    sol = kd.riccati_recursion(A_S, B_S, Q_S, R_S, T=2)
    np.testing.assert_allclose(kd.feedforward_gain(sol, 1, 1), [[0.5]])  # (1+1)^-1 * 1 * 1


def test_feedforward_zero_input_matrix():
    sol = kd.riccati_recursion(A_S, np.zeros((1, 1)), Q_S, R_S, T=6)
    for t in range(1, 5):
        for i in range(t, 6 - 1):
            np.testing.assert_allclose(kd.feedforward_gain(sol, t, i), [[0.0]], atol=1e-15)


def test_stability_diagnostics_scalar():
    diag = kd.stability_diagnostics(A_S, B_S, Q_S, R_S, T=60)
    k_expected = 0.5 * ((0.25 + np.sqrt(4.0625)) / 2) / (1 + (0.25 + np.sqrt(4.0625)) / 2)
    np.testing.assert_allclose(diag.rho_cl, 0.5 - k_expected, rtol=1e-8)
    np.testing.assert_allclose(diag.gamma_inf, 0.5 * (1 + diag.rho_cl), rtol=1e-12)
    assert 0 < diag.gamma_inf < 1
    assert diag.kappa_est >= 1.0
    assert diag.delta_stab_est >= 0
    assert not diag.defective


def test_stability_diagnostics_zero_cost():
    diag = kd.stability_diagnostics(A_S, B_S, np.zeros((1, 1)), R_S, T=40)
    np.testing.assert_allclose(diag.rho_cl, 0.5, rtol=1e-10)


def test_stability_diagnostics_quartic(quartic, quartic_weights):
    lin = quartic.lifted
    Q = quartic_weights.lifted_state_cost(lin.C)
    diag = kd.stability_diagnostics(lin.A, lin.B, Q, quartic_weights.R, T=200)
    assert 0 < diag.rho_inf_est < 1
    assert diag.rho_fit_r2 >= 0.95
    np.testing.assert_allclose(diag.rho_cl, 0.99, atol=1e-8)  # slowest uncontrolled mode
    assert diag.delta_stab_est >= 0


def test_recursion_dare_consistency_rate(quartic, quartic_weights):
    # ||P_1 - P_inf|| decays like rho^(T-1) over growing horizons.
    lin = quartic.lifted
    Q = quartic_weights.lifted_state_cost(lin.C)
    dare = kd.solve_dare(lin.A, lin.B, Q, quartic_weights.R)
    diag = kd.stability_diagnostics(lin.A, lin.B, Q, quartic_weights.R, T=120)
    gaps = {}
    for T in (20, 40, 80):
        sol = kd.riccati_recursion(lin.A, lin.B, Q, quartic_weights.R, T=T)
        gaps[T] = np.linalg.norm(sol.P_at(1) - dare.P_inf, 2)
    # Fitted constant from the largest horizon; smaller horizons must obey it.
    C_fit = gaps[80] / diag.rho_inf_est ** 79
    for T in (20, 40):
        assert gaps[T] <= 3.0 * C_fit * diag.rho_inf_est ** (T - 1)


def test_feedforward_gain_exponential_decay(quartic, quartic_weights):
    lin = quartic.lifted
    Q = quartic_weights.lifted_state_cost(lin.C)
    T = 60
    sol = kd.riccati_recursion(lin.A, lin.B, Q, quartic_weights.R, T=T)
    t = 10
    norms = [np.linalg.norm(kd.feedforward_gain(sol, t, i), 2) for i in range(t, t + 20)]
    slope, _, r2 = _log_linear_fit(np.arange(20, dtype=float), np.log(np.maximum(norms, 1e-300)))
    assert slope < 0
    assert r2 >= 0.9


def test_mpc_gain_deviation_decay(quartic, quartic_weights):
    # ||K_t - window gain|| shrinks as the window grows: fitted log-linear
    # trend over W in {5, 10, 15} has a clearly negative slope.
    lin = quartic.lifted
    Q = quartic_weights.lifted_state_cost(lin.C)
    T = 120
    sol = kd.riccati_recursion(lin.A, lin.B, Q, quartic_weights.R, T=T)
    devs = []
    for W in (5, 10, 15):
        bar = kd.riccati_recursion(lin.A, lin.B, Q, quartic_weights.R, T=W)
        K_bar1 = bar.K_at(1)
        worst = max(np.linalg.norm(sol.K_at(t) - K_bar1, 2) for t in range(1, T - W + 1))
        devs.append(worst)
    slope, _, _ = _log_linear_fit(np.array([5.0, 10.0, 15.0]), np.log(devs))
    assert slope < -0.1
