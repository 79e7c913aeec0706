import numpy as np
import pytest

import koopman_ddpc as kd
from conftest import make_scalar_linear


def run_quartic(quartic, weights, r, z1, W, controller="lmpc", T_ini=10, seed=42):
    if controller == "lmpc":
        ctrl = kd.lmpc_closed_form(quartic, weights, W)
    else:
        u_d, z_d = kd.collect_excitation(quartic, z1, 2 * W + 24, -1.0, 1.0, seed=seed)
        ctrl = kd.ddpc_controller(kd.build_library(u_d, z_d, T_ini, W), weights)
    return kd.run_algorithm1(quartic, ctrl, weights, r, z1, W, preroll=T_ini)


def test_dynamic_regret_is_cost_difference():
    run = kd.TrackingRun(system="x", W=2, states=np.zeros((3, 1)), controls=np.zeros((3, 1)),
                         targets=np.zeros((3, 1)), stage_costs=np.array([1.0, 2.0, 3.0]),
                         solve_ms=np.zeros(3))
    assert kd.dynamic_regret(run, 4.5) == pytest.approx(1.5)


def test_offline_run_has_zero_regret_and_identity(quartic, quartic_weights, sine_ref, quartic_z1):
    off = kd.offline_solution(quartic, quartic_weights, sine_ref, quartic_z1)

    class Replay(kd.StepController):
        def solve(self, t, z, targets):
            return off.controls[t - 1 : t - 1 + targets.shape[0]]

    T = sine_ref.horizon
    run = kd.run_algorithm1(quartic, Replay(), quartic_weights, sine_ref, quartic_z1, W=T)
    regret = kd.dynamic_regret(run, off.cost)
    assert abs(regret) <= 1e-8 * (1 + off.cost)
    ident = kd.deviation_identity(run, quartic, quartic_weights, sine_ref)
    assert ident <= 1e-8 * (1 + off.cost)
    decomp = kd.decompose_bound(run, quartic, quartic_weights, sine_ref, W=T)
    assert decomp.total <= 1e-10


def test_identity_matches_regret_on_mpc_runs(quartic, quartic_weights, sine_ref, quartic_z1):
    for W in (6, 12):
        run = run_quartic(quartic, quartic_weights, sine_ref, quartic_z1, W)
        off = kd.offline_solution(quartic, quartic_weights, sine_ref, run.states[0])
        regret = kd.dynamic_regret(run, off.cost)
        ident = kd.deviation_identity(run, quartic, quartic_weights, sine_ref)
        assert abs(regret - ident) <= 1e-6 * (1 + off.cost)
        assert regret >= -1e-8 * (1 + off.cost)


def test_tail_deviation_terms_vanish(quartic, quartic_weights, sine_ref, quartic_z1):
    # For t beyond the last receding step the run follows the offline tail,
    # so per-step deviations vanish; dropping them changes nothing.
    W = 10
    run = run_quartic(quartic, quartic_weights, sine_ref, quartic_z1, W)
    from koopman_ddpc.offline import OfflinePolicy
    lt = kd.lift_trajectory(quartic, sine_ref.targets)
    policy = OfflinePolicy(quartic.lifted, quartic_weights, lt)
    xs = kd.lift_trajectory(quartic, run.states)
    T = run.horizon
    for t in range(T - W + 1, T + 1):
        dev = run.controls[t - 1] - policy.control(t, xs[t - 1])
        assert np.abs(dev).max() <= 1e-9


def test_decomposition_brute_force_oracle():
    # Small scalar problem: every gain and sum re-derived directly from the
    # recursion definitions, then compared to the library's decomposition.
    sys = make_scalar_linear(a=0.7, b=1.0)
    weights = kd.CostWeights(Q_z=[[1.0]], R=[[0.5]])
    T, W = 9, 3
    rng = np.random.default_rng(4)
    r = kd.ReferenceTrajectory(rng.uniform(-1, 1, (T, 1)))
    run = kd.run_algorithm1(sys, kd.lmpc_closed_form(sys, weights, W),
                            weights, r, [0.3], W=W)

    A, B = 0.7, 1.0
    Q, R = 1.0, 0.5
    # Backward recursion, scalars.
    P = np.zeros(T + 2)
    K = np.zeros(T + 1)
    Sig = np.zeros(T + 1)
    P[T] = Q
    for t in range(T - 1, 0, -1):
        Sig[t] = R + P[t + 1]
        K[t] = P[t + 1] * A / Sig[t]
        P[t] = Q + A * P[t + 1] * A - A * P[t + 1] * K[t]

    def K_ff(t, i):
        prod = 1.0
        for k in range(t + 1, i + 1):
            prod *= A - B * K[k]
        return (B * prod * P[i + 1]) / Sig[t]

    # Window recursion of length W for the receding-horizon gains.
    Pb = np.zeros(W + 1)
    Kb = np.zeros(W)
    Sb = np.zeros(W)
    Pb[W] = Q
    for t in range(W - 1, 0, -1):
        Sb[t] = R + Pb[t + 1]
        Kb[t] = Pb[t + 1] * A / Sb[t]
        Pb[t] = Q + A * Pb[t + 1] * A - A * Pb[t + 1] * Kb[t]

    def Kb_ff(k):
        prod = 1.0
        for j in range(2, k + 1):
            prod *= A - B * Kb[j]
        return (B * prod * Pb[k + 1]) / Sb[1]

    targets = r.targets[:, 0]
    w = A * targets[:-1] - targets[1:]
    xs = run.states[:, 0]
    trunc = fb = ff = 0.0
    for t in range(1, T - W + 1):
        e = xs[t - 1] - targets[t - 1]
        fb_v = (K[t] - Kb[1]) * e
        ff_v = sum((K_ff(t, i) - Kb_ff(i - t + 1)) * w[i - 1] for i in range(t, t + W - 1))
        tr_v = sum(K_ff(t, i) * w[i - 1] for i in range(t + W - 1, T))
        fb += Sig[t] * fb_v ** 2
        ff += Sig[t] * ff_v ** 2
        trunc += Sig[t] * tr_v ** 2

    decomp = kd.decompose_bound(run, sys, weights, r, W)
    np.testing.assert_allclose(decomp.feedback, fb, rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(decomp.feedforward, ff, rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(decomp.truncation, trunc, rtol=1e-10, atol=1e-14)

    # The three pieces reassemble the exact control deviation per step.
    from koopman_ddpc.offline import OfflinePolicy
    policy = OfflinePolicy(sys.lifted, weights, r.targets)
    for t in range(1, T - W + 1):
        u_star = policy.control(t, np.array([xs[t - 1]]))[0]
        dev = run.controls[t - 1, 0] - u_star
        e = xs[t - 1] - targets[t - 1]
        fb_v = (K[t] - Kb[1]) * e
        ff_v = sum((K_ff(t, i) - Kb_ff(i - t + 1)) * w[i - 1] for i in range(t, t + W - 1))
        tr_v = sum(K_ff(t, i) * w[i - 1] for i in range(t + W - 1, T))
        np.testing.assert_allclose(dev, fb_v + ff_v + tr_v, atol=1e-10)


def test_decomposition_dominates_identity_on_experiment_runs(quartic, quartic_weights,
                                                             sine_ref, quartic_z1):
    values = {}
    for W in (6, 12):
        run = run_quartic(quartic, quartic_weights, sine_ref, quartic_z1, W, controller="ddpc")
        ident = kd.deviation_identity(run, quartic, quartic_weights, sine_ref)
        decomp = kd.decompose_bound(run, quartic, quartic_weights, sine_ref, W)
        assert decomp.total >= ident - 1e-8
        values[W] = decomp
    for term in ("truncation", "feedback", "feedforward"):
        assert getattr(values[12], term) < getattr(values[6], term)


def test_regret_decreases_with_window(quartic, quartic_weights, sine_ref, quartic_z1):
    regrets = {}
    for W in (4, 16):
        run = run_quartic(quartic, quartic_weights, sine_ref, quartic_z1, W, controller="ddpc")
        off = kd.offline_solution(quartic, quartic_weights, sine_ref, run.states[0])
        regrets[W] = kd.dynamic_regret(run, off.cost)
    assert regrets[16] < regrets[4]


def test_regret_equivalence_between_spaces(quartic, quartic_weights, sine_ref, quartic_z1):
    # Plant-space costs equal lifted-space costs for the same run.
    W = 8
    run = run_quartic(quartic, quartic_weights, sine_ref, quartic_z1, W)
    lt = kd.lift_trajectory(quartic, sine_ref.targets)
    xs = kd.lift_trajectory(quartic, run.states)
    Q = quartic_weights.lifted_state_cost(quartic.lifted.C)
    err = xs - lt
    lifted_cost = float(np.einsum("ti,ij,tj->", err, Q, err)
                        + np.einsum("ti,ij,tj->", run.controls, quartic_weights.R, run.controls))
    assert abs(lifted_cost - run.total_cost) <= 1e-8 * (1 + run.total_cost)


def test_report_builder_checks_setup(quartic, quartic_weights, sine_ref, quartic_z1):
    W = 6
    run = run_quartic(quartic, quartic_weights, sine_ref, quartic_z1, W)
    off = kd.offline_solution(quartic, quartic_weights, sine_ref, run.states[0])
    rep = kd.build_regret_report(run, quartic, quartic_weights, sine_ref, off)
    assert rep.identity_gap <= 1e-6 * (1 + off.cost)
    assert rep.W == W
    # Mismatched reference is rejected.
    other = kd.sine_reference(sine_ref.horizon, magnitude=0.5, period=60)
    off_other = kd.offline_solution(quartic, quartic_weights, other, run.states[0])
    with pytest.raises(kd.SetupMismatchError):
        kd.build_regret_report(run, quartic, quartic_weights, other, off_other)
    # Mismatched initial state is rejected.
    off_shifted = kd.offline_solution(quartic, quartic_weights, sine_ref, run.states[0] + 0.5)
    with pytest.raises(kd.SetupMismatchError):
        kd.build_regret_report(run, quartic, quartic_weights, sine_ref, off_shifted)


def test_sweep_fit_exact_exponential():
    Ws = np.arange(3, 11)
    fit = kd.sweep_fit(Ws, np.exp(-1.0 * Ws))
    assert fit.slope == pytest.approx(-1.0, abs=1e-9)
    assert fit.r2 == pytest.approx(1.0, abs=1e-12)
    assert fit.slope_stderr <= 1e-9
    assert fit.n_used == 8 and fit.excluded == ()


def test_sweep_fit_excludes_nonpositive_rows():
    fit = kd.sweep_fit([2, 4, 6, 8, 10], [1e-1, 1e-2, 1e-3, 0.0, 1e-16])
    assert fit.excluded == (8, 10)
    assert fit.n_used == 3
    assert fit.slope < 0


def test_sweep_fit_errors():
    with pytest.raises(kd.SweepError):
        kd.sweep_fit([2, 4, 6, 8], [1e-1, 1e-2, 0.0, 1e-16])  # only 2 usable
    with pytest.raises(kd.SweepError):
        kd.sweep_fit([5, 5, 5], [1e-1, 1e-2, 1e-3])  # no spread in W
    with pytest.raises(ValueError):
        kd.sweep_fit([1, 2], [1.0, 2.0, 3.0])  # length mismatch
