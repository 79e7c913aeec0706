import numpy as np
import pytest

from koopman_ddpc.qp import (
    EqConstrainedQP,
    InfeasibleError,
    L1SlackQP,
    LowRankHessian,
    UnboundedError,
    pinv_solve,
    solve_eq_qp,
    solve_l1_slack_qp,
)


def test_eq_qp_hand_example():
    # min 1/2 ||x||^2 s.t. x1 + x2 = 2 -> (1, 1), objective 1
    rep = solve_eq_qp(EqConstrainedQP(H=np.eye(2), f=np.zeros(2),
                                      A_eq=[[1.0, 1.0]], b_eq=[2.0]))
    np.testing.assert_allclose(rep.x, [1.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(rep.objective, 1.0, atol=1e-12)
    assert rep.converged and rep.iterations == 0


def test_eq_qp_unconstrained_minimum():
    rep = solve_eq_qp(EqConstrainedQP(H=np.eye(3), f=np.zeros(3),
                                      A_eq=np.zeros((0, 3)), b_eq=[]))
    np.testing.assert_array_equal(rep.x, np.zeros(3))


def test_eq_qp_min_norm_tiebreak():
    # Free x2 has no curvature and no constraint: min-norm pins it to zero.
    rep = solve_eq_qp(EqConstrainedQP(H=np.diag([1.0, 0.0]), f=np.zeros(2),
                                      A_eq=[[1.0, 0.0]], b_eq=[3.0]))
    np.testing.assert_allclose(rep.x, [3.0, 0.0], atol=1e-12)


def test_eq_qp_infeasible_raises_with_residual():
    qp = EqConstrainedQP(H=np.eye(2), f=np.zeros(2),
                         A_eq=[[1.0, 0.0], [1.0, 0.0]], b_eq=[0.0, 1.0])
    with pytest.raises(InfeasibleError) as err:
        solve_eq_qp(qp)
    assert err.value.residual > 0.1


def test_eq_qp_unbounded_zero_curvature_descent():
    qp = EqConstrainedQP(H=np.diag([1.0, 0.0]), f=[0.0, 1.0],
                         A_eq=np.zeros((0, 2)), b_eq=[])
    with pytest.raises(UnboundedError):
        solve_eq_qp(qp)


def test_eq_qp_negative_curvature():
    qp = EqConstrainedQP(H=np.diag([1.0, -1.0]), f=np.zeros(2),
                         A_eq=np.zeros((0, 2)), b_eq=[])
    with pytest.raises(UnboundedError):
        solve_eq_qp(qp)


def test_eq_qp_kkt_optimality_invariant():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n, m = 6, 3
        F = rng.normal(size=(4, n))
        H = F.T @ F  # PSD, usually singular
        f = rng.normal(size=n)
        A = rng.normal(size=(m, n))
        x_feas = rng.normal(size=n)
        b = A @ x_feas
        rep = solve_eq_qp(EqConstrainedQP(H=H, f=f, A_eq=A, b_eq=b))
        kkt = H @ rep.x + f + A.T @ rep.multipliers
        assert np.linalg.norm(kkt) <= 10 * 1e-9 * (1 + np.linalg.norm(f) + np.linalg.norm(H))
        assert rep.primal_residual <= 1e-9 * (1 + np.linalg.norm(b))


def test_eq_qp_objective_dominance():
    rng = np.random.default_rng(1)
    n, m = 5, 2
    F = rng.normal(size=(3, n))
    H = F.T @ F + 0.1 * np.eye(n)
    f = rng.normal(size=n)
    A = rng.normal(size=(m, n))
    b = rng.normal(size=m)
    qp = EqConstrainedQP(H=H, f=f, A_eq=A, b_eq=b)
    rep = solve_eq_qp(qp)
    # Project random points onto the constraint set and compare objectives.
    A_pinv = np.linalg.pinv(A)
    for _ in range(100):
        v = rng.normal(size=n)
        x_feas = v - A_pinv @ (A @ v - b)
        assert qp.objective(x_feas) >= rep.objective - 1e-8


def test_pinv_solve_examples():
    x, rank = pinv_solve(np.eye(2), [1.0, 2.0])
    np.testing.assert_allclose(x, [1.0, 2.0])
    assert rank == 2
    x, rank = pinv_solve([[1.0, 1.0]], [2.0])
    np.testing.assert_allclose(x, [1.0, 1.0])
    assert rank == 1
    x, rank = pinv_solve(np.zeros((2, 2)), [0.0, 0.0])
    np.testing.assert_array_equal(x, np.zeros(2))
    assert rank == 0


def test_pinv_solve_residual_minimal():
    rng = np.random.default_rng(2)
    A = rng.normal(size=(6, 3)) @ np.diag([1.0, 1.0, 0.0])  # rank 2
    b = rng.normal(size=6)
    x, rank = pinv_solve(A, b)
    assert rank == 2
    base = np.linalg.norm(A @ x - b)
    for _ in range(100):
        delta = rng.normal(size=3) * 0.1
        assert np.linalg.norm(A @ (x + delta) - b) >= base - 1e-12


def test_l1_reduces_to_eq_qp_when_weight_zero():
    core = EqConstrainedQP(H=np.eye(2), f=np.zeros(2), A_eq=[[1.0, 1.0]], b_eq=[2.0])
    rep = solve_l1_slack_qp(L1SlackQP(core=core, l1_indices=[0, 1], l1_weight=0.0))
    np.testing.assert_allclose(rep.x, [1.0, 1.0], atol=1e-6)
    assert rep.converged


def test_l1_soft_threshold_at_origin():
    core = EqConstrainedQP(H=[[1.0]], f=[0.0], A_eq=np.zeros((0, 1)), b_eq=[])
    rep = solve_l1_slack_qp(L1SlackQP(core=core, l1_indices=[0], l1_weight=0.5))
    np.testing.assert_allclose(rep.x, [0.0], atol=1e-9)


def test_l1_shrinkage_hand_value():
    # min 1/2 (x - 3)^2 + |x| -> x = 2
    core = EqConstrainedQP(H=[[1.0]], f=[-3.0], A_eq=np.zeros((0, 1)), b_eq=[])
    rep = solve_l1_slack_qp(L1SlackQP(core=core, l1_indices=[0], l1_weight=1.0))
    np.testing.assert_allclose(rep.x, [2.0], atol=1e-6)
    assert rep.converged


def test_l1_with_constraints_matches_dense_reference():
    # Random small problem solved against a dense scan over sign patterns.
    rng = np.random.default_rng(3)
    n = 4
    F = rng.normal(size=(n, n))
    H = F.T @ F + 0.5 * np.eye(n)
    f = rng.normal(size=n)
    A = rng.normal(size=(1, n))
    b = np.array([1.0])
    lam = 0.7
    core = EqConstrainedQP(H=H, f=f, A_eq=A, b_eq=b)
    rep = solve_l1_slack_qp(L1SlackQP(core=core, l1_indices=np.arange(n), l1_weight=lam),
                            tol=1e-9)
    # Reference: enumerate all sign/zero patterns of the l1 block.
    best, best_val = None, np.inf
    qp_obj = L1SlackQP(core=core, l1_indices=np.arange(n), l1_weight=lam)
    import itertools
    for pattern in itertools.product([-1.0, 0.0, 1.0], repeat=n):
        sig = np.array(pattern)
        keep = np.flatnonzero(sig != 0)
        if keep.size == 0:
            continue
        Hk = H[np.ix_(keep, keep)]
        fk = f[keep] + lam * sig[keep]
        Ak = A[:, keep]
        try:
            sub = solve_eq_qp(EqConstrainedQP(H=Hk, f=fk, A_eq=Ak, b_eq=b))
        except (InfeasibleError, UnboundedError):
            continue
        if np.any(sub.x * sig[keep] < -1e-10):
            continue
        x_full = np.zeros(n)
        x_full[keep] = sub.x
        val = qp_obj.objective(x_full)
        if val < best_val:
            best, best_val = x_full, val
    np.testing.assert_allclose(rep.objective, best_val, rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(rep.x, best, atol=1e-5)


def test_slack_block_limit_large_weight():
    # With a huge slack weight the slack block collapses toward zero.
    rng = np.random.default_rng(4)
    n, ns = 3, 2
    H = np.zeros((n + ns, n + ns))
    H[:n, :n] = np.eye(n)
    f = np.concatenate([rng.normal(size=n), np.zeros(ns)])
    A = np.zeros((ns, n + ns))
    A[:, :ns] = rng.normal(size=(ns, ns))
    A[:, n:] = -np.eye(ns)
    b = rng.normal(size=ns)
    core = EqConstrainedQP(H=H, f=f, A_eq=A, b_eq=b)
    qp = L1SlackQP(core=core, l1_indices=np.arange(n), l1_weight=0.1,
                   slack_indices=np.arange(n, n + ns), slack_weight=1e12)
    rep = solve_l1_slack_qp(qp, tol=1e-8)
    assert rep.converged
    assert np.abs(rep.x[n:]).max() <= 1e-4
    assert rep.primal_residual <= 1e-6 * (1 + np.linalg.norm(b))


def test_l1_infeasible_constraints():
    core = EqConstrainedQP(H=np.eye(2), f=np.zeros(2),
                           A_eq=[[1.0, 0.0], [1.0, 0.0]], b_eq=[0.0, 1.0])
    with pytest.raises(InfeasibleError):
        solve_l1_slack_qp(L1SlackQP(core=core, l1_indices=[0, 1], l1_weight=1.0))


def test_low_rank_hessian_matches_dense():
    rng = np.random.default_rng(5)
    G = rng.normal(size=(2, 6))
    d = np.abs(rng.normal(size=6))
    lr = LowRankHessian(diag=d, factor=G)
    np.testing.assert_allclose(lr.dense(), np.diag(d) + G.T @ G)
    v = rng.normal(size=6)
    np.testing.assert_allclose(lr.matvec(v), lr.dense() @ v)
    core_lr = EqConstrainedQP(H=lr, f=rng.normal(size=6), A_eq=rng.normal(size=(2, 6)),
                              b_eq=rng.normal(size=2))
    core_dn = EqConstrainedQP(H=lr.dense(), f=core_lr.f, A_eq=core_lr.A_eq, b_eq=core_lr.b_eq)
    qp_lr = L1SlackQP(core=core_lr, l1_indices=np.arange(4), l1_weight=0.3)
    qp_dn = L1SlackQP(core=core_dn, l1_indices=np.arange(4), l1_weight=0.3)
    x_lr = solve_l1_slack_qp(qp_lr, tol=1e-9).x
    x_dn = solve_l1_slack_qp(qp_dn, tol=1e-9).x
    np.testing.assert_allclose(x_lr, x_dn, atol=1e-6)


def test_l1_block_validation():
    core = EqConstrainedQP(H=np.eye(3), f=np.zeros(3), A_eq=np.zeros((0, 3)), b_eq=[])
    with pytest.raises(ValueError):
        L1SlackQP(core=core, l1_indices=[0, 1], l1_weight=1.0,
                  slack_indices=[1, 2], slack_weight=1.0)  # overlapping blocks
    with pytest.raises(ValueError):
        L1SlackQP(core=core, l1_indices=[5], l1_weight=1.0)  # out of range
    with pytest.raises(ValueError):
        L1SlackQP(core=core, l1_indices=[0], l1_weight=-1.0)
