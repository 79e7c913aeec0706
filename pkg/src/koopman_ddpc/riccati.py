"""Finite-horizon Riccati recursion, its algebraic fixed point, and
closed-loop stability diagnostics.

Time indices are one-based to match the control-theoretic convention:
``P[t-1]`` stores P_t with P_T = Q, and the gains K_t, Sigma_t exist for
t in [T-1]. The feedforward gains K_{t->i} weight future disturbance terms
in the optimal noncausal tracking policy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class IllPosedError(RuntimeError):
    """The recursion produced a numerically unusable quantity."""


class DareConvergenceError(RuntimeError):
    """Fixed-point iteration did not converge; usually a stabilizability or
    detectability violation."""

    def __init__(self, residual: float, iterations: int):
        super().__init__(
            f"Riccati fixed point not reached after {iterations} iterations "
            f"(last residual {residual:.3e})")
        self.residual = residual
        self.iterations = iterations


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def _validate_weights(Q: np.ndarray, R: np.ndarray) -> None:
    qtol = 1e-10 * max(1.0, float(np.abs(Q).max()))
    if np.linalg.eigvalsh(_sym(Q)).min() < -qtol:
        raise ValueError("Q must be positive semidefinite")
    if np.linalg.eigvalsh(_sym(R)).min() <= 0:
        raise ValueError("R must be positive definite")


def _riccati_step(P: np.ndarray, A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray):
    """One backward step; returns (P_prev, K, Sigma)."""
    Sigma = R + B.T @ P @ B
    try:
        K = np.linalg.solve(Sigma, B.T @ P @ A)
    except np.linalg.LinAlgError as exc:
        raise IllPosedError(f"innovation matrix singular: {exc}") from exc
    P_prev = _sym(Q + A.T @ P @ A - A.T @ P @ B @ K)
    if not np.all(np.isfinite(P_prev)):
        raise IllPosedError("recursion produced non-finite entries")
    return P_prev, K, Sigma


@dataclass(frozen=True)
class RiccatiSolution:
    """Backward recursion output over a horizon T.

    ``P`` has shape (T, n_x, n_x) with P[t-1] = P_t; ``K`` and ``Sigma``
    have length T-1 with K[t-1] = K_t. A and B are kept so that closed-loop
    products and feedforward gains can be formed without re-passing them.
    """

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    K: np.ndarray
    Sigma: np.ndarray

    @property
    def horizon(self) -> int:
        return self.P.shape[0]

    def P_at(self, t: int) -> np.ndarray:
        if not 1 <= t <= self.horizon:
            raise IndexError(f"t={t} outside [1, {self.horizon}]")
        return self.P[t - 1]

    def K_at(self, t: int) -> np.ndarray:
        if not 1 <= t <= self.horizon - 1:
            raise IndexError(f"t={t} outside [1, {self.horizon - 1}]")
        return self.K[t - 1]

    def Sigma_at(self, t: int) -> np.ndarray:
        if not 1 <= t <= self.horizon - 1:
            raise IndexError(f"t={t} outside [1, {self.horizon - 1}]")
        return self.Sigma[t - 1]

    def A_cl(self, t: int) -> np.ndarray:
        """Closed-loop matrix A - B K_t, defined for t in [T-1]."""
        return self.A - self.B @ self.K_at(t)


def riccati_recursion(A, B, Q, R, T: int) -> RiccatiSolution:
    """Run the backward recursion from P_T = Q down to P_1."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if T < 2:
        raise ValueError("horizon must be at least 2")
    _validate_weights(Q, R)
    n_x, n_u = A.shape[0], B.shape[1]
    P = np.empty((T, n_x, n_x))
    K = np.empty((T - 1, n_u, n_x))
    Sig = np.empty((T - 1, n_u, n_u))
    P[T - 1] = _sym(Q)
    for t in range(T - 1, 0, -1):
        P[t - 1], K[t - 1], Sig[t - 1] = _riccati_step(P[t], A, B, Q, R)
    return RiccatiSolution(A=A, B=B, Q=Q, R=R, P=P, K=K, Sigma=Sig)


@dataclass(frozen=True)
class DareSolution:
    """Stationary solution: fixed point P_inf, gain K_inf, and the
    closed-loop matrix with its spectral radius."""

    P_inf: np.ndarray
    K_inf: np.ndarray
    Sigma_inf: np.ndarray
    A_cl_inf: np.ndarray
    spectral_radius: float
    residual: float
    iterations: int


def dare_residual(P, A, B, Q, R) -> float:
    """Two-norm of P - (Q + A'PA - A'PB (R + B'PB)^{-1} B'PA)."""
    Sigma = R + B.T @ P @ B
    K = np.linalg.solve(Sigma, B.T @ P @ A)
    return float(np.linalg.norm(P - _sym(Q + A.T @ P @ A - A.T @ P @ B @ K), 2))


def solve_dare(A, B, Q, R, tol: float = 1e-12, max_iter: int = 100000) -> DareSolution:
    """Fixed-point iteration of the backward recursion started at P = Q.

    Convergence of the iteration itself witnesses stabilizability and
    detectability; failure raises DareConvergenceError with the last
    residual.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    _validate_weights(Q, R)
    P = _sym(Q)
    res = np.inf
    for it in range(1, max_iter + 1):
        try:
            P_next, K, Sigma = _riccati_step(P, A, B, Q, R)
        except IllPosedError:
            # Diverging iterates overflow before max_iter; report it as the
            # convergence failure it is (an assumption violation).
            raise DareConvergenceError(res, it) from None
        res = float(np.linalg.norm(P_next - P, 2))
        P = P_next
        if res <= tol * (1.0 + float(np.linalg.norm(P, 2))):
            A_cl = A - B @ K
            rho = float(np.abs(np.linalg.eigvals(A_cl)).max())
            return DareSolution(P_inf=P, K_inf=K, Sigma_inf=Sigma, A_cl_inf=A_cl,
                                spectral_radius=rho, residual=res, iterations=it)
    raise DareConvergenceError(res, max_iter)


def closed_loop_transition(sol: RiccatiSolution, t1: int, t2: int) -> np.ndarray:
    """State-transition product A_cl,t2 A_cl,t2-1 ... A_cl,t1+1 (identity at t1 = t2)."""
    if not (1 <= t1 <= t2 <= sol.horizon - 1):
        raise IndexError(f"need 1 <= t1 <= t2 < T, got t1={t1}, t2={t2}, T={sol.horizon}")
    out = np.eye(sol.A.shape[0])
    for k in range(t1 + 1, t2 + 1):
        out = sol.A_cl(k) @ out
    return out


def feedforward_gain(sol: RiccatiSolution, t: int, i: int) -> np.ndarray:
    """Gain weighting the disturbance at step i in the time-t policy:
    Sigma_t^{-1} B' (A_cl,t->i)' P_{i+1}, for 1 <= t <= i < T."""
    if not (1 <= t <= i <= sol.horizon - 1):
        raise IndexError(f"need 1 <= t <= i < T, got t={t}, i={i}, T={sol.horizon}")
    Phi = closed_loop_transition(sol, t, i)
    return np.linalg.solve(sol.Sigma_at(t), sol.B.T @ Phi.T @ sol.P_at(i + 1))


@dataclass(frozen=True)
class StabilityDiagnostics:
    """Closed-loop stability quantities reported by the diagnostics command.

    ``kappa_est`` is a similarity-conditioning witness of strong stability
    (one valid witness among many); ``delta_stab_est`` is the smallest gap d
    such that all gains more than d steps from the terminal time are within
    the contraction margin of the stationary gain.
    """

    rho_cl: float
    gamma_inf: float
    kappa_est: float
    delta_stab_est: int
    rho_inf_est: float
    rho_fit_r2: float
    defective: bool


def _log_linear_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """OLS fit y = a + b x; returns (slope, intercept, r2)."""
    n = x.size
    xm, ym = x.mean(), y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    if sxx == 0.0:
        return 0.0, ym, 0.0
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = ym - slope * xm
    ss_res = float(np.sum((y - intercept - slope * x) ** 2))
    ss_tot = float(np.sum((y - ym) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return slope, intercept, r2


def _similarity_conditioning(A_cl: np.ndarray, rho: float, gamma: float) -> tuple[float, bool]:
    """Conditioning kappa with ||A_cl^i|| <= kappa * rho^i (approximately).

    Eigendecomposition when A_cl is numerically diagonalizable; otherwise a
    scaled Schur form, flagged as defective.
    """
    n = A_cl.shape[0]
    w, V = np.linalg.eig(A_cl)
    s = np.linalg.svd(V, compute_uv=False)
    if s[-1] > 1e-12 * s[0]:
        kappa = float(s[0] / s[-1])
        if kappa < 1e12:
            return max(kappa, 1.0), False
    # Defective (or nearly so): rescale the Schur form so the strictly
    # upper part fits inside the gamma margin.
    import scipy.linalg
    Tm, U = scipy.linalg.schur(A_cl, output="complex")
    N = np.triu(Tm, k=1)
    off = float(np.abs(N).max())
    if off == 0.0 or n == 1:
        return 1.0, True
    delta = min(1.0, max(gamma - rho, 1e-6) / (n * off))
    kappa = float(delta ** (-(n - 1)))
    return max(kappa, 1.0), True


def stability_diagnostics(A, B, Q, R, T: int = 200) -> StabilityDiagnostics:
    """Compute the stationary closed-loop diagnostics for (A, B, Q, R).

    rho_inf_est is the fitted geometric rate of ||P_t - P_inf|| over the
    T-step recursion (residuals below 1e-12 are dropped before the fit);
    delta_stab_est is found by extending the recursion until the gain gap
    stays inside the contraction margin.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    dare = solve_dare(A, B, Q, R)
    rho_cl = dare.spectral_radius
    gamma_inf = 0.5 * (1.0 + rho_cl)
    kappa, defective = _similarity_conditioning(dare.A_cl_inf, rho_cl, gamma_inf)

    sol = riccati_recursion(A, B, Q, R, T)
    res = np.array([np.linalg.norm(sol.P_at(t) - dare.P_inf, 2) for t in range(1, T + 1)])
    steps = np.arange(T - 1, -1, -1, dtype=float)  # T - t
    mask = res > 1e-12
    if mask.sum() >= 2:
        slope, _, r2 = _log_linear_fit(steps[mask], np.log(res[mask]))
        rho_inf_est = float(np.clip(np.exp(slope), 1e-12, 1.0 - 1e-12))
    else:
        rho_inf_est, r2 = rho_cl, 1.0

    # Smallest d such that every gain at least d steps before the terminal
    # time satisfies ||K_t - K_inf|| ||B|| kappa <= (1 - rho_cl) / 2.
    margin = 0.5 * (1.0 - rho_cl)
    bnorm = float(np.linalg.norm(B, 2))
    P = _sym(Q)
    delta = 0
    cap = 100000
    for d in range(1, cap + 1):
        P, K, _ = _riccati_step(P, A, B, Q, R)
        gap = float(np.linalg.norm(K - dare.K_inf, 2)) * bnorm * kappa
        if gap > margin:
            delta = d + 1
        if d - delta > 200 and gap <= 0.01 * margin:
            break
    return StabilityDiagnostics(
        rho_cl=rho_cl, gamma_inf=gamma_inf, kappa_est=kappa,
        delta_stab_est=int(delta), rho_inf_est=rho_inf_est,
        rho_fit_r2=float(r2), defective=defective,
    )
