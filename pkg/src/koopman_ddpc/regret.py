"""Dynamic-regret measurement and diagnostic decompositions.

Dynamic regret is the cumulative cost of a closed-loop run minus the cost
of the optimal noncausal control sequence in hindsight. For plants with an
exact embedding the regret equals a weighted sum of control deviations,

    Reg_T = sum_t || u_t - u*_t ||^2_{Sigma_t},

where u*_t is the offline policy re-evaluated at the run's own realized
lifted state (not the offline run's controls; confusing the two is the
classic implementation error). The deviation for t in [T-W] further splits
into truncation, feedback, and feedforward pieces whose summed weighted
norms are the three diagnostic terms reported here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .offline import OfflinePolicy, OfflineSolution
from .riccati import riccati_recursion
from .systems import CostWeights, KoopmanSystem, ReferenceTrajectory, lift_trajectory
from .tracking import TrackingRun


class SetupMismatchError(ValueError):
    """The run and the offline benchmark disagree on the tracking setup."""


class SweepError(ValueError):
    """Not enough usable rows for a regret-vs-horizon fit."""


def dynamic_regret(run: TrackingRun, oracle_cost: float) -> float:
    """Cumulative run cost minus the offline optimum."""
    return run.total_cost - float(oracle_cost)


def _policy_for_run(run: TrackingRun, sys: KoopmanSystem, weights: CostWeights,
                    r: ReferenceTrajectory) -> tuple[OfflinePolicy, np.ndarray]:
    if run.horizon != r.horizon:
        raise SetupMismatchError("run and reference horizons differ")
    if not np.array_equal(run.targets, r.targets):
        raise SetupMismatchError("run targets differ from the reference")
    lifted_targets = lift_trajectory(sys, r.targets)
    policy = OfflinePolicy(sys.lifted, weights, lifted_targets)
    states = lift_trajectory(sys, run.states)
    return policy, states


def _sigma_at(policy: OfflinePolicy, weights: CostWeights, t: int) -> np.ndarray:
    """Control-curvature weight Sigma_t; R alone at the terminal step."""
    if t >= policy.T:
        return weights.R
    return policy.riccati.Sigma_at(t)


def deviation_identity(run: TrackingRun, sys: KoopmanSystem, weights: CostWeights,
                       r: ReferenceTrajectory) -> float:
    """Sigma-weighted squared deviation of the run's controls from the
    offline policy evaluated along the run's own lifted trajectory."""
    policy, states = _policy_for_run(run, sys, weights, r)
    total = 0.0
    for t in range(1, run.horizon + 1):
        diff = run.controls[t - 1] - policy.control(t, states[t - 1])
        total += float(diff @ _sigma_at(policy, weights, t) @ diff)
    return total


@dataclass(frozen=True)
class BoundDecomposition:
    """The three diagnostic sums; each is a Sigma-weighted squared norm
    accumulated over t in [T - W]."""

    truncation: float
    feedback: float
    feedforward: float

    @property
    def total(self) -> float:
        return self.truncation + self.feedback + self.feedforward


def decompose_bound(run: TrackingRun, sys: KoopmanSystem, weights: CostWeights,
                    r: ReferenceTrajectory, W: int) -> BoundDecomposition:
    """Split the control deviation along the realized trajectory into its
    truncation, feedback-gain, and feedforward-gain parts."""
    policy, states = _policy_for_run(run, sys, weights, r)
    T = run.horizon
    if not 1 <= W <= T:
        raise ValueError(f"need 1 <= W <= T, got W={W}")
    sol = policy.riccati
    A, B = sys.lifted.A, sys.lifted.B
    Q = weights.lifted_state_cost(sys.lifted.C)
    w = policy.dist.w

    # Window gains: K_bar_1 and the time-invariant feedforward gains of the
    # W-step recursion.
    if W >= 2:
        bar = riccati_recursion(A, B, Q, weights.R, W)
        K_bar1 = bar.K_at(1)
        bar_ff = []
        Phi = np.eye(A.shape[0])
        Sigma1_inv_Bt = np.linalg.solve(bar.Sigma_at(1), B.T)
        for k in range(1, W):
            bar_ff.append(Sigma1_inv_Bt @ Phi.T @ bar.P_at(k + 1))
            if k < W - 1:
                Phi = bar.A_cl(k + 1) @ Phi
    else:
        K_bar1 = np.zeros((sys.lifted.n_u, sys.lifted.n_x))
        bar_ff = []

    trunc = fb = ff = 0.0
    for t in range(1, T - W + 1):
        Sigma = sol.Sigma_at(t)
        Sinv_Bt = np.linalg.solve(Sigma, B.T)
        e = states[t - 1] - policy.lifted_targets[t - 1]
        fb_vec = (sol.K_at(t) - K_bar1) @ e

        ff_acc = np.zeros(sys.lifted.n_x)
        trunc_acc = np.zeros(sys.lifted.n_x)
        Phi = np.eye(A.shape[0])
        for i in range(t, T):
            contrib = Phi.T @ sol.P_at(i + 1) @ w[i - 1]
            if i <= t + W - 2:
                ff_acc += contrib
            else:
                trunc_acc += contrib
            if i < T - 1:
                Phi = sol.A_cl(i + 1) @ Phi
        ff_vec = Sinv_Bt @ ff_acc
        for k in range(1, W):
            i = t + k - 1
            if i <= T - 1:
                ff_vec -= bar_ff[k - 1] @ w[i - 1]
        trunc_vec = Sinv_Bt @ trunc_acc

        fb += float(fb_vec @ Sigma @ fb_vec)
        ff += float(ff_vec @ Sigma @ ff_vec)
        trunc += float(trunc_vec @ Sigma @ trunc_vec)
    return BoundDecomposition(truncation=trunc, feedback=fb, feedforward=ff)


@dataclass(frozen=True)
class RegretReport:
    """Regret, the control-deviation identity, and the bound decomposition
    for one closed-loop run."""

    W: int
    online_cost: float
    offline_cost: float
    regret: float
    deviation_identity: float
    identity_gap: float
    decomposition: BoundDecomposition

    @property
    def decomposition_total(self) -> float:
        return self.decomposition.total


def build_regret_report(run: TrackingRun, sys: KoopmanSystem, weights: CostWeights,
                        r: ReferenceTrajectory, offline: OfflineSolution) -> RegretReport:
    """Assemble the full report; checks that the run and the benchmark share
    the reference and the initial lifted state."""
    if not np.array_equal(offline.lifted_targets, lift_trajectory(sys, r.targets)):
        raise SetupMismatchError("offline benchmark was built for a different reference")
    x1_run = lift_trajectory(sys, run.states[:1])[0]
    if not np.allclose(x1_run, offline.states[0], atol=1e-9 * (1.0 + np.abs(offline.states[0]).max())):
        raise SetupMismatchError("run and offline benchmark start from different states")
    regret = dynamic_regret(run, offline.cost)
    ident = deviation_identity(run, sys, weights, r)
    decomp = decompose_bound(run, sys, weights, r, run.W)
    return RegretReport(W=run.W, online_cost=run.total_cost, offline_cost=offline.cost,
                        regret=regret, deviation_identity=ident,
                        identity_gap=abs(regret - ident), decomposition=decomp)


@dataclass(frozen=True)
class SweepRow:
    """One horizon value of a regret sweep."""

    W: int
    regret: float
    truncation: float
    feedback: float
    feedforward: float
    identity_gap: float
    runtime_s: float

    @property
    def log_regret(self) -> float:
        return math.log(self.regret) if self.regret > 0 else float("-inf")


@dataclass(frozen=True)
class SweepFit:
    """OLS fit of log regret against the prediction horizon."""

    slope: float
    intercept: float
    r2: float
    slope_stderr: float
    n_used: int
    excluded: tuple


REGRET_FLOOR = 1e-14  # below this a run is treated as converged-to-optimal


def sweep_fit(Ws: Sequence[int], regrets: Sequence[float]) -> SweepFit:
    """Fit log(regret) = intercept + slope * W by ordinary least squares.

    Rows with regret at or below the floor are excluded (noted in the
    result); fewer than three usable rows is an error.
    """
    Ws = np.asarray(list(Ws), dtype=float)
    regrets = np.asarray(list(regrets), dtype=float)
    if Ws.shape != regrets.shape:
        raise ValueError("W and regret lists must have equal length")
    usable = regrets > REGRET_FLOOR
    excluded = tuple(int(w) for w in Ws[~usable])
    x = Ws[usable]
    y = np.log(regrets[usable])
    n = x.size
    if n < 3:
        raise SweepError(f"need at least 3 positive-regret rows, have {n}")
    xm, ym = x.mean(), y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    if sxx == 0.0:
        raise SweepError("need at least 3 distinct W values")
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    resid = y - intercept - slope * x
    ss_res = float(np.sum(resid ** 2))
    ss_tot = float(np.sum((y - ym) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    stderr = math.sqrt(ss_res / (n - 2) / sxx) if n > 2 else 0.0
    return SweepFit(slope=slope, intercept=intercept, r2=float(r2),
                    slope_stderr=stderr, n_used=n, excluded=excluded)
