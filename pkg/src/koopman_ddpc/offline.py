"""Optimal noncausal tracking benchmark in the lifted space.

Because the closed form lives entirely in lifted coordinates, the public
operations take a ``LiftedLinearSystem`` plus the lifted reference
``psi(r_1), ..., psi(r_T)``; ``offline_solution`` wraps a Koopman system and
does the lifting. The policy at time t is

    u*_t = -K_t (x_t - psi(r_t)) - sum_{i=t}^{T-1} K_{t->i} w_i,
    w_i  = A psi(r_i) - psi(r_{i+1}),

with u*_T = 0 (the terminal control is charged but moves nothing that is
still penalized). The feedforward sums are accumulated by one backward
recursion, so a full trajectory costs O(T) small matrix products.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .riccati import RiccatiSolution, riccati_recursion
from .systems import CostWeights, KoopmanSystem, LiftedLinearSystem, ReferenceTrajectory, lift, lift_trajectory


@dataclass(frozen=True)
class DisturbanceSequence:
    """Reference-induced disturbances w_t = A psi(r_t) - psi(r_{t+1}).

    ``lifted_target_bound`` is the measured max ||psi(r_t)|| over the actual
    reference; no a-priori bound on the lifted targets is assumed.
    """

    w: np.ndarray  # (T-1, n_x)
    bound: float   # max_t ||w_t||
    lifted_target_bound: float

    @property
    def length(self) -> int:
        return self.w.shape[0]


def lifted_disturbances(lifted: LiftedLinearSystem, lifted_targets: np.ndarray) -> DisturbanceSequence:
    """Disturbance sequence from an already-lifted reference (T, n_x)."""
    lt = np.atleast_2d(np.asarray(lifted_targets, dtype=float))
    w = lt[:-1] @ lifted.A.T - lt[1:]
    bound = float(np.linalg.norm(w, axis=1).max()) if w.shape[0] else 0.0
    psi_bound = float(np.linalg.norm(lt, axis=1).max()) if lt.shape[0] else 0.0
    return DisturbanceSequence(w=w, bound=bound, lifted_target_bound=psi_bound)


def disturbances(sys: KoopmanSystem, r: ReferenceTrajectory) -> DisturbanceSequence:
    """Lift the reference and form the disturbance sequence."""
    return lifted_disturbances(sys.lifted, lift_trajectory(sys, r.targets))


@dataclass(frozen=True)
class ValueFunctionCoeffs:
    """Per-step quadratic value function V_t(x) = e'P_t e + v_t'e + q_t with
    e = x - psi(r_t)."""

    riccati: RiccatiSolution
    v: np.ndarray  # (T, n_x)
    q: np.ndarray  # (T,)
    lifted_targets: np.ndarray

    def value(self, t: int, x: np.ndarray) -> float:
        e = np.asarray(x, dtype=float).reshape(-1) - self.lifted_targets[t - 1]
        return float(e @ self.riccati.P_at(t) @ e + self.v[t - 1] @ e + self.q[t - 1])


def value_coeffs(lifted: LiftedLinearSystem, weights: CostWeights,
                 lifted_targets: np.ndarray,
                 riccati: Optional[RiccatiSolution] = None) -> ValueFunctionCoeffs:
    """Backward recursion for the value-function coefficients (P_t, v_t, q_t).

    Terminal values are (Q, 0, 0); each step eliminates the control from
    the one-step quadratic in (u, e, w_t, v_{t+1}).
    """
    lt = np.atleast_2d(np.asarray(lifted_targets, dtype=float))
    T = lt.shape[0]
    A, B = lifted.A, lifted.B
    Q = weights.lifted_state_cost(lifted.C)
    R = weights.R
    sol = riccati if riccati is not None else riccati_recursion(A, B, Q, R, T)
    dist = lifted_disturbances(lifted, lt)
    n_x = lifted.n_x
    v = np.zeros((T, n_x))
    q = np.zeros(T)
    for t in range(T - 1, 0, -1):
        P_next = sol.P_at(t + 1)
        Sigma = sol.Sigma_at(t)
        w_t = dist.w[t - 1]
        # Stacked coefficient blocks for the pair (w_t, v_{t+1}).
        top = np.vstack([P_next @ A, 0.5 * A])
        side = np.vstack([P_next @ B, 0.5 * B])
        pair = np.concatenate([w_t, v[t]])
        SinvBt = np.linalg.solve(Sigma, B.T)
        v[t - 1] = 2.0 * pair @ (top - side @ SinvBt @ P_next @ A)
        mid = np.block([[P_next, 0.5 * np.eye(n_x)], [0.5 * np.eye(n_x), np.zeros((n_x, n_x))]])
        q[t - 1] = float(pair @ (mid - side @ np.linalg.solve(Sigma, side.T)) @ pair) + q[t]
    return ValueFunctionCoeffs(riccati=sol, v=v, q=q, lifted_targets=lt)


class OfflinePolicy:
    """Precomputed noncausal policy over a fixed horizon and reference.

    Exposes the per-step control law at arbitrary states (needed by the
    regret identity, which re-evaluates the policy along a different
    trajectory) and a rollout that produces the optimal trajectory.
    """

    def __init__(self, lifted: LiftedLinearSystem, weights: CostWeights,
                 lifted_targets: np.ndarray, riccati: Optional[RiccatiSolution] = None):
        self.lifted = lifted
        self.weights = weights
        self.lifted_targets = np.atleast_2d(np.asarray(lifted_targets, dtype=float))
        self.T = self.lifted_targets.shape[0]
        A, B = lifted.A, lifted.B
        self.Q = weights.lifted_state_cost(lifted.C)
        if self.T >= 2:
            self.riccati = riccati if riccati is not None else riccati_recursion(A, B, self.Q, weights.R, self.T)
            if self.riccati.horizon != self.T:
                raise ValueError("riccati horizon disagrees with the reference length")
            self.dist = lifted_disturbances(lifted, self.lifted_targets)
            # d_t = sum_{i=t}^{T-1} (A_cl,t->i)' P_{i+1} w_i via the backward
            # recursion d_t = P_{t+1} w_t + A_cl,t+1' d_{t+1}.
            n_x = lifted.n_x
            d = np.zeros((self.T - 1, n_x))
            d[self.T - 2] = self.riccati.P_at(self.T) @ self.dist.w[self.T - 2]
            for t in range(self.T - 2, 0, -1):
                d[t - 1] = self.riccati.P_at(t + 1) @ self.dist.w[t - 1] + self.riccati.A_cl(t + 1).T @ d[t]
            self._d = d
        else:
            self.riccati = None
            self.dist = DisturbanceSequence(w=np.zeros((0, lifted.n_x)), bound=0.0,
                                            lifted_target_bound=0.0)
            self._d = np.zeros((0, lifted.n_x))

    def control(self, t: int, x: np.ndarray) -> np.ndarray:
        """Optimal control at one-based time t for a lifted state x."""
        if not 1 <= t <= self.T:
            raise IndexError(f"t={t} outside [1, {self.T}]")
        if t == self.T:
            return np.zeros(self.lifted.n_u)
        e = np.asarray(x, dtype=float).reshape(-1) - self.lifted_targets[t - 1]
        ff = np.linalg.solve(self.riccati.Sigma_at(t), self.lifted.B.T @ self._d[t - 1])
        return -self.riccati.K_at(t) @ e - ff

    def rollout(self, x1: np.ndarray) -> "OfflineSolution":
        """Optimal trajectory, controls, stage costs, and cost-to-go from x1."""
        x = np.asarray(x1, dtype=float).reshape(-1)
        T = self.T
        states = np.empty((T, self.lifted.n_x))
        controls = np.empty((T, self.lifted.n_u))
        for t in range(1, T + 1):
            states[t - 1] = x
            controls[t - 1] = self.control(t, x)
            if t < T:
                x = self.lifted.step(x, controls[t - 1])
        err = states - self.lifted_targets
        stage = np.einsum("ti,ij,tj->t", err, self.Q, err) + \
            np.einsum("ti,ij,tj->t", controls, self.weights.R, controls)
        cost_to_go = np.cumsum(stage[::-1])[::-1].copy()
        return OfflineSolution(controls=controls, states=states,
                               stage_costs=stage, cost=float(stage.sum()),
                               cost_to_go=cost_to_go, lifted_targets=self.lifted_targets)


@dataclass(frozen=True)
class OfflineSolution:
    """Optimal noncausal trajectory in the lifted space."""

    controls: np.ndarray   # (T, n_u)
    states: np.ndarray     # (T, n_x)
    stage_costs: np.ndarray
    cost: float
    cost_to_go: np.ndarray
    lifted_targets: np.ndarray


def optimal_controls(lifted: LiftedLinearSystem, weights: CostWeights,
                     lifted_targets: np.ndarray, x1: np.ndarray) -> OfflineSolution:
    """Closed-form offline optimum for a lifted reference and initial state."""
    return OfflinePolicy(lifted, weights, lifted_targets).rollout(x1)


def offline_solution(sys: KoopmanSystem, weights: CostWeights,
                     r: ReferenceTrajectory, z1: np.ndarray) -> OfflineSolution:
    """Lift the reference and initial state of a Koopman system and solve."""
    return optimal_controls(sys.lifted, weights, lift_trajectory(sys, r.targets), lift(sys, z1))
