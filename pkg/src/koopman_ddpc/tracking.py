"""Receding-horizon tracking loop and the lifted linear MPC controllers.

The loop applies only the first control of each optimized window until
W steps remain, then performs one final solve over the remaining targets
and applies the whole returned sequence open-loop. Controllers only ever
see the targets inside their prediction window, which makes causality
structural rather than a convention.

Two controllers live here: the closed-form window policy (feedback gain
plus feedforward sums from a W-step Riccati recursion, all time-invariant)
and a QP controller that solves each window as an equality-constrained
program; the second serves as the oracle for the first. The exact-embedding
nonlinear MPC coincides with the lifted QP controller for this system
class, so no separate nonlinear solver is provided.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .offline import OfflinePolicy
from .qp import EqConstrainedQP, solve_eq_qp
from .riccati import riccati_recursion
from .systems import (
    CostWeights,
    KoopmanSystem,
    ReferenceTrajectory,
    UnsupportedOperationError,
    lift,
)


class ControllerError(RuntimeError):
    """A controller failed during a closed-loop run."""

    def __init__(self, step: int, cause: Exception):
        super().__init__(f"controller failed at step {step}: {cause}")
        self.step = step
        self.cause = cause


class StepController:
    """Base class for window controllers used by ``run_algorithm1``.

    ``solve(t, z, targets)`` receives the one-based time, the current plant
    state, and exactly the targets of its prediction window, and returns a
    (W, n_u) control sequence. ``observe`` is called with every applied
    (state, control) pair, including warm-up steps; controllers that keep a
    history buffer record it there. ``min_history`` warm-up steps with zero
    input are executed before the scored horizon when the caller does not
    override the pre-roll.

    A controller instance may carry memory and is confined to a single run;
    concurrent runs must use distinct instances.
    """

    min_history: int = 0

    def observe(self, z: np.ndarray, u: np.ndarray) -> None:
        pass

    def solve(self, t: int, z: np.ndarray, targets: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class TrackingRun:
    """One closed-loop execution: states, controls, targets, per-step costs
    and solver wall times (milliseconds)."""

    system: str
    W: int
    states: np.ndarray       # (T, n_z)
    controls: np.ndarray     # (T, n_u)
    targets: np.ndarray      # (T, n_z)
    stage_costs: np.ndarray  # (T,)
    solve_ms: np.ndarray     # (T,)

    @property
    def horizon(self) -> int:
        return self.states.shape[0]

    @property
    def total_cost(self) -> float:
        return float(self.stage_costs.sum())


def run_algorithm1(sys: KoopmanSystem, ctrl: StepController, weights: CostWeights,
                   r: ReferenceTrajectory, z1: np.ndarray, W: int,
                   preroll: Optional[int] = None) -> TrackingRun:
    """Run the predictive tracking loop over the full reference horizon.

    ``preroll`` zero-input steps are applied first (defaulting to the
    controller's ``min_history``) to fill history buffers; they are not
    scored, and the scored run starts at the post-warm-up state. Controller
    exceptions abort the run with the failing step index.
    """
    T = r.horizon
    if not 1 <= W <= T:
        raise ValueError(f"need 1 <= W <= T, got W={W}, T={T}")
    z = np.asarray(z1, dtype=float).reshape(-1)
    if z.shape[0] != sys.n_z:
        raise ValueError(f"initial state has dimension {z.shape[0]}, expected {sys.n_z}")

    n_warm = ctrl.min_history if preroll is None else int(preroll)
    for _ in range(n_warm):
        u = np.zeros(sys.n_u)
        ctrl.observe(z, u)
        z = np.asarray(sys.dynamics(z, u), dtype=float).reshape(-1)

    states = np.empty((T, sys.n_z))
    controls = np.empty((T, sys.n_u))
    stage = np.empty(T)
    solve_ms = np.zeros(T)

    def apply_step(t: int, z: np.ndarray, u: np.ndarray) -> np.ndarray:
        states[t - 1] = z
        controls[t - 1] = u
        stage[t - 1] = weights.stage_cost(z, u, r.target(t))
        ctrl.observe(z, u)
        z_next = np.asarray(sys.dynamics(z, u), dtype=float).reshape(-1)
        if not np.all(np.isfinite(z_next)):
            raise ControllerError(t, RuntimeError("plant state diverged"))
        return z_next

    for t in range(1, T - W + 1):
        tic = time.perf_counter()
        try:
            plan = np.atleast_2d(ctrl.solve(t, z, r.window(t, W)))
        except Exception as exc:  # annotate with the failing step
            raise ControllerError(t, exc) from exc
        solve_ms[t - 1] = 1e3 * (time.perf_counter() - tic)
        z = apply_step(t, z, plan[0])

    t_final = T - W + 1
    tic = time.perf_counter()
    try:
        plan = np.atleast_2d(ctrl.solve(t_final, z, r.window(t_final, W)))
    except Exception as exc:
        raise ControllerError(t_final, exc) from exc
    solve_ms[t_final - 1] = 1e3 * (time.perf_counter() - tic)
    if plan.shape[0] != W:
        raise ControllerError(t_final, RuntimeError(
            f"controller returned {plan.shape[0]} controls, expected {W}"))
    for k in range(W):
        z = apply_step(t_final + k, z, plan[k])

    return TrackingRun(system=sys.name, W=W, states=states, controls=controls,
                       targets=r.targets.copy(), stage_costs=stage, solve_ms=solve_ms)


class _ClosedFormLmpc(StepController):
    """Window policy from a W-step Riccati recursion.

    Gains are computed once; each solve lifts the state and targets and
    rolls out the window optimum, so the full returned sequence equals the
    offline optimum of the window problem (which at the final solve is the
    offline-optimal tail).
    """

    def __init__(self, sys: KoopmanSystem, weights: CostWeights, W: int):
        if not sys.has_embedding:
            raise UnsupportedOperationError("closed-form MPC needs a lifting")
        if W < 2:
            raise ValueError("closed-form controller needs W >= 2")
        self.sys = sys
        self.lifted = sys.lifted
        self.weights = weights
        self.W = W
        Q = weights.lifted_state_cost(self.lifted.C)
        self.window_riccati = riccati_recursion(self.lifted.A, self.lifted.B, Q, weights.R, W)

    @property
    def feedback_gain(self) -> np.ndarray:
        """Time-invariant first-step feedback gain of the window problem."""
        return self.window_riccati.K_at(1)

    def feedforward_gain(self, k: int) -> np.ndarray:
        """Time-invariant gain on the k-th window disturbance, k in [W-1]."""
        from .riccati import feedforward_gain
        return feedforward_gain(self.window_riccati, 1, k)

    def solve(self, t: int, z: np.ndarray, targets: np.ndarray) -> np.ndarray:
        lifted_targets = np.stack([lift(self.sys, rt) for rt in np.atleast_2d(targets)])
        policy = OfflinePolicy(self.lifted, self.weights, lifted_targets,
                               riccati=self.window_riccati)
        return policy.rollout(lift(self.sys, z)).controls


class _QpLmpc(StepController):
    """Window controller that solves each window as one equality-constrained
    QP over the stacked lifted states and controls."""

    def __init__(self, sys: KoopmanSystem, weights: CostWeights, W: int):
        if not sys.has_embedding:
            raise UnsupportedOperationError("lifted MPC needs a lifting")
        if W < 1:
            raise ValueError("need W >= 1")
        self.sys = sys
        self.lifted = sys.lifted
        self.weights = weights
        self.W = W
        n_x, n_u = self.lifted.n_x, self.lifted.n_u
        self.Q = weights.lifted_state_cost(self.lifted.C)
        # Variables: [x_2, ..., x_W, u_1, ..., u_W].
        self.nx_vars = (W - 1) * n_x
        n = self.nx_vars + W * n_u
        H = np.zeros((n, n))
        for i in range(W - 1):
            H[i * n_x:(i + 1) * n_x, i * n_x:(i + 1) * n_x] = 2.0 * self.Q
        for i in range(W):
            j = self.nx_vars + i * n_u
            H[j:j + n_u, j:j + n_u] = 2.0 * weights.R
        A_eq = np.zeros(((W - 1) * n_x, n))
        A, B = self.lifted.A, self.lifted.B
        for i in range(W - 1):
            rows = slice(i * n_x, (i + 1) * n_x)
            A_eq[rows, i * n_x:(i + 1) * n_x] = np.eye(n_x)
            if i > 0:
                A_eq[rows, (i - 1) * n_x:i * n_x] = -A
            A_eq[rows, self.nx_vars + i * n_u:self.nx_vars + (i + 1) * n_u] = -B
        self.H = H
        self.A_eq = A_eq

    def solve(self, t: int, z: np.ndarray, targets: np.ndarray) -> np.ndarray:
        W, n_x, n_u = self.W, self.lifted.n_x, self.lifted.n_u
        x1 = lift(self.sys, z)
        lifted_targets = np.stack([lift(self.sys, rt) for rt in np.atleast_2d(targets)])
        f = np.zeros(self.H.shape[0])
        for i in range(W - 1):
            f[i * n_x:(i + 1) * n_x] = -2.0 * self.Q @ lifted_targets[i + 1]
        b_eq = np.zeros((W - 1) * n_x)
        if W > 1:
            b_eq[:n_x] = self.lifted.A @ x1
        rep = solve_eq_qp(EqConstrainedQP(H=self.H, f=f, A_eq=self.A_eq, b_eq=b_eq))
        return rep.x[self.nx_vars:].reshape(W, n_u)


def lmpc_closed_form(sys: KoopmanSystem, weights: CostWeights, W: int) -> StepController:
    """Closed-form lifted MPC; requires an exact embedding and W >= 2."""
    return _ClosedFormLmpc(sys, weights, W)


def lmpc_qp(sys: KoopmanSystem, weights: CostWeights, W: int) -> StepController:
    """QP-based lifted MPC; the oracle for the closed form, and the exact
    realization of nonlinear MPC for plants with an exact embedding."""
    return _QpLmpc(sys, weights, W)
