"""Nonlinear plants, Koopman embeddings, and reference trajectories.

A plant is a discrete-time map ``z_{t+1} = f(z_t, u_t)``. A Koopman
embedding is a lifting ``x = psi(z)`` together with matrices (A, B, C)
such that the lifted state evolves linearly, ``psi(f(z, u)) = A psi(z) + B u``,
and the original state is recovered as ``z = C psi(z)``. Systems without an
exact embedding (the unicycle robot) carry ``lifting=None``.

All types are immutable after construction and all operations are pure, so
everything here is safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class DivergenceError(RuntimeError):
    """Simulation produced a non-finite state."""

    def __init__(self, step: int):
        super().__init__(f"state became non-finite at step {step}")
        self.step = step


class UnsupportedOperationError(RuntimeError):
    """The operation needs a lifting this system does not carry."""


@dataclass(frozen=True)
class LiftedLinearSystem:
    """Linear dynamics (A, B, C) of the lifted state.

    A is n_x by n_x, B is n_x by n_u, C is n_z by n_x. C maps the lifted
    state back to the plant state.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got {A.shape}")
        if B.shape[0] != A.shape[0]:
            raise ValueError(f"B has {B.shape[0]} rows, expected {A.shape[0]}")
        if C.shape[1] != A.shape[0]:
            raise ValueError(f"C has {C.shape[1]} columns, expected {A.shape[0]}")
        for name, M in (("A", A), ("B", B), ("C", C)):
            if not np.all(np.isfinite(M)):
                raise ValueError(f"{name} contains non-finite entries")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_z(self) -> int:
        return self.C.shape[0]

    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.A @ x + self.B @ u


@dataclass(frozen=True)
class KoopmanSystem:
    """A plant, optionally paired with an exact Koopman embedding.

    ``dynamics(z, u)`` returns the next plant state. ``lifting`` and
    ``lifted`` are either both present or both absent.
    """

    name: str
    n_z: int
    n_u: int
    dynamics: Callable[[np.ndarray, np.ndarray], np.ndarray]
    lifting: Optional[Callable[[np.ndarray], np.ndarray]] = None
    lifted: Optional[LiftedLinearSystem] = None

    def __post_init__(self):
        if (self.lifting is None) != (self.lifted is None):
            raise ValueError("lifting and lifted must be provided together")
        if self.lifted is not None:
            if self.lifted.n_z != self.n_z or self.lifted.n_u != self.n_u:
                raise ValueError("lifted system dimensions disagree with the plant")

    @property
    def has_embedding(self) -> bool:
        return self.lifting is not None

    @property
    def n_x(self) -> int:
        if self.lifted is None:
            raise UnsupportedOperationError(f"system '{self.name}' has no lifting")
        return self.lifted.n_x


def simulate(sys: KoopmanSystem, z1: np.ndarray, controls: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Roll the plant forward; returns the ``len(controls) + 1`` visited states.

    Raises DivergenceError naming the step at which a non-finite state
    first appeared.
    """
    z1 = np.asarray(z1, dtype=float).reshape(-1)
    if z1.shape[0] != sys.n_z:
        raise ValueError(f"initial state has dimension {z1.shape[0]}, expected {sys.n_z}")
    controls = np.asarray(controls, dtype=float)
    if controls.size == 0:
        controls = controls.reshape(0, sys.n_u)
    controls = np.atleast_2d(controls)
    if controls.shape[1] != sys.n_u:
        raise ValueError(f"controls have dimension {controls.shape[1]}, expected {sys.n_u}")
    if not np.all(np.isfinite(z1)):
        raise DivergenceError(0)
    out = np.empty((controls.shape[0] + 1, sys.n_z))
    out[0] = z1
    for k in range(controls.shape[0]):
        nxt = np.asarray(sys.dynamics(out[k], controls[k]), dtype=float).reshape(-1)
        if not np.all(np.isfinite(nxt)):
            raise DivergenceError(k + 1)
        out[k + 1] = nxt
    return out


def lift(sys: KoopmanSystem, z: np.ndarray) -> np.ndarray:
    """Apply the lifting map to one plant state."""
    if sys.lifting is None:
        raise UnsupportedOperationError(f"system '{sys.name}' has no lifting")
    return np.asarray(sys.lifting(np.asarray(z, dtype=float)), dtype=float).reshape(-1)


def lift_trajectory(sys: KoopmanSystem, states: np.ndarray) -> np.ndarray:
    """Apply the lifting map row-wise to a (T, n_z) array of states."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    return np.stack([lift(sys, z) for z in states])


@dataclass(frozen=True)
class EmbeddingReport:
    max_dynamics_residual: float
    max_recovery_residual: float
    passed: bool
    tol: float


def verify_embedding(sys: KoopmanSystem, samples: Sequence[tuple[np.ndarray, np.ndarray]], tol: float = 1e-10) -> EmbeddingReport:
    """Check the embedding identities on sampled (z, u) pairs.

    dynamics residual: max over samples of |psi(f(z,u)) - A psi(z) - B u|.
    recovery residual: max over samples of |z - C psi(z)|.
    """
    if sys.lifting is None or sys.lifted is None:
        raise UnsupportedOperationError(f"system '{sys.name}' has no lifting")
    lin = sys.lifted
    dyn_res = 0.0
    rec_res = 0.0
    for z, u in samples:
        z = np.asarray(z, dtype=float).reshape(-1)
        u = np.asarray(u, dtype=float).reshape(-1)
        x = lift(sys, z)
        lhs = lift(sys, np.asarray(sys.dynamics(z, u)))
        dyn_res = max(dyn_res, float(np.linalg.norm(lhs - lin.A @ x - lin.B @ u)))
        rec_res = max(rec_res, float(np.linalg.norm(z - lin.C @ x)))
    return EmbeddingReport(dyn_res, rec_res, dyn_res <= tol and rec_res <= tol, tol)


@dataclass(frozen=True)
class CostWeights:
    """Tracking weights: Q_z on the plant state error, R on the control.

    Q_z must be symmetric positive semidefinite, R symmetric positive
    definite. The lifted state weight is Q = C' Q_z C.
    """

    Q_z: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        Q_z = np.atleast_2d(np.asarray(self.Q_z, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        for name, M in (("Q_z", Q_z), ("R", R)):
            if M.shape[0] != M.shape[1]:
                raise ValueError(f"{name} must be square")
            if not np.allclose(M, M.T, atol=1e-12 * (1.0 + np.abs(M).max())):
                raise ValueError(f"{name} must be symmetric")
        tol = 1e-10 * max(1.0, float(np.abs(Q_z).max()))
        if np.linalg.eigvalsh(Q_z).min() < -tol:
            raise ValueError("Q_z must be positive semidefinite")
        if np.linalg.eigvalsh(R).min() <= 1e-12 * max(1.0, float(np.abs(R).max())):
            raise ValueError("R must be positive definite")
        object.__setattr__(self, "Q_z", Q_z)
        object.__setattr__(self, "R", R)

    def lifted_state_cost(self, C: np.ndarray) -> np.ndarray:
        """Q = C' Q_z C, the (PSD, usually singular) lifted state weight."""
        Q = C.T @ self.Q_z @ C
        return 0.5 * (Q + Q.T)

    def stage_cost(self, z: np.ndarray, u: np.ndarray, r: np.ndarray) -> float:
        e = np.asarray(z, dtype=float).reshape(-1) - np.asarray(r, dtype=float).reshape(-1)
        u = np.asarray(u, dtype=float).reshape(-1)
        return float(e @ self.Q_z @ e + u @ self.R @ u)


@dataclass(frozen=True)
class ReferenceTrajectory:
    """A finite sequence of target states r_1, ..., r_T.

    Targets with norm above one are flagged by ``norm_report`` (the robot
    references exceed it by design) but never rejected.
    """

    targets: np.ndarray

    def __post_init__(self):
        targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        if not np.all(np.isfinite(targets)):
            raise ValueError("reference contains non-finite entries")
        object.__setattr__(self, "targets", targets)

    @property
    def horizon(self) -> int:
        return self.targets.shape[0]

    @property
    def n_z(self) -> int:
        return self.targets.shape[1]

    def target(self, t: int) -> np.ndarray:
        """Target at one-based time t."""
        return self.targets[t - 1]

    def window(self, t: int, width: int) -> np.ndarray:
        """Targets r_t, ..., r_{t+width-1} (one-based t)."""
        if t < 1 or t + width - 1 > self.horizon:
            raise IndexError(f"window [{t}, {t + width - 1}] outside horizon {self.horizon}")
        return self.targets[t - 1 : t - 1 + width]

    def norm_report(self) -> dict:
        norms = np.linalg.norm(self.targets, axis=1)
        flagged = np.flatnonzero(norms > 1.0) + 1
        return {
            "max_norm": float(norms.max()) if norms.size else 0.0,
            "n_above_unit": int(flagged.size),
            "flagged_steps": flagged,
        }


def sine_reference(T: int, magnitude: float = 1.0, period: int = 60, n_z: int = 2, coord: int = 1) -> ReferenceTrajectory:
    """Sinusoid on one coordinate, zero elsewhere: r[coord] = M sin(2 pi t / period)."""
    t = np.arange(1, T + 1, dtype=float)
    targets = np.zeros((T, n_z))
    targets[:, coord] = magnitude * np.sin(2.0 * np.pi * t / period)
    return ReferenceTrajectory(targets)


def heart_reference(cycles: int = 2, steps_per_cycle: int = 250) -> ReferenceTrajectory:
    """Closed heart-shaped planar curve with a heading coordinate.

    The (x, y) path is sampled over ``cycles`` periods; the heading is the
    direction of the chord to the next sample, computed with the
    four-quadrant arctangent and unwrapped so it has no 2 pi jumps.
    """
    T = cycles * steps_per_cycle
    tau = np.arange(T + 1, dtype=float) * (2.0 * np.pi / steps_per_cycle)
    x = 16.0 * np.sin(tau - 6.0) ** 3
    y = (13.0 * np.cos(tau) - 5.0 * np.cos(2.0 * tau - 12.0)
         - 2.0 * np.cos(3.0 * tau - 18.0) - np.cos(4.0 * tau - 24.0))
    heading = np.unwrap(np.arctan2(np.diff(y), np.diff(x)))
    return ReferenceTrajectory(np.column_stack([x[:T], y[:T], heading[:T]]))


# --- built-in systems ------------------------------------------------------


def _slow_manifold_dynamics(z, u):
    return np.array([0.99 * z[0], z[1] + z[0] ** 2 + u[0]])


def _slow_manifold_lift(z):
    return np.array([z[0], z[1], z[0] ** 2])


def slow_manifold() -> KoopmanSystem:
    """Two-state plant with a quadratic slow manifold and an exact 3-d embedding."""
    A = np.array([[0.99, 0.0, 0.0], [0.0, 1.0, 1.0], [0.0, 0.0, 0.99 ** 2]])
    B = np.array([[0.0], [1.0], [0.0]])
    C = np.hstack([np.eye(2), np.zeros((2, 1))])
    return KoopmanSystem(
        name="slow_manifold", n_z=2, n_u=1,
        dynamics=_slow_manifold_dynamics,
        lifting=_slow_manifold_lift,
        lifted=LiftedLinearSystem(A, B, C),
    )


def _quartic_manifold_dynamics(z, u):
    return np.array([0.99 * z[0], 0.9 * z[1] + z[0] ** 2 + z[0] ** 3 + z[0] ** 4 + u[0]])


def _quartic_manifold_lift(z):
    return np.array([z[0], z[1], z[0] ** 2, z[0] ** 3, z[0] ** 4])


def quartic_manifold() -> KoopmanSystem:
    """Two-state plant whose second state is driven by monomials of the first.

    The monomial basis (z1, z2, z1^2, z1^3, z1^4) closes exactly under the
    dynamics, giving a 5-d linear embedding.
    """
    A = np.array([
        [0.99, 0.0, 0.0, 0.0, 0.0],
        [0.0, 0.9, 1.0, 1.0, 1.0],
        [0.0, 0.0, 0.99 ** 2, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.99 ** 3, 0.0],
        [0.0, 0.0, 0.0, 0.0, 0.99 ** 4],
    ])
    B = np.array([[0.0], [1.0], [0.0], [0.0], [0.0]])
    C = np.hstack([np.eye(2), np.zeros((2, 3))])
    return KoopmanSystem(
        name="quartic_manifold", n_z=2, n_u=1,
        dynamics=_quartic_manifold_dynamics,
        lifting=_quartic_manifold_lift,
        lifted=LiftedLinearSystem(A, B, C),
    )


class _UnicycleDynamics:
    """Picklable kinematic step for a two-wheeled robot at sample time dt."""

    def __init__(self, dt: float):
        self.dt = dt

    def __call__(self, z, u):
        return np.array([
            z[0] + self.dt * np.cos(z[2]) * u[0],
            z[1] + self.dt * np.sin(z[2]) * u[0],
            z[2] + self.dt * u[1],
        ])


def unicycle(dt: float = 0.025) -> KoopmanSystem:
    """Two-wheeled robot: state (x, y, heading), input (speed, turn rate).

    Not Koopman-linearizable; carries no lifting. The heading is kept
    unwrapped during simulation.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    return KoopmanSystem(name="unicycle", n_z=3, n_u=2, dynamics=_UnicycleDynamics(dt))


BUILTIN_SYSTEMS = {
    "slow_manifold": slow_manifold,
    "quartic_manifold": quartic_manifold,
    "unicycle": unicycle,
}


def get_system(name: str, **kwargs) -> KoopmanSystem:
    """Look a built-in system up by its string id."""
    try:
        builder = BUILTIN_SYSTEMS[name]
    except KeyError:
        raise KeyError(f"unknown system '{name}', expected one of {sorted(BUILTIN_SYSTEMS)}") from None
    return builder(**kwargs)
