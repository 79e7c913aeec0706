"""Model-free predictive control from Hankel data libraries.

A single sufficiently exciting trajectory is cut into overlapping windows
of length L = T_ini + W and stacked into a block-Hankel matrix H_d. The
controller matches the most recent T_ini input/state pairs against the
past block rows and optimizes the future block rows, all through one
coefficient vector g: the window program

    min_{u, z, g}  sum_i ||z_i - r_i||^2_{Q_z} + ||u_i||^2_R
    s.t.           H_d g = [u_ini; u; z_ini; z]

is reduced to an equality-constrained QP in g alone (u = U_F g,
z = Z_F g), solved with minimum-norm tie-breaking since g is never unique.
The regularized variant adds an l1 penalty on g and a quadratic slack on
the matched past states, which is what makes the approach usable on plants
without an exact linear embedding (the two-wheeled robot); there the data
only captures local behavior, so four libraries indexed by heading
quadrant are swapped in as the robot turns.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .qp import (
    EqConstrainedQP,
    L1SlackQP,
    LowRankHessian,
    solve_eq_qp,
    solve_l1_slack_qp,
)
from .systems import CostWeights, KoopmanSystem, UnsupportedOperationError, lift, simulate
from .tracking import StepController

DEFAULT_RANK_TOL = 1e-10


class LibraryError(ValueError):
    """The source trajectory cannot produce the requested library."""


class InsufficientHistoryError(RuntimeError):
    """The controller was asked to solve before its history buffer filled."""


def block_hankel(data: np.ndarray, L: int) -> np.ndarray:
    """Block-Hankel matrix of a (n_d, k) signal: column j stacks samples
    j, ..., j+L-1; shape (L*k, n_d - L + 1). A 1-D input is treated as a
    scalar signal."""
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data.reshape(-1, 1)
    n_d, k = data.shape
    if n_d < L:
        raise LibraryError(f"trajectory length {n_d} below window length {L}")
    cols = n_d - L + 1
    out = np.empty((L * k, cols))
    for j in range(cols):
        out[:, j] = data[j : j + L].reshape(-1)
    return out


@dataclass(frozen=True)
class DataLibrary:
    """Stacked input/state Hankel blocks with past/future partition views.

    Rows are ordered inputs first then states; within each block the first
    T_ini block-rows are the past partition and the remaining W block-rows
    the future partition. The source trajectory is kept for persistence and
    for seeding history buffers.
    """

    u_d: np.ndarray   # (n_d, n_u) source inputs
    z_d: np.ndarray   # (n_d, n_z) source states
    T_ini: int
    W: int
    u_hankel: np.ndarray
    z_hankel: np.ndarray

    @property
    def n_u(self) -> int:
        return self.u_d.shape[1]

    @property
    def n_z(self) -> int:
        return self.z_d.shape[1]

    @property
    def L(self) -> int:
        return self.T_ini + self.W

    @property
    def depth(self) -> int:
        """Number of library columns l = n_d - L + 1."""
        return self.u_hankel.shape[1]

    @property
    def U_P(self) -> np.ndarray:
        return self.u_hankel[: self.T_ini * self.n_u]

    @property
    def U_F(self) -> np.ndarray:
        return self.u_hankel[self.T_ini * self.n_u :]

    @property
    def Z_P(self) -> np.ndarray:
        return self.z_hankel[: self.T_ini * self.n_z]

    @property
    def Z_F(self) -> np.ndarray:
        return self.z_hankel[self.T_ini * self.n_z :]

    @property
    def H(self) -> np.ndarray:
        """Full stacked library [inputs; states]."""
        return np.vstack([self.u_hankel, self.z_hankel])


def build_library(u_d: np.ndarray, z_d: np.ndarray, T_ini: int, W: int) -> DataLibrary:
    """Cut one trajectory into a length-(T_ini + W) window library."""
    u_d = np.asarray(u_d, dtype=float)
    z_d = np.asarray(z_d, dtype=float)
    if u_d.ndim == 1:
        u_d = u_d.reshape(-1, 1)
    if z_d.ndim == 1:
        z_d = z_d.reshape(-1, 1)
    if u_d.shape[0] != z_d.shape[0]:
        raise LibraryError("input and state trajectories must have equal length")
    if T_ini < 1 or W < 1:
        raise LibraryError("T_ini and W must be positive")
    L = T_ini + W
    if u_d.shape[0] < L:
        raise LibraryError(
            f"trajectory length {u_d.shape[0]} too short; need at least {L}")
    return DataLibrary(u_d=u_d, z_d=z_d, T_ini=T_ini, W=W,
                       u_hankel=block_hankel(u_d, L), z_hankel=block_hankel(z_d, L))


def collect_excitation(sys: KoopmanSystem, z1: np.ndarray, length: int,
                       input_low, input_high, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Excite the plant with i.i.d. uniform inputs from a seeded generator.

    Returns (u_d, z_d) of equal length with z_d[k] the state at which
    u_d[k] was applied. The generator is numpy's PCG64 (default_rng), so a
    fixed seed reproduces the data stream bit-exactly.
    """
    if length < 1:
        raise ValueError("length must be positive")
    low = np.broadcast_to(np.asarray(input_low, dtype=float), (sys.n_u,))
    high = np.broadcast_to(np.asarray(input_high, dtype=float), (sys.n_u,))
    if np.any(low > high):
        raise ValueError("input_low must be elementwise <= input_high")
    rng = np.random.default_rng(seed)
    u_d = rng.uniform(low, high, size=(length, sys.n_u))
    z_d = simulate(sys, z1, u_d)[:length]
    return u_d, z_d


@dataclass(frozen=True)
class ExcitationReport:
    rank: int
    required: int
    passed: bool


def check_lifted_excitation(lib: DataLibrary, sys: KoopmanSystem,
                            rank_tol: float = DEFAULT_RANK_TOL) -> ExcitationReport:
    """Rank test of the stacked window inputs over the lifted window-start
    states. Diagnostic only: it needs the lifting, which a deployed
    model-free controller does not have."""
    if not sys.has_embedding:
        raise UnsupportedOperationError("excitation check needs a lifting")
    # First plant state of each window, read off the state Hankel block.
    first_states = lib.z_hankel[: lib.n_z].T
    lifted = np.stack([lift(sys, z) for z in first_states]).T  # (n_x, l)
    M = np.vstack([lib.u_hankel, lifted])
    s = np.linalg.svd(M, compute_uv=False)
    rank = int(np.sum(s > rank_tol * s[0])) if s.size else 0
    required = lib.n_u * lib.L + sys.n_x
    return ExcitationReport(rank=rank, required=required, passed=rank == required)


class _InitBuffer:
    """Ring buffer of the most recent T_ini applied (state, input) pairs."""

    def __init__(self, T_ini: int):
        self.T_ini = T_ini
        self._z = deque(maxlen=T_ini)
        self._u = deque(maxlen=T_ini)

    def push(self, z: np.ndarray, u: np.ndarray) -> None:
        self._z.append(np.asarray(z, dtype=float).reshape(-1))
        self._u.append(np.asarray(u, dtype=float).reshape(-1))

    @property
    def full(self) -> bool:
        return len(self._z) == self.T_ini

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """(u_ini, z_ini) stacked oldest-first."""
        if not self.full:
            raise InsufficientHistoryError(
                f"history holds {len(self._z)} of {self.T_ini} required steps")
        return np.concatenate(list(self._u)), np.concatenate(list(self._z))


def _seed_buffer_from_tail(buf: _InitBuffer, lib: DataLibrary) -> None:
    for k in range(lib.T_ini, 0, -1):
        buf.push(lib.z_d[-k], lib.u_d[-k])


@dataclass(frozen=True)
class RegDdpcParams:
    """Regularization weights: l1 on the window coefficients, quadratic on
    the past-state slack."""

    lambda_g: float
    lambda_z: float

    def __post_init__(self):
        if self.lambda_g < 0 or self.lambda_z < 0:
            raise ValueError("regularization weights must be nonnegative")


class LibrarySwitcher:
    """Maps the current state to the data library for its heading quadrant.

    Quadrants are half-open, lower-bound inclusive: [0, pi/2), [pi/2, pi),
    [pi, 3pi/2), [3pi/2, 2pi). Angles are wrapped by floored modulo, so
    -pi/4 selects the last quadrant.
    """

    def __init__(self, libraries: Sequence[DataLibrary]):
        if len(libraries) != 4:
            raise ValueError(f"need exactly 4 libraries, got {len(libraries)}")
        self.libraries = list(libraries)

    def select(self, z: np.ndarray) -> int:
        theta = float(np.mod(z[2], 2.0 * np.pi))
        return min(int(theta // (0.5 * np.pi)), 3)


def orientation_switcher(libraries: Sequence[DataLibrary]) -> LibrarySwitcher:
    """Quadrant-based switching over four heading-indexed libraries."""
    return LibrarySwitcher(libraries)


class DdpcController(StepController):
    """Equality-constrained data-driven window controller.

    Exact for plants with an exact linear embedding once the library passes
    the lifted excitation test and the history is at least as long as the
    lifted dimension.
    """

    # A minimum-length library excites its weakest genuine direction only to
    # ~1e-11 of the top singular value; the rank cut must sit between that
    # and the double-precision noise floor.
    RANK_TOL = 1e-12

    def __init__(self, lib: DataLibrary, weights: CostWeights, warmup: str = "zero",
                 tol: float = 1e-9):
        if warmup not in ("zero", "data_tail"):
            raise ValueError("warmup must be 'zero' or 'data_tail'")
        if weights.Q_z.shape[0] != lib.n_z or weights.R.shape[0] != lib.n_u:
            raise ValueError("weight dimensions disagree with the library")
        self.lib = lib
        self.weights = weights
        self.W = lib.W
        self.tol = tol
        self.buffer = _InitBuffer(lib.T_ini)
        self.min_history = lib.T_ini
        if warmup == "data_tail":
            _seed_buffer_from_tail(self.buffer, lib)
            self.min_history = 0
        Qw = np.kron(np.eye(lib.W), weights.Q_z)
        Rw = np.kron(np.eye(lib.W), weights.R)
        Z_F, U_F = lib.Z_F, lib.U_F
        self._H = 2.0 * (Z_F.T @ Qw @ Z_F + U_F.T @ Rw @ U_F)
        self._ZQ = 2.0 * (Qw @ Z_F).T  # maps stacked targets to -f
        self._A_eq = np.vstack([lib.U_P, lib.Z_P])

    def observe(self, z: np.ndarray, u: np.ndarray) -> None:
        self.buffer.push(z, u)

    def solve(self, t: int, z: np.ndarray, targets: np.ndarray) -> np.ndarray:
        u_ini, z_ini = self.buffer.stacked()
        r_stack = np.atleast_2d(np.asarray(targets, dtype=float)).reshape(-1)
        f = -self._ZQ @ r_stack
        b_eq = np.concatenate([u_ini, z_ini])
        rep = solve_eq_qp(EqConstrainedQP(H=self._H, f=f, A_eq=self._A_eq, b_eq=b_eq),
                          tol=self.tol, rank_tol=self.RANK_TOL)
        g = rep.x
        return (self.lib.U_F @ g).reshape(self.W, self.lib.n_u)


def ddpc_controller(lib: DataLibrary, weights: CostWeights, warmup: str = "zero") -> DdpcController:
    """Model-free window controller over one Hankel library."""
    return DdpcController(lib, weights, warmup=warmup)


class _RegLibraryWorkspace:
    """Per-library precomputations for the regularized solve."""

    def __init__(self, lib: DataLibrary, weights: CostWeights):
        W, n_z, n_u, T_ini = lib.W, lib.n_z, lib.n_u, lib.T_ini
        self.lib = lib
        l = lib.depth
        n_sigma = n_z * T_ini
        self.n = l + n_sigma
        self.l = l
        self.n_sigma = n_sigma
        # Factored Hessian G'G: rows are sqrt(2 Q_z) Z_F and sqrt(2 R) U_F
        # blocks; the sigma columns carry no smooth cost.
        Qs = _psd_sqrt(2.0 * weights.Q_z)
        Rs = _psd_sqrt(2.0 * weights.R)
        G = np.vstack([np.kron(np.eye(W), Qs) @ lib.Z_F,
                       np.kron(np.eye(W), Rs) @ lib.U_F])
        self.G = np.hstack([G, np.zeros((G.shape[0], n_sigma))])
        self.ZQ2 = 2.0 * (np.kron(np.eye(W), weights.Q_z) @ lib.Z_F).T
        self.A_eq = np.block([
            [lib.U_P, np.zeros((n_u * T_ini, n_sigma))],
            [lib.Z_P, -np.eye(n_sigma)],
        ])
        self.l1_indices = np.arange(l)
        self.slack_indices = np.arange(l, self.n)
        self.factor_cache: dict = {}
        self.warm: Optional[dict] = None


def _psd_sqrt(M: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(np.atleast_2d(M))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


class RegDdpcController(StepController):
    """Regularized data-driven controller with optional library switching.

    Each step solves the window program with an l1 penalty on the
    coefficient vector and a quadratic slack on the matched past states.
    Warm starts and KKT factorizations are kept per library, so consecutive
    solves in the same heading quadrant are cheap.
    """

    def __init__(self, libraries: Sequence[DataLibrary] | DataLibrary,
                 weights: CostWeights, params: RegDdpcParams,
                 switcher: Optional[LibrarySwitcher] = None,
                 warmup: str = "zero", tol: float = 1e-7, max_iter: int = 5000):
        if isinstance(libraries, DataLibrary):
            libraries = [libraries]
        libraries = list(libraries)
        if switcher is not None and len(libraries) != len(switcher.libraries):
            raise ValueError("switcher and controller must share the libraries")
        if switcher is None and len(libraries) != 1:
            raise ValueError("multiple libraries need a switcher")
        if warmup not in ("zero", "data_tail"):
            raise ValueError("warmup must be 'zero' or 'data_tail'")
        first = libraries[0]
        if any(lib.W != first.W or lib.T_ini != first.T_ini for lib in libraries):
            raise ValueError("libraries must share T_ini and W")
        self.params = params
        self.weights = weights
        self.switcher = switcher
        self.W = first.W
        self.n_u = first.n_u
        self.tol = tol
        self.max_iter = max_iter
        self.workspaces = [_RegLibraryWorkspace(lib, weights) for lib in libraries]
        self.buffer = _InitBuffer(first.T_ini)
        self.min_history = first.T_ini
        if warmup == "data_tail":
            _seed_buffer_from_tail(self.buffer, first)
            self.min_history = 0

    def observe(self, z: np.ndarray, u: np.ndarray) -> None:
        self.buffer.push(z, u)

    def solve(self, t: int, z: np.ndarray, targets: np.ndarray) -> np.ndarray:
        idx = self.switcher.select(z) if self.switcher is not None else 0
        ws = self.workspaces[idx]
        u_ini, z_ini = self.buffer.stacked()
        r_stack = np.atleast_2d(np.asarray(targets, dtype=float)).reshape(-1)
        f = np.concatenate([-ws.ZQ2 @ r_stack, np.zeros(ws.n_sigma)])
        b_eq = np.concatenate([u_ini, z_ini])
        core = EqConstrainedQP(H=LowRankHessian(diag=np.zeros(ws.n), factor=ws.G),
                               f=f, A_eq=ws.A_eq, b_eq=b_eq)
        qp = L1SlackQP(core=core, l1_indices=ws.l1_indices, l1_weight=self.params.lambda_g,
                       slack_indices=ws.slack_indices, slack_weight=self.params.lambda_z)
        if ws.warm is None:
            ws.warm = {"x": np.zeros(ws.n), "zeta": np.zeros(ws.l), "y": np.zeros(ws.l), "rho": 1.0}
        rep = solve_l1_slack_qp(qp, max_iter=self.max_iter, tol=self.tol,
                                warm_start=ws.warm, factor_cache=ws.factor_cache)
        if not rep.converged:
            raise RuntimeError(
                f"regularized solve did not converge (primal {rep.primal_residual:.2e}, "
                f"dual {rep.dual_residual:.2e})")
        g = rep.x[: ws.l]
        return (ws.lib.U_F @ g).reshape(self.W, self.n_u)


def reg_ddpc_controller(libraries, weights: CostWeights, params: RegDdpcParams,
                        switcher: Optional[LibrarySwitcher] = None,
                        warmup: str = "zero", tol: float = 1e-7,
                        max_iter: int = 5000) -> RegDdpcController:
    """Regularized model-free controller (slack + l1 model selection)."""
    return RegDdpcController(libraries, weights, params, switcher=switcher,
                             warmup=warmup, tol=tol, max_iter=max_iter)
