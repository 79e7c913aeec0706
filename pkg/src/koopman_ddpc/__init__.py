"""Online predictive tracking for Koopman-linearizable systems.

The package covers the full pipeline: built-in plants with exact lifted
linear embeddings, the closed-form offline noncausal benchmark, lifted
linear MPC (closed form and QP), fully model-free data-driven predictive
control built from Hankel data libraries, and dynamic-regret measurement
with bound-decomposition diagnostics. The ``koopman-ddpc`` CLI wraps data
collection, verification, tracking, and regret sweeps.
"""

from .systems import (
    BUILTIN_SYSTEMS,
    CostWeights,
    DivergenceError,
    EmbeddingReport,
    KoopmanSystem,
    LiftedLinearSystem,
    ReferenceTrajectory,
    UnsupportedOperationError,
    get_system,
    heart_reference,
    lift,
    lift_trajectory,
    quartic_manifold,
    simulate,
    sine_reference,
    slow_manifold,
    unicycle,
    verify_embedding,
)
from .qp import (
    EqConstrainedQP,
    InfeasibleError,
    L1SlackQP,
    LowRankHessian,
    SolveReport,
    UnboundedError,
    pinv_solve,
    solve_eq_qp,
    solve_l1_slack_qp,
)
from .riccati import (
    DareConvergenceError,
    DareSolution,
    RiccatiSolution,
    StabilityDiagnostics,
    closed_loop_transition,
    dare_residual,
    feedforward_gain,
    riccati_recursion,
    solve_dare,
    stability_diagnostics,
)
from .offline import (
    DisturbanceSequence,
    OfflinePolicy,
    OfflineSolution,
    ValueFunctionCoeffs,
    disturbances,
    offline_solution,
    optimal_controls,
    value_coeffs,
)
from .tracking import (
    ControllerError,
    StepController,
    TrackingRun,
    lmpc_closed_form,
    lmpc_qp,
    run_algorithm1,
)
from .ddpc import (
    DataLibrary,
    ExcitationReport,
    InsufficientHistoryError,
    LibraryError,
    LibrarySwitcher,
    RegDdpcParams,
    block_hankel,
    build_library,
    check_lifted_excitation,
    collect_excitation,
    ddpc_controller,
    orientation_switcher,
    reg_ddpc_controller,
)
from .regret import (
    BoundDecomposition,
    RegretReport,
    SetupMismatchError,
    SweepError,
    SweepFit,
    SweepRow,
    build_regret_report,
    decompose_bound,
    deviation_identity,
    dynamic_regret,
    sweep_fit,
)

__version__ = "0.1.0"
