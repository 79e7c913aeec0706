"""Command-line experiment harness.

Subcommands:

* ``verify``  - embedding, excitation, and Riccati diagnostics; nonzero exit
  on any failed check.
* ``collect`` - seeded excitation-data collection, persisted as CSV pairs
  plus a JSON descriptor that allows bit-exact library reconstruction.
* ``track``   - one closed-loop run with the configured controller; emits
  the run CSV, a regret report (or position-error metrics for plants
  without an embedding), figures, and the offline benchmark.
* ``sweep``   - one run per prediction horizon (optionally per R and per
  reference magnitude), with the log-regret fit, a gnuplot script, and a
  rendered figure.

Configs are strict JSON: unknown keys are rejected so experiment records
stay diffable. Exit codes: 0 success, 1 config error, 2 numerical failure,
3 diagnostic failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys as _sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import reporting
from .ddpc import (
    RegDdpcParams,
    build_library,
    check_lifted_excitation,
    collect_excitation,
    ddpc_controller,
    orientation_switcher,
    reg_ddpc_controller,
)
from .offline import offline_solution
from .qp import InfeasibleError, UnboundedError
from .regret import SweepRow, build_regret_report, sweep_fit
from .riccati import DareConvergenceError, IllPosedError, stability_diagnostics
from .systems import (
    BUILTIN_SYSTEMS,
    CostWeights,
    DivergenceError,
    KoopmanSystem,
    ReferenceTrajectory,
    get_system,
    heart_reference,
    lift_trajectory,
    sine_reference,
    verify_embedding,
)
from .tracking import ControllerError, lmpc_closed_form, lmpc_qp, run_algorithm1

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_DIAGNOSTIC = 3

ROBOT_HEADINGS = (np.pi / 4, 3 * np.pi / 4, 5 * np.pi / 4, 7 * np.pi / 4)
ROBOT_INPUT_LOW = (10.0, -np.pi / 6)
ROBOT_INPUT_HIGH = (20.0, np.pi / 6)


class ConfigError(ValueError):
    """The experiment config is malformed."""


def _require_keys(d: dict, allowed: set, context: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {context}: {sorted(unknown)}")


@dataclass
class ExperimentConfig:
    system: str
    T: int
    W: list
    T_ini: int
    weights: CostWeights
    reference: dict
    data: dict
    controller: dict
    initial_state: Optional[np.ndarray] = None
    out_dir: Optional[str] = None
    dt: float = 0.025
    R_values: Optional[list] = None
    M_values: Optional[list] = None
    preroll: Optional[int] = None

    @property
    def single_W(self) -> int:
        if len(self.W) != 1:
            raise ConfigError("this command needs a single W")
        return self.W[0]


_TOP_KEYS = {"system", "T", "W", "T_ini", "weights", "reference", "data",
             "controller", "initial_state", "out_dir", "dt", "R_values",
             "M_values", "preroll"}
_WEIGHT_KEYS = {"Q_z_diag", "Q_z", "R_scale", "R"}
_REFERENCE_KEYS = {"kind", "M", "period", "cycles", "steps_per_cycle", "path"}
_DATA_KEYS = {"length", "input_low", "input_high", "seed", "initial_state", "path"}
_CONTROLLER_KEYS = {"kind", "lambda_g", "lambda_z", "switching", "tol", "max_iter", "warmup"}


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config(raw, base_dir=path.parent)


def parse_config(raw: dict, base_dir: Path = Path(".")) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _require_keys(raw, _TOP_KEYS, "config")
    try:
        system = raw["system"]
        T = int(raw["T"])
        T_ini = int(raw["T_ini"])
    except KeyError as exc:
        raise ConfigError(f"missing required config key: {exc}") from exc
    if system not in BUILTIN_SYSTEMS:
        raise ConfigError(f"unknown system '{system}'")
    W_raw = raw.get("W")
    if W_raw is None:
        raise ConfigError("missing required config key: 'W'")
    W = [int(w) for w in (W_raw if isinstance(W_raw, list) else [W_raw])]
    if T_ini < 1:
        raise ConfigError("T_ini must be at least 1")
    if any(w >= T or w < 1 for w in W):
        raise ConfigError("every W must satisfy 1 <= W < T")

    wspec = raw.get("weights", {})
    _require_keys(wspec, _WEIGHT_KEYS, "weights")
    if "Q_z" in wspec:
        Q_z = np.asarray(wspec["Q_z"], dtype=float)
    else:
        Q_z = np.diag(np.asarray(wspec.get("Q_z_diag", [1.0]), dtype=float))
    if "R" in wspec:
        R = np.atleast_2d(np.asarray(wspec["R"], dtype=float))
    else:
        n_u = 2 if system == "unicycle" else 1
        R = float(wspec.get("R_scale", 1.0)) * np.eye(n_u)
    try:
        weights = CostWeights(Q_z=Q_z, R=R)
    except ValueError as exc:
        raise ConfigError(f"bad weights: {exc}") from exc

    ref = dict(raw.get("reference", {"kind": "sine"}))
    _require_keys(ref, _REFERENCE_KEYS, "reference")
    if ref.get("kind") not in ("sine", "heart", "csv"):
        raise ConfigError("reference.kind must be one of sine|heart|csv")
    if ref.get("kind") == "csv":
        p = Path(ref.get("path", ""))
        if not p.is_absolute():
            p = base_dir / p
        if not p.exists():
            raise ConfigError(f"reference file not found: {p}")
        ref["path"] = str(p)

    data = dict(raw.get("data", {}))
    _require_keys(data, _DATA_KEYS, "data")
    data.setdefault("seed", 0)
    if "path" in data:
        p = Path(data["path"])
        if not p.is_absolute():
            p = base_dir / p
        if not p.exists():
            raise ConfigError(f"data directory not found: {p}")
        data["path"] = str(p)

    ctrl = dict(raw.get("controller", {"kind": "lmpc"}))
    _require_keys(ctrl, _CONTROLLER_KEYS, "controller")
    kind = ctrl.get("kind", "lmpc")
    if kind not in ("lmpc", "lmpc_qp", "ddpc", "reg_ddpc"):
        raise ConfigError("controller.kind must be one of lmpc|lmpc_qp|ddpc|reg_ddpc")

    init = raw.get("initial_state")
    return ExperimentConfig(
        system=system, T=T, W=W, T_ini=T_ini, weights=weights, reference=ref,
        data=data, controller=ctrl,
        initial_state=None if init is None else np.asarray(init, dtype=float),
        out_dir=raw.get("out_dir"), dt=float(raw.get("dt", 0.025)),
        R_values=raw.get("R_values"), M_values=raw.get("M_values"),
        preroll=raw.get("preroll"),
    )


def _make_system(cfg: ExperimentConfig) -> KoopmanSystem:
    if cfg.system == "unicycle":
        return get_system("unicycle", dt=cfg.dt)
    return get_system(cfg.system)


def _make_reference(cfg: ExperimentConfig, magnitude: Optional[float] = None) -> ReferenceTrajectory:
    ref = cfg.reference
    kind = ref.get("kind", "sine")
    if kind == "sine":
        M = float(ref.get("M", 1.0)) if magnitude is None else magnitude
        r = sine_reference(cfg.T, magnitude=M, period=int(ref.get("period", 60)))
    elif kind == "heart":
        r = heart_reference(cycles=int(ref.get("cycles", 2)),
                            steps_per_cycle=int(ref.get("steps_per_cycle", 250)))
    else:
        r = reporting.read_reference_csv(ref["path"])
    if r.horizon < cfg.T:
        raise ConfigError(f"reference horizon {r.horizon} shorter than T={cfg.T}")
    return ReferenceTrajectory(r.targets[: cfg.T])


def _default_initial_state(cfg: ExperimentConfig, sys: KoopmanSystem, r: ReferenceTrajectory) -> np.ndarray:
    if cfg.initial_state is not None:
        if cfg.initial_state.shape[0] != sys.n_z:
            raise ConfigError(f"initial_state has dimension {cfg.initial_state.shape[0]}, expected {sys.n_z}")
        return cfg.initial_state
    if cfg.system == "unicycle":
        return r.targets[0].copy()
    return np.array([0.8, 0.0])


def _data_length(cfg: ExperimentConfig, W: int) -> int:
    length = cfg.data.get("length")
    if length in (None, "auto"):
        return 2 * W + 24
    return int(length)


def _collect_for(cfg: ExperimentConfig, sys: KoopmanSystem, W: int, seed_override=None):
    """Collected (u_d, z_d) trajectories; the robot gets one per heading.

    With ``data.path`` set, previously persisted trajectories are loaded
    instead, reproducing the stored libraries bit-exactly.
    """
    if "path" in cfg.data:
        base = Path(cfg.data["path"])
        if cfg.system == "unicycle":
            out = []
            for k in range(len(ROBOT_HEADINGS)):
                u_d, z_d, _ = reporting.load_library_data(base, suffix=f"W{W}_q{k}")
                out.append((u_d, z_d))
            return out
        u_d, z_d, _ = reporting.load_library_data(base, suffix=f"W{W}")
        return [(u_d, z_d)]
    seed = int(cfg.data.get("seed", 0)) if seed_override is None else int(seed_override)
    if cfg.system == "unicycle":
        length = int(cfg.data.get("length", 1500))
        low = np.asarray(cfg.data.get("input_low", ROBOT_INPUT_LOW), dtype=float)
        high = np.asarray(cfg.data.get("input_high", ROBOT_INPUT_HIGH), dtype=float)
        out = []
        for k, heading in enumerate(ROBOT_HEADINGS):
            z0 = np.array([0.0, 0.0, heading])
            out.append(collect_excitation(sys, z0, length, low, high, seed + k))
        return out
    length = _data_length(cfg, W)
    low = np.asarray(cfg.data.get("input_low", -1.0), dtype=float)
    high = np.asarray(cfg.data.get("input_high", 1.0), dtype=float)
    z0 = np.asarray(cfg.data.get("initial_state", [0.8, 0.0] if sys.n_z == 2 else np.zeros(sys.n_z)), dtype=float)
    return [collect_excitation(sys, z0, length, low, high, seed)]


def _build_controller(cfg: ExperimentConfig, sys: KoopmanSystem, W: int, trajectories):
    kind = cfg.controller.get("kind", "lmpc")
    if kind == "lmpc":
        return lmpc_closed_form(sys, cfg.weights, W)
    if kind == "lmpc_qp":
        return lmpc_qp(sys, cfg.weights, W)
    libs = [build_library(u_d, z_d, cfg.T_ini, W) for u_d, z_d in trajectories]
    if kind == "ddpc":
        if len(libs) != 1:
            raise ConfigError("plain ddpc uses a single data library")
        warmup = cfg.controller.get("warmup", "zero")
        return ddpc_controller(libs[0], cfg.weights, warmup=warmup)
    params = RegDdpcParams(lambda_g=float(cfg.controller.get("lambda_g", 2.0)),
                           lambda_z=float(cfg.controller.get("lambda_z", 3e6)))
    switching = bool(cfg.controller.get("switching", len(libs) == 4))
    switcher = orientation_switcher(libs) if switching else None
    if not switching and len(libs) != 1:
        raise ConfigError("reg_ddpc without switching uses a single library")
    return reg_ddpc_controller(libs if switching else libs[0], cfg.weights, params,
                               switcher=switcher,
                               warmup=cfg.controller.get("warmup", "zero"),
                               tol=float(cfg.controller.get("tol", 3e-4)),
                               max_iter=int(cfg.controller.get("max_iter", 3000)))


def resolve_out_dir(args, cfg: ExperimentConfig) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if cfg.out_dir:
        return Path(cfg.out_dir)
    env = os.environ.get("KOOPMAN_DDPC_OUT")
    if env:
        return Path(env)
    return Path("out")


# --- commands ---------------------------------------------------------------


def cmd_verify(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.data["seed"] = args.seed
    out = resolve_out_dir(args, cfg)
    sys = _make_system(cfg)
    checks = []
    failed = False

    if sys.has_embedding:
        rng = np.random.default_rng(int(cfg.data.get("seed", 0)))
        samples = [(rng.uniform(-2.0, 2.0, sys.n_z), rng.uniform(-2.0, 2.0, sys.n_u))
                   for _ in range(1000)]
        rep = verify_embedding(sys, samples, tol=1e-10)
        checks.append(("embedding_dynamics_residual", rep.max_dynamics_residual,
                       "pass" if rep.passed else "fail"))
        checks.append(("embedding_recovery_residual", rep.max_recovery_residual,
                       "pass" if rep.passed else "fail"))
        failed |= not rep.passed

        Q = cfg.weights.lifted_state_cost(sys.lifted.C)
        try:
            diag = stability_diagnostics(sys.lifted.A, sys.lifted.B, Q, cfg.weights.R, T=cfg.T)
            checks.append(("dare_spectral_radius", diag.rho_cl, "pass" if diag.rho_cl < 1 else "fail"))
            checks.append(("gamma_inf", diag.gamma_inf, "info"))
            checks.append(("kappa_est", diag.kappa_est, "info"))
            checks.append(("delta_stab_est", diag.delta_stab_est, "info"))
            checks.append(("rho_inf_est", diag.rho_inf_est, "info"))
            checks.append(("riccati_convergence_fit_r2", diag.rho_fit_r2,
                           "pass" if diag.rho_fit_r2 >= 0.95 else "warn"))
            failed |= diag.rho_cl >= 1
        except DareConvergenceError as exc:
            checks.append(("dare_convergence", exc.residual, "fail"))
            failed = True

        if sys.n_x > cfg.T_ini:
            checks.append(("history_length_vs_lifted_dim", cfg.T_ini, "warn"))
        r = _make_reference(cfg)
        norm_rep = r.norm_report()
        checks.append(("reference_max_norm", norm_rep["max_norm"],
                       "warn" if norm_rep["n_above_unit"] else "pass"))
        psi_bound = float(np.linalg.norm(lift_trajectory(sys, r.targets), axis=1).max())
        checks.append(("lifted_reference_max_norm", psi_bound, "info"))
        for W in cfg.W:
            trajectories = _collect_for(cfg, sys, W)
            lib = build_library(*trajectories[0], cfg.T_ini, W)
            exc_rep = check_lifted_excitation(lib, sys)
            checks.append((f"lifted_excitation_W{W}", exc_rep.rank,
                           "pass" if exc_rep.passed else "fail"))
            failed |= not exc_rep.passed
    else:
        checks.append(("embedding", None, "info"))

    reporting.write_checks_csv(out / "verify.csv", checks)
    for name, value, status in checks:
        print(f"{status.upper():5s} {name}" + (f" = {reporting.fmt(value)}" if value is not None else ""))
    return EXIT_DIAGNOSTIC if failed else EXIT_OK


def cmd_collect(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.data["seed"] = args.seed
    out = resolve_out_dir(args, cfg)
    sys = _make_system(cfg)
    seed = int(cfg.data.get("seed", 0))
    for W in cfg.W:
        trajectories = _collect_for(cfg, sys, W)
        for k, (u_d, z_d) in enumerate(trajectories):
            descriptor = {
                "system": cfg.system, "T_ini": cfg.T_ini, "W": W,
                "n_u": sys.n_u, "n_z": sys.n_z, "source_seed": seed + k,
                "length": u_d.shape[0],
            }
            suffix = f"W{W}" + (f"_q{k}" if len(trajectories) > 1 else "")
            reporting.save_library_data(out / "data", u_d, z_d, descriptor, suffix=suffix)
            print(f"collected {u_d.shape[0]} samples -> {out / 'data'} ({suffix})")
    return EXIT_OK


def _run_once(cfg: ExperimentConfig, sys: KoopmanSystem, r: ReferenceTrajectory,
              z1: np.ndarray, W: int, seed_override=None):
    trajectories = None
    if cfg.controller.get("kind", "lmpc") in ("ddpc", "reg_ddpc"):
        trajectories = _collect_for(cfg, sys, W, seed_override=seed_override)
    ctrl = _build_controller(cfg, sys, W, trajectories)
    preroll = cfg.preroll if cfg.preroll is not None else cfg.T_ini
    return run_algorithm1(sys, ctrl, cfg.weights, r, z1, W, preroll=preroll)


def cmd_track(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.data["seed"] = args.seed
    out = resolve_out_dir(args, cfg)
    sys = _make_system(cfg)
    r = _make_reference(cfg)
    z1 = _default_initial_state(cfg, sys, r)
    W = cfg.single_W

    run = _run_once(cfg, sys, r, z1, W)
    reporting.write_tracking_run_csv(out / "run.csv", run)
    reporting.write_reference_csv(out / "reference.csv", r)

    if sys.has_embedding:
        off = offline_solution(sys, cfg.weights, r, run.states[0])
        rep = build_regret_report(run, sys, cfg.weights, r, off)
        reporting.write_offline_csv(out / "offline.csv", off)
        row = SweepRow(W=W, regret=rep.regret, truncation=rep.decomposition.truncation,
                       feedback=rep.decomposition.feedback,
                       feedforward=rep.decomposition.feedforward,
                       identity_gap=rep.identity_gap, runtime_s=float(run.solve_ms.sum() / 1e3))
        reporting.write_sweep_csv(out / "regret.csv", [row], None)
        reporting.render_tracking_figure(out / "tracking.png", run)
        print(f"J_T = {run.total_cost:.9g}  J_T* = {off.cost:.9g}  regret = {rep.regret:.6g}  "
              f"identity_gap = {rep.identity_gap:.3g}")
    else:
        pos_err = run.states[:, :2] - run.targets[:, :2]
        mse = float(np.mean(np.sum(pos_err ** 2, axis=1)))
        reporting.write_csv(out / "metrics.csv",
                            ["W", "mse_position", "total_cost"],
                            [[W, mse, run.total_cost]])
        reporting.render_path_figure(out / "tracking.png", run)
        print(f"J_T = {run.total_cost:.9g}  position MSE = {mse:.6g}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.data["seed"] = args.seed
    out = resolve_out_dir(args, cfg)
    if len(cfg.W) < 3:
        raise ConfigError("need >= 3 W values for a sweep")
    sys = _make_system(cfg)
    if not sys.has_embedding:
        raise ConfigError("regret sweeps need a system with an embedding")

    variants = [("base", None, None)]
    if cfg.R_values:
        variants = [(f"R={rv:g}", float(rv), None) for rv in cfg.R_values]
    if cfg.M_values:
        variants += [(f"M={mv:g}", None, float(mv)) for mv in cfg.M_values]

    def run_row(Rv, Mv, W):
        local = ExperimentConfig(
            system=cfg.system, T=cfg.T, W=[W], T_ini=cfg.T_ini,
            weights=cfg.weights if Rv is None else CostWeights(Q_z=cfg.weights.Q_z, R=Rv * np.eye(sys.n_u)),
            reference=cfg.reference, data=cfg.data, controller=cfg.controller,
            initial_state=cfg.initial_state, dt=cfg.dt, preroll=cfg.preroll,
        )
        r = _make_reference(local, magnitude=Mv)
        z1 = _default_initial_state(local, sys, r)
        run = _run_once(local, sys, r, z1, W)
        off = offline_solution(sys, local.weights, r, run.states[0])
        rep = build_regret_report(run, sys, local.weights, r, off)
        return SweepRow(W=W, regret=rep.regret, truncation=rep.decomposition.truncation,
                        feedback=rep.decomposition.feedback,
                        feedforward=rep.decomposition.feedforward,
                        identity_gap=rep.identity_gap,
                        runtime_s=float(run.solve_ms.sum() / 1e3))

    fits = {}
    all_rows = {}
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        for label, Rv, Mv in variants:
            futures = [pool.submit(run_row, Rv, Mv, W) for W in cfg.W]
            rows = [f.result() for f in futures]
            fit = sweep_fit([row.W for row in rows], [row.regret for row in rows])
            fits[label] = fit
            all_rows[label] = rows
            tag = "" if label == "base" else f"_{label.replace('=', '')}"
            reporting.write_sweep_csv(out / f"sweep{tag}.csv", rows, fit)
            print(f"{label}: slope={fit.slope:.4f} +- {fit.slope_stderr:.4f} r2={fit.r2:.4f} "
                  f"n={fit.n_used} excluded={list(fit.excluded)}")
    reporting.write_sweep_fit_csv(out / "sweep_fits.csv", fits)
    reporting.write_gnuplot_script(out / "sweep.gp", "sweep.csv")
    first = next(iter(all_rows))
    reporting.render_sweep_figure(out / "sweep.png", all_rows[first], fits)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="koopman-ddpc",
        description="Predictive tracking experiments for Koopman-linearizable systems")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("verify", cmd_verify), ("collect", cmd_collect),
                     ("track", cmd_track), ("sweep", cmd_sweep)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the JSON experiment config")
        p.add_argument("--out", default=None, help="output directory (default: config, then $KOOPMAN_DDPC_OUT)")
        p.add_argument("--jobs", type=int, default=1, help="parallel workers for sweeps")
        p.add_argument("--seed", type=int, default=None, help="override the data seed")
        p.set_defaults(handler=fn)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=_sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, ControllerError, InfeasibleError, UnboundedError,
            DareConvergenceError, IllPosedError) as exc:
        print(f"numerical failure: {exc}", file=_sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    raise SystemExit(main())
