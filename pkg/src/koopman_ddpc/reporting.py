"""Delimited output, plot scripts, and rendered figures.

All CSV output is full double precision (%.17g round-trips binary64
exactly), dot decimal separator, newline-terminated rows, written
atomically (temp file + rename) so parallel sweep workers never expose
partial files. Figures are rendered with the Agg backend next to the CSVs;
a gnuplot-compatible script for the sweep is emitted as well so the data
can be replotted without Python.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .ddpc import DataLibrary, build_library
from .regret import SweepFit, SweepRow
from .systems import ReferenceTrajectory
from .tracking import TrackingRun

RNG_ALGORITHM = "numpy-pcg64"


def fmt(x) -> str:
    """Full-precision text form of one number."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(v) for v in row))
    _atomic_write(Path(path), "\n".join(lines) + "\n")


def read_csv(path) -> tuple[list[str], np.ndarray]:
    """Header and a float matrix of the body."""
    with open(path, "r", newline="\n") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    header = lines[0].split(",")
    body = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    return header, body


# --- trajectories and references -------------------------------------------


def write_trajectory_csv(path, states: np.ndarray, controls: Optional[np.ndarray] = None) -> None:
    """Serialize states (and optionally controls) as t,z_1,...[,u_1,...]."""
    states = np.atleast_2d(states)
    header = ["t"] + [f"z_{i+1}" for i in range(states.shape[1])]
    rows = []
    if controls is not None:
        controls = np.atleast_2d(controls)
        header += [f"u_{i+1}" for i in range(controls.shape[1])]
        for t in range(states.shape[0]):
            rows.append([t + 1, *states[t], *controls[t]] if t < controls.shape[0]
                        else [t + 1, *states[t]])
    else:
        for t in range(states.shape[0]):
            rows.append([t + 1, *states[t]])
    write_csv(path, header, rows)


def write_reference_csv(path, r: ReferenceTrajectory) -> None:
    write_trajectory_csv(path, r.targets)


def read_reference_csv(path) -> ReferenceTrajectory:
    header, body = read_csv(path)
    n_z = sum(1 for h in header if h.startswith("z_"))
    if n_z == 0:
        raise ValueError(f"{path} has no z_* columns")
    return ReferenceTrajectory(body[:, 1 : 1 + n_z])


def write_tracking_run_csv(path, run: TrackingRun) -> None:
    """Per-step record: t, states, controls, targets, stage cost, solve wall
    time. The wall-time column is last so determinism checks can drop it."""
    n_z, n_u = run.states.shape[1], run.controls.shape[1]
    header = (["t"] + [f"z_{i+1}" for i in range(n_z)] + [f"u_{i+1}" for i in range(n_u)]
              + [f"r_{i+1}" for i in range(n_z)] + ["stage_cost", "solve_ms"])
    rows = [[t + 1, *run.states[t], *run.controls[t], *run.targets[t],
             run.stage_costs[t], run.solve_ms[t]] for t in range(run.horizon)]
    write_csv(path, header, rows)


def write_offline_csv(path, offline) -> None:
    """Offline optimum: t, controls, lifted states, cost to go."""
    n_u = offline.controls.shape[1]
    n_x = offline.states.shape[1]
    header = (["t"] + [f"u_{i+1}" for i in range(n_u)]
              + [f"x_{i+1}" for i in range(n_x)] + ["cost_to_go"])
    rows = [[t + 1, *offline.controls[t], *offline.states[t], offline.cost_to_go[t]]
            for t in range(offline.controls.shape[0])]
    write_csv(path, header, rows)


# --- regret sweeps ----------------------------------------------------------

SWEEP_HEADER = ["W", "regret", "truncation", "feedback", "feedforward",
                "identity_gap", "slope_fit"]


def write_sweep_csv(path, rows: Sequence[SweepRow], fit: Optional[SweepFit]) -> None:
    slope = fit.slope if fit is not None else float("nan")
    body = [[r.W, r.regret, r.truncation, r.feedback, r.feedforward,
             r.identity_gap, slope] for r in rows]
    write_csv(path, SWEEP_HEADER, body)


def write_sweep_fit_csv(path, fits: dict) -> None:
    """One row per sweep label: slope, intercept, r2, slope standard error."""
    header = ["label", "slope", "intercept", "r2", "slope_stderr", "n_used"]
    rows = []
    for label, fit in fits.items():
        rows.append([label, fit.slope, fit.intercept, fit.r2, fit.slope_stderr, fit.n_used])
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join([str(row[0])] + [fmt(v) for v in row[1:]]))
    _atomic_write(Path(path), "\n".join(lines) + "\n")


def write_gnuplot_script(path, csv_name: str, title: str = "dynamic regret vs prediction horizon") -> None:
    """Plain-text gnuplot script plotting log-scale regret against W from the
    sweep CSV."""
    text = "\n".join([
        "# gnuplot script: run from the directory containing the sweep CSV",
        "set datafile separator ','",
        "set logscale y",
        "set xlabel 'prediction horizon W'",
        "set ylabel 'dynamic regret'",
        f"set title '{title}'",
        "set key off",
        f"plot '{csv_name}' using 1:2 skip 1 with linespoints pt 7",
        "pause -1",
    ])
    _atomic_write(Path(path), text + "\n")


# --- data library persistence ----------------------------------------------


def save_library_data(out_dir, u_d: np.ndarray, z_d: np.ndarray, descriptor: dict,
                      suffix: str = "") -> None:
    """Persist one excitation trajectory as u_d.csv / z_d.csv plus a JSON
    descriptor carrying the seed and generator name, so the library can be
    rebuilt bit-exactly."""
    out_dir = Path(out_dir)
    u_d = np.atleast_2d(np.asarray(u_d, dtype=float))
    z_d = np.atleast_2d(np.asarray(z_d, dtype=float))
    tag = f"_{suffix}" if suffix else ""
    write_csv(out_dir / f"u_d{tag}.csv", ["t"] + [f"u_{i+1}" for i in range(u_d.shape[1])],
              [[t + 1, *u_d[t]] for t in range(u_d.shape[0])])
    write_csv(out_dir / f"z_d{tag}.csv", ["t"] + [f"z_{i+1}" for i in range(z_d.shape[1])],
              [[t + 1, *z_d[t]] for t in range(z_d.shape[0])])
    desc = dict(descriptor)
    desc.setdefault("rng", RNG_ALGORITHM)
    _atomic_write(out_dir / f"descriptor{tag}.json", json.dumps(desc, indent=2, sort_keys=True))


def load_library_data(out_dir, suffix: str = "") -> tuple[np.ndarray, np.ndarray, dict]:
    out_dir = Path(out_dir)
    tag = f"_{suffix}" if suffix else ""
    _, u_body = read_csv(out_dir / f"u_d{tag}.csv")
    _, z_body = read_csv(out_dir / f"z_d{tag}.csv")
    with open(out_dir / f"descriptor{tag}.json") as fh:
        desc = json.load(fh)
    return u_body[:, 1:], z_body[:, 1:], desc


def rebuild_library(out_dir, suffix: str = "") -> DataLibrary:
    u_d, z_d, desc = load_library_data(out_dir, suffix)
    return build_library(u_d, z_d, int(desc["T_ini"]), int(desc["W"]))


# --- diagnostics ------------------------------------------------------------


def write_checks_csv(path, checks: Sequence[tuple]) -> None:
    """Rows of (check, value, status) with status in {pass, fail, warn, info}."""
    lines = ["check,value,status"]
    for name, value, status in checks:
        lines.append(f"{name},{fmt(value) if value is not None else ''},{status}")
    _atomic_write(Path(path), "\n".join(lines) + "\n")


# --- figures ----------------------------------------------------------------


def _pyplot():
    import matplotlib
    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt
    return plt


def render_sweep_figure(path, rows: Sequence[SweepRow], fits: dict) -> None:
    """Log-scale regret against W with the fitted decay line(s)."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5.0, 3.6), constrained_layout=True)
    Ws = np.array([r.W for r in rows], dtype=float)
    regs = np.array([r.regret for r in rows])
    ax.semilogy(Ws, np.maximum(regs, 1e-300), "o", label="measured")
    for label, fit in fits.items():
        grid = np.linspace(Ws.min(), Ws.max(), 50)
        ax.semilogy(grid, np.exp(fit.intercept + fit.slope * grid), "-",
                    label=f"{label}: slope {fit.slope:.3f}")
    ax.set_xlabel("prediction horizon W")
    ax.set_ylabel("dynamic regret")
    ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_tracking_figure(path, run: TrackingRun, coord: int = 1) -> None:
    """Tracked coordinate against its target over time."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5.0, 3.6), constrained_layout=True)
    t = np.arange(1, run.horizon + 1)
    ax.plot(t, run.targets[:, coord], "r--", label="target")
    ax.plot(t, run.states[:, coord], "b-", label=f"state z_{coord+1}")
    ax.set_xlabel("t")
    ax.set_ylabel(f"z_{coord+1}")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_path_figure(path, run: TrackingRun) -> None:
    """Planar path against the reference curve (robot runs)."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.6, 4.6), constrained_layout=True)
    ax.plot(run.targets[:, 0], run.targets[:, 1], "r--", label="reference")
    ax.plot(run.states[:, 0], run.states[:, 1], "b-", label="robot")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_aspect("equal")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.savefig(path, dpi=150)
    plt.close(fig)
