"""Batch experiment front-end.

Subcommands
-----------

``run``
    Execute one experiment described by a JSON config file; writes a
    self-contained run directory (config copy, ``summary.json``,
    ``ensemble.csv``, ``states.csv``, optional per-trajectory CSVs).
``converge``
    Step-size study: exact-chain vs recurrence record probabilities and
    discrete-vs-continuous pathwise state error across a tau list.
``compare``
    Per-time trace distance between the state series of two finished runs.
``validate``
    Parse and validate a config without running anything.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.

Every emitted data byte is a pure function of (config, master seed); wall
clock and other environment facts go to ``run.log`` only.

Config schema (JSON)::

    {
      "spec_version": 1,
      "model": "model.json",          // path relative to the config file
      "drive": {
        "c_alpha": [re, im], "c_beta": [re, im], "normalize": true,
        "alpha": {"preset": "constant", "amplitude": [re, im], "horizon": T},
        "beta":  {...}                // optional; omitted = single coherent drive
      },
      "grid": {"tau": 0.01, "horizon": 2.0},   // tau = collision engine
                                               // "dt" instead = SME engine
      "scheme": "counting",           // counting | homodyne | master |
                                      // exact-chain | cavity-analytic
      "n_trajectories": 1000,
      "master_seed": 1,
      "output_dir": "runs/demo",
      "observables": [{"name": "sz"}, {"name": "proj1", "matrix": [[...], ...]}],
      "noise": "wiener",              // homodyne SME only: wiener | binary
      "output_stride": 50,            // snapshot every k-th step (default ~50 rows)
      "emit_trajectories": false,
      "exact_chain": {"max_qubits": 10},
      "cavity": {"omega0": 5.0, "gamma": 1.0, "u": [1, 0], "n_max": 30}
    }

The model file holds the system matrices and initial state; see
:func:`cattraj.model.load_model_file`.
"""

from __future__ import annotations

import argparse
import itertools
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__, cavity, collision, sme
from .errors import CattrajError, ConfigError, NumericalError
from .linalg import trace_distance
from .model import (DriveSpec, GridSpec, SystemModel, complex_from_pair,
                    drive_from_config, load_model_file, overlap,
                    pair_from_complex, validate)

SCHEMES = ("counting", "homodyne", "master", "exact-chain", "cavity-analytic")


def _fmt(x) -> str:
    """17-significant-digit float formatting used in every CSV."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(x) for x in row) + "\n")


def _observable_matrix(entry: dict, dim: int) -> tuple[str, np.ndarray]:
    presets2 = {
        "sx": np.array([[0, 1], [1, 0]], dtype=complex),
        "sy": np.array([[0, -1j], [1j, 0]], dtype=complex),
        "sz": np.array([[1, 0], [0, -1]], dtype=complex),
    }
    name = entry.get("name")
    if not name:
        raise ConfigError(f"observable entry lacks a name: {entry!r}")
    if "matrix" in entry:
        mat = np.array([[complex_from_pair(v) for v in row] for row in entry["matrix"]])
    elif name in presets2:
        if dim != 2:
            raise ConfigError(f"observable preset '{name}' requires a 2-level system")
        mat = presets2[name]
    elif name == "number":
        mat = np.diag(np.arange(dim, dtype=complex))
    else:
        raise ConfigError(f"unknown observable '{name}' without an explicit matrix")
    if mat.shape != (dim, dim):
        raise ConfigError(f"observable '{name}' must be {dim}x{dim}, got {mat.shape}")
    return name, mat


@dataclass
class ExperimentConfig:
    """Parsed and validated experiment description."""

    raw: dict
    base_dir: str
    model: SystemModel
    psi0: np.ndarray
    drive: DriveSpec
    grid: GridSpec
    engine: str                 # "collision" | "sme" | "deterministic"
    scheme: str
    n_trajectories: int
    master_seed: int
    output_dir: str
    observables: list           # [(name, matrix), ...]
    noise: str = "wiener"
    output_stride: int = 1
    emit_trajectories: bool = False
    max_qubits: int = 10
    exact_measurement: str = "counting"
    cavity_params: cavity.CavityParams | None = None


def load_config(path: str) -> ExperimentConfig:
    """Read, validate, and resolve an experiment config file."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc

    base = os.path.dirname(os.path.abspath(path))
    version = raw.get("spec_version", 1)
    if version != 1:
        raise ConfigError(f"unsupported spec_version {version}")

    for key in ("model", "drive", "grid", "scheme", "output_dir"):
        if key not in raw:
            raise ConfigError(f"config field '{key}' is required")

    scheme = raw["scheme"]
    if scheme not in SCHEMES:
        raise ConfigError(f"scheme must be one of {SCHEMES}, got '{scheme}'")

    model_path = raw["model"]
    if not os.path.isabs(model_path):
        model_path = os.path.join(base, model_path)
    model, psi0 = load_model_file(model_path)

    drive = drive_from_config(raw["drive"])

    grid_cfg = raw["grid"]
    if "tau" in grid_cfg and "dt" in grid_cfg:
        raise ConfigError("grid must specify either 'tau' or 'dt', not both")
    if "tau" in grid_cfg:
        step, engine = float(grid_cfg["tau"]), "collision"
    elif "dt" in grid_cfg:
        step, engine = float(grid_cfg["dt"]), "sme"
    else:
        raise ConfigError("grid requires a 'tau' (collision) or 'dt' (SME) step")
    horizon = float(grid_cfg.get("horizon", max(drive.alpha.horizon, drive.beta.horizon)))
    grid = GridSpec.from_horizon(step, horizon)
    if scheme in ("master", "cavity-analytic"):
        engine = "deterministic"
    if scheme == "exact-chain" and engine != "collision":
        raise ConfigError("scheme 'exact-chain' requires a 'tau' grid")

    n_traj = int(raw.get("n_trajectories", 1))
    if n_traj < 1:
        raise ConfigError(f"n_trajectories must be >= 1, got {n_traj}")

    observables = [_observable_matrix(entry, model.dim)
                   for entry in raw.get("observables", [])]

    noise = raw.get("noise", "wiener")
    if noise not in ("wiener", "binary"):
        raise ConfigError(f"noise must be 'wiener' or 'binary', got '{noise}'")

    stride = int(raw.get("output_stride", max(1, grid.steps // 50)))
    if stride < 1:
        raise ConfigError(f"output_stride must be >= 1, got {stride}")

    cav = None
    if scheme == "cavity-analytic":
        if "cavity" not in raw:
            raise ConfigError("scheme 'cavity-analytic' requires a 'cavity' section")
        c = raw["cavity"]
        try:
            cav = cavity.CavityParams(float(c["omega0"]), float(c["gamma"]),
                                      complex_from_pair(c["u"]), int(c.get("n_max", 30)))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad cavity section: {exc}") from exc
        if model.dim != cav.n_max + 1:
            raise ConfigError(
                f"cavity n_max={cav.n_max} needs a model of dimension {cav.n_max + 1}, "
                f"got {model.dim}")

    out_dir = raw["output_dir"]
    if not os.path.isabs(out_dir):
        out_dir = os.path.join(base, out_dir)

    return ExperimentConfig(
        raw=raw, base_dir=base, model=model, psi0=psi0, drive=drive, grid=grid,
        engine=engine, scheme=scheme, n_trajectories=n_traj,
        master_seed=int(raw.get("master_seed", 0)), output_dir=out_dir,
        observables=observables, noise=noise, output_stride=stride,
        emit_trajectories=bool(raw.get("emit_trajectories", False)),
        max_qubits=int(raw.get("exact_chain", {}).get("max_qubits", 10)),
        exact_measurement=raw.get("exact_chain", {}).get("measurement", "counting"),
        cavity_params=cav)


@dataclass
class RunSummary:
    """Aggregated results of one run; serialized (minus wall clock) to JSON."""

    scheme: str
    engine: str
    n_trajectories: int
    master_seed: int
    times: np.ndarray
    observable_names: list
    means: np.ndarray          # (n_times, n_obs)
    stderrs: np.ndarray        # (n_times, n_obs)
    final_state: np.ndarray
    click_histogram: dict = field(default_factory=dict)
    clamped_steps: int = 0
    diagnostics: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "package_version": __version__,
            "scheme": self.scheme,
            "engine": self.engine,
            "n_trajectories": self.n_trajectories,
            "master_seed": self.master_seed,
            "times": [float(t) for t in self.times],
            "observables": list(self.observable_names),
            "click_histogram": {str(k): int(v) for k, v in sorted(self.click_histogram.items())},
            "clamped_steps": int(self.clamped_steps),
            "diagnostics": self.diagnostics,
            "final_state": [[pair_from_complex(z) for z in row] for row in self.final_state],
        }


def _expectations(states: np.ndarray, observables) -> np.ndarray:
    """Real expectation values Re Tr(O rho) for a (..., d, d) state array."""
    if not observables:
        return np.zeros(states.shape[:-2] + (0,))
    vals = [np.real(np.einsum("ij,...ji->...", mat, states)) for _, mat in observables]
    return np.stack(vals, axis=-1)


def _chunks(total: int, workers: int) -> list[tuple[int, int]]:
    size = (total + workers - 1) // workers
    return [(i, min(i + size, total)) for i in range(0, total, size)]


def _collision_chunk(args):
    spec, model, psi0, grid, scheme, seed, lo, hi, snaps = args
    return collision.run_ensemble(spec, model, psi0, grid, scheme, seed,
                                  hi - lo, snapshot_steps=snaps, first_index=lo)


def _sme_chunk(args):
    spec, model, psi0, grid, scheme, seed, lo, hi, snaps, ov, noise = args
    return sme.run_sme_ensemble(spec, model, psi0, grid, scheme, seed,
                                hi - lo, ov, snapshot_steps=snaps, noise=noise,
                                first_index=lo)


def _run_stochastic(cfg: ExperimentConfig, workers: int):
    """Collision or SME ensemble, optionally fanned out over processes.

    Per-trajectory RNG streams make the result identical for any worker
    count; chunk results are concatenated in trajectory-index order before
    the fixed tree reduction.
    """
    steps = cfg.grid.steps
    stride = 1 if cfg.emit_trajectories else cfg.output_stride
    snaps = np.unique(np.concatenate([np.arange(0, steps + 1, stride), [steps]]))
    spans = _chunks(cfg.n_trajectories, max(1, workers))

    if cfg.engine == "collision":
        jobs = [(cfg.drive, cfg.model, cfg.psi0, cfg.grid, cfg.scheme,
                 cfg.master_seed, lo, hi, snaps) for lo, hi in spans]
        runner, merge_axis = _collision_chunk, 1
    else:
        ov = overlap(cfg.drive.alpha, cfg.drive.beta, 0.0,
                     max(cfg.drive.alpha.horizon, cfg.drive.beta.horizon))
        scheme = "jump" if cfg.scheme == "counting" else "diffusive"
        jobs = [(cfg.drive, cfg.model, cfg.psi0, cfg.grid, scheme,
                 cfg.master_seed, lo, hi, snaps, ov, cfg.noise) for lo, hi in spans]
        runner, merge_axis = _sme_chunk, 1

    if len(jobs) == 1:
        results = [runner(jobs[0])]
    else:
        with ProcessPoolExecutor(max_workers=len(jobs)) as pool:
            results = list(pool.map(runner, jobs))

    first = results[0]
    states = np.concatenate([r.states for r in results], axis=merge_axis)
    outcomes = np.concatenate([r.outcomes for r in results], axis=0)
    parts = {"snapshot_steps": first.snapshot_steps, "times": first.times,
             "states": states, "outcomes": outcomes}
    if cfg.engine == "collision":
        parts["weight_ratios"] = np.concatenate([r.weight_ratios for r in results], axis=0)
        parts["clamped"] = np.concatenate([r.clamped for r in results], axis=0)
    else:
        parts["intensities"] = np.concatenate([r.intensities for r in results], axis=0)
    return parts


def run(config: ExperimentConfig, workers: int = 1,
        write_outputs: bool = True) -> RunSummary:
    """Execute an experiment and (optionally) write its run directory."""
    t_start = time.monotonic()
    out = config.output_dir
    if write_outputs:
        os.makedirs(out, exist_ok=True)

    click_hist: dict = {}
    clamped = 0
    diagnostics: dict = {}
    parts = None
    obs_names = [name for name, _ in config.observables]

    if config.scheme in ("counting", "homodyne"):
        parts = _run_stochastic(config, workers)
        times = parts["times"]
        per_traj = _expectations(parts["states"], config.observables)  # (nt, M, n_obs)
        means = sme.tree_mean(per_traj, axis=1)
        m = per_traj.shape[1]
        if m > 1:
            stderrs = np.std(per_traj, axis=1, ddof=1) / math.sqrt(m)
        else:
            stderrs = np.zeros_like(means)
        mean_states = sme.tree_mean(parts["states"], axis=1)
        final_state = mean_states[-1]
        if config.scheme == "counting":
            counts = (np.asarray(parts["outcomes"]) > 0.5).sum(axis=1)
            for c in counts:
                click_hist[int(c)] = click_hist.get(int(c), 0) + 1
        if config.engine == "collision":
            clamped = int(parts["clamped"].sum())
        trace_res = float(np.max(np.abs(
            np.einsum("tmii->tm", parts["states"]).real - 1.0)))
        diagnostics["max_trace_residual"] = trace_res
        state_rows = mean_states
    elif config.scheme == "master":
        ov = overlap(config.drive.alpha, config.drive.beta, 0.0,
                     max(config.drive.alpha.horizon, config.drive.beta.horizon))
        stride = config.output_stride
        snaps = np.unique(np.concatenate(
            [np.arange(0, config.grid.steps + 1, stride), [config.grid.steps]]))
        times, aps = sme.solve_master(config.drive, config.model, config.psi0,
                                      config.grid, ov, snapshot_steps=snaps)
        assembled = np.stack([ap.assembled(config.drive.c_alpha, config.drive.c_beta)
                              for ap in aps])
        means = _expectations(assembled, config.observables)
        stderrs = np.zeros_like(means)
        final_state = assembled[-1]
        diagnostics["overlap_trace_residual"] = float(max(
            abs(np.trace(ap.varrho_ab) - ov) for ap in aps))
        state_rows = assembled
    elif config.scheme == "cavity-analytic":
        stride = config.output_stride
        snaps = np.unique(np.concatenate(
            [np.arange(0, config.grid.steps + 1, stride), [config.grid.steps]]))
        times = snaps * config.grid.tau
        states = np.stack([cavity.apriori_state(config.cavity_params, config.drive, t)
                           for t in times])
        means = _expectations(states, config.observables)
        stderrs = np.zeros_like(means)
        final_state = states[-1]
        state_rows = states
    elif config.scheme == "exact-chain":
        return _run_exact_chain(config, out, write_outputs, t_start)
    else:  # pragma: no cover - load_config already rejects unknown schemes
        raise ConfigError(f"unhandled scheme '{config.scheme}'")

    summary = RunSummary(config.scheme, config.engine, config.n_trajectories,
                         config.master_seed, times, obs_names, means, stderrs,
                         final_state, click_hist, clamped, diagnostics)
    summary.wall_clock = time.monotonic() - t_start

    if write_outputs:
        _write_run_dir(config, summary, state_rows, parts)
    return summary


def _write_run_dir(config: ExperimentConfig, summary: RunSummary,
                   state_rows: np.ndarray, parts) -> None:
    out = config.output_dir
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump(config.raw, fh, indent=2, sort_keys=True)
        fh.write("\n")
    doc = summary.to_json_dict()
    doc["weights"] = {"c_alpha": pair_from_complex(config.drive.c_alpha),
                      "c_beta": pair_from_complex(config.drive.c_beta)}
    doc["outputs"] = {"ensemble_csv": "ensemble.csv", "states_csv": "states.csv"}
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out, "run.log"), "w") as fh:
        fh.write(f"wall_clock_seconds {summary.wall_clock:.3f}\n")

    header = ["t"]
    for name in summary.observable_names:
        header += [f"{name}_mean", f"{name}_stderr"]
    rows = []
    for i, t in enumerate(summary.times):
        row = [t]
        for k in range(len(summary.observable_names)):
            row += [summary.means[i, k], summary.stderrs[i, k]]
        rows.append(row)
    _write_csv(os.path.join(out, "ensemble.csv"), header, rows)

    d = config.model.dim
    sheader = ["t"] + [f"rho_{i}_{j}_{p}" for i in range(d) for j in range(d)
                       for p in ("re", "im")]
    srows = []
    for i, t in enumerate(summary.times):
        row = [t]
        for a in range(d):
            for b in range(d):
                row += [state_rows[i, a, b].real, state_rows[i, a, b].imag]
        srows.append(row)
    _write_csv(os.path.join(out, "states.csv"), sheader, srows)

    if config.emit_trajectories and parts is not None:
        _write_trajectories(config, parts)


def _write_trajectories(config: ExperimentConfig, parts) -> None:
    tdir = os.path.join(config.output_dir, "trajectories")
    os.makedirs(tdir, exist_ok=True)
    states = parts["states"]       # snapshots at every step (stride forced to 1)
    outcomes = parts["outcomes"]
    n_traj = outcomes.shape[0]
    steps = outcomes.shape[1]
    obs = _expectations(states, config.observables)  # (steps+1, M, n_obs)
    names = [name for name, _ in config.observables]
    for m in range(n_traj):
        rows = []
        if config.engine == "collision":
            header = ["t", "outcome", "weight_ratio"] + names
            for j in range(steps):
                rows.append([(j + 1) * config.grid.tau, int(outcomes[m, j]),
                             parts["weight_ratios"][m, j], *obs[j + 1, m]])
        else:
            label = "nu" if config.scheme == "counting" else "mu"
            header = ["t", label] + names + ["outcome"]
            for j in range(steps):
                rows.append([j * config.grid.tau, parts["intensities"][m, j],
                             *obs[j, m], outcomes[m, j]])
        _write_csv(os.path.join(tdir, f"traj_{m:05d}.csv"), header, rows)


def _run_exact_chain(config: ExperimentConfig, out: str, write_outputs: bool,
                     t_start: float) -> RunSummary:
    """Enumerate all records of the (small) chain and compare both engines."""
    steps = config.grid.steps
    if steps > config.max_qubits:
        raise ConfigError(f"exact-chain scheme limited to {config.max_qubits} "
                          f"collisions, grid has {steps}")
    measurement = config.exact_measurement
    labels = (1, 0) if measurement == "counting" else (1, -1)
    rows = []
    total_p = 0.0
    max_err = 0.0
    for outcomes in itertools.product(labels, repeat=steps):
        rec = collision.MeasurementRecord(measurement, config.grid.tau,
                                          outcomes=list(outcomes))
        p_exact, _ = collision.exact_chain(config.drive, config.model, config.psi0,
                                           config.grid, measurement, rec,
                                           max_qubits=config.max_qubits)
        p_rec = collision.record_probability(config.drive, config.model, config.psi0,
                                             config.grid, rec)
        total_p += p_exact
        max_err = max(max_err, abs(p_exact - p_rec))
        tag = "".join("1" if o == 1 else "0" for o in outcomes)
        rows.append([tag, p_exact, p_rec, abs(p_exact - p_rec)])

    diagnostics = {"sum_p_exact": total_p, "max_abs_error": max_err}
    summary = RunSummary(config.scheme, "exact-chain", 1, config.master_seed,
                         np.array([config.grid.horizon]), [], np.zeros((1, 0)),
                         np.zeros((1, 0)), np.zeros((config.model.dim,) * 2),
                         diagnostics=diagnostics)
    summary.wall_clock = time.monotonic() - t_start
    if write_outputs:
        _write_csv(os.path.join(out, "records.csv"),
                   ["record", "p_exact", "p_recurrence", "abs_error"], rows)
        with open(os.path.join(out, "summary.json"), "w") as fh:
            json.dump(summary.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(out, "config.json"), "w") as fh:
            json.dump(config.raw, fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(out, "run.log"), "w") as fh:
            fh.write(f"wall_clock_seconds {summary.wall_clock:.3f}\n")
    return summary


@dataclass
class CompareReport:
    times: np.ndarray
    distances: np.ndarray
    max_distance: float
    argmax_time: float


def compare(dir_a: str, dir_b: str) -> CompareReport:
    """Per-time trace distance between the state series of two runs."""

    def load_states(d):
        path = os.path.join(d, "states.csv")
        try:
            data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
            with open(path) as fh:
                header = fh.readline().strip().split(",")
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
        dim = int(round(math.sqrt((len(header) - 1) / 2)))
        ts = data[:, 0]
        res = data[:, 1::2] + 1j * data[:, 2::2]
        return ts, res.reshape(len(ts), dim, dim)

    ts_a, st_a = load_states(dir_a)
    ts_b, st_b = load_states(dir_b)
    if st_a.shape != st_b.shape or not np.allclose(ts_a, ts_b, atol=1e-12):
        raise ConfigError(f"runs have mismatched grids: {st_a.shape} vs {st_b.shape}")
    dists = np.array([trace_distance(a, b) for a, b in zip(st_a, st_b)])
    imax = int(np.argmax(dists))
    return CompareReport(ts_a, dists, float(dists[imax]), float(ts_a[imax]))


@dataclass
class ConvergenceRow:
    tau: float
    prob_err: float
    state_err: float


@dataclass
class ConvergenceReport:
    rows: list
    prob_order: float
    state_order: float


def convergence_study(config: ExperimentConfig, tau_list) -> ConvergenceReport:
    """Observed-order study across a decreasing tau list.

    For every tau the drive is rebuilt on the shrunken horizon
    ``n_qubits * tau``; the exact chain gives record-probability errors and
    a collision-record replay through the SME integrator gives the
    discrete-to-continuous pathwise state error.
    """
    taus = [float(t) for t in tau_list]
    if any(b >= a for a, b in zip(taus, taus[1:])):
        raise ConfigError(f"tau list must be strictly decreasing, got {taus}")
    n = min(config.max_qubits, 6)
    scheme = "counting"
    n_paths = min(config.n_trajectories, 16)

    rows = []
    for tau in taus:
        grid = GridSpec(tau, n)
        drive = _rebuild_drive(config.raw["drive"], horizon=n * tau)
        max_err = 0.0
        for outcomes in itertools.product((0, 1), repeat=n):
            rec = collision.MeasurementRecord(scheme, tau, outcomes=list(outcomes))
            p_exact, _ = collision.exact_chain(drive, config.model, config.psi0,
                                               grid, scheme, rec,
                                               max_qubits=config.max_qubits)
            p_rec = collision.record_probability(drive, config.model, config.psi0,
                                                 grid, rec)
            max_err = max(max_err, abs(p_exact - p_rec))

        # pathwise: collision trajectory records replayed through the SME
        long_grid = GridSpec.from_horizon(tau, config.grid.horizon)
        long_drive = _rebuild_drive(config.raw["drive"], horizon=long_grid.horizon)
        ov = overlap(long_drive.alpha, long_drive.beta, 0.0, long_grid.horizon)
        errs = []
        for idx in range(n_paths):
            record, history = collision.run_trajectory(
                long_drive, config.model, config.psi0, long_grid, scheme,
                config.master_seed, trajectory_index=idx, with_history=False)
            cond = sme.ConditionalDensity.initial(config.psi0, long_drive, ov)
            alphas = np.asarray(long_drive.alpha(long_grid.times()), dtype=complex)
            betas = np.asarray(long_drive.beta(long_grid.times()), dtype=complex)
            for j, dn in enumerate(record.outcomes):
                cond, _ = sme.jump_sme_step(config.model, cond, complex(alphas[j]),
                                            complex(betas[j]), tau, outcome=dn)
            final = collision.conditional_density(history[-1], long_drive, tau)
            errs.append(trace_distance(final.assembled(), cond.assembled()))
        rows.append(ConvergenceRow(tau, max_err, float(np.mean(errs))))

    def order(errs):
        xs = np.log([r.tau for r in rows])
        ys = np.log(np.maximum(errs, 1e-300))
        if len(taus) < 2 or np.max(errs) <= 0.0:
            return float("nan")
        return float(np.polyfit(xs, ys, 1)[0])

    return ConvergenceReport(rows,
                             order([r.prob_err for r in rows]),
                             order([r.state_err for r in rows]))


def _rebuild_drive(drive_cfg: dict, horizon: float) -> DriveSpec:
    cfg = json.loads(json.dumps(drive_cfg))
    cfg["alpha"]["horizon"] = horizon
    if "beta" in cfg:
        cfg["beta"]["horizon"] = horizon
    return drive_from_config(cfg)


# ---------------------------------------------------------------------------
# Command line plumbing
# ---------------------------------------------------------------------------

def _cmd_run(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config.master_seed = args.seed
        config.raw["master_seed"] = args.seed
    if args.emit_trajectories:
        config.emit_trajectories = True
    summary = run(config, workers=args.workers)
    print(f"run complete: scheme={summary.scheme} engine={summary.engine} "
          f"trajectories={summary.n_trajectories} wall={summary.wall_clock:.2f}s")
    print(f"outputs in {config.output_dir}")
    return 0


def _cmd_converge(args) -> int:
    config = load_config(args.config)
    taus = [float(x) for x in args.tau_list.split(",")]
    report = convergence_study(config, taus)
    print(f"{'tau':>10} {'prob_err':>14} {'state_err':>14}")
    for row in report.rows:
        print(f"{row.tau:>10.5f} {row.prob_err:>14.6e} {row.state_err:>14.6e}")
    print(f"observed order: probability {report.prob_order:.2f}, "
          f"state {report.state_order:.2f}")
    if args.output:
        os.makedirs(args.output, exist_ok=True)
        _write_csv(os.path.join(args.output, "converge.csv"),
                   ["tau", "prob_err", "state_err"],
                   [[r.tau, r.prob_err, r.state_err] for r in report.rows])
        with open(os.path.join(args.output, "converge.json"), "w") as fh:
            json.dump({"prob_order": report.prob_order,
                       "state_order": report.state_order}, fh, indent=2)
            fh.write("\n")
    return 0


def _cmd_compare(args) -> int:
    report = compare(args.run_a, args.run_b)
    print(f"{'t':>10} {'trace_distance':>16}")
    for t, dist in zip(report.times, report.distances):
        print(f"{t:>10.4f} {dist:>16.8e}")
    print(f"max trace distance {report.max_distance:.8e} at t={report.argmax_time:.4f}")
    if args.output:
        os.makedirs(args.output, exist_ok=True)
        _write_csv(os.path.join(args.output, "compare.csv"),
                   ["t", "trace_distance"],
                   list(zip(report.times, report.distances)))
    return 0


def _cmd_validate(args) -> int:
    config = load_config(args.config)
    validate(config.drive)
    print(f"config OK: scheme={config.scheme} engine={config.engine} "
          f"dim={config.model.dim} steps={config.grid.steps}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cattraj",
        description="Quantum trajectory simulations for superposed coherent drives")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None,
                       help="override the config master seed")
    p_run.add_argument("--workers", type=int, default=1)
    p_run.add_argument("--emit-trajectories", action="store_true")
    p_run.set_defaults(handler=_cmd_run)

    p_conv = sub.add_parser("converge", help="step-size convergence study")
    p_conv.add_argument("config")
    p_conv.add_argument("--tau-list", required=True,
                        help="comma-separated decreasing steps, e.g. 0.04,0.02,0.01")
    p_conv.add_argument("--output", default=None)
    p_conv.set_defaults(handler=_cmd_converge)

    p_cmp = sub.add_parser("compare", help="trace-distance report for two runs")
    p_cmp.add_argument("run_a")
    p_cmp.add_argument("run_b")
    p_cmp.add_argument("--output", default=None)
    p_cmp.set_defaults(handler=_cmd_compare)

    p_val = sub.add_parser("validate", help="check a config without running")
    p_val.add_argument("config")
    p_val.set_defaults(handler=_cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except CattrajError as exc:  # pragma: no cover - catch-all for new subclasses
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
