"""Command-line orchestration: configs, presets, pipelines and output files.

Commands::

    cornerspace run <config.json> [--out DIR]
    cornerspace preset <name> [--out DIR] [--seed N] [--m-max N] [--row ID]
    cornerspace preset --list
    cornerspace validate <config.json>

Exit codes: 0 when every run converged, 2 when a run stopped at its limits
(M list exhausted or integration time cap) without converging, 1 on error.
The environment variable ``CORNERSPACE_THREADS`` sets the number of worker
threads used for trajectory batches.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import json
import logging
import math
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .corner import PipelineControls, converge_in_m, solve_cluster
from .lattice import build_geometry, plan_merge_schedule
from .meanfield import gutzwiller_fixed_point
from .model import ModelParams, build_base_cluster, fock_site_operators
from .numerics import hermitian_eig
from .observables import G2_NN_ESTIMATORS, ObservableRecord, probability_spectrum
from .steadystate import SolverControls
from .trajectories import TrajectoryConfig, worker_count

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "RunOutcome",
    "load_config",
    "validate_config",
    "list_presets",
    "preset_runs",
    "run_experiment",
    "main",
    "RESULT_COLUMNS",
    "SPECTRUM_COLUMNS",
    "TIMESERIES_COLUMNS",
]

log = logging.getLogger("cornerspace")

SCHEMA_VERSION = 1
PIPELINES = ("corner", "meanfield", "bruteforce")
OPERATOR_MODES = ("auto", "exact", "fast")
RESULT_COLUMNS = ["Lx", "Ly", "M", "solver", "n", "n_err", "re_b", "re_b_err", "im_b", "im_b_err",
                  "g2", "g2_err", "g2_nn", "g2_nn_err"]
SPECTRUM_COLUMNS = ["rank", "p_r", "n_tot_r"]
TIMESERIES_COLUMNS = ["Lx", "Ly", "M", "t", "n", "g2"]

EXIT_OK, EXIT_ERROR, EXIT_LIMITS = 0, 1, 2


class ConfigError(ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


# -- configuration -------------------------------------------------------------------


@dataclass
class ModelSection:
    delta_omega: float = 5.0
    U: Optional[float] = None
    hardcore: bool = True
    J: float = 1.0
    F: float = 2.0
    gamma: float = 1.0
    N_max: int = 1
    z: int = 4


@dataclass
class LatticeSection:
    Lx: int = 2
    Ly: int = 2
    periodic_x: bool = True
    periodic_y: bool = True


@dataclass
class BaseSection:
    Lx: int = 2
    Ly: int = 1


@dataclass
class ConvergenceSection:
    obs_tol: float = 1e-3
    sweep: bool = False
    inner_m: str = "converge"


@dataclass
class SolverSection:
    dt: Optional[float] = None
    dt_factor: float = 2.0
    check_window: float = 5.0
    rel_tol: float = 1e-6
    abs_floor: float = 1e-2
    max_time: float = 1000.0
    record_every: float = 0.25
    direct_cap: int = 400
    nullspace_cap: int = 32
    leaf_cap: int = 4096
    clip_tol: float = 1e-8


@dataclass
class TrajectorySection:
    n_trajectories: int = 100
    master_seed: int = 0
    dt: Optional[float] = None
    t_relax: float = 30.0
    t_sample: float = 100.0
    sample_stride: float = 0.5
    jump_time_tol: float = 1e-4
    integrator: str = "expm"
    batch_size: int = 64


@dataclass
class OperatorSection:
    mode: str = "auto"
    fast_above: int = 2000
    g2_nn_estimator: str = "tracked"


@dataclass
class MeanFieldSection:
    damping: float = 0.5
    tol: float = 1e-10
    max_iter: int = 2000


@dataclass
class OutputSection:
    dir: str = "."
    results: str = "results.csv"
    spectrum: str = "spectrum.csv"
    timeseries: str = "timeseries.csv"
    manifest: str = "manifest.json"


@dataclass
class ExperimentConfig:
    """One pipeline run; serializes to and from JSON without loss."""

    schema_version: int = SCHEMA_VERSION
    name: str = "experiment"
    description: str = ""
    preset: Optional[str] = None
    pipeline: str = "corner"
    model: ModelSection = field(default_factory=ModelSection)
    lattice: LatticeSection = field(default_factory=LatticeSection)
    base: BaseSection = field(default_factory=BaseSection)
    m_schedule: list = field(default_factory=lambda: [16])
    convergence: ConvergenceSection = field(default_factory=ConvergenceSection)
    solver: SolverSection = field(default_factory=SolverSection)
    trajectories: TrajectorySection = field(default_factory=TrajectorySection)
    operators: OperatorSection = field(default_factory=OperatorSection)
    meanfield: MeanFieldSection = field(default_factory=MeanFieldSection)
    outputs: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        cfg = _build(cls, data, "")
        validate_config(cfg)
        return cfg

    def model_params(self) -> ModelParams:
        m = self.model
        if m.hardcore:
            return ModelParams.hard_core(m.delta_omega, m.J, m.F, gamma=m.gamma, z=m.z)
        return ModelParams(delta_omega=m.delta_omega, U=m.U, J=m.J, F=m.F, gamma=m.gamma,
                           N_max=m.N_max, z=m.z)

    def pipeline_controls(self) -> PipelineControls:
        s, t, o = self.solver, self.trajectories, self.operators
        return PipelineControls(
            solver=SolverControls(dt=s.dt, dt_factor=s.dt_factor, check_window=s.check_window,
                                  rel_tol=s.rel_tol, abs_floor=s.abs_floor, max_time=s.max_time,
                                  record_every=s.record_every),
            trajectories=TrajectoryConfig(n_trajectories=t.n_trajectories, dt=t.dt, t_relax=t.t_relax,
                                          t_sample=t.t_sample, sample_stride=t.sample_stride,
                                          master_seed=t.master_seed, jump_time_tol=t.jump_time_tol,
                                          integrator=t.integrator, batch_size=t.batch_size),
            direct_cap=s.direct_cap, nullspace_cap=s.nullspace_cap, leaf_cap=s.leaf_cap,
            mode=o.mode, fast_above=o.fast_above, clip_tol=s.clip_tol,
            g2_nn_estimator=o.g2_nn_estimator,
        )


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip(".") or "config", "expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(prefix + key, "unknown field")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        value = data[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(value, default, prefix + name)
    return cls(**kwargs)


def _coerce(value, default, name):
    if value is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(name, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigError(name, f"expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float) or (default is None and isinstance(value, (int, float))):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(name, f"expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(name, f"expected a list, got {value!r}")
        return list(value)
    return value


def _positive(name, value, allow_zero=False):
    if value is None or not math.isfinite(value) or value < 0 or (value == 0 and not allow_zero):
        raise ConfigError(name, f"must be {'non-negative' if allow_zero else 'positive'}, got {value!r}")


def validate_config(cfg: ExperimentConfig) -> None:
    """Raise :class:`ConfigError` naming the first invalid field."""
    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {cfg.schema_version} "
                                            f"(this build reads {SCHEMA_VERSION})")
    if cfg.preset is not None and cfg.preset not in PRESETS:
        raise ConfigError("preset", f"unknown preset {cfg.preset!r}")
    if cfg.pipeline not in PIPELINES:
        raise ConfigError("pipeline", f"must be one of {', '.join(PIPELINES)}")
    m = cfg.model
    if m.hardcore:
        if m.U is not None and math.isfinite(m.U):
            raise ConfigError("model.U", "hard-core bosons cannot take a finite U; set U to null")
        if m.N_max != 1:
            raise ConfigError("model.N_max", "hard-core bosons require N_max = 1")
    else:
        if m.U is None or not math.isfinite(m.U):
            raise ConfigError("model.U", "a finite U is required unless hardcore is true")
        _positive("model.U", m.U, allow_zero=True)
    for name in ("delta_omega", "J", "F"):
        v = getattr(m, name)
        if v is None or not math.isfinite(v):
            raise ConfigError(f"model.{name}", "must be a finite number")
    _positive("model.J", m.J, allow_zero=True)
    _positive("model.F", m.F, allow_zero=True)
    _positive("model.gamma", m.gamma)
    if m.N_max < 1:
        raise ConfigError("model.N_max", "must be >= 1")
    if m.z < 1:
        raise ConfigError("model.z", "must be >= 1")
    for sec, obj in (("lattice", cfg.lattice), ("base", cfg.base)):
        for ax in ("Lx", "Ly"):
            if getattr(obj, ax) < 1:
                raise ConfigError(f"{sec}.{ax}", "must be >= 1")
    if cfg.pipeline == "corner":
        if cfg.lattice.Lx % cfg.base.Lx or cfg.lattice.Ly % cfg.base.Ly:
            raise ConfigError("base", f"{cfg.base.Lx}x{cfg.base.Ly} does not tile "
                                      f"{cfg.lattice.Lx}x{cfg.lattice.Ly}")
        if (cfg.lattice.Lx, cfg.lattice.Ly) == (cfg.base.Lx, cfg.base.Ly):
            raise ConfigError("base", "base cluster equals the target; use the bruteforce pipeline")
        if not cfg.m_schedule:
            raise ConfigError("m_schedule", "must list at least one corner dimension")
        for i, v in enumerate(cfg.m_schedule):
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(f"m_schedule[{i}]", f"must be a positive integer, got {v!r}")
        if list(cfg.m_schedule) != sorted(cfg.m_schedule):
            raise ConfigError("m_schedule", "must be ascending")
    c = cfg.convergence
    _positive("convergence.obs_tol", c.obs_tol, allow_zero=True)
    if c.inner_m not in ("converge", "max"):
        raise ConfigError("convergence.inner_m", "must be 'converge' or 'max'")
    s = cfg.solver
    if s.dt is not None:
        _positive("solver.dt", s.dt)
    for name in ("dt_factor", "check_window", "rel_tol", "max_time", "record_every", "clip_tol"):
        _positive(f"solver.{name}", getattr(s, name))
    _positive("solver.abs_floor", s.abs_floor, allow_zero=True)
    for name in ("direct_cap", "nullspace_cap", "leaf_cap"):
        if getattr(s, name) < 1:
            raise ConfigError(f"solver.{name}", "must be >= 1")
    t = cfg.trajectories
    if t.n_trajectories < 2:
        raise ConfigError("trajectories.n_trajectories", "must be >= 2 for error bars")
    if t.master_seed < 0:
        raise ConfigError("trajectories.master_seed", "must be non-negative")
    if t.dt is not None:
        _positive("trajectories.dt", t.dt)
    for name in ("t_relax", "t_sample", "sample_stride", "jump_time_tol"):
        _positive(f"trajectories.{name}", getattr(t, name))
    if t.t_sample < t.sample_stride:
        raise ConfigError("trajectories.t_sample", "must cover at least one sample_stride")
    if t.integrator not in ("expm", "rk4"):
        raise ConfigError("trajectories.integrator", "must be 'expm' or 'rk4'")
    if t.batch_size < 1:
        raise ConfigError("trajectories.batch_size", "must be >= 1")
    o = cfg.operators
    if o.mode not in OPERATOR_MODES:
        raise ConfigError("operators.mode", f"must be one of {', '.join(OPERATOR_MODES)}")
    if o.g2_nn_estimator not in G2_NN_ESTIMATORS:
        raise ConfigError("operators.g2_nn_estimator", f"must be one of {', '.join(G2_NN_ESTIMATORS)}")
    mf = cfg.meanfield
    if not 0 < mf.damping <= 1:
        raise ConfigError("meanfield.damping", "must lie in (0, 1]")
    _positive("meanfield.tol", mf.tol)
    if mf.max_iter < 1:
        raise ConfigError("meanfield.max_iter", "must be >= 1")


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if isinstance(data, dict) and "schema_version" not in data:
        raise ConfigError("schema_version", "missing")
    return ExperimentConfig.from_dict(data)


# -- presets -------------------------------------------------------------------------


@dataclass(frozen=True)
class Preset:
    name: str
    description: str
    reproduces: str
    desk_m_max: Optional[int]
    runs: tuple  # (run_id, config dict overrides)


def _hardcore(J=1.0):
    return {"hardcore": True, "U": None, "N_max": 1, "J": J, "F": 2.0, "delta_omega": 5.0}


def _soft(U, J, N_max):
    return {"hardcore": False, "U": U, "N_max": N_max, "J": J, "F": 2.0, "delta_omega": 5.0}


PRESET_SEED = 20150601
_TABLE_TRAJ = {"n_trajectories": 128, "t_relax": 30.0, "t_sample": 100.0}


def _corner_run(model, lattice, base, m_schedule, **extra):
    run = {"pipeline": "corner", "model": model,
           "lattice": {"Lx": lattice[0], "Ly": lattice[1]},
           "base": {"Lx": base[0], "Ly": base[1]},
           "m_schedule": list(m_schedule),
           "trajectories": dict(_TABLE_TRAJ),
           "convergence": {"sweep": True, "inner_m": "max", "obs_tol": 1e-3}}
    for key, value in extra.items():
        if isinstance(value, dict):
            run.setdefault(key, {}).update(value)
        else:
            run[key] = value
    return run


def _mf_run(model):
    return {"pipeline": "meanfield", "model": model, "lattice": {"Lx": 1, "Ly": 1}}


_PRODUCT = {"operators": {"g2_nn_estimator": "product"}}

PRESETS = {
    "table1": Preset(
        "table1",
        "4x4 hard-core corner convergence in M (J=1, F=2, dw=5)",
        "Table I",
        800,
        (("table1", _corner_run(_hardcore(), (4, 4), (2, 2), [20, 50, 100, 200, 400, 800, 1600],
                                **_PRODUCT)),),
    ),
    "table2": Preset(
        "table2",
        "4x4 soft-core corner convergence in M (U=20, J=3, N_max=3)",
        "Table II",
        800,
        (("table2", _corner_run(_soft(20.0, 3.0, 3), (4, 4), (2, 2),
                                [20, 50, 100, 200, 400, 800, 1600, 3200, 6400], **_PRODUCT)),),
    ),
    "table3": Preset(
        "table3",
        "mean-field versus corner results on several lattices and interaction strengths",
        "Table III",
        200,
        (
            ("hardcore-mf", _mf_run(_hardcore())),
            ("hardcore-8x4", _corner_run(_hardcore(), (8, 4), (2, 2), [1600], **_PRODUCT)),
            ("hardcore-8x8", _corner_run(_hardcore(), (8, 8), (2, 2), [8000], **_PRODUCT)),
            ("U20-J1-mf", _mf_run(_soft(20.0, 1.0, 3))),
            ("U20-J1-4x4", _corner_run(_soft(20.0, 1.0, 3), (4, 4), (2, 2), [3200], **_PRODUCT)),
            ("U20-J1-6x3", _corner_run(_soft(20.0, 1.0, 3), (6, 3), (3, 1), [6400], **_PRODUCT)),
            ("U20-J3-mf", _mf_run(_soft(20.0, 3.0, 3))),
            ("U20-J3-4x4", _corner_run(_soft(20.0, 3.0, 3), (4, 4), (2, 2), [6400], **_PRODUCT)),
            ("U20-J3-6x3", _corner_run(_soft(20.0, 3.0, 3), (6, 3), (3, 1), [6400], **_PRODUCT)),
            ("U10-mf", _mf_run(_soft(10.0, 1.0, 5))),
            ("U10-4x2", _corner_run(_soft(10.0, 1.0, 5), (4, 2), (2, 2), [6400], **_PRODUCT)),
            ("U10-3x3", _corner_run(_soft(10.0, 1.0, 5), (3, 3), (3, 1), [8000], **_PRODUCT)),
            ("U1-mf", _mf_run(_soft(1.0, 1.0, 4))),
            ("U1-16x8", _corner_run(_soft(1.0, 1.0, 4), (16, 8), (2, 2), [600], **_PRODUCT)),
            ("U0.5-mf", _mf_run(_soft(0.5, 1.0, 4))),
            ("U0.5-16x16", _corner_run(_soft(0.5, 1.0, 4), (16, 16), (2, 2), [400], **_PRODUCT)),
        ),
    ),
    "fig2": Preset(
        "fig2",
        "time evolution of n and g2 through the merge sequence (U=20, J=3, F=2, dw=5)",
        "Fig. 2",
        200,
        (
            ("mean-field", _mf_run(_soft(20.0, 3.0, 3))),
            ("4x4-from-2x2", _corner_run(_soft(20.0, 3.0, 3), (4, 4), (2, 2), [200])),
            ("6x3-from-3x1", _corner_run(_soft(20.0, 3.0, 3), (6, 3), (3, 1), [200])),
        ),
    ),
    "fig3": Preset(
        "fig3",
        "probability spectrum of the 6x3 steady state, soft-core and hard-core",
        "Fig. 3",
        400,
        (
            ("6x3-soft", _corner_run(_soft(20.0, 3.0, 3), (6, 3), (3, 1), [400])),
            ("6x3-hardcore", _corner_run(_hardcore(), (6, 3), (3, 1), [400])),
        ),
    ),
}


def list_presets() -> list:
    """Catalog rows: name, one-line description, reproduced reference table or figure, run ids."""
    return [{"name": p.name, "description": p.description, "reproduces": p.reproduces,
             "desk_m_max": p.desk_m_max, "runs": [rid for rid, _ in p.runs]}
            for p in PRESETS.values()]


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def preset_runs(name: str, seed: Optional[int] = None, m_max: Optional[int] = None,
                rows: Optional[list] = None) -> list:
    """``[(run_id, ExperimentConfig)]`` for preset `name`.

    M values above `m_max` (default: the preset's desk-scale cap; 0 removes
    the cap) are dropped, keeping at least the cap itself. `seed` replaces the
    pinned trajectory seed.
    """
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    preset = PRESETS[name]
    cap = preset.desk_m_max if m_max is None else (m_max or None)
    out = []
    for run_id, over in preset.runs:
        if rows and run_id not in rows:
            continue
        data = _merge(ExperimentConfig().to_dict(), over)
        data["name"] = run_id
        data["preset"] = name
        data["description"] = f"{preset.description} [{preset.reproduces}]"
        data["trajectories"]["master_seed"] = PRESET_SEED if seed is None else seed
        if cap is not None and data["pipeline"] == "corner":
            ms = [m for m in data["m_schedule"] if m <= cap]
            data["m_schedule"] = ms if ms else [cap]
        out.append((run_id, ExperimentConfig.from_dict(data)))
    if rows:
        missing = set(rows) - {rid for rid, _ in out}
        if missing:
            raise ConfigError("row", f"unknown run id(s) {sorted(missing)} for preset {name!r}")
    return out


# -- running -------------------------------------------------------------------------


@dataclass
class RunOutcome:
    exit_code: int
    rows: list
    spectrum: list
    timeseries: list
    manifest: dict


def _record_row(Lx, Ly, M, solver, rec: ObservableRecord) -> dict:
    row = {"Lx": Lx, "Ly": Ly, "M": M, "solver": solver}
    for k in ("n", "re_b", "im_b", "g2", "g2_nn"):
        row[k] = getattr(rec, k)
        row[f"{k}_err"] = getattr(rec, f"{k}_err")
    return row


def _node_summary(row: dict) -> dict:
    rec = row["record"]
    return {"node": row["node"], "geometry": f"{row['Lx']}x{row['Ly']}", "M": row["M"],
            "solver": row["solver"], "operator_mode": row["mode"], "seconds": round(row["seconds"], 3),
            "status": row["status"], "captured_probability": row["captured"],
            "solver_converged": row["converged"], "g2_nn_estimator": rec.g2_nn_estimator,
            "g2_nn_tracked": rec.g2_nn_tracked, "g2_nn_tracked_err": rec.g2_nn_tracked_err,
            "g2_nn_product": rec.g2_nn_product, "g2_nn_product_err": rec.g2_nn_product_err}


def _run_corner(cfg: ExperimentConfig, params: ModelParams, controls: PipelineControls):
    target = build_geometry(cfg.lattice.Lx, cfg.lattice.Ly, cfg.lattice.periodic_x, cfg.lattice.periodic_y)
    base = build_geometry(cfg.base.Lx, cfg.base.Ly, False, False)
    schedule = plan_merge_schedule(target, base, local_dim=params.local_dim, leaf_cap=controls.leaf_cap)

    def progress(row):
        log.info("%s %dx%d M=%d %s %.1fs n=%.6g", row["node"], row["Lx"], row["Ly"], row["M"],
                 row["solver"], row["seconds"], row["record"].n)

    root, report = converge_in_m(schedule, params, cfg.m_schedule, obs_tol=cfg.convergence.obs_tol,
                                 controls=controls, on_row=progress, sweep=cfg.convergence.sweep,
                                 inner_m=cfg.convergence.inner_m)
    rows = [_record_row(r["Lx"], r["Ly"], r["M"], r["solver"], r["record"]) for r in report.rows]
    series = [(r["Lx"], r["Ly"], r["M"], t, n, g2) for r in report.rows for t, n, g2 in r["timeseries"]]
    spectrum = probability_spectrum(root)
    info = {"merge_schedule": json.loads(schedule.describe()), "nodes": [_node_summary(r) for r in report.rows],
            "node_status": report.node_status, "warnings": list(report.warnings)}
    return rows, spectrum, series, report.converged, info


def _run_bruteforce(cfg: ExperimentConfig, params: ModelParams, controls: PipelineControls):
    target = build_geometry(cfg.lattice.Lx, cfg.lattice.Ly, cfg.lattice.periodic_x, cfg.lattice.periodic_y)
    cluster = build_base_cluster(target, params, tracked=None, cap=controls.leaf_cap)
    res = solve_cluster(cluster, params, controls)
    rows = [_record_row(target.Lx, target.Ly, cluster.dim, res.solver, res.record)]
    series = [(target.Lx, target.Ly, cluster.dim, t, n, g2) for t, n, g2 in res.timeseries]
    spectrum = probability_spectrum(cluster)
    warnings = [] if res.converged else ["full-space solve reached max_time"]
    info = {"nodes": [{"node": "root", "geometry": target.label(), "M": cluster.dim, "solver": res.solver,
                       "seconds": round(res.seconds, 3), "solver_converged": res.converged,
                       "g2_nn_tracked": res.record.g2_nn_tracked,
                       "g2_nn_product": res.record.g2_nn_product}],
            "warnings": warnings}
    return rows, spectrum, series, res.converged, info


def _run_meanfield(cfg: ExperimentConfig, params: ModelParams):
    mf = cfg.meanfield
    sol = gutzwiller_fixed_point(params, damping=mf.damping, tol=mf.tol, max_iter=mf.max_iter)
    rec = {"Lx": cfg.lattice.Lx, "Ly": cfg.lattice.Ly, "M": 1, "solver": "meanfield",
           "n": sol.n, "n_err": None, "re_b": sol.b.real, "re_b_err": None, "im_b": sol.b.imag,
           "im_b_err": None, "g2": sol.g2, "g2_err": None, "g2_nn": 1.0 if sol.n > 1e-14 else None,
           "g2_nn_err": None}
    _, n_op, _ = fock_site_operators(params.N_max)
    eig = hermitian_eig(sol.rho.matrix)
    pops = np.real(np.sum(eig.vectors.conj() * (n_op @ eig.vectors), axis=0))
    spectrum = [(r, float(p), float(q)) for r, (p, q) in enumerate(zip(eig.values, pops), start=1)]
    info = {"iterations": sol.iterations, "residual": sol.residual,
            "warnings": [] if sol.converged else ["mean-field iteration did not converge"]}
    return [rec], spectrum, [], sol.converged, info


def run_experiment(cfg: ExperimentConfig, out_dir=None, write: bool = True) -> RunOutcome:
    """Run `cfg` and (by default) write its four output files into `out_dir`."""
    validate_config(cfg)
    params = cfg.model_params()
    controls = cfg.pipeline_controls()
    t0 = time.perf_counter()
    if cfg.pipeline == "corner":
        rows, spectrum, series, converged, info = _run_corner(cfg, params, controls)
    elif cfg.pipeline == "bruteforce":
        rows, spectrum, series, converged, info = _run_bruteforce(cfg, params, controls)
    else:
        rows, spectrum, series, converged, info = _run_meanfield(cfg, params)
    elapsed = time.perf_counter() - t0
    resolved = cfg.to_dict()
    run_id = hashlib.sha256(json.dumps(resolved, sort_keys=True).encode()).hexdigest()[:16]
    manifest = {
        "run_id": run_id,
        "name": cfg.name,
        "preset": cfg.preset,
        "code_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": resolved,
        "seeds": {"master_seed": cfg.trajectories.master_seed},
        "threads": worker_count(),
        "converged": bool(converged),
        "elapsed_seconds": round(elapsed, 3),
        "files": {"results": cfg.outputs.results, "spectrum": cfg.outputs.spectrum,
                  "timeseries": cfg.outputs.timeseries},
        "result_rows": len(rows),
        **info,
    }
    code = EXIT_OK if converged else EXIT_LIMITS
    outcome = RunOutcome(code, rows, spectrum, series, manifest)
    if write:
        write_outputs(outcome, cfg, Path(out_dir if out_dir is not None else cfg.outputs.dir))
    return outcome


# -- output --------------------------------------------------------------------------


def format_value(x) -> str:
    """CSV cell: 9 significant digits, empty for absent values."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        if not math.isfinite(x):
            return ""
        return format(float(x), ".9g")
    return str(x)


def _write_csv(path: Path, columns: list, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([format_value(v) for v in row])


def write_outputs(outcome: RunOutcome, cfg: ExperimentConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / cfg.outputs.results, RESULT_COLUMNS,
               ([r[c] for c in RESULT_COLUMNS] for r in outcome.rows))
    _write_csv(out_dir / cfg.outputs.spectrum, SPECTRUM_COLUMNS, outcome.spectrum)
    _write_csv(out_dir / cfg.outputs.timeseries, TIMESERIES_COLUMNS, outcome.timeseries)
    manifest = dict(outcome.manifest)
    manifest["exit_code"] = outcome.exit_code
    (out_dir / cfg.outputs.manifest).write_text(json.dumps(manifest, indent=2, sort_keys=True,
                                                           default=_json_default) + "\n")


def _json_default(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, complex):
        return [x.real, x.imag]
    raise TypeError(f"cannot serialize {type(x).__name__}")


# -- entry point ---------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cornerspace",
                                description="Corner-space steady states of driven-dissipative "
                                            "Bose-Hubbard lattices.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress per solved node")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config", help="JSON experiment config")
    r.add_argument("--out", help="output directory (overrides outputs.dir)")
    pr = sub.add_parser("preset", help="run a built-in reference preset")
    pr.add_argument("name", nargs="?", help="preset name")
    pr.add_argument("--list", action="store_true", help="print the preset catalog and exit")
    pr.add_argument("--out", default=".", help="output directory (default: current directory)")
    pr.add_argument("--seed", type=int, help="override the pinned trajectory seed")
    pr.add_argument("--m-max", type=int, dest="m_max",
                    help="drop corner dimensions above N (0: no cap; default: the preset's desk cap)")
    pr.add_argument("--row", action="append", dest="rows", help="run only this run id (repeatable)")
    pr.add_argument("--dump-config", action="store_true",
                    help="write each run's resolved config instead of running it")
    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config", help="JSON experiment config")
    return p


def _run_many(runs, out: Path, dump: bool) -> int:
    codes = []
    index = []
    for run_id, cfg in runs:
        target = out if len(runs) == 1 else out / run_id
        if dump:
            target.mkdir(parents=True, exist_ok=True)
            (target / "config.json").write_text(cfg.to_json() + "\n")
            print(f"{run_id}: wrote {target / 'config.json'}")
            continue
        print(f"{run_id}: running ({cfg.pipeline}, {cfg.lattice.Lx}x{cfg.lattice.Ly}, "
              f"M {cfg.m_schedule if cfg.pipeline == 'corner' else '-'})", flush=True)
        outcome = run_experiment(cfg, target)
        codes.append(outcome.exit_code)
        index.append({"run": run_id, "dir": str(target), "run_id": outcome.manifest["run_id"],
                      "exit_code": outcome.exit_code})
        for w in outcome.manifest.get("warnings", []):
            print(f"{run_id}: warning: {w}", file=sys.stderr)
        print(f"{run_id}: {'converged' if outcome.exit_code == 0 else 'limits reached'} "
              f"-> {target}", flush=True)
    if len(runs) > 1 and not dump:
        (out / "index.json").write_text(json.dumps(index, indent=2) + "\n")
    return max(codes) if codes else EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "validate":
            cfg = load_config(args.config)
            print(f"{args.config}: valid ({cfg.pipeline}, {cfg.lattice.Lx}x{cfg.lattice.Ly})")
            return EXIT_OK
        if args.command == "run":
            cfg = load_config(args.config)
            out = Path(args.out) if args.out else Path(cfg.outputs.dir)
            return _run_many([(cfg.name, cfg)], out, dump=False)
        if args.list or not args.name:
            for entry in list_presets():
                print(f"{entry['name']:8s} {entry['reproduces']:10s} {entry['description']}")
            return EXIT_OK if args.list else EXIT_ERROR
        runs = preset_runs(args.name, seed=args.seed, m_max=args.m_max, rows=args.rows)
        return _run_many(runs, Path(args.out), dump=args.dump_config)
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # noqa: BLE001 - CLI boundary reports every failure as exit 1
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
