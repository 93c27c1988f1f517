"""Experiment configuration and the synthesis / sweep / simulation harnesses.

Everything here is deterministic: identical configs give byte-identical files.
Outputs are computed in full before anything is written, and each file is
written to a temporary name and renamed into place.
"""
from __future__ import annotations

import logging
import math
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .commutation import (TSF_KINDS, CommutationTable, ConventionalTsf, NormalizedCommutation,
                          TableCommutation)
from .gp import DEFAULT_START_FACTORS, GpCommutation, fit_commutation, format_gp, load_gp
from .motor import ModelError, TorqueGainModel, default_model, load_model
from .ripple import (RippleSolution, assemble, format_table, load_table, nominal_velocity, solve,
                     table_metadata)
from .sim import (DiscreteController, ReferenceProfile, format_metrics, metrics, open_loop_ripple,
                  run_closed_loop, write_result_csv)

log = logging.getLogger(__name__)

DEFAULT_VELOCITIES = (0.5, 1.0, 2.0, 4.0, 5.0, 8.0, 10.0, 12.0, 15.0, 20.0)  # teeth/s
# log-spread grid: 0.1, 0.5, fifteen points from 1 to 6, then 50, 200, 1000
DEFAULT_BETAS = (0.1, 0.5) + tuple(6.0 ** (k / 14) for k in range(15)) + (50.0, 200.0, 1000.0)
METHODS = ("sine", "cubic", "linear", "optimal")
CONTROLLERS = {"integrating": DiscreteController.integrating, "stock": DiscreteController.stock}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    motor: Path | None = None  # None: built-in default model
    n_grid: int = 150
    n_sub: int = 15
    beta: float = 1000.0
    ts: float = 1e-3
    mu: object = "auto"  # int smoothness index or "auto"
    start_factors: tuple = DEFAULT_START_FACTORS
    normalize: bool = True
    velocities: tuple = DEFAULT_VELOCITIES
    m_sim: int = 20
    controller: str = "integrating"
    sim_velocity: float = 8.0
    sim_commutation: str = "optimal"
    betas: tuple = DEFAULT_BETAS
    beta_velocity: float = 8.0
    ripple_velocity: float | None = None  # teeth/s; None: nominal velocity
    ripple_torque: float = 1.0
    tsf_kind: str = "sine"
    overlap: float = math.pi / 6
    saturation: float = 3.0
    output: Path = Path("out")

    def __post_init__(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(isinstance(self.n_grid, int) and self.n_grid >= 2, "synthesis.n_grid must be an integer >= 2")
        need(isinstance(self.n_sub, int) and self.n_sub >= 1, "synthesis.n_sub must be an integer >= 1")
        need(self.beta >= 0, "synthesis.beta must be >= 0")
        need(self.ts > 0, "synthesis.ts must be > 0")
        need(self.mu == "auto" or (isinstance(self.mu, int) and 0 <= self.mu),
             "gp.mu must be 'auto' or a nonnegative integer")
        need(len(self.start_factors) == 3 and all(len(f) > 0 and min(f) > 0 for f in self.start_factors),
             "gp.start_factors needs three nonempty lists of positive multipliers")
        need(len(self.velocities) > 0 and min(self.velocities) > 0, "simulation.velocities must be positive")
        need(isinstance(self.m_sim, int) and self.m_sim >= 1, "simulation.m_sim must be an integer >= 1")
        need(self.controller in CONTROLLERS, f"simulation.controller must be one of {sorted(CONTROLLERS)}")
        need(self.sim_velocity > 0 and self.beta_velocity > 0, "velocities must be positive")
        need(self.sim_commutation in METHODS, f"simulation.commutation must be one of {METHODS}")
        need(len(self.betas) > 0 and min(self.betas) >= 0, "sweep_beta.betas must be >= 0")
        need(self.ripple_velocity is None or self.ripple_velocity > 0, "ripple.velocity must be positive")
        need(self.tsf_kind in TSF_KINDS, f"baseline.kind must be one of {TSF_KINDS}")
        need(0 < self.overlap < 2 * math.pi / 3, "baseline.overlap must lie in (0, 2*pi/3)")
        need(self.saturation > 0, "baseline.saturation must be > 0")
        if self.motor is not None and not Path(self.motor).is_file():
            raise ConfigError(f"motor model file not found: {self.motor}")


# yaml section -> {yaml key: config field}
_SCHEMA = {
    "synthesis": {"n_grid": "n_grid", "n_sub": "n_sub", "beta": "beta", "ts": "ts"},
    "gp": {"mu": "mu", "start_factors": "start_factors", "normalize": "normalize"},
    "simulation": {"velocities": "velocities", "m_sim": "m_sim", "controller": "controller",
                   "velocity": "sim_velocity", "commutation": "sim_commutation"},
    "sweep_beta": {"betas": "betas", "velocity": "beta_velocity"},
    "ripple": {"velocity": "ripple_velocity", "torque": "ripple_torque"},
    "baseline": {"kind": "tsf_kind", "overlap": "overlap", "saturation": "saturation"},
}
_FACTOR_KEYS = ("length_scale", "signal_variance", "noise_variance")
_FLOATS = {"beta", "ts", "sim_velocity", "beta_velocity", "ripple_velocity", "ripple_torque",
           "overlap", "saturation"}


def config_from_dict(data: dict, base: Path = Path(".")) -> ExperimentConfig:
    """Build a config from parsed YAML; relative paths resolve against ``base``."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(data) - set(_SCHEMA) - {"motor", "output"}
    if unknown:
        raise ConfigError(f"unknown config section(s) {sorted(unknown)}")
    kw = {}
    if data.get("motor") is not None:
        kw["motor"] = (base / str(data["motor"])).resolve()
    if data.get("output") is not None:
        kw["output"] = base / str(data["output"])
    for section, keys in _SCHEMA.items():
        block = data.get(section) or {}
        if not isinstance(block, dict):
            raise ConfigError(f"{section}: expected a mapping")
        bad = set(block) - set(keys)
        if bad:
            raise ConfigError(f"{section}: unknown key(s) {sorted(bad)}")
        for key, name in keys.items():
            if key in block:
                kw[name] = block[key]
    try:
        if "start_factors" in kw:
            sf = kw["start_factors"]
            if not isinstance(sf, dict) or set(sf) - set(_FACTOR_KEYS):
                raise ConfigError(f"gp.start_factors must map {list(_FACTOR_KEYS)} to lists")
            kw["start_factors"] = tuple(tuple(float(x) for x in sf.get(k, d))
                                        for k, d in zip(_FACTOR_KEYS, DEFAULT_START_FACTORS))
        for name in ("velocities", "betas"):
            if name in kw:
                kw[name] = tuple(float(x) for x in kw[name])
        for name in _FLOATS & set(kw):
            if kw[name] is not None:
                kw[name] = float(kw[name])
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad numeric value: {exc}") from None
    if "normalize" in kw and not isinstance(kw["normalize"], bool):
        raise ConfigError("gp.normalize must be true or false")
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data, path.parent)


def model_for(cfg: ExperimentConfig) -> TorqueGainModel:
    if cfg.motor is None:
        return default_model()
    try:
        return load_model(cfg.motor)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read motor model {cfg.motor}: {exc}") from None


def write_atomic(files: dict) -> None:
    """Write {path: text} so each file appears complete or not at all."""
    for path, text in files.items():
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    return format(float(x), ".17g")


def csv_text(header, rows) -> str:
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


@dataclass
class Synthesis:
    beta: float
    solution: RippleSolution
    solution_neg: RippleSolution
    table: CommutationTable
    gp: GpCommutation
    diagnostics: object = None
    r1_residual: float = 0.0  # max |g(theta_i) . F*_i - 1| over both signs
    meta: dict = field(default_factory=dict)
    meta_neg: dict = field(default_factory=dict)


def synthesize(model: TorqueGainModel, cfg: ExperimentConfig, beta: float | None = None) -> Synthesis:
    """Solve the ripple program for both torque signs and fit the coil GPs."""
    beta = cfg.beta if beta is None else beta
    t0 = time.perf_counter()
    problem = assemble(model, cfg.n_grid, cfg.n_sub, beta, cfg.ts)
    sol = solve(problem)
    problem_neg = problem.with_target(-1.0)
    sol_neg = solve(problem_neg, warm_start=sol)
    t1 = time.perf_counter()
    table = CommutationTable(problem.theta, sol.values, sol_neg.values)
    gp, diag = fit_commutation(table, model.n_teeth, mu=cfg.mu, start_factors=cfg.start_factors)
    g0 = model.eval_electrical(problem.theta)
    r1 = max(float(np.max(np.abs(np.sum(g0 * sol.values, axis=1) - 1.0))),
             float(np.max(np.abs(np.sum(g0 * sol_neg.values, axis=1) + 1.0))))
    log.info("beta=%g: solve %.2fs, GP fit %.2fs, R1 residual %.3g", beta, t1 - t0,
             time.perf_counter() - t1, r1)
    return Synthesis(beta, sol, sol_neg, table, gp, diag, r1,
                     table_metadata(problem, sol), table_metadata(problem_neg, sol_neg))


def synthesis_report(cfg: ExperimentConfig, model: TorqueGainModel, syn: Synthesis) -> str:
    lines = ["synthesis report",
             f"n_teeth = {model.n_teeth}",
             f"n_grid = {cfg.n_grid}", f"n_sub = {cfg.n_sub}", f"beta = {_fmt(syn.beta)}",
             f"ts = {_fmt(cfg.ts)}",
             f"nominal_velocity = {_fmt(nominal_velocity(model.n_teeth, cfg.n_grid, cfg.ts))}",
             f"max_r1_residual = {syn.r1_residual:.6e}"]
    d = syn.diagnostics
    for si, (name, sol) in enumerate((("positive", syn.solution), ("negative", syn.solution_neg))):
        lines += ["", f"[{name} torque]",
                  f"objective = {_fmt(sol.objective)}", f"power = {_fmt(sol.power)}",
                  f"ripple_norm = {_fmt(sol.ripple)}",
                  f"equality_residual = {sol.equality_residual:.6e}",
                  f"kkt_residual = {sol.kkt_residual:.6e}"]
        for c in range(3):
            hp = d.hyperparams[si][c]
            rel = d.max_fit_error[si][c] / d.max_target[si][c]
            lines += [f"coil {c + 1}: mu = {hp.mu}, length_scale = {hp.length_scale:.10g}, "
                      f"signal_variance = {hp.signal_variance:.10g}, "
                      f"noise_variance = {hp.noise_variance:.10g}",
                      f"coil {c + 1}: log_marginal = {d.log_marginal[si][c]:.10g}, "
                      f"max_fit_error = {d.max_fit_error[si][c]:.6e} ({rel:.6e} of max share), "
                      f"min_prediction = {d.min_prediction[si][c]:.6e}, "
                      f"clamped = {'yes' if d.clamped[si][c] else 'no'}"]
    return "\n".join(lines) + "\n"


def cmd_synth(cfg: ExperimentConfig, out: Path) -> dict:
    model = model_for(cfg)
    syn = synthesize(model, cfg)
    files = {out / "table.csv": format_table(syn.table.theta, syn.table.values, syn.meta),
             out / "table_neg.csv": format_table(syn.table.theta, syn.table.values_neg, syn.meta_neg),
             out / "gp_model.txt": format_gp(syn.gp),
             out / "report.txt": synthesis_report(cfg, model, syn)}
    write_atomic(files)
    return files


def _existing_gp(cfg: ExperimentConfig, out: Path):
    """GP model from a previous ``synth`` in ``out`` if its table matches ``cfg``."""
    paths = [out / "table.csv", out / "gp_model.txt"]
    if not all(p.is_file() for p in paths):
        return None
    try:
        _, _, meta = load_table(paths[0])
        gp = load_gp(paths[1])
    except (ValueError, OSError):
        return None
    want = {"n_grid": cfg.n_grid, "n_sub": cfg.n_sub, "beta": cfg.beta, "ts": cfg.ts}
    if any(meta.get(k) != v for k, v in want.items()):
        return None
    return gp


def optimal_commutation(cfg: ExperimentConfig, model, gp: GpCommutation):
    return NormalizedCommutation(gp, model) if cfg.normalize else gp


def baseline(cfg: ExperimentConfig, model, kind: str | None = None) -> ConventionalTsf:
    return ConventionalTsf(model, kind or cfg.tsf_kind, cfg.overlap, cfg.saturation)


def _closed_loop(model, commutation, cfg: ExperimentConfig, teeth_per_s: float):
    profile = ReferenceProfile.from_teeth_per_s(teeth_per_s, model.period)
    return run_closed_loop(model, commutation, CONTROLLERS[cfg.controller](), profile,
                           m_sim=cfg.m_sim, ts=cfg.ts)


def _velocity_cell(args):
    model, cfg, method, commutation, v = args
    try:
        m = metrics(_closed_loop(model, commutation, cfg, v))
        return (v, method, m.rms_error, m.energy, "ok")
    except Exception as exc:  # one failed cell must not stop the sweep
        log.warning("v=%g %s failed: %s", v, method, exc)
        return (v, method, math.nan, math.nan, f"error: {type(exc).__name__}")


def _run_cells(fn, cells, jobs: int):
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, cells))
    return [fn(c) for c in cells]


def _gp_for(cfg: ExperimentConfig, model, out: Path):
    gp = _existing_gp(cfg, out)
    if gp is None:
        log.info("no matching synthesis in %s; synthesizing in memory", out)
        gp = synthesize(model, cfg).gp
    return gp


def cmd_sweep_velocity(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> dict:
    model = model_for(cfg)
    gp = _gp_for(cfg, model, out)
    comms = {k: baseline(cfg, model, k) for k in ("sine", "cubic", "linear")}
    comms["optimal"] = optimal_commutation(cfg, model, gp)
    cells = [(model, cfg, name, comms[name], v) for v in cfg.velocities for name in METHODS]
    rows = sorted(_run_cells(_velocity_cell, cells, jobs), key=lambda r: (r[0], r[1]))
    files = {out / "sweep_velocity.csv": csv_text(
        ["v_teeth_per_s", "commutation", "rms_error", "energy", "status"], rows)}
    write_atomic(files)
    return files


def _beta_cell(args):
    model, cfg, beta, ref = args
    rms_sine, energy_sine = ref
    try:
        syn = synthesize(model, cfg, beta)
        m = metrics(_closed_loop(model, optimal_commutation(cfg, model, syn.gp), cfg, cfg.beta_velocity))
        return (beta, rms_sine / m.rms_error, m.energy / energy_sine, syn.solution.ripple,
                syn.solution.power, "ok")
    except Exception as exc:
        log.warning("beta=%g failed: %s", beta, exc)
        return (beta, math.nan, math.nan, math.nan, math.nan, f"error: {type(exc).__name__}")


def cmd_sweep_beta(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> dict:
    model = model_for(cfg)
    ref = metrics(_closed_loop(model, baseline(cfg, model), cfg, cfg.beta_velocity))
    cells = [(model, cfg, b, (ref.rms_error, ref.energy)) for b in sorted(set(cfg.betas))]
    rows = sorted(_run_cells(_beta_cell, cells, jobs), key=lambda r: r[0])
    files = {out / "sweep_beta.csv": csv_text(
        ["beta", "rms_ratio_sine_over_opt", "energy_ratio_opt_over_sine", "ripple_norm",
         "power_norm", "status"], rows)}
    write_atomic(files)
    return files


def cmd_ripple(cfg: ExperimentConfig, out: Path) -> dict:
    """Open-loop ripple traces of the baseline and the optimal table over one sweep of the grid."""
    model = model_for(cfg)
    problem = assemble(model, cfg.n_grid, cfg.n_sub, cfg.beta, cfg.ts)
    sol = solve(problem)
    opt = TableCommutation(CommutationTable(problem.theta, sol.values), model.n_teeth)
    v = problem.velocity if cfg.ripple_velocity is None else cfg.ripple_velocity * model.period
    base = baseline(cfg, model)
    rel_base = open_loop_ripple(model, base, v, cfg.ts, cfg.n_sub, n_samples=cfg.n_grid)
    rel_opt = open_loop_ripple(model, opt, v, cfg.ts, cfg.n_sub, n_samples=cfg.n_grid)
    i = np.arange(len(rel_opt))
    t = i * (cfg.ts / cfg.n_sub)
    tq = cfg.ripple_torque
    rows = zip(i, t, rel_base, rel_opt, rel_base * tq, rel_opt * tq)
    header = ["i", "t", f"rel_{cfg.tsf_kind}", "rel_optimal", f"abs_{cfg.tsf_kind}", "abs_optimal"]
    lines = [",".join(header)] + [f"{row[0]}," + ",".join(_fmt(x) for x in row[1:]) for row in rows]
    files = {out / "ripple.csv": "\n".join(lines) + "\n"}
    write_atomic(files)
    return files


def cmd_simulate(cfg: ExperimentConfig, out: Path) -> dict:
    model = model_for(cfg)
    name = cfg.sim_commutation
    if name == "optimal":
        comm = optimal_commutation(cfg, model, _gp_for(cfg, model, out))
    else:
        comm = baseline(cfg, model, name)
    result = _closed_loop(model, comm, cfg, cfg.sim_velocity)
    m = metrics(result)
    csv_path = out / f"sim_{name}.csv"
    # the trace is large; stream it to a temporary file, then rename
    out.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out, prefix=f".{csv_path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        write_result_csv(result, tmp)
        os.replace(tmp, csv_path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    files = {out / f"metrics_{name}.txt": f"commutation = {name}\n"
             f"velocity_teeth_per_s = {_fmt(cfg.sim_velocity)}\n" + format_metrics(m)}
    write_atomic(files)
    return {csv_path: None, **files}
