"""Time integration: spin-up, coupled prediction runs and derived outputs."""
from __future__ import annotations

import time as _time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..domain import BoundaryForcing, Config, FluidProps, GridSpec, RetentionParams, SolverOptions, TransportProps
from ..domain import synth_tidal_forcing
from ..exceptions import ConfigError, SolverError
from ..geostat import GeoModel
from .closures import vg_saturation
from .flow import FlowSolver, FlowState, step_flow
from .mesh import build_mesh, rock_on_mesh
from .transport import step_transport

_EPS_T = 1e-9


@dataclass(eq=False)
class SimOutput:
    """Pressure (Pa) and salinity (kg/m^3) per active cell and output time."""

    pressure_series: np.ndarray
    salinity_series: np.ndarray
    output_times: np.ndarray
    water_residual_max: float = 0.0
    salt_residual_max: float = 0.0
    n_steps: int = 0
    wall_time: float = 0.0
    audit: list = field(default_factory=list)

    def __post_init__(self):
        if self.pressure_series.shape != self.salinity_series.shape:
            raise ValueError("pressure and salinity series must share a shape")
        if self.pressure_series.shape[1] != self.output_times.size:
            raise ValueError("one column per output time expected")

    @property
    def n_outputs(self) -> int:
        return self.output_times.size


@dataclass
class AuditLog:
    rows: list = field(default_factory=list)

    def add(self, phase, t, dt, iterations, water, salt, substeps):
        self.rows.append((phase, t, dt, iterations, water, salt, substeps))

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("phase,time_days,dt_days,picard_iterations,water_residual,salt_residual,substeps\n")
            for r in self.rows:
                fh.write(f"{r[0]},{float(r[1])!r},{float(r[2])!r},{int(r[3])},{float(r[4])!r},{float(r[5])!r},{int(r[6])}\n")


def make_solver(model: GeoModel, grid: GridSpec, fluid: FluidProps, retention: RetentionParams,
                opts: SolverOptions) -> FlowSolver:
    mesh = build_mesh(grid)
    return FlowSolver(mesh, rock_on_mesh(mesh, model), fluid, retention, opts)


def hydrostatic_state(solver: FlowSolver, head, time: float = 0.0, conc=None) -> FlowState:
    """Fresh hydrostatic pressure below a water table ``head`` (scalar, or one
    value per column)."""
    m = solver.mesh
    head = np.asarray(head, dtype=float)
    h = head[m.cells % m.grid.nx] if head.ndim else np.full(m.n, float(head))
    p = solver.fluid.rho_fresh * solver.fluid.g * (h - m.z)
    s = vg_saturation(-p, solver.ret)
    c = np.zeros(m.n) if conc is None else np.asarray(conc, dtype=float)
    return FlowState(p, s, c, time)


def integrate(solver: FlowSolver, state: FlowState, t_end: float, forcing: BoundaryForcing,
              max_dt: float, salt: bool, transport: TransportProps | None = None,
              sample_times: Sequence[float] = (), log: AuditLog | None = None, phase: str = "run"):
    """March ``state`` to ``t_end`` (days), landing exactly on every sample time.

    Returns ``(state, samples, stats)`` with ``samples`` a list of states at
    ``sample_times`` and ``stats`` holding step counts and audit maxima.
    """
    o = solver.opts
    samples = []
    targets = [t for t in sample_times if t <= t_end + _EPS_T]
    ti = 0
    while ti < len(targets) and targets[ti] < state.time - _EPS_T:
        ti += 1
    if ti < len(targets) and abs(targets[ti] - state.time) <= _EPS_T:
        samples.append(state)
        ti += 1
    dt = min(o.initial_dt, max_dt)
    stats = {"steps": 0, "water_max": 0.0, "salt_max": 0.0, "peak_flux": 0.0}
    while state.time < t_end - _EPS_T:
        target = min(t_end, targets[ti]) if ti < len(targets) else t_end
        step = min(dt, max_dt, target - state.time)
        new, fl, fa = step_flow(state, step, solver, forcing, salt=salt)
        hit = fa.dt == step and abs(state.time + step - target) <= 1e-6
        t_new = target if hit else new.time
        if salt:
            conc, ta = step_transport(state.conc, state.saturation, new.saturation, fl, fa.dt, solver,
                                      transport, o.cfl)
            salt_res, n_sub = ta.salt_residual, ta.substeps
        else:
            conc, salt_res, n_sub = state.conc, 0.0, 0
        state = FlowState(new.pressure, new.saturation, conc, t_new)
        stats["steps"] += 1
        stats["water_max"] = max(stats["water_max"], fa.water_residual)
        stats["salt_max"] = max(stats["salt_max"], salt_res)
        stats["peak_flux"] = max(stats["peak_flux"], float(np.max(np.abs(fl.boundary), initial=0.0)))
        stats["last_fluxes"] = fl
        if log is not None:
            log.add(phase, t_new, fa.dt, fa.iterations, fa.water_residual, salt_res, n_sub)
        if fa.dt < step:
            dt = fa.dt
        elif fa.iterations <= 4 and step == dt:
            dt = min(dt * 1.5, max_dt)
        elif fa.iterations > 10:
            dt = max(dt * 0.7, o.min_dt)
        if ti < len(targets) and abs(state.time - targets[ti]) <= _EPS_T:
            samples.append(state)
            ti += 1
    return state, samples, stats


def mean_forcing(forcing: BoundaryForcing) -> BoundaryForcing:
    mean = forcing.mean_stage if forcing.mean_stage is not None else float(np.mean(forcing.stream_stage))
    return synth_tidal_forcing(mean, [], 0.0, forcing.times, upland_head=float(np.mean(forcing.upland_head)))


STEADY_TOL = 1e-6  # Pa; far below the Picard tolerance so the start carries no spurious storage change


def steady_state(solver: FlowSolver, forcing: BoundaryForcing, t: float, tol: float = STEADY_TOL,
                 max_steps: int = 200) -> FlowState:
    """Freshwater steady state under the mean boundary conditions, reached by
    backward-Euler steps of geometrically growing length.

    Steps continue until the pressure change drops below ``tol``; when that
    is out of reach the state is accepted once the change sits within the
    Picard tolerance, the accuracy of each nonlinear step.
    """
    mf = mean_forcing(forcing)
    h_up = mf.upland_head_at(t)
    stage = mf.stage_at(t)
    xc = solver.mesh.grid.x_centers
    state = hydrostatic_state(solver, h_up + (stage - h_up) * xc / solver.mesh.grid.lx, time=t)
    dt = 1.0
    change = np.inf
    for _ in range(max_steps):
        start = FlowState(state.pressure, state.saturation, state.conc, t - dt)
        new, _, fa = step_flow(start, dt, solver, mf, salt=False)
        change = float(np.max(np.abs(new.pressure - state.pressure)))
        state = FlowState(new.pressure, new.saturation, state.conc, t)
        if change < tol and fa.dt >= 1e4:
            return state
        dt = min(dt * 4.0, 1e6) if fa.dt == dt else fa.dt
    if change <= solver.opts.picard_tol:
        return state
    raise SolverError("steady state not reached", steps=max_steps, last_change=change)


def spin_up(model: GeoModel, forcing: BoundaryForcing, config: Config, opts: SolverOptions | None = None,
            initial: FlowState | None = None, solver: FlowSolver | None = None,
            log: AuditLog | None = None) -> FlowState:
    """Flow-only run over the spin-up period with fresh boundary water.

    Without ``initial`` the run starts from the steady state of the mean
    boundary conditions.  The clock runs from ``-spin_up_duration`` to 0.
    """
    opts = opts or config.solver
    solver = solver or make_solver(model, config.grid, config.fluid, config.retention, opts)
    t0 = -config.run.spin_up_duration
    fresh = forcing.without_salt()
    if initial is None:
        state = steady_state(solver, fresh, t0)
    else:
        state = FlowState(initial.pressure, initial.saturation, np.zeros(solver.mesh.n), t0)
    state, _, stats = integrate(solver, state, 0.0, fresh, opts.spinup_max_dt, salt=False, log=log,
                                phase="spinup")
    return FlowState(state.pressure, state.saturation, np.zeros(solver.mesh.n), 0.0)


def simulate(model: GeoModel, forcing: BoundaryForcing, config: Config, opts: SolverOptions | None = None,
             audit: bool = False) -> SimOutput:
    """Spin-up followed by coupled flow and transport, sampled every output interval."""
    opts = opts or config.solver
    tic = _time.perf_counter()
    solver = make_solver(model, config.grid, config.fluid, config.retention, opts)
    log = AuditLog() if audit else None
    state = spin_up(model, forcing, config, opts, solver=solver, log=log)
    times = config.run.output_times
    state, samples, stats = integrate(solver, state, float(times[-1]), forcing, opts.max_dt, salt=True,
                                      transport=config.transport, sample_times=times, log=log,
                                      phase="predict")
    if len(samples) != times.size:
        raise SolverError("missing output samples", expected=times.size, got=len(samples))
    P = np.stack([s.pressure for s in samples], axis=1)
    C = np.stack([s.conc for s in samples], axis=1)
    return SimOutput(P, C, times.copy(), stats["water_max"], stats["salt_max"], stats["steps"],
                     _time.perf_counter() - tic, log.rows if log else [])


def salinity_accumulation(out: SimOutput, model: GeoModel, grid: GridSpec,
                          retention: RetentionParams | None = None) -> np.ndarray:
    """Dissolved salt over the active domain, kg per metre of transect width."""
    retention = retention or RetentionParams()
    cells = grid.active_flat
    phi = model.phi.ravel()[cells][:, None]
    sat = vg_saturation(-out.pressure_series, retention)
    return np.sum(out.salinity_series * phi * sat, axis=0) * grid.dx * grid.dz


def observation_index(grid: GridSpec, wells, obs_times, output_times):
    """Row indices (active cells) and column indices (output times) used by
    :func:`extract_observations`."""
    compact = np.full(grid.n_cells, -1)
    compact[grid.active_flat] = np.arange(grid.n_active)
    locs = [int(c) for well in wells for c in np.atleast_1d(well)]
    rows = []
    for c in locs:
        if compact[c] < 0:
            raise ConfigError("wells", f"monitoring cell {c} is inactive")
        rows.append(int(compact[c]))
    cols = []
    for t in obs_times:
        j = np.flatnonzero(np.abs(np.asarray(output_times) - t) <= 1e-6)
        if j.size == 0:
            raise ConfigError("observations.times", f"time {t} is not an output time")
        cols.append(int(j[0]))
    return np.array(locs), np.array(rows), np.array(cols)


def extract_observations(out: SimOutput, grid: GridSpec, wells, obs_times,
                         fluid: FluidProps | None = None) -> np.ndarray:
    """Observation vector ordered time-major, then location, then quantity
    (hydraulic head in m, salinity).  ``wells`` is a sequence of wells, each a
    sequence of flat cell indices."""
    fluid = fluid or FluidProps()
    locs, rows, cols = observation_index(grid, wells, obs_times, out.output_times)
    z = (locs // grid.nx + 0.5) * grid.dz
    head = out.pressure_series[np.ix_(rows, cols)] / (fluid.rho_fresh * fluid.g) + z[:, None]
    sal = out.salinity_series[np.ix_(rows, cols)]
    return np.stack([head.T, sal.T], axis=-1).reshape(-1)
