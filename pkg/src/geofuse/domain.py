"""Grid geometry, material constants, boundary forcing and run configuration.

All other modules take their geometry and constants from the frozen
dataclasses defined here.  Times are days (float64) everywhere outside the
flow solver.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from .exceptions import ConfigError

SECONDS_PER_DAY = 86400.0


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Regular 2D vertical cross-section, cell ``(k, i)`` with ``k`` counted
    upward from the bottom and ``i`` from the upland side toward the stream.

    Fields stored per cell use shape ``(nz, nx)``; flattened cell index is
    ``k * nx + i``.
    """

    nx: int
    nz: int
    lx: float
    lz: float
    dx: float
    dz: float
    surface_elevation: np.ndarray
    active: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nz, self.nx)

    @property
    def n_cells(self) -> int:
        return self.nx * self.nz

    @property
    def n_active(self) -> int:
        return int(self.active.sum())

    @property
    def x_centers(self) -> np.ndarray:
        return (np.arange(self.nx) + 0.5) * self.dx

    @property
    def z_centers(self) -> np.ndarray:
        return (np.arange(self.nz) + 0.5) * self.dz

    @property
    def active_flat(self) -> np.ndarray:
        """Flat indices of active cells, ascending."""
        return np.flatnonzero(self.active.ravel())

    def cell_index(self, x: float, z: float) -> int:
        """Flat index of the cell containing point ``(x, z)``."""
        if not (0.0 <= x <= self.lx and 0.0 <= z <= self.lz):
            raise ConfigError("well", f"point ({x}, {z}) lies outside the domain")
        i = min(int(x / self.dx), self.nx - 1)
        k = min(int(z / self.dz), self.nz - 1)
        return k * self.nx + i

    def to_full(self, values: np.ndarray, fill: float = 0.0) -> np.ndarray:
        """Scatter per-active-cell values (leading axis) onto the full grid.

        ``values`` has shape ``(n_active, ...)``; the result has shape
        ``(nz, nx, ...)``.
        """
        values = np.asarray(values)
        out = np.full((self.n_cells,) + values.shape[1:], fill, dtype=values.dtype)
        out[self.active_flat] = values
        return out.reshape((self.nz, self.nx) + values.shape[1:])

    def __eq__(self, other):
        if not isinstance(other, GridSpec):
            return NotImplemented
        return (
            (self.nx, self.nz, self.lx, self.lz) == (other.nx, other.nz, other.lx, other.lz)
            and np.array_equal(self.surface_elevation, other.surface_elevation)
        )


@dataclass(frozen=True)
class FluidProps:
    mu: float = 1.0e-3
    rho_fresh: float = 1000.0
    rho_sea: float = 1025.0
    g: float = 9.81
    eta: float = 55.5
    c_sea: float = 35.0

    def __post_init__(self):
        for name in ("mu", "rho_fresh", "rho_sea", "g", "eta", "c_sea"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"fluid.{name}", "must be strictly positive")
        if not self.rho_sea > self.rho_fresh:
            raise ConfigError("fluid.rho_sea", "must exceed rho_fresh")


@dataclass(frozen=True)
class RetentionParams:
    """van Genuchten retention parameters; ``alpha`` in 1/Pa."""

    s_r: float = 0.15
    alpha: float = 2.0e-4
    m: float = 0.2908

    def __post_init__(self):
        if not 0.0 <= self.s_r < 1.0:
            raise ConfigError("retention.s_r", "must satisfy 0 <= s_r < 1")
        if not self.alpha > 0:
            raise ConfigError("retention.alpha", "must be positive")
        if not 0.0 < self.m < 1.0:
            raise ConfigError("retention.m", "must satisfy 0 < m < 1")

    @property
    def n(self) -> float:
        return 1.0 / (1.0 - self.m)


@dataclass(frozen=True)
class TransportProps:
    diff: float = 1.0e-9

    def __post_init__(self):
        if not self.diff >= 0:
            raise ConfigError("transport.diff", "must be non-negative")


@dataclass(frozen=True, eq=False)
class BoundaryForcing:
    """Boundary series sampled on a common day axis.

    ``stage_fn`` (optional) is the closed form the samples came from; the
    solver evaluates it directly so step sizes are not tied to the sampling.
    """

    times: np.ndarray
    upland_head: np.ndarray
    stream_stage: np.ndarray
    stream_salinity: np.ndarray
    seepage_on_surface: bool = True
    no_flow_bottom: bool = True
    mean_stage: float | None = None
    amplitudes: tuple = ()

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size == 0:
            raise ConfigError("forcing.times", "must be a non-empty 1D series")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise ConfigError("forcing.times", "must be strictly increasing")
        for name in ("upland_head", "stream_stage", "stream_salinity"):
            if np.asarray(getattr(self, name)).shape != t.shape:
                raise ConfigError(f"forcing.{name}", "must share the time axis")
        if np.any(np.asarray(self.stream_salinity) < 0):
            raise ConfigError("forcing.stream_salinity", "must be non-negative")

    def _closed_form(self) -> bool:
        return self.mean_stage is not None

    def stage_at(self, t: float) -> float:
        if self._closed_form():
            return tidal_stage(t, self.mean_stage, self.amplitudes)
        return float(np.interp(t, self.times, self.stream_stage))

    def upland_head_at(self, t: float) -> float:
        return float(np.interp(t, self.times, self.upland_head))

    def salinity_at(self, t: float) -> float:
        return float(np.interp(t, self.times, self.stream_salinity))

    def without_salt(self) -> "BoundaryForcing":
        return BoundaryForcing(
            times=self.times,
            upland_head=self.upland_head,
            stream_stage=self.stream_stage,
            stream_salinity=np.zeros_like(self.stream_salinity),
            seepage_on_surface=self.seepage_on_surface,
            no_flow_bottom=self.no_flow_bottom,
            mean_stage=self.mean_stage,
            amplitudes=self.amplitudes,
        )


@dataclass(frozen=True)
class RunConfig:
    spin_up_duration: float = 1460.0
    prediction_duration: float = 7260.0
    output_interval: float = 30.0
    seed: int = 0

    def __post_init__(self):
        if self.spin_up_duration < 0:
            raise ConfigError("run.spin_up_duration", "must be non-negative")
        if not self.prediction_duration > 0:
            raise ConfigError("run.prediction_duration", "must be positive")
        if not self.output_interval > 0:
            raise ConfigError("run.output_interval", "must be positive")

    @property
    def n_outputs(self) -> int:
        """Output count, the initial state at t = 0 included."""
        return int(math.floor(self.prediction_duration / self.output_interval + 1e-9)) + 1

    @property
    def output_times(self) -> np.ndarray:
        return np.arange(self.n_outputs, dtype=float) * self.output_interval


@dataclass(frozen=True)
class SolverOptions:
    initial_dt: float = 0.01
    max_dt: float = 0.25
    spinup_max_dt: float = 0.25
    min_dt: float = 1.0e-6
    picard_tol: float = 0.1
    max_picard: int = 25
    linear_tol: float = 1.0e-12
    cfl: float = 0.9

    def __post_init__(self):
        for name in ("initial_dt", "max_dt", "spinup_max_dt", "min_dt", "picard_tol", "max_picard", "linear_tol", "cfl"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"solver.{name}", "must be positive")
        if self.cfl > 1.0:
            raise ConfigError("solver.cfl", "must not exceed 1")


def build_grid(nx: int, nz: int, lx: float, lz: float, surface_elevation=None) -> GridSpec:
    """Build the cross-section grid and its active mask.

    ``surface_elevation`` is one value per column; ``None`` puts the surface at
    the domain top so that every cell is active.
    """
    for name, v in (("nx", nx), ("nz", nz)):
        if int(v) != v or v < 1:
            raise ConfigError(f"grid.{name}", "must be a positive integer")
    for name, v in (("lx", lx), ("lz", lz)):
        if not v > 0:
            raise ConfigError(f"grid.{name}", "must be positive")
    nx, nz = int(nx), int(nz)
    dx, dz = lx / nx, lz / nz
    if surface_elevation is None:
        surface = np.full(nx, float(lz))
    else:
        surface = np.asarray(surface_elevation, dtype=float).reshape(-1)
        if surface.shape != (nx,):
            raise ConfigError("grid.surface_elevation", f"needs {nx} column values")
    zc = (np.arange(nz) + 0.5) * dz
    active = zc[:, None] <= surface[None, :]
    return GridSpec(nx, nz, float(lx), float(lz), dx, dz, _frozen(surface), _frozen(active, bool))


def surface_ramp(nx: int, lx: float, upland: float, stream: float) -> np.ndarray:
    """Piecewise-linear land surface from the upland edge to the stream edge,
    evaluated at column centers."""
    xc = (np.arange(nx) + 0.5) * (lx / nx)
    return upland + (stream - upland) * xc / lx


def tidal_stage(t, mean_stage: float, amplitudes: Sequence) -> np.ndarray | float:
    t = np.asarray(t, dtype=float)
    stage = np.full(t.shape, float(mean_stage))
    for amp, period, phase in amplitudes:
        stage = stage + amp * np.sin(2.0 * np.pi * t / period + phase)
    return stage if stage.ndim else float(stage)


def synth_tidal_forcing(mean_stage: float, amplitudes, salinity_level: float, times,
                        upland_head: float = 2.6) -> BoundaryForcing:
    """Synthetic tidal boundary: a sum of sinusoids around ``mean_stage``.

    ``amplitudes`` is a list of ``(amplitude_m, period_days, phase_rad)``.
    Upland head and stream salinity are held constant.
    """
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        raise ConfigError("forcing.times", "must not be empty")
    amps = tuple((float(a), float(p), float(ph)) for a, p, ph in amplitudes)
    for _, period, _ in amps:
        if not period > 0:
            raise ConfigError("forcing.tides", "periods must be positive")
    stage = tidal_stage(times, mean_stage, amps)
    return BoundaryForcing(
        times=_frozen(times),
        upland_head=_frozen(np.full(times.shape, float(upland_head))),
        stream_stage=_frozen(np.atleast_1d(stage)),
        stream_salinity=_frozen(np.full(times.shape, float(salinity_level))),
        mean_stage=float(mean_stage),
        amplitudes=amps,
    )


@dataclass(frozen=True)
class CovarianceBlock:
    lx_corr: float = 5.0
    lz_corr: float = 5.0
    mean_logk: float = 4.5
    std_logk: float = 1.0
    mean_phi: float = 0.5
    std_phi: float = 0.05


@dataclass(frozen=True, eq=False)
class Config:
    """A fully validated configuration file."""

    raw: dict
    grid: GridSpec
    fluid: FluidProps
    retention: RetentionParams
    transport: TransportProps
    run: RunConfig
    solver: SolverOptions
    forcing_params: dict
    wells: tuple
    section: dict = field(default_factory=dict)

    def forcing(self, duration: float | None = None) -> BoundaryForcing:
        f = self.forcing_params
        span = self.run.spin_up_duration + self.run.prediction_duration if duration is None else duration
        times = np.arange(0.0, span + 1.0, 1.0)
        return synth_tidal_forcing(f["mean_stage"], f["tides"], f["salinity"], times,
                                   upland_head=f["upland_head"])

    def get(self, section: str) -> dict:
        return self.section.get(section, {})

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


DEFAULTS: dict[str, Any] = {
    "grid": {"nx": 28, "nz": 40, "lx": 84.0, "lz": 4.0, "surface_upland": 4.0, "surface_stream": 1.8},
    "fluid": {"mu": 1.0e-3, "rho_fresh": 1000.0, "rho_sea": 1025.0, "g": 9.81, "eta": 55.5, "c_sea": 35.0},
    "retention": {"s_r": 0.15, "alpha": 2.0e-4, "m": 0.2908},
    "transport": {"diff": 1.0e-9},
    "forcing": {
        "upland_head": 2.6,
        "mean_stage": 1.6,
        "salinity": 35.0,
        "tides": [[0.4, 0.5175, 0.0], [0.2, 14.77, 0.0]],
    },
    "run": {"spin_up_duration": 1460.0, "prediction_duration": 7260.0, "output_interval": 30.0, "seed": 2024},
    "solver": {},
    "geostat": {},
    "wells": [
        {"x": 40.5, "depths": [0.25, 0.45, 0.65, 0.85, 1.05, 1.25]},
        {"x": 64.5, "depths": [0.25, 0.45, 0.65, 0.85, 1.05, 1.25]},
        {"x": 79.5, "depths": [0.25, 0.45, 0.65, 0.85, 1.05, 1.25]},
    ],
}

_REQUIRED = {
    "grid": ("nx", "nz", "lx", "lz"),
    "run": ("spin_up_duration", "prediction_duration", "output_interval"),
    "forcing": ("upland_head", "mean_stage", "salinity", "tides"),
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _dataclass_from(cls, block: dict, section: str):
    names = set(cls.__dataclass_fields__)
    unknown = set(block) - names
    if unknown:
        raise ConfigError(f"{section}.{sorted(unknown)[0]}", "unknown key")
    return cls(**block)


def config_from_dict(raw: dict) -> Config:
    """Validate a configuration mapping (already parsed) and build the typed view."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "configuration must be a mapping")
    for section, keys in _REQUIRED.items():
        if section not in raw or not isinstance(raw[section], dict):
            raise ConfigError(section, "missing section")
        for k in keys:
            if k not in raw[section]:
                raise ConfigError(f"{section}.{k}", "missing key")
    merged = _merge(DEFAULTS, raw)
    g = merged["grid"]
    for k in ("nx", "nz"):
        if not isinstance(g[k], int) or isinstance(g[k], bool) or g[k] < 1:
            raise ConfigError(k, f"grid.{k} must be a positive integer, got {g[k]!r}")
    for k in ("lx", "lz"):
        if not isinstance(g[k], (int, float)) or not g[k] > 0:
            raise ConfigError(k, f"grid.{k} must be positive, got {g[k]!r}")
    surface = surface_ramp(g["nx"], g["lx"], g.get("surface_upland", g["lz"]), g.get("surface_stream", g["lz"]))
    grid = build_grid(g["nx"], g["nz"], float(g["lx"]), float(g["lz"]), surface)

    fluid = _dataclass_from(FluidProps, merged["fluid"], "fluid")
    retention = _dataclass_from(RetentionParams, merged["retention"], "retention")
    transport = _dataclass_from(TransportProps, merged["transport"], "transport")
    run = _dataclass_from(RunConfig, merged["run"], "run")
    solver = _dataclass_from(SolverOptions, merged["solver"], "solver")

    f = merged["forcing"]
    tides = []
    for j, comp in enumerate(f["tides"]):
        if len(comp) != 3:
            raise ConfigError(f"forcing.tides[{j}]", "expects [amplitude, period, phase]")
        if not comp[1] > 0:
            raise ConfigError(f"forcing.tides[{j}]", "period must be positive")
        tides.append(tuple(float(c) for c in comp))
    if f["salinity"] < 0:
        raise ConfigError("forcing.salinity", "must be non-negative")
    forcing_params = {
        "upland_head": float(f["upland_head"]),
        "mean_stage": float(f["mean_stage"]),
        "salinity": float(f["salinity"]),
        "tides": tuple(tides),
    }

    wells = []
    for j, w in enumerate(merged["wells"]):
        if "x" not in w or "depths" not in w:
            raise ConfigError(f"wells[{j}]", "needs 'x' and 'depths'")
        i_col = min(int(w["x"] / grid.dx), grid.nx - 1)
        if not 0 <= w["x"] <= grid.lx:
            raise ConfigError(f"wells[{j}].x", "outside the domain")
        top = grid.surface_elevation[i_col]
        cells = []
        for d in w["depths"]:
            cell = grid.cell_index(float(w["x"]), float(top - d))
            if not grid.active.ravel()[cell]:
                raise ConfigError(f"wells[{j}].depths", f"depth {d} falls in an inactive cell")
            cells.append(cell)
        wells.append(tuple(cells))

    sections = {k: merged.get(k, {}) for k in ("geostat", "ensemble", "observations", "ufno", "train", "esmda", "analysis")}
    return Config(raw=merged, grid=grid, fluid=fluid, retention=retention, transport=transport,
                  run=run, solver=solver, forcing_params=forcing_params, wells=tuple(wells),
                  section=sections)


def parse_config(path) -> Config:
    """Load and validate a YAML configuration file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"{path} is not valid YAML: {exc}") from exc
    return config_from_dict(raw)


def dump_config(cfg: Config) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def packaged_config(name: str) -> Path:
    """Path of a configuration shipped with the package (``reference``, ``desk``, ``ci``)."""
    p = Path(__file__).parent / "configs" / f"{name}.yaml"
    if not p.exists():
        raise ConfigError("<file>", f"no packaged config named {name!r}")
    return p
