"""Backward-Euler, Picard-iterated variably saturated flow with a density-
dependent gravity term.

Pressures are gauge (atmospheric = 0), elevation ``z`` points upward and the
flow potential is ``P + rho g z``.  Storage uses the freshwater molar density,
so the water balance is audited in volume and scaled by ``eta``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import LinAlgError, solve_banded, solveh_banded

from ..domain import SECONDS_PER_DAY, BoundaryForcing, FluidProps, RetentionParams, SolverOptions
from ..exceptions import SolverError
from .closures import density_of, vg_capacity, vg_relperm, vg_saturation
from .mesh import STREAM, SURFACE, UPLAND, Mesh, Rock


@dataclass(frozen=True, eq=False)
class FlowState:
    """Per-active-cell state, compact ordering of the mesh."""

    pressure: np.ndarray
    saturation: np.ndarray
    conc: np.ndarray
    time: float


@dataclass(frozen=True, eq=False)
class FaceFluxes:
    """Volumetric fluxes (m^3/s per metre of transect).

    ``internal[j]`` flows from ``mesh.fa[j]`` to ``mesh.fb[j]``; ``boundary[j]``
    is positive out of the domain.  ``boundary_conc`` holds the salinity of
    water entering through each boundary face.
    """

    internal: np.ndarray
    boundary: np.ndarray
    boundary_conc: np.ndarray


@dataclass(frozen=True)
class FlowAudit:
    iterations: int
    water_residual: float     # relative discrete water-balance mismatch
    water_total: float        # kmol per metre of transect
    dt: float = 0.0           # step actually taken (days)


class PicardFailure(Exception):
    pass


@dataclass(frozen=True, eq=False)
class BoundaryState:
    p: np.ndarray          # prescribed face pressure (Dirichlet faces)
    rho: np.ndarray        # density of boundary water
    conc: np.ndarray       # salinity of inflowing boundary water
    dirichlet: np.ndarray  # fixed-pressure faces
    seep: np.ndarray       # seepage candidates (outflow only at P = 0)


def boundary_state(mesh: Mesh, forcing: BoundaryForcing, t: float, fp: FluidProps,
                   salt: bool = True) -> BoundaryState:
    """Classify boundary faces at time ``t`` (days).

    Upland faces below the upland head are fixed at fresh hydrostatic
    pressure; stream faces below the stage, and land-surface faces the stage
    floods, carry stream water at hydrostatic pressure.  Stream faces above
    the stage and dry land-surface faces are seepage candidates.
    """
    h_up = forcing.upland_head_at(t)
    stage = forcing.stage_at(t)
    c_s = forcing.salinity_at(t) if salt else 0.0
    rho_s = float(density_of(c_s, fp))
    z = mesh.b_z
    kind = mesh.b_type
    up = (kind == UPLAND) & (z < h_up)
    wet = ((kind == STREAM) | (kind == SURFACE)) & (z < stage)
    p = np.zeros(z.size)
    rho = np.full(z.size, fp.rho_fresh)
    conc = np.zeros(z.size)
    p[up] = fp.rho_fresh * fp.g * (h_up - z[up])
    p[wet] = rho_s * fp.g * (stage - z[wet])
    rho[wet] = rho_s
    conc[wet] = c_s
    seep = ~(up | wet) & (kind != UPLAND)
    if not forcing.seepage_on_surface:
        seep &= kind != SURFACE
    return BoundaryState(p=p, rho=rho, conc=conc, dirichlet=up | wet, seep=seep)


class FlowSolver:
    """Assembles and solves the flow system for one model on one mesh."""

    def __init__(self, mesh: Mesh, rock: Rock, fluid: FluidProps, retention: RetentionParams,
                 opts: SolverOptions):
        self.mesh, self.rock, self.fluid, self.ret, self.opts = mesh, rock, fluid, retention, opts
        self.pore_volume = rock.phi * mesh.volume
        self._dz_int = mesh.z[mesh.fa] - mesh.z[mesh.fb]
        self._dz_bc = mesh.z[mesh.ba] - mesh.b_z
        self._off = mesh.band - (mesh.fb - mesh.fa)

    # -- fluxes ---------------------------------------------------------
    def internal_terms(self, p, rho, kr):
        """Conductances (upwinded kr) and gravity heads for internal faces."""
        m, g = self.mesh, self.fluid.g
        rho_f = 0.5 * (rho[m.fa] + rho[m.fb])
        grav = rho_f * g * self._dz_int
        dphi = p[m.fa] - p[m.fb] + grav
        kr_up = np.where(dphi >= 0.0, kr[m.fa], kr[m.fb])
        cond = self.rock.t_int * kr_up / self.fluid.mu
        return cond, grav

    def boundary_terms(self, p, rho, kr, bs: BoundaryState, seep_on):
        m, g = self.mesh, self.fluid.g
        rho_f = np.where(bs.dirichlet, 0.5 * (rho[m.ba] + bs.rho), rho[m.ba])
        grav = rho_f * g * self._dz_bc
        fixed = bs.dirichlet | seep_on
        p_face = np.where(bs.dirichlet, bs.p, 0.0)
        dphi = p[m.ba] - p_face + grav
        kr_up = np.where(dphi >= 0.0, kr[m.ba], 1.0)
        cond = np.where(fixed, self.rock.t_bc * kr_up / self.fluid.mu, 0.0)
        return cond, grav, p_face

    def fluxes(self, p, rho, kr, bs: BoundaryState, seep_on) -> FaceFluxes:
        m = self.mesh
        c_int, g_int = self.internal_terms(p, rho, kr)
        q_int = c_int * (p[m.fa] - p[m.fb] + g_int)
        c_bc, g_bc, p_face = self.boundary_terms(p, rho, kr, bs, seep_on)
        q_bc = c_bc * (p[m.ba] - p_face + g_bc)
        return FaceFluxes(q_int, q_bc, bs.conc.copy())

    # -- linear system --------------------------------------------------
    def _solve(self, diag, cond_int, rhs):
        m = self.mesh
        ab = np.zeros((m.band + 1, m.n))
        ab[m.band] = diag
        ab[self._off, m.fb] = -cond_int
        try:
            return solveh_banded(ab, rhs, check_finite=False)
        except (LinAlgError, ValueError):
            full = np.zeros((2 * m.band + 1, m.n))
            full[m.band] = diag
            full[self._off, m.fb] = -cond_int
            full[2 * m.band - self._off, m.fa] = -cond_int
            return solve_banded((m.band, m.band), full, rhs, check_finite=False)

    def picard(self, p_old, s_old, rho, dt_s, bs: BoundaryState, guess=None):
        """Solve one backward-Euler step of length ``dt_s`` seconds.

        Returns ``(p, s, fluxes, iterations)``; the returned fluxes are the ones
        of the final linear system, which is what makes the discrete water
        balance close to round-off.
        """
        m, o = self.mesh, self.opts
        pv = self.pore_volume
        p = p_old.copy() if guess is None else np.array(guess, dtype=float)
        seep_on = bs.seep & ((p[m.ba] + rho[m.ba] * self.fluid.g * self._dz_bc) > 0.0)
        for it in range(1, o.max_picard + 1):
            s = vg_saturation(-p, self.ret)
            cap = vg_capacity(p, self.ret)
            kr = vg_relperm(s, self.ret)
            c_int, g_int = self.internal_terms(p, rho, kr)
            c_bc, g_bc, p_face = self.boundary_terms(p, rho, kr, bs, seep_on)
            store = pv * cap / dt_s
            diag = store + np.bincount(m.fa, c_int, m.n) + np.bincount(m.fb, c_int, m.n) \
                + np.bincount(m.ba, c_bc, m.n)
            rhs = store * p - pv * (s - s_old) / dt_s
            rhs -= np.bincount(m.fa, c_int * g_int, m.n) - np.bincount(m.fb, c_int * g_int, m.n)
            rhs += np.bincount(m.ba, c_bc * (p_face - g_bc), m.n)
            p_new = self._solve(diag, c_int, rhs)
            if not np.all(np.isfinite(p_new)):
                raise PicardFailure("non-finite pressure")
            change = np.max(np.abs(p_new - p))
            seep_next = bs.seep & ((p_new[m.ba] + g_bc) > 0.0)
            stable = np.array_equal(seep_next, seep_on)
            q_int = c_int * (p_new[m.fa] - p_new[m.fb] + g_int)
            q_bc = c_bc * (p_new[m.ba] - p_face + g_bc)
            p = p_new
            if change < o.picard_tol and stable:
                s_new = vg_saturation(-p, self.ret)
                return p, s_new, FaceFluxes(q_int, q_bc, bs.conc.copy()), it
            seep_on = seep_next
        raise PicardFailure(f"no convergence after {o.max_picard} sweeps (last change {change:.3g} Pa)")

    def water_residual(self, s_old, s_new, fl: FaceFluxes, dt_s) -> tuple[float, float]:
        """Relative mismatch between storage change and net boundary inflow."""
        pv = self.pore_volume
        d_store = np.sum(pv * (s_new - s_old))
        net_in = -np.sum(fl.boundary) * dt_s
        total = np.sum(pv * s_new)
        return abs(d_store - net_in) / total, total * self.fluid.eta


def darcy_fluxes(state: FlowState, solver: FlowSolver, forcing: BoundaryForcing | None = None,
                 t: float | None = None) -> FaceFluxes:
    """Darcy fluxes of ``state`` with upwinded relative permeability and
    harmonic-mean permeability; boundary faces are closed unless a forcing is
    given."""
    mesh = solver.mesh
    rho = density_of(state.conc, solver.fluid)
    kr = vg_relperm(state.saturation, solver.ret)
    if forcing is None:
        n = mesh.ba.size
        bs = BoundaryState(np.zeros(n), np.full(n, solver.fluid.rho_fresh), np.zeros(n),
                           np.zeros(n, bool), np.zeros(n, bool))
    else:
        bs = boundary_state(mesh, forcing, state.time if t is None else t, solver.fluid)
    g_bc = rho[mesh.ba] * solver.fluid.g * (mesh.z[mesh.ba] - mesh.b_z)
    seep_on = bs.seep & ((state.pressure[mesh.ba] + g_bc) > 0.0)
    return solver.fluxes(state.pressure, rho, kr, bs, seep_on)


def step_flow(state: FlowState, dt: float, solver: FlowSolver, forcing: BoundaryForcing,
              salt: bool = True, guess=None) -> tuple[FlowState, FaceFluxes, FlowAudit]:
    """Advance pressure and saturation by ``dt`` days, boundary values taken at
    the new time level.

    Picard non-convergence halves the step and retries, so the returned state
    may cover a shorter interval than requested; ``audit.dt`` is the step
    actually taken.  ``guess`` seeds the first Picard sweep (it changes the
    iteration count, not the converged answer beyond the tolerance).
    """
    o = solver.opts
    rho = density_of(state.conc, solver.fluid)
    sub = dt
    while True:
        t_new = state.time + sub
        bs = boundary_state(solver.mesh, forcing, t_new, solver.fluid, salt=salt)
        try:
            p, s, fl, it = solver.picard(state.pressure, state.saturation, rho, sub * SECONDS_PER_DAY, bs,
                                         guess=guess if sub == dt else None)
        except PicardFailure as exc:
            sub *= 0.5
            if sub < o.min_dt:
                raise SolverError("flow step failed below the minimum time step",
                                  time=state.time, dt=sub, reason=str(exc)) from None
            continue
        res, tot = solver.water_residual(state.saturation, s, fl, sub * SECONDS_PER_DAY)
        return FlowState(p, s, state.conc, t_new), fl, FlowAudit(it, res, tot, sub)


def with_time(state: FlowState, t: float) -> FlowState:
    return replace(state, time=t)
