"""Salt transport: explicit upwind advection sub-stepped under a CFL limit,
then implicit diffusion with closed boundaries.

The conserved quantity is dissolved salt ``c * phi * S * V``.  Water content
inside a step is advanced with the same face fluxes as the salt, so each
sub-step is a convex update and concentrations stay within the range of the
initial and inflowing values.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solveh_banded

from ..domain import SECONDS_PER_DAY, TransportProps
from ..exceptions import SolverError
from .flow import FaceFluxes, FlowSolver


@dataclass(frozen=True)
class TransportAudit:
    substeps: int
    salt_residual: float   # relative discrete salt-balance mismatch
    salt_total: float      # kg per metre of transect
    boundary_in: float     # net salt entering over the step (kg)


def _outflow(solver: FlowSolver, fl: FaceFluxes) -> np.ndarray:
    m = solver.mesh
    qi = fl.internal
    out = np.bincount(m.fa, np.maximum(qi, 0.0), m.n) + np.bincount(m.fb, np.maximum(-qi, 0.0), m.n)
    out += np.bincount(m.ba, np.maximum(fl.boundary, 0.0), m.n)
    return out


def advect(c, water_old, fl: FaceFluxes, dt_s: float, solver: FlowSolver, cfl: float, water_end=None):
    """Upwind advection over ``dt_s`` seconds.

    ``water_end`` (the flow solver's final water content) replaces the
    flux-integrated water content in the last division, so salt is conserved
    exactly and the bound violation is limited to the water-balance residual.
    Returns ``(c_new, water_new, salt_in, n_sub)`` where ``salt_in`` is the
    net salt (kg) that entered through boundary faces.
    """
    m = solver.mesh
    qi, qb = fl.internal, fl.boundary
    out = _outflow(solver, fl)
    net_water = (np.bincount(m.fa, qi, m.n) - np.bincount(m.fb, qi, m.n)
                 + np.bincount(m.ba, qb, m.n))          # net outflow, m^3/s
    water_new = water_old - dt_s * net_water
    w_min = np.minimum(water_old, water_new)
    if np.any(w_min <= 0.0):
        raise SolverError("non-positive water content in transport", cells=int(np.sum(w_min <= 0)))
    rate = np.max(out / w_min) if out.size else 0.0
    n_sub = max(1, int(np.ceil(dt_s * rate / cfl)))
    tau = dt_s / n_sub

    up_a = qi >= 0.0
    b_out = qb > 0.0
    salt = c * water_old
    water = water_old.copy()
    salt_in = 0.0
    for _ in range(n_sub):
        c_up = np.where(up_a, c[m.fa], c[m.fb])
        f_int = qi * c_up
        f_bc = np.where(b_out, qb * c[m.ba], qb * fl.boundary_conc)
        d_salt = np.bincount(m.fa, f_int, m.n) - np.bincount(m.fb, f_int, m.n) + np.bincount(m.ba, f_bc, m.n)
        salt = salt - tau * d_salt
        water = water - tau * net_water
        salt_in -= tau * float(np.sum(f_bc))
        c = salt / water
    if water_end is not None:
        water = water_end
        c = salt / water
    return c, water, salt_in, n_sub


def diffuse(c, water, dt_s: float, solver: FlowSolver, props: TransportProps, sat) -> np.ndarray:
    """Implicit diffusion of ``c`` (no flux across the domain boundary)."""
    if props.diff == 0.0:
        return c
    m = solver.mesh
    theta = solver.rock.phi * sat
    coef = props.diff * 0.5 * (theta[m.fa] + theta[m.fb]) * m.f_area / m.f_dist * dt_s
    ab = np.zeros((m.band + 1, m.n))
    ab[m.band] = water + np.bincount(m.fa, coef, m.n) + np.bincount(m.fb, coef, m.n)
    ab[m.band - (m.fb - m.fa), m.fb] = -coef
    return solveh_banded(ab, water * c, check_finite=False)


def step_transport(conc, s_old, s_new, fl: FaceFluxes, dt: float, solver: FlowSolver,
                   props: TransportProps, cfl: float = 0.9):
    """Advance salinity by ``dt`` days with the fluxes of the matching flow step.

    Returns ``(conc_new, TransportAudit)``.
    """
    dt_s = dt * SECONDS_PER_DAY
    pv = solver.pore_volume
    w_old = pv * s_old
    salt_before = float(np.sum(conc * w_old))
    c_adv, water, salt_in, n_sub = advect(np.asarray(conc, float), w_old, fl, dt_s, solver, cfl,
                                          water_end=pv * s_new)
    c_new = diffuse(c_adv, water, dt_s, solver, props, s_new)
    if np.min(c_new) < -1e-12:
        raise SolverError("negative concentration", min_conc=float(np.min(c_new)))
    c_new = np.maximum(c_new, 0.0)
    salt_after = float(np.sum(c_new * pv * s_new))
    residual = abs(salt_after - salt_before - salt_in) / max(salt_after, salt_before, 1e-12)
    return c_new, TransportAudit(n_sub, residual, salt_after, salt_in)
