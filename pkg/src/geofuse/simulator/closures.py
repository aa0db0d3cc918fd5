"""Van Genuchten retention, Mualem relative permeability, linear density mixing."""
from __future__ import annotations

import numpy as np

from ..domain import FluidProps, RetentionParams


def effective_saturation(pc, r: RetentionParams) -> np.ndarray:
    pc = np.maximum(np.asarray(pc, dtype=float), 0.0)
    with np.errstate(over="ignore"):
        return (1.0 + (r.alpha * pc) ** r.n) ** (-r.m)


def vg_saturation(pc, r: RetentionParams) -> np.ndarray:
    """Saturation at capillary pressure ``pc`` (Pa, clipped at 0)."""
    return r.s_r + (1.0 - r.s_r) * effective_saturation(pc, r)


def vg_capacity(pressure, r: RetentionParams) -> np.ndarray:
    """dS/dP at water pressure ``pressure`` (gauge Pa); zero where saturated."""
    pc = np.maximum(-np.asarray(pressure, dtype=float), 0.0)
    x = r.alpha * pc
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        d = (1.0 - r.s_r) * r.m * r.n * r.alpha * x ** (r.n - 1.0) * (1.0 + x ** r.n) ** (-r.m - 1.0)
    return np.where(pc > 0.0, np.nan_to_num(d, nan=0.0, posinf=0.0), 0.0)


def vg_relperm(S, r: RetentionParams, *, return_clamped: bool = False):
    """Mualem relative permeability from saturation.

    Saturations outside ``[s_r, 1]`` are clamped; with ``return_clamped`` the
    boolean mask of clamped entries is returned as well.
    """
    S = np.asarray(S, dtype=float)
    clamped = (S < r.s_r) | (S > 1.0)
    Sc = np.clip(S, r.s_r, 1.0)
    se = (Sc - r.s_r) / (1.0 - r.s_r)
    # 1 - se^(1/m) from the exact deficit 1 - S; the direct form cancels near saturation
    deficit = (1.0 - Sc) / (1.0 - r.s_r)
    with np.errstate(divide="ignore"):
        gap = -np.expm1(np.log1p(-deficit) / r.m)
    kr = np.sqrt(se) * (1.0 - gap ** r.m) ** 2
    if return_clamped:
        return kr, clamped
    return kr


def density_of(c, fp: FluidProps) -> np.ndarray:
    """Linear freshwater/seawater mixing, ``rho_fresh`` at c = 0, ``rho_sea`` at c = c_sea."""
    return fp.rho_fresh + (fp.rho_sea - fp.rho_fresh) * (np.asarray(c, dtype=float) / fp.c_sea)
