"""Two-point flux topology over the active cells of a cross-section."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..domain import GridSpec
from ..geostat import GeoModel

UPLAND, STREAM, SURFACE = 0, 1, 2


@dataclass(frozen=True, eq=False)
class Mesh:
    """Faces and geometry in compact active-cell numbering.

    Compact indices follow the flat grid order, so every internal face joins
    cells at most ``band`` apart and the flow matrices are banded.
    """

    grid: GridSpec
    cells: np.ndarray        # flat grid index of each active cell
    z: np.ndarray            # cell-center elevation (m)
    volume: float            # cell volume, 1 m transect width (m^3)
    # internal faces
    fa: np.ndarray
    fb: np.ndarray
    f_area: np.ndarray
    f_dist: np.ndarray
    f_vertical: np.ndarray
    # boundary faces
    ba: np.ndarray
    b_type: np.ndarray
    b_area: np.ndarray
    b_half: np.ndarray
    b_z: np.ndarray
    band: int

    @property
    def n(self) -> int:
        return self.cells.size


def build_mesh(grid: GridSpec) -> Mesh:
    nx, nz = grid.nx, grid.nz
    act = grid.active
    flat = np.arange(grid.n_cells).reshape(nz, nx)
    cells = flat[act]
    compact = np.full(grid.n_cells, -1, dtype=np.int64)
    compact[cells] = np.arange(cells.size)
    kk, ii = np.divmod(cells, nx)
    z = (kk + 0.5) * grid.dz

    fa, fb, area, dist, vert = [], [], [], [], []
    # horizontal neighbours
    h = act[:, :-1] & act[:, 1:]
    a = flat[:, :-1][h]
    fa.append(compact[a]); fb.append(compact[a + 1])
    area.append(np.full(a.size, grid.dz)); dist.append(np.full(a.size, grid.dx)); vert.append(np.zeros(a.size, bool))
    # vertical neighbours
    v = act[:-1, :] & act[1:, :]
    a = flat[:-1, :][v]
    fa.append(compact[a]); fb.append(compact[a + nx])
    area.append(np.full(a.size, grid.dx)); dist.append(np.full(a.size, grid.dz)); vert.append(np.ones(a.size, bool))

    fa = np.concatenate(fa); fb = np.concatenate(fb)
    order = np.lexsort((fb, fa))
    fa, fb = fa[order], fb[order]
    f_area = np.concatenate(area)[order]; f_dist = np.concatenate(dist)[order]
    f_vertical = np.concatenate(vert)[order]

    ba, bt, barea, bhalf, bz = [], [], [], [], []

    def add(mask, kind, dk, horizontal):
        idx = flat[mask]
        k_idx = idx // nx
        ba.append(compact[idx]); bt.append(np.full(idx.size, kind))
        if horizontal:
            barea.append(np.full(idx.size, grid.dz)); bhalf.append(np.full(idx.size, grid.dx / 2))
        else:
            barea.append(np.full(idx.size, grid.dx)); bhalf.append(np.full(idx.size, grid.dz / 2))
        bz.append((k_idx + 0.5 + dk) * grid.dz)

    left = np.zeros_like(act); left[:, 0] = act[:, 0]
    right = np.zeros_like(act); right[:, -1] = act[:, -1]
    add(left, UPLAND, 0.0, True)
    add(right, STREAM, 0.0, True)
    # exposed tops: the cell above is inactive or beyond the domain top
    above_inactive = np.zeros_like(act)
    above_inactive[:-1] = act[:-1] & ~act[1:]
    above_inactive[-1] = act[-1]
    add(above_inactive, SURFACE, 0.5, False)
    # exposed risers of the stepped land surface
    riser_r = np.zeros_like(act); riser_r[:, :-1] = act[:, :-1] & ~act[:, 1:]
    riser_l = np.zeros_like(act); riser_l[:, 1:] = act[:, 1:] & ~act[:, :-1]
    add(riser_r, SURFACE, 0.0, True)
    add(riser_l, SURFACE, 0.0, True)

    band = int(np.max(fb - fa)) if fa.size else 1
    return Mesh(
        grid=grid, cells=cells, z=z, volume=grid.dx * grid.dz,
        fa=fa, fb=fb, f_area=f_area, f_dist=f_dist, f_vertical=f_vertical,
        ba=np.concatenate(ba), b_type=np.concatenate(bt), b_area=np.concatenate(barea),
        b_half=np.concatenate(bhalf), b_z=np.concatenate(bz), band=max(band, 1),
    )


@dataclass(frozen=True, eq=False)
class Rock:
    """Model-dependent transmissibilities on a mesh (permeability in m^2)."""

    k: np.ndarray
    phi: np.ndarray
    t_int: np.ndarray
    t_bc: np.ndarray


def rock_on_mesh(mesh: Mesh, model: GeoModel) -> Rock:
    k = model.permeability.ravel()[mesh.cells]
    phi = model.phi.ravel()[mesh.cells]
    ka, kb = k[mesh.fa], k[mesh.fb]
    kh = 2.0 * ka * kb / (ka + kb)
    t_int = kh * mesh.f_area / mesh.f_dist
    t_bc = k[mesh.ba] * mesh.b_area / mesh.b_half
    return Rock(k=k, phi=phi, t_int=t_int, t_bc=t_bc)
