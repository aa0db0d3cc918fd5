"""Finite-volume reference solver for density-coupled variably saturated flow
and salt transport."""
from .closures import density_of, vg_capacity, vg_relperm, vg_saturation
from .flow import FaceFluxes, FlowSolver, FlowState, darcy_fluxes, step_flow
from .mesh import Mesh, build_mesh, rock_on_mesh
from .run import (SimOutput, extract_observations, hydrostatic_state, make_solver, salinity_accumulation,
                  simulate, spin_up)
from .transport import step_transport

__all__ = [
    "FaceFluxes", "FlowSolver", "FlowState", "Mesh", "SimOutput", "build_mesh", "darcy_fluxes",
    "density_of", "extract_observations", "hydrostatic_state", "make_solver", "rock_on_mesh",
    "salinity_accumulation", "simulate", "spin_up", "step_flow", "step_transport", "vg_capacity",
    "vg_relperm", "vg_saturation",
]
