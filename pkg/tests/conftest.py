import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from geofuse.domain import config_from_dict
from geofuse.geostat import GeoModel

settings.register_profile("geofuse", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("geofuse")


def small_raw(**over):
    """A 6 x 8 cross-section that simulates in well under a second."""
    raw = {
        "grid": {"nx": 6, "nz": 8, "lx": 18.0, "lz": 0.8, "surface_upland": 0.8, "surface_stream": 0.5},
        "forcing": {"upland_head": 0.6, "mean_stage": 0.4, "salinity": 35.0, "tides": [[0.05, 2.0, 0.0]]},
        "run": {"spin_up_duration": 20.0, "prediction_duration": 10.0, "output_interval": 5.0, "seed": 3},
        "solver": {"max_dt": 0.5, "spinup_max_dt": 2.0},
        "wells": [{"x": 10.0, "depths": [0.05, 0.25]}, {"x": 16.0, "depths": [0.05]}],
    }
    for section, block in over.items():
        if isinstance(block, dict) and isinstance(raw.get(section), dict):
            raw[section] = {**raw[section], **block}
        else:
            raw[section] = block
    return raw


@pytest.fixture
def small_cfg():
    return config_from_dict(small_raw())


def homogeneous(grid, logk=4.5, phi=0.5):
    return GeoModel(np.full(grid.shape, float(logk)), np.full(grid.shape, float(phi)))


@pytest.fixture
def small_model(small_cfg):
    return homogeneous(small_cfg.grid)


def pytest_terminal_summary(terminalreporter):
    import sys
    lines = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
