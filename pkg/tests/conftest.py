import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ctscvx.dynamics import (
    CR3BPRelativeModel,
    EARTH_MOON_MU,
    EARTH_MOON_LU_KM,
    EARTH_MOON_TU_HR,
    ReferenceOrbit,
    cr3bp_field,
    _rk4_steps,
)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def _integrate_reference_orbit():
    """Sample a CR3BP trajectory near the L2 NRHO region (canonical units)."""
    mu = EARTH_MOON_MU
    w = np.array([1.0220, 0.0, -0.1820, 0.0, -0.1033, 0.0])
    deriv = lambda t, x: cr3bp_field(mu, x)
    n_samples = 1200
    t_end = 1.0  # canonical; ~104 hr, covers planning + safety horizons
    times_c = np.linspace(0.0, t_end, n_samples)
    states_c = np.empty((n_samples, 6))
    states_c[0] = w
    for i in range(1, n_samples):
        w = _rk4_steps(deriv, times_c[i - 1], w, times_c[i], 4, "reference orbit")
        states_c[i] = w
    scale = np.concatenate([
        np.full(3, EARTH_MOON_LU_KM),
        np.full(3, EARTH_MOON_LU_KM / EARTH_MOON_TU_HR),
    ])
    return times_c * EARTH_MOON_TU_HR, states_c * scale


@pytest.fixture(scope="session")
def reference_orbit_data():
    return _integrate_reference_orbit()


@pytest.fixture(scope="session")
def reference_orbit(reference_orbit_data):
    times, states = reference_orbit_data
    return ReferenceOrbit(times, states)


@pytest.fixture(scope="session")
def cr3bp_model(reference_orbit):
    return CR3BPRelativeModel(reference_orbit)


@pytest.fixture(scope="session")
def reference_orbit_csv(tmp_path_factory, reference_orbit_data):
    times, states = reference_orbit_data
    path = tmp_path_factory.mktemp("orbit") / "reference_orbit.csv"
    header = "t,r1,r2,r3,v1,v2,v3"
    np.savetxt(path, np.column_stack([times, states]), delimiter=",",
               header=header, comments="")
    return path
