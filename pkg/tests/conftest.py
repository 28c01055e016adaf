"""Shared fixtures: a soft toy double well plus the packaged device.

The toy device uses a stretched electrode layout (4 um pitch) and gentle
voltages so that 12 points per well already converge the low spectrum to
a few 1e-4; dense diagonalization of the 144x144 product Hamiltonian is
then a practical oracle.  Slightly unequal well voltages split the
one-excitation pair so state labels are unambiguous.
"""

import numpy as np
import pytest

from heligate.electrostatics import (
    ZETA_VOLTAGES_MV,
    CouplingProfile,
    Device,
    ElectrodeLayout,
    UnitSystem,
)
from heligate.dvr import OperatorCache, build_basis


TOY_VOLTAGES_MV = np.array([0.0, 0.0, 42.0, -25.0, 38.0, 0.0, 0.0])


@pytest.fixture(scope="session")
def toy_layout():
    return ElectrodeLayout(
        centers_um=tuple(4.0 * (k - 3) for k in range(7)),
        widths_um=(3.0,) * 7,
        depth_um=1.5,
    )


@pytest.fixture(scope="session")
def toy_units():
    return UnitSystem()


@pytest.fixture(scope="session")
def toy_voltages():
    return TOY_VOLTAGES_MV.copy()


@pytest.fixture(scope="session")
def toy_device(toy_layout, toy_units):
    profile = CouplingProfile.analytic(toy_layout)
    return Device(profile=profile, units=toy_units, kappa=60.0, epsilon=0.01)


@pytest.fixture(scope="session")
def toy_device_free(toy_layout, toy_units):
    profile = CouplingProfile.analytic(toy_layout)
    return Device(profile=profile, units=toy_units, kappa=0.0, epsilon=0.01)


@pytest.fixture(scope="session")
def toy_basis(toy_device_free, toy_voltages):
    return build_basis(toy_device_free, toy_voltages, points_per_well=12)


@pytest.fixture()
def toy_cache(toy_device, toy_basis, toy_voltages):
    return OperatorCache(toy_device, toy_basis, toy_voltages)


@pytest.fixture()
def toy_cache_free(toy_device_free, toy_basis, toy_voltages):
    return OperatorCache(toy_device_free, toy_basis, toy_voltages)


@pytest.fixture(scope="session")
def real_device():
    profile = CouplingProfile.analytic(ElectrodeLayout())
    return Device(profile=profile, units=UnitSystem.calibrated())


@pytest.fixture(scope="session")
def idle_voltages():
    return np.array(ZETA_VOLTAGES_MV["I"])


@pytest.fixture(scope="session")
def real_basis(real_device, idle_voltages):
    return build_basis(real_device, idle_voltages, points_per_well=24)


@pytest.fixture(scope="session")
def dense_hamiltonian():
    """Assemble the full product-basis Hamiltonian (oracle for small grids)."""

    def build(cache):
        n_left, n_right = cache.basis.shape
        h = np.kron(cache.kinetic_left, np.eye(n_right))
        h += np.kron(np.eye(n_left), cache.kinetic_right)
        h += np.diag(cache.diagonal_two_body.ravel())
        return h

    return build
