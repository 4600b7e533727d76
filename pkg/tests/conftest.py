import numpy as np
import pytest

from dissipeuler.spectral import SpectralField, TorusGrid, leray_project


@pytest.fixture
def grid2d():
    return TorusGrid(2, 32)


@pytest.fixture
def grid3d():
    return TorusGrid(3, 16)


def random_divfree_field(grid: TorusGrid, rng: np.random.Generator,
                         scale: float = 1.0) -> SpectralField:
    """Random smooth divergence-free field, band-limited to the dealias cut."""
    vals = rng.standard_normal((grid.dim,) + grid.shape) * scale
    f = SpectralField.from_physical(grid, vals)
    cut = grid.dealias_cutoff()
    k2 = grid.k_squared()
    # smooth decay keeps fields resolution-independent and well inside the band
    filt = np.exp(-2.0 * k2 / cut ** 2) * grid.dealias_mask()
    return leray_project(SpectralField(grid, f.coeffs * filt))


def random_field(grid: TorusGrid, rng: np.random.Generator,
                 scale: float = 1.0) -> SpectralField:
    """Random smooth field with a nonzero gradient part."""
    vals = rng.standard_normal((grid.dim,) + grid.shape) * scale
    f = SpectralField.from_physical(grid, vals)
    k2 = grid.k_squared()
    filt = np.exp(-2.0 * k2 / grid.dealias_cutoff() ** 2)
    return SpectralField(grid, f.coeffs * filt)
