import numpy as np
import pytest

from multidev import UsageError
from multidev.nlinv import ReconGrid
from multidev.numerics.fft import fft2
from multidev.phantom import (
    SHEPP_LOGAN,
    CoilSpec,
    Ellipse,
    PhantomSpec,
    make_coils,
    make_mask,
    make_phantom,
    rss,
    simulate_acquisition,
    zero_filled,
)


def test_single_ellipse_covering_fov():
    spec = PhantomSpec(16, (Ellipse(0, 0, 1.0, 1.0),), shrink=1.0)
    img = make_phantom(spec)
    coords = (np.arange(16) + 0.5) / 16 * 2 - 1
    inside = coords[:, None] ** 2 + coords[None, :] ** 2 <= 1
    np.testing.assert_array_equal(img, inside.astype(np.float32))


def test_ellipse_outside_fov_rejected():
    with pytest.raises(UsageError):
        PhantomSpec(16, (Ellipse(0.5, 0, 0.6, 0.2),), shrink=1.0)


def test_phantom_is_deterministic_and_moves():
    spec = PhantomSpec(32, motion=((0, 0), (0.1, 0)))
    np.testing.assert_array_equal(make_phantom(spec, 0), make_phantom(spec, 0))
    assert not np.array_equal(make_phantom(spec, 0), make_phantom(spec, 1))


def test_uniform_coil_rss_is_one():
    grid = ReconGrid(8)
    np.testing.assert_array_equal(rss(make_coils(CoilSpec(1, uniform=True), grid)), 1)


@pytest.mark.parametrize("J", [1, 4, 8])
def test_coils_normalized_and_positive_on_fov(J):
    grid = ReconGrid(32)
    c = make_coils(CoilSpec(J), grid)
    r = grid.crop(rss(c))
    assert r.max() == pytest.approx(1.0, rel=1e-6)
    assert r.min() > 0


def test_coils_are_smooth():
    # the largest finite-difference step of any map stays well below its peak
    grid = ReconGrid(32)
    c = make_coils(CoilSpec(8), grid)
    step = max(np.abs(np.diff(c, axis=a)).max() for a in (1, 2))
    assert step <= 0.1


def test_mask_properties():
    ng = 64
    m = make_mask(ng, 0.25, 8, seed=3)
    cols = np.nonzero(m[0])[0]
    assert len(cols) == 16
    assert np.all(m == m[0])  # column mask
    # the center band (in FFT order: columns near 0 and ng-1) is sampled
    centered = np.fft.fftshift(m, axes=1)[0]
    assert np.all(centered[ng // 2 - 4 : ng // 2 + 4] == 1)
    np.testing.assert_array_equal(m, make_mask(ng, 0.25, 8, seed=3))
    assert not np.array_equal(m, make_mask(ng, 0.25, 8, seed=4))


def test_mask_density_validated():
    with pytest.raises(UsageError):
        make_mask(16, 0.0, 2, 0)


def test_acquisition_trivial_case():
    grid = ReconGrid(8)
    img = make_phantom(PhantomSpec(8))
    y = simulate_acquisition(img, np.ones((1, 16, 16), np.complex64), np.ones((16, 16)), grid)
    np.testing.assert_allclose(y[0], fft2(grid.embed(img.astype(np.complex64))), atol=1e-5)


def test_projection_contracts_energy():
    grid = ReconGrid(16)
    img = make_phantom(PhantomSpec(16))
    coils = make_coils(CoilSpec(4), grid)
    full = simulate_acquisition(img, coils, np.ones((32, 32)), grid)
    part = simulate_acquisition(img, coils, make_mask(32, 0.3, 4, 0), grid)
    assert np.linalg.norm(part) < np.linalg.norm(full)


def test_noise_only_on_sampled_entries_and_seeded():
    grid = ReconGrid(8)
    img = make_phantom(PhantomSpec(8))
    coils = make_coils(CoilSpec(2), grid)
    mask = make_mask(16, 0.5, 2, 0)
    y1 = simulate_acquisition(img, coils, mask, grid, noise_sigma=0.1, seed=5)
    y2 = simulate_acquisition(img, coils, mask, grid, noise_sigma=0.1, seed=5)
    np.testing.assert_array_equal(y1, y2)
    assert np.all(y1[:, mask == 0] == 0)


def test_zero_filled_full_sampling_recovers_image():
    grid = ReconGrid(16)
    img = make_phantom(PhantomSpec(16))
    coils = make_coils(CoilSpec(1, uniform=True), grid)
    y = simulate_acquisition(img, coils, np.ones((32, 32)), grid)
    np.testing.assert_allclose(zero_filled(y, grid), np.abs(img), atol=1e-5)


def test_shepp_logan_fits():
    PhantomSpec(64, SHEPP_LOGAN)
