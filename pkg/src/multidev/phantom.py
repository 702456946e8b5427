"""Synthetic ground truth: ellipse phantoms, smooth coil maps, masks and k-space data.

Data are simulated with the same discrete operator the reconstruction
inverts (an "inverse crime"), which is intended: the point is to validate the
solver and the runtime, not imaging physics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import UsageError
from .nlinv import ReconGrid
from .numerics.fft import fft2


@dataclass(frozen=True)
class Ellipse:
    # coordinates normalized to [-1, 1] across the field of view
    cx: float
    cy: float
    ax: float
    ay: float
    angle: float = 0.0  # degrees
    intensity: float = 1.0


# modified Shepp-Logan intensities, shrunk so every ellipse stays inside the FOV
SHEPP_LOGAN = (
    Ellipse(0.0, 0.0, 0.69, 0.92, 0.0, 1.0),
    Ellipse(0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8),
    Ellipse(0.22, 0.0, 0.11, 0.31, -18.0, -0.2),
    Ellipse(-0.22, 0.0, 0.16, 0.41, 18.0, -0.2),
    Ellipse(0.0, 0.35, 0.21, 0.25, 0.0, 0.1),
    Ellipse(0.0, 0.1, 0.046, 0.046, 0.0, 0.1),
    Ellipse(0.0, -0.1, 0.046, 0.046, 0.0, 0.1),
    Ellipse(-0.08, -0.605, 0.046, 0.023, 0.0, 0.1),
    Ellipse(0.0, -0.606, 0.023, 0.023, 0.0, 0.1),
    Ellipse(0.06, -0.605, 0.023, 0.046, 0.0, 0.1),
)


@dataclass(frozen=True)
class PhantomSpec:
    """Ellipse phantom on an ``n x n`` grid.

    ``shrink`` scales all ellipses about the center; ``motion`` gives a
    per-frame ``(dx, dy)`` translation in normalized units.
    """

    n: int
    ellipses: Tuple[Ellipse, ...] = SHEPP_LOGAN
    shrink: float = 0.9
    motion: Tuple[Tuple[float, float], ...] = ()

    def __post_init__(self):
        for e in self.ellipses:
            for dx, dy in self.motion or ((0.0, 0.0),):
                reach = self.shrink * (max(abs(e.cx + dx), abs(e.cy + dy)) + max(e.ax, e.ay))
                if reach > 1.0 + 1e-9:
                    raise UsageError(f"ellipse {e} leaves the field of view")


def make_phantom(spec: PhantomSpec, frame: int = 0) -> np.ndarray:
    """Real-valued ``n x n`` image (float32) of summed ellipse intensities."""
    n = spec.n
    dx, dy = spec.motion[frame] if spec.motion else (0.0, 0.0)
    coords = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    Y, X = np.meshgrid(coords, coords, indexing="ij")
    img = np.zeros((n, n))
    s = spec.shrink
    for e in spec.ellipses:
        th = np.deg2rad(e.angle)
        xr = X - s * (e.cx + dx)
        yr = Y - s * (e.cy + dy)
        u = xr * np.cos(th) + yr * np.sin(th)
        v = -xr * np.sin(th) + yr * np.cos(th)
        inside = (u / (s * e.ax)) ** 2 + (v / (s * e.ay)) ** 2 <= 1.0
        img[inside] += e.intensity
    return img.astype(np.float32)


@dataclass(frozen=True)
class CoilSpec:
    """``J`` complex Gaussian lobes centered on a ring around the field of view.

    Distances are in units of the FOV half-width.  ``uniform=True`` gives
    constant unit sensitivities instead.
    """

    J: int
    ring_radius: float = 1.3
    width: float = 1.0
    phase_ramp: float = 0.4
    uniform: bool = False

    def __post_init__(self):
        if self.J < 1:
            raise UsageError("coil count must be >= 1")


def make_coils(spec: CoilSpec, grid: ReconGrid) -> np.ndarray:
    """``(J, ng, ng)`` complex64 sensitivities, scaled so the maximum RSS inside
    the field of view is 1."""
    ng, n = grid.ng, grid.n
    if spec.uniform:
        return np.ones((spec.J, ng, ng), dtype=np.complex64)
    # doubled grid spans [-2, 2) in FOV half-widths
    coords = (np.arange(ng) - ng / 2 + 0.5) / (n / 2)
    Y, X = np.meshgrid(coords, coords, indexing="ij")
    maps = np.empty((spec.J, ng, ng), dtype=np.complex128)
    for j in range(spec.J):
        phi = 2 * np.pi * j / spec.J
        cx, cy = spec.ring_radius * np.cos(phi), spec.ring_radius * np.sin(phi)
        mag = np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * spec.width**2))
        phase = phi + spec.phase_ramp * (X * np.cos(phi) + Y * np.sin(phi))
        maps[j] = mag * np.exp(1j * phase)
    rss = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    maps /= grid.crop(rss).max()
    return maps.astype(np.complex64)


def rss(maps: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))


def make_mask(ng: int, density: float, center_band: int, seed: int) -> np.ndarray:
    """Cartesian column mask in FFT index order.

    The ``center_band`` lowest-frequency columns are always sampled; the
    remaining columns up to ``round(density * ng)`` are drawn without
    replacement with probability falling off with distance from k = 0.
    """
    if not 0 < density <= 1:
        raise UsageError("mask density must lie in (0, 1]")
    total = max(int(round(density * ng)), 1)
    center_band = min(center_band, total, ng)
    cols_centered = np.arange(ng) - ng // 2
    order = np.argsort(np.abs(cols_centered + 0.25), kind="stable")
    chosen = set(order[:center_band].tolist())
    rest = np.array([c for c in range(ng) if c not in chosen])
    need = total - len(chosen)
    if need > 0:
        dist = np.abs(cols_centered[rest]) / (ng / 2)
        p = (1.0 - dist) ** 2 + 1e-3
        p /= p.sum()
        rng = np.random.default_rng(seed)
        chosen.update(rng.choice(rest, size=need, replace=False, p=p).tolist())
    centered = np.zeros((ng, ng), dtype=np.float32)
    centered[:, sorted(chosen)] = 1
    return np.fft.ifftshift(centered, axes=1).copy()


def simulate_acquisition(
    image: np.ndarray,
    coils: np.ndarray,
    mask: np.ndarray,
    grid: ReconGrid,
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> np.ndarray:
    """``y_j = P * FFT(M * image * c_j) + sigma * noise`` on the sampled entries.

    ``image`` is ``n x n`` (embedded into the field of view) or already
    ``ng x ng``.
    """
    if image.shape == (grid.n, grid.n):
        image = grid.embed(image.astype(np.complex64))
    elif image.shape != (grid.ng, grid.ng):
        raise UsageError(f"image must be {grid.n}x{grid.n} or {grid.ng}x{grid.ng}")
    z = grid.fov_mask()[None] * image[None].astype(np.complex64) * coils.astype(np.complex64)
    y = fft2(z) * mask
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        noise = (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape)) / np.sqrt(2)
        y = y + (noise_sigma * noise * mask).astype(np.complex64)
    return y.astype(np.complex64)


def zero_filled(y: np.ndarray, grid: ReconGrid) -> np.ndarray:
    """Baseline reconstruction: RSS over channels of ``IFFT(y)``, cropped to the FOV."""
    from .numerics.fft import ifft2

    return grid.crop(rss(ifft2(y)))


def quality_reference(image: np.ndarray, coils: np.ndarray, grid: ReconGrid) -> np.ndarray:
    """Magnitude target for reconstructions on the FOV: ``|image| * RSS(c)``.

    nlinv recovers ``rho * c_j`` only up to how the product is split between
    the two factors, so comparisons use the product.
    """
    return np.abs(image) * grid.crop(rss(coils))


def relative_error(estimate: np.ndarray, reference: np.ndarray) -> float:
    """Relative L2 error of magnitudes."""
    ref = np.abs(reference)
    return float(np.linalg.norm(np.abs(estimate) - ref) / np.linalg.norm(ref))
