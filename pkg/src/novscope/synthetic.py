"""Seeded synthetic ground-truth twins.

``generate_synthetic_domains`` mimics a ferroelectric a/c stripe-domain
scan whose switching response is enhanced at domain walls, most strongly
inside a bundle of narrowed domains. ``generate_synthetic_particles``
mimics a nanoparticle assembly with a two-level response that decays
gradually away from particle edges.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from novscope.dataset import ScanDataset

DOMAIN_A_LEVEL = 0.0
DOMAIN_C_LEVEL = 0.4
WALL_LEVEL = 1.0
BUNDLE_WALL_GAIN = 1.0
BUNDLE_DUTY = 0.8


def _check_dims(height: int, width: int, patch_size: int) -> None:
    if patch_size < 1:
        raise ValueError(f"patch_size must be positive, got {patch_size}")
    if height < 2 * patch_size or width < 2 * patch_size:
        raise ValueError(
            f"dims {height}x{width} must be at least twice the patch size {patch_size}"
        )


def stripe_waveform(width: int, period: float, phase: float = 0.0) -> np.ndarray:
    """Carrier of the stripe pattern sampled at pixel centres along one row."""
    c = np.arange(width) + 0.5
    return np.sin(2.0 * np.pi * c / period + phase)


def generate_synthetic_domains(
    height: int = 64,
    width: int = 64,
    stripe_period: float = 8.0,
    wall_width: float = 1.0,
    loop_contrast: float = 1.0,
    seed: int = 0,
    *,
    patch_size: int = 16,
    noise_std: float = 0.0,
    image_noise: float = 0.05,
) -> ScanDataset:
    """Stripe-domain twin with a localized bundle of narrowed domains.

    The stripe carrier runs along columns with a slow seeded waviness in its
    phase from row to row. A seeded Gaussian bundle raises the duty cycle
    locally, narrowing the dark domains, and walls inside that bundle carry
    the strongest response. Scalarizer regimes: dark interiors, bright
    interiors, ordinary walls and enhanced bundle walls, all scaled by
    ``loop_contrast``.
    """
    height, width = int(height), int(width)
    _check_dims(height, width, int(patch_size))
    if stripe_period <= 2:
        raise ValueError(f"stripe_period must exceed 2 pixels, got {stripe_period}")
    if wall_width <= 0:
        raise ValueError(f"wall_width must be positive, got {wall_width}")
    rng = np.random.default_rng(seed)

    rows = np.arange(height, dtype=np.float64)[:, None] + 0.5
    cols = np.arange(width, dtype=np.float64)[None, :] + 0.5
    wobble = ndimage.gaussian_filter1d(rng.standard_normal(height), sigma=height / 8, mode="wrap")
    wobble *= (0.5 * np.pi) / max(np.abs(wobble).max(), 1e-12)
    phase = wobble[:, None]

    center = rng.uniform(0.25, 0.75, size=2) * (height, width)
    spread = rng.uniform(0.12, 0.18) * min(height, width)
    duty = BUNDLE_DUTY * np.exp(
        -((rows - center[0]) ** 2 + (cols - center[1]) ** 2) / (2.0 * spread**2)
    )

    k = 2.0 * np.pi / stripe_period
    carrier = np.sin(k * cols + phase)
    u = carrier + duty
    du = np.abs(k * np.cos(k * cols + phase) + np.gradient(duty, axis=1))
    dist = np.abs(u) / np.maximum(du, 0.25 * k)
    wall = np.exp(-((dist / wall_width) ** 2))

    bright = u > 0
    image = np.where(bright, 0.8, 0.2)
    image = ndimage.gaussian_filter(image, sigma=0.5 * wall_width, mode="reflect")
    image = image + image_noise * rng.standard_normal(image.shape)

    interior = np.where(bright, DOMAIN_C_LEVEL, DOMAIN_A_LEVEL)
    wall_level = WALL_LEVEL + BUNDLE_WALL_GAIN * duty / BUNDLE_DUTY
    scalar = loop_contrast * ((1.0 - wall) * interior + wall * wall_level)

    return ScanDataset(image=image, scalar_map=scalar, patch_size=patch_size, noise_std=noise_std)


def generate_synthetic_particles(
    height: int = 64,
    width: int = 64,
    n_particles: int = 12,
    radius_range: tuple[float, float] = (3.0, 6.0),
    edge_decay: float = 3.0,
    seed: int = 0,
    *,
    patch_size: int = 16,
    noise_std: float = 0.0,
    image_noise: float = 0.02,
) -> ScanDataset:
    """Nanoparticle twin: seeded disks with a decaying response halo.

    The image is the sum of all disks (overlaps add). The scalarizer is 1
    inside any particle and ``exp(-d / edge_decay)`` outside, with ``d`` the
    Euclidean distance to the nearest particle pixel; ``edge_decay <= 0``
    gives the sharp two-level mask.
    """
    height, width = int(height), int(width)
    _check_dims(height, width, int(patch_size))
    if n_particles < 1:
        raise ValueError(f"n_particles must be at least 1, got {n_particles}")
    r_lo, r_hi = float(radius_range[0]), float(radius_range[1])
    if not 0 < r_lo <= r_hi:
        raise ValueError(f"radius_range must satisfy 0 < min <= max, got {radius_range}")
    if edge_decay < 0:
        raise ValueError(f"edge_decay must be nonnegative, got {edge_decay}")
    rng = np.random.default_rng(seed)

    rr, cc = np.mgrid[0:height, 0:width] + 0.5
    centers = rng.uniform((0.0, 0.0), (height, width), size=(n_particles, 2))
    radii = rng.uniform(r_lo, r_hi, size=n_particles)
    image = np.zeros((height, width))
    for (r0, c0), rad in zip(centers, radii):
        image += ((rr - r0) ** 2 + (cc - c0) ** 2 <= rad**2).astype(np.float64)
    mask = image > 0
    image = image + image_noise * rng.standard_normal(image.shape)

    if edge_decay > 0 and mask.any() and not mask.all():
        dist = ndimage.distance_transform_edt(~mask)
        scalar = np.where(mask, 1.0, np.exp(-dist / edge_decay))
    else:
        scalar = mask.astype(np.float64)

    return ScanDataset(image=image, scalar_map=scalar, patch_size=patch_size, noise_std=noise_std)
