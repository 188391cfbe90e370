"""Input builders shared across test modules (not reference implementations)."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from attnreg.fieldops import VectorField
from attnreg.networks import NetworkConfig
from attnreg.volume import SegMask, Volume


def make_volume(rng: np.random.Generator, dims, spacing=(1.0, 1.0, 1.0)) -> Volume:
    return Volume(rng.random(dims, dtype=np.float32), spacing)


def make_blob_mask(rng: np.random.Generator, dims, spacing=(1.0, 1.0, 1.0)) -> SegMask:
    """A nonempty random ellipsoid mask."""
    dims = tuple(int(n) for n in dims)
    extent = np.array(dims, dtype=np.float64)
    center = extent / 2.0 + rng.uniform(-0.15, 0.15, size=3) * extent
    radii = rng.uniform(0.18, 0.35, size=3) * extent
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij"))
    dist = (((grid - center.reshape(3, 1, 1, 1)) / radii.reshape(3, 1, 1, 1)) ** 2).sum(axis=0)
    data = (dist <= 1.0).astype(np.float32)
    if not data.any():
        data[tuple(int(c) % n for c, n in zip(center, dims))] = 1.0
    return SegMask(data, spacing)


def make_smooth_field(
    rng: np.random.Generator,
    dims,
    amplitude: float,
    smoothness: float = 2.0,
    kind: str = "displacement",
) -> VectorField:
    """Gaussian-filtered noise scaled so the peak magnitude equals amplitude."""
    chans = [ndimage.gaussian_filter(rng.standard_normal(dims), smoothness) for _ in range(3)]
    v = np.stack(chans)
    peak = float(np.abs(v).max())
    if peak > 0 and amplitude > 0:
        v = v * (amplitude / peak)
    elif amplitude == 0:
        v = np.zeros_like(v)
    return VectorField(v.astype(np.float32), kind=kind)


def tiny_network() -> NetworkConfig:
    """Smallest legal configuration, used where speed matters more than capacity."""
    return NetworkConfig(
        affine_stages=2,
        affine_base_channels=4,
        affine_max_channels=8,
        encoder_levels=2,
        encoder_base_channels=4,
        token_dim=8,
        tem_layers=1,
        attention_heads=2,
        mlp_ratio=2,
    )
