"""Synthetic volume-pair generator used for training and evaluation.

Each pair consists of a smooth multi-blob "vertebra-like" moving volume and a
fixed volume produced by warping it with a known ground-truth displacement
(random affine composed with an exponentiated smooth stationary velocity
field).  Masks are the > 0.5 level sets of the underlying shape fields.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from attnreg.fieldops import (
    AffineParams,
    VectorField,
    affine_to_displacement,
    compose,
    exponentiate,
    jacobian_stats,
    warp,
)
from attnreg.volume import SegMask, Volume, normalize_intensity


@dataclass(frozen=True)
class SynthConfig:
    """Shape, texture, and deformation ranges for generate_pair."""

    blob_count: int = 5
    main_radius_range: tuple[float, float] = (0.30, 0.38)
    lobe_radius_range: tuple[float, float] = (0.12, 0.22)
    lobe_offset_frac: float = 0.28
    texture_amplitude: float = 0.35
    texture_smoothness: float = 1.5
    max_rotation_deg: float = 15.0
    max_translation_frac: float = 0.10
    scale_range: tuple[float, float] = (0.9, 1.1)
    velocity_amplitude: float = 2.5
    velocity_smoothness: float = 3.0
    integration_steps: int = 7
    min_mask_voxels: int = 32
    max_retries: int = 10
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class SyntheticPair:
    """A generated registration problem with known ground truth.

    fixed = warp(moving, ground_truth_field) by construction; the masks are
    level sets of the shape field before and after that warp.
    """

    fixed: Volume
    moving: Volume
    fixed_mask: SegMask
    moving_mask: SegMask
    ground_truth_field: VectorField
    seed: int


def _shape_field(rng: np.random.Generator, dims, config: SynthConfig) -> np.ndarray:
    """Smooth union of Gaussian lobes with value 0.5 on each lobe boundary."""
    extent = np.array(dims, dtype=np.float64)
    min_extent = float(extent.min())
    grid = np.stack(
        np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    )
    center = extent / 2.0
    miss = np.ones(dims, dtype=np.float64)
    for b in range(max(1, config.blob_count)):
        if b == 0:
            pos = center + rng.uniform(-0.04, 0.04, size=3) * extent
            radius = rng.uniform(*config.main_radius_range) * min_extent
        else:
            pos = center + rng.uniform(-1.0, 1.0, size=3) * config.lobe_offset_frac * extent
            radius = rng.uniform(*config.lobe_radius_range) * min_extent
        d2 = ((grid - pos.reshape(3, 1, 1, 1)) ** 2).sum(axis=0)
        lobe = np.exp(-d2 / (radius * radius) * math.log(2.0))
        miss *= 1.0 - lobe
    return 1.0 - miss


def _texture(rng: np.random.Generator, dims, config: SynthConfig) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.standard_normal(dims), config.texture_smoothness)
    lo, hi = float(noise.min()), float(noise.max())
    if hi == lo:
        return np.zeros(dims)
    return (noise - lo) / (hi - lo)


def _rotation(rx: float, ry: float, rz: float) -> np.ndarray:
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


def _random_affine(rng: np.random.Generator, dims, config: SynthConfig) -> AffineParams:
    """Random rotation/scale about the grid center plus translation, as
    normalized-coordinate parameters."""
    max_rot = math.radians(config.max_rotation_deg)
    angles = rng.uniform(-max_rot, max_rot, size=3)
    scales = rng.uniform(config.scale_range[0], config.scale_range[1], size=3)
    tau = rng.uniform(-1.0, 1.0, size=3) * config.max_translation_frac * np.array(dims)
    m = _rotation(*angles) * scales.reshape(1, 3)
    if np.array_equal(m, np.eye(3)) and not tau.any():
        return AffineParams.identity()
    c = np.array([(n - 1) / 2.0 for n in dims])
    a = m * (c.reshape(1, 3) / c.reshape(3, 1))
    t = tau / c
    return AffineParams(np.concatenate([a, t.reshape(3, 1)], axis=1).reshape(-1))


def _random_velocity(rng: np.random.Generator, dims, config: SynthConfig) -> VectorField:
    if config.velocity_amplitude == 0.0:
        return VectorField(np.zeros((3, *dims), dtype=np.float32), kind="velocity")
    chans = []
    for _ in range(3):
        noise = ndimage.gaussian_filter(rng.standard_normal(dims), config.velocity_smoothness)
        chans.append(noise)
    v = np.stack(chans)
    peak = float(np.abs(v).max())
    if peak > 0:
        v = v * (config.velocity_amplitude / peak)
    return VectorField(v.astype(np.float32), kind="velocity")


def generate_pair(seed: int, dims, config: SynthConfig | None = None) -> SyntheticPair:
    """Deterministically generate one synthetic registration pair.

    The ground-truth field composes a random affine (rotations, per-axis
    scales, translations) with an exponentiated smooth random velocity field.
    Draws producing a non-positive Jacobian determinant or pushing the shape
    off the grid are regenerated up to config.max_retries times.
    """
    config = config or SynthConfig()
    dims = tuple(int(n) for n in dims)
    if any(n < 8 for n in dims):
        raise ValueError(f"dims {dims} too small; every axis needs >= 8 voxels")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1)]))
    spacing = config.spacing

    shape = _shape_field(rng, dims, config)
    tex = _texture(rng, dims, config)
    amp = config.texture_amplitude
    moving = normalize_intensity(
        Volume((shape * (1.0 - amp + amp * tex)).astype(np.float32), spacing)
    )
    moving_mask = SegMask((shape > 0.5).astype(np.float32), spacing)
    if moving_mask.count() < config.min_mask_voxels:
        raise ValueError("shape configuration produced an almost empty mask")
    shape_vol = Volume(shape.astype(np.float32), spacing)

    last_fail = "no attempts made"
    for _ in range(max(1, config.max_retries)):
        params = _random_affine(rng, dims, config)
        velocity = _random_velocity(rng, dims, config)
        u_affine = affine_to_displacement(params, dims)
        u_deform = exponentiate(velocity, config.integration_steps)
        gt = compose(u_affine, u_deform)
        if jacobian_stats(gt).nonpos_count > 0:
            last_fail = "non-positive Jacobian determinant in the ground-truth field"
            continue
        warped_shape = warp(shape_vol, gt, mode="linear")
        fixed_mask_data = (warped_shape.data > 0.5).astype(np.float32)
        if int(fixed_mask_data.sum()) < config.min_mask_voxels:
            last_fail = "deformation pushed the shape off the grid"
            continue
        fixed = warp(moving, gt, mode="linear")
        return SyntheticPair(
            fixed=fixed,
            moving=moving,
            fixed_mask=SegMask(fixed_mask_data, spacing),
            moving_mask=moving_mask,
            ground_truth_field=gt,
            seed=int(seed),
        )
    raise RuntimeError(
        f"gave up after {config.max_retries} draws: {last_fail}; "
        "reduce the deformation amplitude or raise max_retries"
    )


def pair_seed(run_seed: int, index: int) -> int:
    """Stable per-pair seed derived from a run seed and a pair index."""
    ss = np.random.SeedSequence([int(run_seed) & (2**64 - 1), int(index)])
    return int(ss.generate_state(1, np.uint64)[0])
