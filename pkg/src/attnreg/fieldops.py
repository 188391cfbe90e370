"""Vector field math: affine maps, warping, composition, exponentiation, Jacobians.

Displacements are stored in voxel units.  A displacement field u defines the
map phi(x) = x + u(x); warping pulls values from the input grid, so
out(x) = in(x + u(x)) with border clamping for out-of-range samples.

The *_tensor functions operate on batched torch tensors shaped (N, C, X, Y, Z)
and are differentiable; the dataclass-level functions wrap single fields held
in numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from attnreg.volume import Volume, _read_volr, _write_volr


@dataclass(frozen=True)
class AffineParams:
    """12 reals, row-major [A|t], acting on coordinates normalized to [-1, 1].

    The identity element is A = I, t = 0.
    """

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if values.shape != (12,):
            raise ValueError(f"affine parameters must have 12 entries, got {values.shape}")
        if not np.isfinite(values).all():
            raise ValueError("affine parameters must be finite")
        object.__setattr__(self, "values", values)

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls(np.array([1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0], dtype=np.float64))

    @property
    def matrix(self) -> np.ndarray:
        """The 3x4 matrix [A|t]."""
        return self.values.reshape(3, 4)


FIELD_KINDS = ("velocity", "displacement")


@dataclass(frozen=True)
class VectorField:
    """A 3-channel 3D grid of per-voxel vectors in voxel units.

    Attributes:
        data: float32 array of shape (3, nx, ny, nz).
        kind: "velocity" for fields meant to be exponentiated,
            "displacement" for fields applied directly by warp.
    """

    data: np.ndarray
    kind: str = "displacement"

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 4 or data.shape[0] != 3:
            raise ValueError(f"field data must have shape (3, nx, ny, nz), got {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("field values must be finite")
        if self.kind not in FIELD_KINDS:
            raise ValueError(f"kind must be one of {FIELD_KINDS}, got {self.kind!r}")
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape[1:])


@dataclass(frozen=True)
class JacobianStats:
    """Determinant summary of phi(x) = x + u(x) over the full grid."""

    nonpos_count: int
    nonpos_percent: float
    det_map: Volume


def save_field(field: VectorField, path, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write a VectorField as a `.volr` pair with a channel count of 3."""
    _write_volr(path, field.data, spacing, channels=3)


def load_field(path, kind: str = "displacement") -> VectorField:
    """Read a 3-channel `.volr` pair written by save_field."""
    data, _, channels = _read_volr(path)
    if channels != 3:
        raise ValueError(f"{path}: expected 3 channels, got {channels}")
    return VectorField(data, kind)


def base_grid(dims, dtype=torch.float32, device=None) -> torch.Tensor:
    """Voxel index grid of shape (3, nx, ny, nz)."""
    axes = [torch.arange(n, dtype=dtype, device=device) for n in dims]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"))


def warp_tensor(vol: torch.Tensor, disp: torch.Tensor, mode: str = "linear") -> torch.Tensor:
    """Sample vol at x + disp(x) per voxel; out-of-range samples clamp to the border.

    vol is (N, C, X, Y, Z) and disp is (N, 3, X, Y, Z).  Linear mode is
    trilinear and differentiable in both arguments; sampling at exact integer
    coordinates reproduces the input values bit-exactly.
    """
    if mode not in ("linear", "nearest"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    if vol.dim() != 5 or disp.dim() != 5 or disp.shape[1] != 3:
        raise ValueError(f"bad shapes: vol {tuple(vol.shape)}, disp {tuple(disp.shape)}")
    if vol.shape[0] != disp.shape[0] or vol.shape[2:] != disp.shape[2:]:
        raise ValueError(f"vol dims {tuple(vol.shape)} do not match disp {tuple(disp.shape)}")
    n, c = vol.shape[:2]
    dims = vol.shape[2:]
    grid = base_grid(dims, disp.dtype, disp.device)
    pos = disp + grid
    flat = vol.reshape(n, c, -1)
    if mode == "nearest":
        idx = [
            (pos[:, i] + 0.5).floor().long().clamp_(0, dims[i] - 1) for i in range(3)
        ]
        lin = (idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]
        out = flat.gather(2, lin.reshape(n, 1, -1).expand(-1, c, -1))
        return out.reshape(vol.shape)
    low = pos.floor()
    frac = pos - low
    low = low.long()
    x0, y0, z0 = low[:, 0], low[:, 1], low[:, 2]
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    out = torch.zeros_like(vol)
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        cx = (x0 + dx).clamp(0, dims[0] - 1)
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            cy = (y0 + dy).clamp(0, dims[1] - 1)
            for dz in (0, 1):
                wz = fz if dz else 1.0 - fz
                cz = (z0 + dz).clamp(0, dims[2] - 1)
                lin = (cx * dims[1] + cy) * dims[2] + cz
                vals = flat.gather(2, lin.reshape(n, 1, -1).expand(-1, c, -1))
                w = (wx * wy * wz).reshape(n, 1, -1)
                out = out + (vals * w).reshape(vol.shape)
    return out


def compose_tensor(outer: torch.Tensor, inner: torch.Tensor) -> torch.Tensor:
    """Displacement of (id + outer) o (id + inner): inner(x) + outer(x + inner(x))."""
    return inner + warp_tensor(outer, inner, mode="linear")


def exponentiate_tensor(vel: torch.Tensor, steps: int = 7) -> torch.Tensor:
    """Scaling-and-squaring exponential of a stationary velocity field.

    The field is scaled by 2**-steps and self-composed steps times.
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    u = vel * (0.5 ** steps)
    for _ in range(steps):
        u = compose_tensor(u, u)
    return u


def affine_displacement_tensor(params: torch.Tensor, dims) -> torch.Tensor:
    """Dense displacement of the normalized-coordinate affine map [A|t].

    params is (N, 12), row-major [A|t].  Voxel index x maps to xi = (x - c) / c
    with c = (n - 1) / 2 per axis; the map xi -> A xi + t is then converted
    back to voxel units:

        u_i(x) = sum_j (A_ij - I_ij) (x_j - c_j) c_i / c_j + t_i c_i

    which is exactly zero at the identity parameters.
    """
    if params.dim() != 2 or params.shape[1] != 12:
        raise ValueError(f"params must be (N, 12), got {tuple(params.shape)}")
    n = params.shape[0]
    dtype, device = params.dtype, params.device
    mat = params.reshape(n, 3, 4)
    lin = mat[:, :, :3]
    trans = mat[:, :, 3]
    half = [max((d - 1) / 2.0, 0.0) for d in dims]
    # A singleton axis has no usable extent; its centered coordinate is 0,
    # so a placeholder denominator keeps the arithmetic finite.
    denom = [h if h > 0 else 1.0 for h in half]
    c_num = torch.tensor(half, dtype=dtype, device=device)
    c_den = torch.tensor(denom, dtype=dtype, device=device)
    grid = base_grid(dims, dtype, device)
    centered = grid - c_num.reshape(3, 1, 1, 1)
    coeff = (lin - torch.eye(3, dtype=dtype, device=device)) * (
        c_num.reshape(3, 1) / c_den.reshape(1, 3)
    )
    u = torch.einsum("nij,jxyz->nixyz", coeff, centered)
    return u + (trans * c_num).reshape(n, 3, 1, 1, 1)


def jacobian_det_tensor(disp: torch.Tensor) -> torch.Tensor:
    """Determinant of J(x) = I + grad u(x) per voxel, shape (N, X, Y, Z).

    Derivatives use central differences in the interior and one-sided
    differences on the faces; the determinant is a 3x3 cofactor expansion.
    """
    if disp.dim() != 5 or disp.shape[1] != 3:
        raise ValueError(f"disp must be (N, 3, X, Y, Z), got {tuple(disp.shape)}")
    rows = []
    for i in range(3):
        gx, gy, gz = torch.gradient(disp[:, i], dim=(1, 2, 3), edge_order=1)
        rows.append((gx, gy, gz))
    j00 = rows[0][0] + 1.0
    j01, j02 = rows[0][1], rows[0][2]
    j10, j11, j12 = rows[1][0], rows[1][1] + 1.0, rows[1][2]
    j20, j21, j22 = rows[2][0], rows[2][1], rows[2][2] + 1.0
    return (
        j00 * (j11 * j22 - j12 * j21)
        - j01 * (j10 * j22 - j12 * j20)
        + j02 * (j10 * j21 - j11 * j20)
    )


def _single(field: VectorField) -> torch.Tensor:
    return torch.from_numpy(field.data).unsqueeze(0)


def affine_to_displacement(p: AffineParams, dims) -> VectorField:
    """Dense displacement field realizing the affine map on a grid of dims."""
    dims = tuple(int(n) for n in dims)
    params = torch.from_numpy(p.values).reshape(1, 12)
    u = affine_displacement_tensor(params, dims)[0]
    return VectorField(u.numpy().astype(np.float32), kind="displacement")


def warp(v: Volume, u: VectorField, mode: str = "linear") -> Volume:
    """Warp a volume by a displacement field: out(x) = v(x + u(x))."""
    if u.kind != "displacement":
        raise ValueError(f"warp needs a displacement field, got kind {u.kind!r}")
    if v.dims != u.dims:
        raise ValueError(f"volume dims {v.dims} do not match field dims {u.dims}")
    vol = torch.from_numpy(v.data).reshape(1, 1, *v.dims)
    out = warp_tensor(vol, _single(u), mode=mode)
    return Volume(out[0, 0].numpy(), v.spacing)


def compose(u1: VectorField, u2: VectorField) -> VectorField:
    """Displacement with (id + u) = (id + u1) o (id + u2)."""
    if u1.kind != "displacement" or u2.kind != "displacement":
        raise ValueError("compose needs displacement fields")
    if u1.dims != u2.dims:
        raise ValueError(f"field dims {u1.dims} do not match {u2.dims}")
    out = compose_tensor(_single(u1), _single(u2))
    return VectorField(out[0].numpy(), kind="displacement")


def exponentiate(v: VectorField, steps: int = 7) -> VectorField:
    """Exponentiate a velocity field into a displacement field."""
    if v.kind != "velocity":
        raise ValueError(f"exponentiate needs a velocity field, got kind {v.kind!r}")
    out = exponentiate_tensor(_single(v), steps)
    return VectorField(out[0].numpy(), kind="displacement")


def jacobian_stats(u: VectorField) -> JacobianStats:
    """Jacobian-determinant map and non-positive counts over all voxels."""
    if u.kind != "displacement":
        raise ValueError(f"jacobian_stats needs a displacement field, got {u.kind!r}")
    if any(n < 3 for n in u.dims):
        raise ValueError(f"dims {u.dims} too small; every axis needs >= 3 voxels")
    det = jacobian_det_tensor(torch.from_numpy(u.data).double().unsqueeze(0))[0]
    det = det.numpy()
    total = det.size
    count = int((det <= 0.0).sum())
    return JacobianStats(
        nonpos_count=count,
        nonpos_percent=100.0 * count / total,
        det_map=Volume(det.astype(np.float32)),
    )
