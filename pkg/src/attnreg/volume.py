"""Volume and mask containers, .volr file I/O, and preprocessing operations.

A volume is a dense 3D scalar grid with per-axis voxel spacing in
millimeters.  Arrays are indexed ``[ix, iy, iz]``; on disk the raw payload
is little-endian float32 with the x index varying fastest, then y, then z.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage


def _first_nonfinite_index(data: np.ndarray) -> tuple[int, int, int] | None:
    """Return (ix, iy, iz) of the first non-finite voxel in file order, if any."""
    finite = np.isfinite(data)
    if finite.all():
        return None
    # File order is x fastest, then y, then z.
    flat = np.ascontiguousarray(np.transpose(~finite, (2, 1, 0))).reshape(-1)
    lin = int(np.argmax(flat))
    nx, ny, _ = data.shape
    iz, rem = divmod(lin, nx * ny)
    iy, ix = divmod(rem, nx)
    return (ix, iy, iz)


def _check_grid(data: np.ndarray, spacing) -> tuple[np.ndarray, tuple[float, float, float]]:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 3 or any(n < 1 for n in data.shape):
        raise ValueError(f"grid data must be 3D with positive dims, got shape {data.shape}")
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(not math.isfinite(s) or s <= 0 for s in spacing):
        raise ValueError(f"spacing must be 3 positive finite reals, got {spacing}")
    bad = _first_nonfinite_index(data)
    if bad is not None:
        raise ValueError(f"non-finite value at voxel {bad}")
    return data, spacing


@dataclass(frozen=True)
class Volume:
    """A 3D scalar grid with voxel spacing in millimeters.

    Attributes:
        data: float32 array of shape (nx, ny, nz), indexed [ix, iy, iz].
        spacing: (sx, sy, sz) millimeters per voxel, all strictly positive.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data, spacing = _check_grid(self.data, self.spacing)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)


@dataclass(frozen=True)
class SegMask:
    """A binary 3D grid aligned with a Volume; values restricted to {0, 1}."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data, spacing = _check_grid(self.data, self.spacing)
        if not np.all((data == 0.0) | (data == 1.0)):
            raise ValueError("mask values must all be 0 or 1")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def count(self) -> int:
        """Number of set voxels."""
        return int(self.data.sum())


def _volr_paths(path: str | Path) -> tuple[Path, Path]:
    """Resolve a .volr base name to its (sidecar, raw) file pair."""
    p = Path(path)
    if p.suffix in (".json", ".raw", ".volr"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".raw")


def _write_volr(path: str | Path, data: np.ndarray, spacing, channels: int | None) -> None:
    """Write a scalar (channels=None) or channel-major multichannel grid.

    The raw payload is little-endian float32 in x-fastest order; a
    multichannel payload stores all of channel 0, then channel 1, and so on.
    """
    json_path, raw_path = _volr_paths(path)
    if channels is None:
        dims = data.shape
        payload = np.ascontiguousarray(data.transpose(2, 1, 0), dtype="<f4")
    else:
        dims = data.shape[1:]
        payload = np.ascontiguousarray(data.transpose(0, 3, 2, 1), dtype="<f4")
    meta = {
        "dims": [int(n) for n in dims],
        "spacing": [float(s) for s in spacing],
        "dtype": "f32le",
        "data": raw_path.name,
    }
    if channels is not None:
        meta["channels"] = int(channels)
    raw_path.write_bytes(payload.tobytes())
    json_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _read_volr(path: str | Path) -> tuple[np.ndarray, tuple[float, float, float], int | None]:
    """Read a .volr pair; returns (data, spacing, channels).

    Scalar grids come back as (nx, ny, nz); multichannel grids as
    (channels, nx, ny, nz).
    """
    json_path, _ = _volr_paths(path)
    if not json_path.exists():
        raise FileNotFoundError(f"missing sidecar file {json_path}")
    meta = json.loads(json_path.read_text())
    for key in ("dims", "spacing", "dtype", "data"):
        if key not in meta:
            raise ValueError(f"{json_path}: sidecar missing field {key!r}")
    if meta["dtype"] != "f32le":
        raise ValueError(f"{json_path}: unsupported dtype {meta['dtype']!r}")
    dims = tuple(int(n) for n in meta["dims"])
    if len(dims) != 3 or any(n < 1 for n in dims):
        raise ValueError(f"{json_path}: bad dims {meta['dims']}")
    spacing = tuple(float(s) for s in meta["spacing"])
    channels = meta.get("channels")
    if channels is not None:
        channels = int(channels)
        if channels < 1:
            raise ValueError(f"{json_path}: bad channel count {channels}")
    raw_path = json_path.parent / meta["data"]
    if not raw_path.exists():
        raise FileNotFoundError(f"missing raw payload {raw_path}")
    raw = raw_path.read_bytes()
    count = dims[0] * dims[1] * dims[2] * (1 if channels is None else channels)
    if len(raw) != 4 * count:
        raise ValueError(
            f"{raw_path}: payload length mismatch, expected {4 * count} bytes "
            f"for dims {dims}, got {len(raw)}"
        )
    flat = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    if channels is None:
        data = flat.reshape(dims[2], dims[1], dims[0]).transpose(2, 1, 0)
    else:
        data = flat.reshape(channels, dims[2], dims[1], dims[0]).transpose(0, 3, 2, 1)
    return np.ascontiguousarray(data), spacing, channels


def save_volume(v: Volume, path: str | Path) -> None:
    """Write a Volume as a `.volr` pair (JSON sidecar plus raw payload).

    Args:
        v: the volume to write; must contain only finite values.
        path: base path; `.json` and `.raw` files are written next to it.
    """
    bad = _first_nonfinite_index(v.data)
    if bad is not None:
        raise ValueError(f"refusing to write non-finite value at voxel {bad}")
    _write_volr(path, v.data, v.spacing, channels=None)


def load_volume(path: str | Path) -> Volume:
    """Read a `.volr` pair written by save_volume.

    Args:
        path: the sidecar path, raw path, or their shared base name.

    Returns:
        The stored Volume, byte order converted to native.
    """
    data, spacing, channels = _read_volr(path)
    if channels is not None:
        raise ValueError(f"{path}: expected a scalar volume, found {channels} channels")
    return Volume(data, spacing)


def save_mask(m: SegMask, path: str | Path) -> None:
    """Write a SegMask in the same format as save_volume."""
    _write_volr(path, m.data, m.spacing, channels=None)


def load_mask(path: str | Path) -> SegMask:
    """Read a SegMask; rejects payloads with values outside {0, 1}."""
    data, spacing, channels = _read_volr(path)
    if channels is not None:
        raise ValueError(f"{path}: expected a scalar mask, found {channels} channels")
    return SegMask(data, spacing)


def resample_isotropic(v: Volume, target_spacing: float) -> Volume:
    """Resample a volume to isotropic spacing by trilinear interpolation.

    Output dims are ceil(n * s / t) per axis; samples outside the input grid
    clamp to the border.  Resampling at the source spacing is the identity.
    """
    t = float(target_spacing)
    if not math.isfinite(t) or t <= 0:
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    if v.spacing == (t, t, t):
        return Volume(v.data.copy(), v.spacing)
    if any(n < 2 for n in v.dims):
        raise ValueError(f"cannot interpolate dims {v.dims}; every axis needs >= 2 voxels")
    new_dims = tuple(int(math.ceil(n * s / t)) for n, s in zip(v.dims, v.spacing))
    # Output voxel i sits at physical i*t, i.e. input coordinate i*t/s.
    axes = [np.arange(n, dtype=np.float64) * t / s for n, s in zip(new_dims, v.spacing)]
    coords = np.meshgrid(*axes, indexing="ij")
    out = ndimage.map_coordinates(
        v.data.astype(np.float64), np.stack(coords), order=1, mode="nearest"
    )
    return Volume(out.astype(np.float32), (t, t, t))


def mask_and_crop(v: Volume, m: SegMask, out_dims: tuple[int, int, int]) -> tuple[Volume, SegMask]:
    """Zero intensities outside the mask and crop around the mask's bounding box.

    The crop window is centered on the bounding-box center of the set voxels
    and clamped to stay inside the volume.
    """
    if v.dims != m.dims:
        raise ValueError(f"volume dims {v.dims} do not match mask dims {m.dims}")
    out_dims = tuple(int(n) for n in out_dims)
    if len(out_dims) != 3 or any(o < 1 for o in out_dims):
        raise ValueError(f"bad output dims {out_dims}")
    if any(o > n for o, n in zip(out_dims, v.dims)):
        raise ValueError(f"output dims {out_dims} exceed volume dims {v.dims}")
    set_voxels = np.argwhere(m.data > 0.5)
    if set_voxels.size == 0:
        raise ValueError("empty mask: nothing to center the crop on")
    lo = set_voxels.min(axis=0)
    hi = set_voxels.max(axis=0)
    center = (lo + hi) / 2.0
    starts = []
    for c, o, n in zip(center, out_dims, v.dims):
        s = int(math.floor(c + 0.5)) - o // 2
        starts.append(min(max(s, 0), n - o))
    window = tuple(slice(s, s + o) for s, o in zip(starts, out_dims))
    masked = v.data * m.data
    return Volume(masked[window], v.spacing), SegMask(m.data[window], m.spacing)


def normalize_intensity(v: Volume) -> Volume:
    """Rescale intensities linearly so min maps to 0 and max to 1.

    Constant volumes map to all zeros.  The operation is idempotent.
    """
    lo = float(v.data.min())
    hi = float(v.data.max())
    if hi == lo:
        return Volume(np.zeros_like(v.data), v.spacing)
    return Volume((v.data - np.float32(lo)) / np.float32(hi - lo), v.spacing)
