"""PNG renderings of displacement fields and volume slices.

For the middle transversal (x-y) and sagittal (y-z) planes: an RGB image
mapping the three displacement channels to color around mid-gray, a regular
grid image warped by the field, and an optional intensity montage.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from attnreg.fieldops import VectorField
from attnreg.volume import Volume

PLANES = ("transversal", "sagittal")
LEGEND_HEIGHT = 16


def _plane_slice(data: np.ndarray, plane: str) -> np.ndarray:
    """Middle slice of a (..., nx, ny, nz) array; returns (..., a, b)."""
    if plane == "transversal":
        return data[..., :, :, data.shape[-1] // 2]
    if plane == "sagittal":
        return data[..., data.shape[-3] // 2, :, :]
    raise ValueError(f"plane must be one of {PLANES}, got {plane!r}")


def _in_plane_channels(plane: str) -> tuple[int, int]:
    return (0, 1) if plane == "transversal" else (1, 2)


def _to_image(plane_array: np.ndarray, upscale: int) -> Image.Image:
    """uint8 array (a, b) or (a, b, 3) with axis a horizontal, upscaled."""
    arr = np.swapaxes(plane_array, 0, 1)
    img = Image.fromarray(arr)
    return img.resize((img.width * upscale, img.height * upscale), Image.NEAREST)


def field_range(field: VectorField) -> float:
    """Symmetric display range: the 99th percentile of the field magnitudes."""
    mags = np.abs(field.data)
    r = float(np.percentile(mags, 99.0))
    return r if r > 0 else 1.0


def field_rgb_image(field: VectorField, plane: str, upscale: int = 4) -> Image.Image:
    """Displacement channels as RGB around mid-gray, with a range legend."""
    r = field_range(field)
    u = _plane_slice(field.data, plane)
    rgb = np.clip(np.rint(127.5 + 127.5 * u / r), 0, 255).astype(np.uint8)
    img = _to_image(np.moveaxis(rgb, 0, -1), upscale)
    canvas = Image.new("RGB", (img.width, img.height + LEGEND_HEIGHT), "white")
    canvas.paste(img, (0, 0))
    draw = ImageDraw.Draw(canvas)
    draw.text((2, img.height + 2), f"range +/-{r:.4g} voxels", fill="black")
    return canvas


def _sample_bilinear(img: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    na, nb = img.shape
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(int)
    y0 = y0.astype(int)
    out = np.zeros_like(px)
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        cx = np.clip(x0 + dx, 0, na - 1)
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            cy = np.clip(y0 + dy, 0, nb - 1)
            out += img[cx, cy] * wx * wy
    return out


def field_grid_image(
    field: VectorField, plane: str, upscale: int = 4, line_every: int = 4
) -> Image.Image:
    """A regular grid (every line_every-th line) pulled through the field."""
    ca, cb = _in_plane_channels(plane)
    ua = _plane_slice(field.data[ca], plane)
    ub = _plane_slice(field.data[cb], plane)
    na, nb = ua.shape
    ia, ib = np.meshgrid(np.arange(na), np.arange(nb), indexing="ij")
    base = np.where((ia % line_every == 0) | (ib % line_every == 0), 0.0, 1.0)
    warped = _sample_bilinear(base, ia + ua, ib + ub)
    gray = np.clip(np.rint(warped * 255.0), 0, 255).astype(np.uint8)
    return _to_image(gray, upscale)


def volume_montage(
    volumes: Sequence[tuple[str, Volume]], plane: str, upscale: int = 4
) -> Image.Image:
    """Side-by-side grayscale slices with name captions."""
    tiles = []
    for name, vol in volumes:
        sl = _plane_slice(vol.data, plane)
        gray = np.clip(np.rint(sl * 255.0), 0, 255).astype(np.uint8)
        tiles.append((name, _to_image(gray, upscale)))
    sep = 2
    width = sum(t.width for _, t in tiles) + sep * (len(tiles) - 1)
    height = max(t.height for _, t in tiles) + LEGEND_HEIGHT
    canvas = Image.new("L", (width, height), 255)
    draw = ImageDraw.Draw(canvas)
    x = 0
    for name, tile in tiles:
        canvas.paste(tile, (x, 0))
        draw.text((x + 2, tile.height + 2), name, fill=0)
        x += tile.width + sep
    return canvas


def write_visualizations(
    field: VectorField,
    out_dir: str | Path,
    volumes: Sequence[tuple[str, Volume]] | None = None,
    upscale: int = 4,
) -> list[Path]:
    """Write the RGB, grid, and optional montage images for both planes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for plane in PLANES:
        p = out / f"field_rgb_{plane}.png"
        field_rgb_image(field, plane, upscale).save(p)
        written.append(p)
        p = out / f"field_grid_{plane}.png"
        field_grid_image(field, plane, upscale).save(p)
        written.append(p)
        if volumes:
            p = out / f"montage_{plane}.png"
            volume_montage(volumes, plane, upscale).save(p)
            written.append(p)
    return written
