"""Evaluation metrics: overlap scores, surface distance, staged reports.

The warped mask is treated as the prediction and the fixed mask as the
reference: precision = |f & w| / |w| and recall = |f & w| / |f|.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from attnreg.fieldops import JacobianStats, VectorField, jacobian_stats, warp
from attnreg.volume import SegMask, Volume

STAGES = ("initial", "affine", "final")


@dataclass(frozen=True)
class OverlapMetrics:
    """Voxel overlap scores; degenerate marks an empty-denominator case."""

    dice: float
    prec: float
    rec: float
    degenerate: bool = False


@dataclass(frozen=True)
class EvalReport:
    """All metrics for one registration stage of one pair."""

    stage: str
    dice: float
    prec: float
    rec: float
    assd_mm: float
    jac: JacobianStats | None = None
    degenerate: bool = False


def overlap_metrics(f_seg: SegMask, w_seg: SegMask) -> OverlapMetrics:
    """Dice, precision, and recall of a warped mask against the fixed mask."""
    if f_seg.dims != w_seg.dims:
        raise ValueError(f"dims {f_seg.dims} do not match {w_seg.dims}")
    f = f_seg.data > 0.5
    w = w_seg.data > 0.5
    tp = float(np.count_nonzero(f & w))
    nf = float(np.count_nonzero(f))
    nw = float(np.count_nonzero(w))
    degenerate = nf == 0 or nw == 0
    prec = tp / nw if nw > 0 else 0.0
    rec = tp / nf if nf > 0 else 0.0
    dice = 2.0 * tp / (nf + nw) if nf + nw > 0 else 0.0
    return OverlapMetrics(dice=dice, prec=prec, rec=rec, degenerate=degenerate)


def _surface(mask: np.ndarray) -> np.ndarray:
    """Set voxels with an unset 6-neighbor, counting the volume border as unset."""
    m = mask > 0.5
    eroded = ndimage.binary_erosion(
        m, structure=ndimage.generate_binary_structure(3, 1), border_value=0
    )
    return m & ~eroded


def _surface_distances(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    """Distance in mm from each src surface voxel to the nearest dst surface voxel."""
    nearest = ndimage.distance_transform_edt(
        ~dst, sampling=spacing, return_distances=False, return_indices=True
    )
    pts = np.argwhere(src)
    chosen = nearest[:, pts[:, 0], pts[:, 1], pts[:, 2]].astype(np.float64)
    diff = (chosen - pts.T.astype(np.float64)) * np.asarray(spacing, dtype=np.float64).reshape(3, 1)
    return np.sqrt((diff**2).sum(axis=0))


def assd(a: SegMask, b: SegMask) -> float:
    """Average symmetric surface distance in millimeters.

    Surfaces use 6-connectivity; nearest distances come from an exact
    Euclidean distance transform.
    """
    if a.dims != b.dims:
        raise ValueError(f"dims {a.dims} do not match {b.dims}")
    if a.spacing != b.spacing:
        raise ValueError(f"spacing {a.spacing} does not match {b.spacing}")
    sa = _surface(a.data)
    sb = _surface(b.data)
    if not sa.any() or not sb.any():
        raise ValueError("assd needs two nonempty masks")
    da = _surface_distances(sa, sb, a.spacing)
    db = _surface_distances(sb, sa, a.spacing)
    return float((da.sum() + db.sum()) / (da.size + db.size))


def _warp_mask_nearest(m: SegMask, u: VectorField) -> SegMask:
    out = warp(Volume(m.data, m.spacing), u, mode="nearest")
    return SegMask(out.data, m.spacing)


def _extent_mm(m: SegMask) -> float:
    return math.sqrt(sum(((n - 1) * s) ** 2 for n, s in zip(m.dims, m.spacing)))


def evaluate_stage(
    f_seg: SegMask,
    m_seg: SegMask,
    chain: Sequence[VectorField],
    stage: str,
) -> EvalReport:
    """Warp the moving mask through a displacement chain and score it.

    The chain is applied left to right with nearest-neighbor sampling, so
    [affine] gives the affine stage and [affine, deformable] the final stage.
    Jacobian statistics are computed only at the final stage, on the last
    (deformable) field.  If the warped mask comes out empty, overlap scores
    are zero and the grid diagonal is reported as a worst-case distance.
    """
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")
    warped = m_seg
    for u in chain:
        warped = _warp_mask_nearest(warped, u)
    overlap = overlap_metrics(f_seg, warped)
    if overlap.degenerate:
        assd_mm = _extent_mm(f_seg)
    else:
        assd_mm = assd(f_seg, warped)
    jac = None
    if stage == "final" and len(chain) > 0:
        jac = jacobian_stats(chain[-1])
    return EvalReport(
        stage=stage,
        dice=overlap.dice,
        prec=overlap.prec,
        rec=overlap.rec,
        assd_mm=assd_mm,
        jac=jac,
        degenerate=overlap.degenerate,
    )
