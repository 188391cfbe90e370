"""Differentiable training objective: local correlation, smoothness, soft Dice.

The *_tensor functions take batched torch tensors shaped (N, C, X, Y, Z) and
participate in autograd; thin wrappers expose the same math on Volume,
SegMask, and VectorField values, evaluated in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import torch
import torch.nn.functional as F

from attnreg.fieldops import VectorField
from attnreg.volume import SegMask, Volume

Scalar = Union[float, torch.Tensor]


@dataclass(frozen=True)
class LossWeights:
    """Weights and knobs of the training objective.

    total = similarity_affine * affine_sim + similarity_deform * deform_sim
          + smooth * smooth_term + seg_affine * affine_seg + seg_deform * deform_seg
    """

    similarity_affine: float = 0.3
    similarity_deform: float = 0.7
    smooth: float = 0.001
    seg_affine: float = 0.01
    seg_deform: float = 0.1
    window: int = 9
    epsilon: float = 1e-5

    def validate(self) -> None:
        for name in ("similarity_affine", "similarity_deform", "smooth", "seg_affine", "seg_deform"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be an odd integer >= 3, got {self.window}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


@dataclass(frozen=True)
class LossBreakdown:
    """Individual objective terms plus their weighted total.

    Fields are floats or 0-dim torch tensors depending on what produced them.
    """

    affine_sim: Scalar
    deform_sim: Scalar
    smooth: Scalar
    affine_seg: Scalar
    deform_seg: Scalar
    total: Scalar


def _box_sum(x: torch.Tensor, n: int) -> torch.Tensor:
    """Zero-padded separable sum over an n^3 neighborhood."""
    k = torch.ones(1, 1, n, 1, 1, dtype=x.dtype, device=x.device)
    x = F.conv3d(x, k, padding=(n // 2, 0, 0))
    x = F.conv3d(x, k.reshape(1, 1, 1, n, 1), padding=(0, n // 2, 0))
    x = F.conv3d(x, k.reshape(1, 1, 1, 1, n), padding=(0, 0, n // 2))
    return x


def lncc_tensor(f: torch.Tensor, w: torch.Tensor, n: int = 9, eps: float = 1e-5) -> torch.Tensor:
    """Mean squared local correlation over n^3 windows, in [0, 1].

    Window statistics are computed over the in-volume voxels of each window
    (borders shrink the window), via box sums of f, w, f*f, w*w, f*w and a
    matching voxel count.  Constant windows score ~0 through the epsilon
    in the denominator.
    """
    if f.shape != w.shape or f.dim() != 5 or f.shape[1] != 1:
        raise ValueError(f"shapes must match as (N, 1, X, Y, Z): {tuple(f.shape)} vs {tuple(w.shape)}")
    if n < 3 or n % 2 == 0:
        raise ValueError(f"window must be an odd integer >= 3, got {n}")
    ones = torch.ones_like(f)
    cnt = _box_sum(ones, n)
    sf = _box_sum(f, n)
    sw = _box_sum(w, n)
    sff = _box_sum(f * f, n)
    sww = _box_sum(w * w, n)
    sfw = _box_sum(f * w, n)
    cov = sfw - sf * sw / cnt
    var_f = (sff - sf * sf / cnt).clamp_min(0.0)
    var_w = (sww - sw * sw / cnt).clamp_min(0.0)
    cc = cov * cov / (var_f * var_w + eps)
    return cc.mean()


def smoothness_tensor(u: torch.Tensor) -> torch.Tensor:
    """Diffusion penalty: mean squared forward difference of u along each axis.

    Channel contributions are summed, positions averaged per axis, and the
    three axis means added, so a unit-slope displacement scores exactly 1.
    """
    if u.dim() != 5 or u.shape[1] != 3:
        raise ValueError(f"u must be (N, 3, X, Y, Z), got {tuple(u.shape)}")
    total = None
    for axis in (2, 3, 4):
        if u.shape[axis] < 2:
            raise ValueError(f"dims {tuple(u.shape[2:])} too small for differences")
        d = torch.diff(u, dim=axis)
        term = d.pow(2).sum(dim=1).mean()
        total = term if total is None else total + term
    return total


def dice_loss_tensor(f_seg: torch.Tensor, w_seg: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Soft Dice loss 1 - (2 sum(f*w) + eps) / (sum f + sum w + eps), per
    sample, averaged over the batch."""
    if f_seg.shape != w_seg.shape:
        raise ValueError(f"shapes must match: {tuple(f_seg.shape)} vs {tuple(w_seg.shape)}")
    inter = (f_seg * w_seg).flatten(1).sum(dim=1)
    sums = f_seg.flatten(1).sum(dim=1) + w_seg.flatten(1).sum(dim=1)
    return (1.0 - (2.0 * inter + eps) / (sums + eps)).mean()


def _as_batch(v: Volume | SegMask) -> torch.Tensor:
    return torch.from_numpy(v.data).double().reshape(1, 1, *v.data.shape)


def lncc(f: Volume, w: Volume, n: int = 9, eps: float = 1e-5) -> float:
    """Local normalized cross-correlation of two volumes (squared form)."""
    if f.dims != w.dims:
        raise ValueError(f"dims {f.dims} do not match {w.dims}")
    return float(lncc_tensor(_as_batch(f), _as_batch(w), n, eps))


def similarity_losses(f: Volume, m_a: Volume, m_d: Volume, n: int = 9, eps: float = 1e-5) -> tuple[float, float]:
    """Negated similarity of the fixed volume with each warped volume."""
    return -lncc(f, m_a, n, eps), -lncc(f, m_d, n, eps)


def smoothness(u: VectorField) -> float:
    """Diffusion penalty of a displacement field."""
    t = torch.from_numpy(u.data).double().unsqueeze(0)
    return float(smoothness_tensor(t))


def dice_loss(f_seg: SegMask, w_seg: Volume | SegMask, eps: float = 1e-5) -> float:
    """Soft Dice loss between a binary mask and a (possibly soft) warped mask."""
    if f_seg.dims != w_seg.dims:
        raise ValueError(f"dims {f_seg.dims} do not match {w_seg.dims}")
    return float(dice_loss_tensor(_as_batch(f_seg), _as_batch(w_seg), eps))


def _check_finite(name: str, value: Scalar) -> None:
    if isinstance(value, torch.Tensor):
        ok = bool(torch.isfinite(value).all())
    else:
        ok = math.isfinite(value)
    if not ok:
        raise ValueError(f"non-finite loss term {name}: {value}")


def total_loss(
    affine_sim: Scalar,
    deform_sim: Scalar,
    smooth_term: Scalar,
    affine_seg: Scalar = 0.0,
    deform_seg: Scalar = 0.0,
    weights: LossWeights | None = None,
    masks_available: bool = True,
) -> LossBreakdown:
    """Weighted sum of the objective terms.

    Without masks the segmentation terms are recorded as zero and contribute
    nothing, so the recorded total always equals the weighted recombination
    of the recorded parts.
    """
    w = weights or LossWeights()
    w.validate()
    parts = {
        "affine_sim": affine_sim,
        "deform_sim": deform_sim,
        "smooth": smooth_term,
        "affine_seg": affine_seg,
        "deform_seg": deform_seg,
    }
    for name, value in parts.items():
        _check_finite(name, value)
    if not masks_available:
        affine_seg = affine_seg * 0.0
        deform_seg = deform_seg * 0.0
    total = (
        w.similarity_affine * affine_sim
        + w.similarity_deform * deform_sim
        + w.smooth * smooth_term
        + w.seg_affine * affine_seg
        + w.seg_deform * deform_seg
    )
    return LossBreakdown(
        affine_sim=affine_sim,
        deform_sim=deform_sim,
        smooth=smooth_term,
        affine_seg=affine_seg,
        deform_seg=deform_seg,
        total=total,
    )
