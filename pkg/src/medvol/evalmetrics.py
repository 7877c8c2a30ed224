"""Volumetric overlap metrics.

Both metrics score an empty prediction against an empty ground truth as 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from medvol.volmask import VoxelMask

SliceRange = tuple[int, int]


@dataclass(frozen=True)
class MetricReport:
    dsc: float
    iou: float
    tp: int
    fp: int
    fn: int

    def to_dict(self) -> dict:
        return {"dsc": self.dsc, "iou": self.iou, "tp": self.tp, "fp": self.fp, "fn": self.fn}


def _restricted(pred: VoxelMask, gt: VoxelMask, restriction: SliceRange | None):
    if pred.dims != gt.dims:
        raise ValueError(f"mask dims differ: {pred.dims} vs {gt.dims}")
    if restriction is None:
        return pred.bits, gt.bits
    lo, hi = restriction
    lo, hi = max(0, int(lo)), min(gt.depth, int(hi))
    return pred.bits[lo:hi], gt.bits[lo:hi]


def confusion(pred: VoxelMask, gt: VoxelMask, restriction: SliceRange | None = None) -> tuple[int, int, int]:
    """``(tp, fp, fn)`` voxel counts, optionally over slices ``[lo, hi)`` only."""
    p, g = _restricted(pred, gt, restriction)
    tp = int(np.count_nonzero(p & g))
    return tp, int(np.count_nonzero(p)) - tp, int(np.count_nonzero(g)) - tp


def _dice(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def _iou(tp: int, fp: int, fn: int) -> float:
    denom = tp + fp + fn
    return 1.0 if denom == 0 else tp / denom


def dice(pred: VoxelMask, gt: VoxelMask, restriction: SliceRange | None = None) -> float:
    return _dice(*confusion(pred, gt, restriction))


def iou_volumetric(pred: VoxelMask, gt: VoxelMask, restriction: SliceRange | None = None) -> float:
    return _iou(*confusion(pred, gt, restriction))


def evaluate(pred: VoxelMask, gt: VoxelMask, restriction: SliceRange | None = None) -> MetricReport:
    tp, fp, fn = confusion(pred, gt, restriction)
    return MetricReport(_dice(tp, fp, fn), _iou(tp, fp, fn), tp, fp, fn)
