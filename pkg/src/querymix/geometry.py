"""Axis-aligned boxes in normalized center-size form, IoU/GIoU and box losses.

Scalar helpers work on :class:`Box`; the ``*_rows`` variants work on
``k x 4`` Tensors so the regression losses stay differentiable, and the
``pairwise_*`` variants build dense numpy matrices for cost tables.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

# floor on predicted extents so sigmoid-squashed boxes never degenerate
MIN_EXTENT = 1e-4


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"degenerate box: w={self.w}, h={self.h} must both be positive")
        if not np.all(np.isfinite(self.as_array())):
            raise ValueError(f"box has non-finite coordinates: {self}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @classmethod
    def from_array(cls, arr) -> "Box":
        cx, cy, w, h = (float(v) for v in arr)
        return cls(cx, cy, w, h)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @property
    def area(self) -> float:
        return self.w * self.h


def _overlap_and_hull(a: Box, b: Box) -> tuple[float, float, float]:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    # areas from the same corners as the overlap, so identical boxes give exactly 1
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter, union, hull


def iou(a: Box, b: Box) -> float:
    inter, union, _ = _overlap_and_hull(a, b)
    return inter / union


def giou(a: Box, b: Box) -> float:
    inter, union, hull = _overlap_and_hull(a, b)
    return inter / union - (hull - union) / hull


def l1_box(a: Box, b: Box) -> float:
    return float(np.abs(a.as_array() - b.as_array()).sum())


# ---------------------------------------------------------------------------
# Vectorized numpy versions (no gradients)
# ---------------------------------------------------------------------------


def to_corners(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:] / 2
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def _validate(boxes: np.ndarray, what: str) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if np.any(boxes[:, 2:] <= 0):
        raise ValueError(f"{what} contains a degenerate (zero-area) box")
    return boxes


def pairwise_iou(a: np.ndarray, b: np.ndarray, with_giou: bool = False):
    """IoU (and optionally GIoU) between every row of ``a`` and every row of ``b``."""
    a, b = _validate(a, "a"), _validate(b, "b")
    ca, cb = to_corners(a)[:, None, :], to_corners(b)[None, :, :]
    lo = np.maximum(ca[..., :2], cb[..., :2])
    hi = np.minimum(ca[..., 2:], cb[..., 2:])
    inter = np.clip(hi - lo, 0.0, None).prod(axis=-1)
    area_a = (ca[..., 2:] - ca[..., :2]).prod(axis=-1)
    area_b = (cb[..., 2:] - cb[..., :2]).prod(axis=-1)
    union = area_a + area_b - inter
    ious = inter / union
    if not with_giou:
        return ious
    hull = (np.maximum(ca[..., 2:], cb[..., 2:]) - np.minimum(ca[..., :2], cb[..., :2])).prod(axis=-1)
    return ious, ious - (hull - union) / hull


def pairwise_l1(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return np.abs(a[:, None, :] - b[None, :, :]).sum(axis=-1)


def rowwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU between row i of ``a`` and row i of ``b``."""
    a, b = _validate(a, "a"), _validate(b, "b")
    ca, cb = to_corners(a), to_corners(b)
    wh = np.clip(np.minimum(ca[:, 2:], cb[:, 2:]) - np.maximum(ca[:, :2], cb[:, :2]), 0.0, None)
    inter = wh.prod(axis=-1)
    area_a = (ca[:, 2:] - ca[:, :2]).prod(axis=-1)
    area_b = (cb[:, 2:] - cb[:, :2]).prod(axis=-1)
    return inter / (area_a + area_b - inter)


# ---------------------------------------------------------------------------
# Differentiable versions on Tensor-backed boxes
# ---------------------------------------------------------------------------


def _tensor_corners(boxes: Tensor):
    cx, cy, w, h = (boxes[:, i] for i in range(4))
    hw, hh = dc.scale(w, 0.5), dc.scale(h, 0.5)
    return cx - hw, cy - hh, cx + hw, cy + hh, w * h


def _overlap_rows(pred: Tensor, target) -> tuple[Tensor, Tensor, tuple]:
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target).reshape(-1, 4))
    if pred.shape != target.shape or pred.ndim != 2 or pred.shape[1] != 4:
        raise ValueError(f"expected matching k x 4 inputs, got {pred.shape} / {target.shape}")
    px1, py1, px2, py2, parea = _tensor_corners(pred)
    tx1, ty1, tx2, ty2, tarea = _tensor_corners(target)
    iw = dc.relu(dc.minimum(px2, tx2) - dc.maximum(px1, tx1))
    ih = dc.relu(dc.minimum(py2, ty2) - dc.maximum(py1, ty1))
    inter = iw * ih
    return inter, parea + tarea - inter, (px1, py1, px2, py2, tx1, ty1, tx2, ty2)


def iou_rows(pred: Tensor, target) -> Tensor:
    """IoU between row i of ``pred`` (k x 4 Tensor) and row i of ``target``."""
    inter, union, _ = _overlap_rows(pred, target)
    return inter / union


def giou_rows(pred: Tensor, target) -> Tensor:
    """GIoU between row i of ``pred`` (k x 4 Tensor) and row i of ``target``.

    ``target`` may be a Tensor or a constant array. Disjoint pairs get zero
    gradient through the intersection; the hull term still carries signal.
    """
    inter, union, (px1, py1, px2, py2, tx1, ty1, tx2, ty2) = _overlap_rows(pred, target)
    hull = (dc.maximum(px2, tx2) - dc.minimum(px1, tx1)) * (dc.maximum(py2, ty2) - dc.minimum(py1, ty1))
    return inter / union - (hull - union) / hull


def l1_rows(pred: Tensor, target) -> Tensor:
    """Per-row sum of absolute coordinate differences."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target).reshape(-1, 4))
    return dc.sum_axis(dc.abs(pred - target), axis=1)


def squash_boxes(raw: Tensor) -> Tensor:
    """Map unconstrained head outputs to valid (cx, cy, w, h) in (0, 1]."""
    s = dc.sigmoid(raw)
    floor = np.array([0.0, 0.0, MIN_EXTENT, MIN_EXTENT])
    return s * (1.0 - floor) + floor
