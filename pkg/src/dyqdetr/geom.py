"""Box formats, IoU and generalized IoU.

Plain-float functions serve evaluation and pseudo-label filtering; the
``*_t`` variants run on :class:`~dyqdetr.diffcore.Tensor` for the loss.
Boxes are ``(..., 4)`` arrays, either ``cx, cy, w, h`` or ``x0, y0, x1, y1``.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import diffcore as dc


class BoxCxCyWH(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float


class BoxXYXY(NamedTuple):
    x0: float
    y0: float
    x1: float
    y1: float


def cxcywh_to_xyxy(b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def xyxy_to_cxcywh(b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    x0, y0, x1, y1 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)


def _area(b: np.ndarray) -> np.ndarray:
    return np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)


def pairwise_iou(a, b) -> np.ndarray:
    """IoU matrix between ``a`` (n, 4) and ``b`` (m, 4), corner format."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    inter, union, _ = _overlap_terms(a[:, None, :], b[None, :, :])
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def pairwise_giou(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return _giou_from_terms(*_overlap_terms(a[:, None, :], b[None, :, :]))


def _overlap_terms(a: np.ndarray, b: np.ndarray):
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = _area(a) + _area(b) - inter
    hull = (np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])) * \
           (np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1]))
    return inter, union, hull


def _giou_from_terms(inter, union, hull) -> np.ndarray:
    iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    penalty = np.where(hull > 0, (hull - union) / np.where(hull > 0, hull, 1.0), 0.0)
    return iou - penalty


def iou(a, b) -> float:
    """Intersection over union of two corner boxes; 0 when the union is empty."""
    inter, union, _ = _overlap_terms(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return float(inter / union) if union > 0 else 0.0


def giou(a, b) -> float:
    """IoU minus the fraction of the enclosing box not covered by the union."""
    terms = _overlap_terms(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return float(_giou_from_terms(*terms))


# ---------------------------------------------------------------- differentiable

def cxcywh_to_xyxy_t(b: dc.Tensor) -> dc.Tensor:
    c = b[..., 0:2]
    half = b[..., 2:4] * 0.5
    return dc.concat([c - half, c + half], axis=-1)


def giou_t(a: dc.Tensor, b: dc.Tensor) -> dc.Tensor:
    """Row-wise GIoU of two ``(M, 4)`` corner-format tensors -> ``(M,)``.

    Assumes non-degenerate boxes (positive area), which the sigmoid box head
    and the generator guarantee.
    """
    zero = np.zeros(1)
    lt = dc.maximum(a[:, 0:2], b[:, 0:2])
    rb = dc.minimum(a[:, 2:4], b[:, 2:4])
    wh = dc.maximum(rb - lt, zero)
    inter = wh[:, 0] * wh[:, 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a + area_b - inter
    hlt = dc.minimum(a[:, 0:2], b[:, 0:2])
    hrb = dc.maximum(a[:, 2:4], b[:, 2:4])
    hwh = hrb - hlt
    hull = hwh[:, 0] * hwh[:, 1]
    return inter / union - (hull - union) / hull
