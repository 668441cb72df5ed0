"""Axis-aligned box geometry in ``(x, y, w, h)`` top-left form.

Scalar helpers take :class:`Box` values; the ``*_array`` variants work on
``(N, 4)`` float arrays and are what the network uses internally.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

IMAGE_SIZE = 299
MAX_DECODED_SIDE = 1e4
# cap on log-scale deltas when decoding raw network output in bulk
DELTA_LOG_CLAMP = math.log(1000.0 / 16.0)


class DivergentRegressionError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    def scaled(self, factor: float) -> "Box":
        return Box(self.x * factor, self.y * factor, self.w * factor, self.h * factor)


@dataclass(frozen=True)
class BoxDelta:
    t_x: float
    t_y: float
    t_w: float
    t_h: float

    def as_array(self) -> np.ndarray:
        return np.array([self.t_x, self.t_y, self.t_w, self.t_h], dtype=np.float64)


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.array([[b.x, b.y, b.w, b.h] for b in boxes], dtype=np.float64)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.w * a.h + b.w * b.h - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.minimum(ax2[:, None], bx2[None]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(ay2[:, None], by2[None]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms(boxes, scores, threshold: float, max_keep: int | None = None) -> list[int]:
    """Greedy non-maximum suppression.

    Boxes are visited by descending score (ties: lower index first); a box is
    dropped when its IoU with an already kept box exceeds ``threshold``.
    Returns kept indices in visiting order, at most ``max_keep`` of them.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"NMS threshold must lie in [0, 1], got {threshold}")
    arr = boxes if isinstance(boxes, np.ndarray) else boxes_to_array(list(boxes))
    arr = np.asarray(arr, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(arr) != len(scores):
        raise ValueError(f"{len(arr)} boxes but {len(scores)} scores")
    order = np.argsort(-scores, kind="stable")
    x1, y1 = arr[:, 0], arr[:, 1]
    x2, y2 = x1 + arr[:, 2], y1 + arr[:, 3]
    area = arr[:, 2] * arr[:, 3]
    alive = np.ones(len(arr), dtype=bool)
    keep: list[int] = []
    limit = len(arr) if max_keep is None else max_keep
    for pos, i in enumerate(order):
        if len(keep) >= limit:
            break
        if not alive[i]:
            continue
        keep.append(int(i))
        rest = order[pos + 1:]
        rest = rest[alive[rest]]
        if len(rest) == 0:
            continue
        iw = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        ih = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        union = area[i] + area[rest] - inter
        overlap = np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        alive[rest[overlap > threshold]] = False
    return keep


def encode_delta(anchor: Box, target: Box) -> BoxDelta:
    if target.w <= 0 or target.h <= 0:
        raise ValueError(f"target box must have positive size, got {target}")
    if anchor.w <= 0 or anchor.h <= 0:
        raise ValueError(f"anchor box must have positive size, got {anchor}")
    return BoxDelta(
        (target.x - anchor.x) / anchor.w,
        (target.y - anchor.y) / anchor.h,
        math.log(target.w / anchor.w),
        math.log(target.h / anchor.h),
    )


def apply_delta(anchor: Box, delta: BoxDelta) -> Box:
    vals = (delta.t_x, delta.t_y, delta.t_w, delta.t_h)
    if not all(math.isfinite(v) for v in vals):
        raise DivergentRegressionError(f"non-finite delta {delta}")
    # compare in log space so huge t_w cannot overflow exp()
    if (delta.t_w + math.log(anchor.w) > math.log(MAX_DECODED_SIDE)
            or delta.t_h + math.log(anchor.h) > math.log(MAX_DECODED_SIDE)):
        raise DivergentRegressionError(f"delta {delta} on {anchor} exceeds {MAX_DECODED_SIDE:g} px")
    return Box(
        anchor.x + delta.t_x * anchor.w,
        anchor.y + delta.t_y * anchor.h,
        anchor.w * math.exp(delta.t_w),
        anchor.h * math.exp(delta.t_h),
    )


def encode_array(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    return np.stack([
        (t[:, 0] - a[:, 0]) / a[:, 2],
        (t[:, 1] - a[:, 1]) / a[:, 3],
        np.log(t[:, 2] / a[:, 2]),
        np.log(t[:, 3] / a[:, 3]),
    ], axis=1)


def decode_array(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Bulk inverse of :func:`encode_array`; log-scale deltas are clamped."""
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    tw = np.minimum(d[:, 2], DELTA_LOG_CLAMP)
    th = np.minimum(d[:, 3], DELTA_LOG_CLAMP)
    return np.stack([
        a[:, 0] + d[:, 0] * a[:, 2],
        a[:, 1] + d[:, 1] * a[:, 3],
        a[:, 2] * np.exp(tw),
        a[:, 3] * np.exp(th),
    ], axis=1)


def clip_array(boxes: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    x1 = np.clip(b[:, 0], 0, size)
    y1 = np.clip(b[:, 1], 0, size)
    x2 = np.clip(b[:, 0] + b[:, 2], 0, size)
    y2 = np.clip(b[:, 1] + b[:, 3], 0, size)
    return np.stack([x1, y1, x2 - x1, y2 - y1], axis=1)


def clip_box(box: Box, size: int = IMAGE_SIZE) -> Box:
    return Box(*clip_array(box.as_array(), size)[0])
