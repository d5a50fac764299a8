"""Axis-aligned boxes in corner form, IoU and greedy NMS."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(np.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box {coords}: width and height must be positive")

    @classmethod
    def from_center(cls, cx, cy, w, h) -> "BoundingBox":
        return cls(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


def as_box_array(boxes) -> np.ndarray:
    """Coerce a sequence of BoundingBox (or an (n, 4) array) into a float64 (n, 4) array."""
    if isinstance(boxes, np.ndarray):
        arr = np.asarray(boxes, dtype=np.float64)
    else:
        boxes = list(boxes)
        if not boxes:
            return np.zeros((0, 4))
        if isinstance(boxes[0], BoundingBox):
            arr = np.array([b.as_array() for b in boxes])
        else:
            arr = np.asarray(boxes, dtype=np.float64)
    return arr.reshape(-1, 4)


def _check_valid(arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite box coordinates")
    if np.any(arr[:, 2] <= arr[:, 0]) or np.any(arr[:, 3] <= arr[:, 1]):
        raise ValueError("degenerate box: width and height must be positive")


def iou(a, b) -> float:
    """Intersection over union of two boxes (BoundingBox or length-4 sequences)."""
    pair = as_box_array([a.as_array() if isinstance(a, BoundingBox) else a,
                         b.as_array() if isinstance(b, BoundingBox) else b])
    _check_valid(pair)
    return float(iou_matrix(pair[:1], pair[1:])[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two (n, 4) / (m, 4) corner-form arrays."""
    a = as_box_array(a)
    b = as_box_array(b)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0.0, None) * np.clip(iy2 - iy1, 0.0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    out = inter / union
    # identical boxes must give exactly 1 despite rounding in the union
    return np.where(inter == union, 1.0, out)


def nms(boxes, scores: Sequence[float], iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression.

    A box is suppressed when its IoU with an already kept, higher-ranked box
    is strictly greater than ``iou_threshold``. Equal scores are ranked by
    input position. Returns kept indices in descending score order.
    """
    arr = as_box_array(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if arr.shape[0] != scores.shape[0]:
        raise ValueError("boxes and scores differ in length")
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold {iou_threshold} outside [0, 1]")
    if scores.size == 0:
        return []
    if not np.all(np.isfinite(scores)):
        raise ValueError("non-finite scores")
    order = np.argsort(-scores, kind="stable")
    overlaps = iou_matrix(arr[order], arr[order])
    n = order.size
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for i in range(n):
        if suppressed[i]:
            continue
        keep.append(int(order[i]))
        suppressed[i + 1:] |= overlaps[i, i + 1:] > iou_threshold
    return keep


def batched_nms(boxes, scores, class_ids, iou_threshold: float) -> list[int]:
    """Class-aware NMS: suppression only between boxes of the same class."""
    arr = as_box_array(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    class_ids = np.asarray(class_ids).reshape(-1)
    keep = []
    for c in np.unique(class_ids):
        idx = np.flatnonzero(class_ids == c)
        keep.extend(int(idx[k]) for k in nms(arr[idx], scores[idx], iou_threshold))
    keep.sort(key=lambda i: (-scores[i], i))
    return keep
