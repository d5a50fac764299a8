"""Feature selection: keep the most confident dense predictions of a frame."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BoundingBox, nms
from .stream import DensePrediction, FrameRecord


@dataclass(eq=False)
class FrameFeatureSet:
    """Selected proposals of one frame, rows in descending confidence."""

    frame_id: int
    C: np.ndarray  # (a_eff, d_q) classification-branch features
    R: np.ndarray  # (a_eff, d_q) regression-branch features
    P: np.ndarray  # (a_eff, 2): max class score, IoU score
    boxes: np.ndarray  # (a_eff, 4)
    class_ids: np.ndarray  # (a_eff,)
    source_rows: np.ndarray  # row index of each proposal in the originating FrameRecord
    video_id: int = 0

    @property
    def a_eff(self) -> int:
        return self.C.shape[0]

    def box_list(self) -> list[BoundingBox]:
        return [BoundingBox(*(float(v) for v in b)) for b in self.boxes]


def top_k_indices(frame: FrameRecord, k: int) -> np.ndarray:
    """Row indices of the k most confident predictions.

    Sorted by descending confidence; ties go to the lower position_id.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(frame) == 0:
        return np.zeros(0, dtype=np.int64)
    conf = frame.confidences()
    order = np.lexsort((frame.position_ids, -conf))
    return order[:k]


def top_k_select(frame: FrameRecord, k: int) -> list[DensePrediction]:
    return [frame.prediction(int(i)) for i in top_k_indices(frame, k)]


def select_rows(frame: FrameRecord, k: int, a: int, nms_threshold: float) -> np.ndarray:
    cand = top_k_indices(frame, k)
    if cand.size == 0:
        return cand
    conf = frame.confidences()[cand]
    # cand is already in rank order; nms is stable, so equal confidences keep that order
    kept = nms(frame.boxes[cand].astype(np.float64), conf, nms_threshold)
    return cand[np.asarray(kept[:a], dtype=np.int64)]


def select_features(frame: FrameRecord, cfg) -> FrameFeatureSet:
    """Top-k by confidence, class-agnostic NMS at ``cfg.nms_select``, then at most ``cfg.a`` rows.

    No padding is applied when fewer than ``cfg.a`` proposals survive.
    """
    if not (cfg.k >= cfg.a >= 1):
        raise ValueError(f"need k >= a >= 1, got k={cfg.k}, a={cfg.a}")
    if not 0.0 <= cfg.nms_select <= 1.0:
        raise ValueError(f"nms_select {cfg.nms_select} outside [0, 1]")
    rows = select_rows(frame, cfg.k, cfg.a, cfg.nms_select)
    d_q = frame.feature_cls.shape[1] if len(frame) else 0
    if rows.size == 0:
        return FrameFeatureSet(
            frame.frame_id, np.zeros((0, d_q), np.float32), np.zeros((0, d_q), np.float32),
            np.zeros((0, 2), np.float32), np.zeros((0, 4), np.float32), np.zeros(0, np.int64),
            rows, frame.video_id,
        )
    scores = frame.class_scores[rows]
    P = np.stack([scores.max(axis=1), frame.iou_scores[rows]], axis=1)
    return FrameFeatureSet(
        frame_id=frame.frame_id,
        C=frame.feature_cls[rows],
        R=frame.feature_reg[rows],
        P=P,
        boxes=frame.boxes[rows],
        class_ids=scores.argmax(axis=1).astype(np.int64),
        source_rows=rows,
        video_id=frame.video_id,
    )
