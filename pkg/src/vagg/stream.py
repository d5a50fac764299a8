"""Dense-prediction records and the framed binary feature-stream format.

File layout (all integers and floats little-endian)::

    b"VAGG" | u16 version | u16 num_classes | u16 d_q | u16 flags
    then per frame:
    u32 payload_length | u32 video_id | u32 frame_id | u32 n_predictions
    | n_predictions packed predictions
    | (flags bit 0) u32 n_gt, n_gt * (4 x f32 box, u32 class_id)

A packed prediction holds, in order: 4 x f32 box, num_classes x f32 class
scores, f32 IoU score, d_q x f32 classification-branch feature, d_q x f32
regression-branch feature, u32 position id.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import DataError, FormatError, SchemaError
from .geometry import BoundingBox

MAGIC = b"VAGG"
VERSION = 1
FLAG_GROUND_TRUTH = 1

_HEADER = struct.Struct("<4sHHHH")
_FRAME_HEAD = struct.Struct("<IIII")
_GT_DTYPE = np.dtype([("box", "<f4", (4,)), ("class_id", "<u4")])


def prediction_dtype(num_classes: int, d_q: int) -> np.dtype:
    return np.dtype([
        ("box", "<f4", (4,)),
        ("class_scores", "<f4", (num_classes,)),
        ("iou_score", "<f4"),
        ("feature_cls", "<f4", (d_q,)),
        ("feature_reg", "<f4", (d_q,)),
        ("position_id", "<u4"),
    ])


def _rows(x, n: int) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim == 2 and arr.shape[0] == n:
        return arr
    return arr.reshape(n, -1) if n else arr.reshape(0, 0)


@dataclass(frozen=True)
class DensePrediction:
    box: BoundingBox
    class_scores: np.ndarray
    iou_score: float
    feature_cls: np.ndarray
    feature_reg: np.ndarray
    position_id: int

    @property
    def confidence(self) -> float:
        return float(np.max(self.class_scores)) * float(self.iou_score)


@dataclass(frozen=True)
class GroundTruthBox:
    frame_id: int
    box: BoundingBox
    class_id: int
    video_id: int = 0


@dataclass(eq=False)
class FrameRecord:
    """All dense predictions of one frame, stored column-wise as float32 arrays."""

    video_id: int
    frame_id: int
    boxes: np.ndarray
    class_scores: np.ndarray
    iou_scores: np.ndarray
    feature_cls: np.ndarray
    feature_reg: np.ndarray
    position_ids: np.ndarray
    gt_boxes: Optional[np.ndarray] = None
    gt_classes: Optional[np.ndarray] = None
    degraded: bool = field(default=False, compare=False)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float32).reshape(-1, 4)
        n = self.boxes.shape[0]
        self.class_scores = _rows(self.class_scores, n)
        self.iou_scores = np.asarray(self.iou_scores, dtype=np.float32).reshape(n)
        self.feature_cls = _rows(self.feature_cls, n)
        self.feature_reg = _rows(self.feature_reg, n)
        self.position_ids = np.asarray(self.position_ids, dtype=np.int64).reshape(n)
        if self.gt_boxes is not None:
            self.gt_boxes = np.asarray(self.gt_boxes, dtype=np.float32).reshape(-1, 4)
            self.gt_classes = np.asarray(self.gt_classes, dtype=np.int64).reshape(-1)

    def __len__(self) -> int:
        return self.boxes.shape[0]

    @property
    def num_classes(self) -> int:
        return self.class_scores.shape[1]

    @property
    def d_q(self) -> int:
        return self.feature_cls.shape[1]

    @property
    def has_ground_truth(self) -> bool:
        return self.gt_boxes is not None

    def confidences(self) -> np.ndarray:
        """max(class_scores) * iou_score per prediction, in float64."""
        if len(self) == 0:
            return np.zeros(0)
        return self.class_scores.astype(np.float64).max(axis=1) * self.iou_scores.astype(np.float64)

    def prediction(self, i: int) -> DensePrediction:
        return DensePrediction(
            box=BoundingBox(*(float(v) for v in self.boxes[i])),
            class_scores=self.class_scores[i].copy(),
            iou_score=float(self.iou_scores[i]),
            feature_cls=self.feature_cls[i].copy(),
            feature_reg=self.feature_reg[i].copy(),
            position_id=int(self.position_ids[i]),
        )

    def predictions(self) -> list[DensePrediction]:
        return [self.prediction(i) for i in range(len(self))]

    def ground_truth(self) -> list[GroundTruthBox]:
        if self.gt_boxes is None:
            return []
        return [
            GroundTruthBox(self.frame_id, BoundingBox(*(float(v) for v in b)), int(c), self.video_id)
            for b, c in zip(self.gt_boxes, self.gt_classes)
        ]

    @classmethod
    def from_predictions(cls, video_id, frame_id, preds: Sequence[DensePrediction],
                         num_classes: int, d_q: int, ground_truth=None) -> "FrameRecord":
        gt_boxes = gt_classes = None
        if ground_truth is not None:
            gt_boxes = np.array([g.box.as_array() for g in ground_truth]).reshape(-1, 4)
            gt_classes = np.array([g.class_id for g in ground_truth], dtype=np.int64)
        return cls(
            video_id=video_id,
            frame_id=frame_id,
            boxes=np.array([p.box.as_array() for p in preds]).reshape(-1, 4),
            class_scores=np.array([p.class_scores for p in preds]).reshape(-1, num_classes),
            iou_scores=np.array([p.iou_score for p in preds]),
            feature_cls=np.array([p.feature_cls for p in preds]).reshape(-1, d_q),
            feature_reg=np.array([p.feature_reg for p in preds]).reshape(-1, d_q),
            position_ids=np.array([p.position_id for p in preds], dtype=np.int64),
            gt_boxes=gt_boxes,
            gt_classes=gt_classes,
        )

    def validate(self, num_classes: Optional[int] = None, d_q: Optional[int] = None) -> None:
        where = f"video {self.video_id} frame {self.frame_id}"
        n = len(self)
        if n:
            if num_classes is not None and self.class_scores.shape[1] != num_classes:
                raise SchemaError(f"{where}: {self.class_scores.shape[1]} class scores, expected {num_classes}")
            if d_q is not None and (self.feature_cls.shape[1] != d_q or self.feature_reg.shape[1] != d_q):
                raise SchemaError(
                    f"{where}: feature width {self.feature_cls.shape[1]}/{self.feature_reg.shape[1]}, expected {d_q}")
            for name in ("boxes", "class_scores", "iou_scores", "feature_cls", "feature_reg"):
                arr = getattr(self, name)
                if not np.all(np.isfinite(arr)):
                    bad = int(np.argwhere(~np.isfinite(arr.reshape(n, -1)))[0][0])
                    raise DataError(f"{where}: non-finite {name} in prediction {bad}")
            for name, arr in (("class_scores", self.class_scores), ("iou_scores", self.iou_scores)):
                if np.any(arr < 0) or np.any(arr > 1):
                    raise DataError(f"{where}: {name} outside [0, 1]")
            if np.any(self.boxes[:, 2] <= self.boxes[:, 0]) or np.any(self.boxes[:, 3] <= self.boxes[:, 1]):
                raise DataError(f"{where}: degenerate box")
            if np.any(self.position_ids < 0):
                raise DataError(f"{where}: negative position id")
        if self.gt_boxes is not None:
            if not np.all(np.isfinite(self.gt_boxes)):
                raise DataError(f"{where}: non-finite ground-truth box")
            if num_classes is not None and np.any((self.gt_classes < 0) | (self.gt_classes >= num_classes)):
                raise DataError(f"{where}: ground-truth class outside [0, {num_classes})")

    def same_as(self, other: "FrameRecord") -> bool:
        """Exact field equality (used for round-trip checks)."""
        if (self.video_id, self.frame_id) != (other.video_id, other.frame_id):
            return False
        names = ["boxes", "class_scores", "iou_scores", "feature_cls", "feature_reg", "position_ids"]
        if not all(np.array_equal(getattr(self, k), getattr(other, k)) for k in names):
            return False
        if self.has_ground_truth != other.has_ground_truth:
            return False
        if self.has_ground_truth:
            return np.array_equal(self.gt_boxes, other.gt_boxes) and np.array_equal(self.gt_classes, other.gt_classes)
        return True


def stream_dims(records: Sequence[FrameRecord]) -> tuple[int, int]:
    """(num_classes, d_q) shared by all non-empty records."""
    dims = {(r.num_classes, r.d_q) for r in records if len(r)}
    if len(dims) > 1:
        raise SchemaError(f"heterogeneous dimensions in stream: {sorted(dims)}")
    if not dims:
        raise SchemaError("cannot infer dimensions from a stream without predictions")
    return dims.pop()


def write_feature_stream(records: Iterable[FrameRecord], path, num_classes: Optional[int] = None,
                         d_q: Optional[int] = None) -> None:
    """Serialize records; output bytes depend only on the records."""
    records = list(records)
    if num_classes is None or d_q is None:
        num_classes, d_q = stream_dims(records)
    gt_flags = {r.has_ground_truth for r in records}
    if len(gt_flags) > 1:
        raise SchemaError("ground truth present on some frames only")
    with_gt = gt_flags == {True}
    dtype = prediction_dtype(num_classes, d_q)
    chunks = [_HEADER.pack(MAGIC, VERSION, num_classes, d_q, FLAG_GROUND_TRUTH if with_gt else 0)]
    for rec in sorted(records, key=lambda r: (r.video_id, r.frame_id)):
        rec.validate(num_classes, d_q)
        n = len(rec)
        packed = np.zeros(n, dtype=dtype)
        if n:
            packed["box"] = rec.boxes
            packed["class_scores"] = rec.class_scores
            packed["iou_score"] = rec.iou_scores
            packed["feature_cls"] = rec.feature_cls
            packed["feature_reg"] = rec.feature_reg
            packed["position_id"] = rec.position_ids
        body = [struct.pack("<III", rec.video_id, rec.frame_id, n), packed.tobytes()]
        if with_gt:
            gt = np.zeros(len(rec.gt_classes), dtype=_GT_DTYPE)
            gt["box"] = rec.gt_boxes
            gt["class_id"] = rec.gt_classes
            body += [struct.pack("<I", gt.size), gt.tobytes()]
        payload = b"".join(body)
        chunks += [struct.pack("<I", len(payload)), payload]
    Path(path).write_bytes(b"".join(chunks))


@dataclass
class StreamHeader:
    version: int
    num_classes: int
    d_q: int
    flags: int

    @property
    def has_ground_truth(self) -> bool:
        return bool(self.flags & FLAG_GROUND_TRUTH)


def _parse_header(buf: bytes) -> StreamHeader:
    if len(buf) < _HEADER.size:
        raise FormatError("file shorter than the stream header")
    magic, version, num_classes, d_q, flags = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported stream version {version}")
    return StreamHeader(version, num_classes, d_q, flags)


def read_header(path) -> StreamHeader:
    with open(path, "rb") as fh:
        return _parse_header(fh.read(_HEADER.size))


def iter_feature_stream(path) -> Iterator[FrameRecord]:
    buf = Path(path).read_bytes()
    header = _parse_header(buf)
    dtype = prediction_dtype(header.num_classes, header.d_q)
    off = _HEADER.size
    while off < len(buf):
        if off + _FRAME_HEAD.size > len(buf):
            raise FormatError(f"truncated frame header at byte {off}")
        length, video_id, frame_id, n = _FRAME_HEAD.unpack_from(buf, off)
        end = off + 4 + length
        if end > len(buf):
            raise FormatError(f"truncated frame at byte {off} (video {video_id} frame {frame_id})")
        pos = off + _FRAME_HEAD.size
        expected = 12 + n * dtype.itemsize
        gt_boxes = gt_classes = None
        if header.has_ground_truth:
            if pos + n * dtype.itemsize + 4 > end:
                raise SchemaError(f"video {video_id} frame {frame_id}: payload too short for "
                                  f"{n} predictions with num_classes={header.num_classes}, d_q={header.d_q}")
            (n_gt,) = struct.unpack_from("<I", buf, pos + n * dtype.itemsize)
            expected += 4 + n_gt * _GT_DTYPE.itemsize
        if expected != length:
            raise SchemaError(f"video {video_id} frame {frame_id}: payload of {length} bytes does not match "
                              f"num_classes={header.num_classes}, d_q={header.d_q} ({expected} bytes expected)")
        preds = np.frombuffer(buf, dtype=dtype, count=n, offset=pos)
        pos += n * dtype.itemsize
        if header.has_ground_truth:
            gt = np.frombuffer(buf, dtype=_GT_DTYPE, count=n_gt, offset=pos + 4)
            gt_boxes, gt_classes = gt["box"], gt["class_id"].astype(np.int64)
        rec = FrameRecord(
            video_id=video_id,
            frame_id=frame_id,
            boxes=preds["box"],
            class_scores=preds["class_scores"],
            iou_scores=preds["iou_score"],
            feature_cls=preds["feature_cls"],
            feature_reg=preds["feature_reg"],
            position_ids=preds["position_id"],
            gt_boxes=gt_boxes,
            gt_classes=gt_classes,
        )
        rec.validate(header.num_classes, header.d_q)
        yield rec
        off = end


def read_feature_stream(path) -> list[FrameRecord]:
    """Load and validate every record, sorted by (video_id, frame_id)."""
    records = list(iter_feature_stream(path))
    keys = [(r.video_id, r.frame_id) for r in records]
    if len(set(keys)) != len(keys):
        raise DataError("duplicate (video_id, frame_id) in stream")
    records.sort(key=lambda r: (r.video_id, r.frame_id))
    return records


def group_videos(records: Iterable[FrameRecord]) -> dict[int, list[FrameRecord]]:
    """Records per video_id, each list ordered by frame_id."""
    videos: dict[int, list[FrameRecord]] = {}
    for rec in records:
        videos.setdefault(rec.video_id, []).append(rec)
    for vid in videos:
        videos[vid].sort(key=lambda r: r.frame_id)
    return dict(sorted(videos.items()))
