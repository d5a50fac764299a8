"""End-to-end keyframe detection, AP50 evaluation, ablation sweeps and op counting."""
from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import PipelineConfig, dump_config
from .errors import ConfigError, SchemaError
from .fam import AggregationBatch, FamWeights, OpCounter, fam_forward
from .fsm import FrameFeatureSet, select_features
from .geometry import BoundingBox, batched_nms, iou_matrix
from .sampling import sample_references
from .stream import FrameRecord, GroundTruthBox, group_videos

_ATTENTION_MODE = {"affinity": "affinity", "qk": "qk", "cosine_diag": "cosine"}
SWEEPABLE = ("f_g", "f_l", "a", "tau", "mode")


@dataclass(frozen=True)
class Detection:
    video_id: int
    frame_id: int
    box: BoundingBox
    class_id: int
    score: float

    def __post_init__(self):
        if not (np.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"detection score {self.score} outside [0, 1]")

    def to_json(self) -> str:
        b = self.box
        return json.dumps({"video_id": self.video_id, "frame_id": self.frame_id,
                           "box": [b.x1, b.y1, b.x2, b.y2], "class_id": self.class_id,
                           "score": self.score})

    @classmethod
    def from_json(cls, line: str) -> "Detection":
        d = json.loads(line)
        return cls(int(d["video_id"]), int(d["frame_id"]), BoundingBox(*d["box"]),
                   int(d["class_id"]), float(d["score"]))


def write_detections(dets: Sequence[Detection], path) -> None:
    Path(path).write_text("".join(d.to_json() + "\n" for d in dets))


def read_detections(path) -> list[Detection]:
    return [Detection.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]


def ground_truth_of(records: Sequence[FrameRecord]) -> list[GroundTruthBox]:
    return [g for r in records for g in r.ground_truth()]


def check_weights(w: FamWeights, num_classes: int, d_q: int) -> None:
    if w.d_q != d_q:
        raise SchemaError(f"weights expect d_q={w.d_q}, stream has {d_q}")
    if w.num_classes != num_classes + 1:
        raise SchemaError(f"weights classify {w.num_classes} classes, stream needs {num_classes} + background")


def _decode(fs: FrameFeatureSet, class_ids, scores, cfg, video_id) -> list[Detection]:
    if fs.a_eff == 0:
        return []
    keep = batched_nms(fs.boxes.astype(np.float64), scores, class_ids, cfg.nms_final)
    return [Detection(video_id, fs.frame_id, BoundingBox(*(float(v) for v in fs.boxes[i])),
                      int(class_ids[i]), float(scores[i])) for i in keep]


def run_keyframe(video: Sequence[FrameRecord], key_idx: int, w: Optional[FamWeights], cfg: PipelineConfig,
                 feature_sets: Optional[Sequence[FrameFeatureSet]] = None,
                 counter: Optional[OpCounter] = None) -> list[Detection]:
    """Detections for frame ``video[key_idx]``.

    References are sampled, every sampled frame goes through feature
    selection, and the stacked proposals are aggregated. Each key proposal
    keeps its box; its score becomes (best refined foreground probability) x
    (original IoU score), followed by class-aware NMS. Baseline mode skips
    aggregation and decodes the selected proposals with their raw scores.
    """
    if not 0 <= key_idx < len(video):
        raise IndexError(f"key_idx {key_idx} outside [0, {len(video)})")
    video_id = video[key_idx].video_id
    if feature_sets is None:
        feature_sets = [None] * len(video)

    def fs_of(i):
        return feature_sets[i] if feature_sets[i] is not None else select_features(video[i], cfg)

    key_fs = fs_of(key_idx)
    if cfg.mode == "baseline":
        scores = key_fs.P[:, 0].astype(np.float64) * key_fs.P[:, 1].astype(np.float64)
        return _decode(key_fs, key_fs.class_ids, scores, cfg, video_id)
    if key_fs.a_eff == 0:
        return []
    if w is None:
        raise ValueError(f"mode {cfg.mode!r} needs aggregation weights")
    check_weights(w, video[key_idx].num_classes, video[key_idx].d_q)

    frames = sample_references(len(video), key_idx, cfg, video_id)
    sets = [key_fs if i == key_idx else fs_of(i) for i in frames]
    batch = AggregationBatch.from_feature_sets(sets)
    probs = fam_forward(batch, w, _ATTENTION_MODE[cfg.mode], cfg.tau, counter)
    offset = sum(s.a_eff for s in sets[:frames.index(key_idx)])
    fg = probs[offset:offset + key_fs.a_eff, :-1]
    class_ids = fg.argmax(axis=1)
    scores = fg[np.arange(fg.shape[0]), class_ids] * key_fs.P[:, 1].astype(np.float64)
    return _decode(key_fs, class_ids, np.clip(scores, 0.0, 1.0), cfg, video_id)


def run_video(video: Sequence[FrameRecord], w, cfg: PipelineConfig) -> list[Detection]:
    sets = [select_features(f, cfg) for f in video]
    out = []
    for i in range(len(video)):
        out.extend(run_keyframe(video, i, w, cfg, feature_sets=sets))
    return out


def run_stream(records: Sequence[FrameRecord], w, cfg: PipelineConfig, workers: int = 1) -> list[Detection]:
    """Detections for every frame, ordered by (video_id, frame_id) whatever the worker count."""
    videos = list(group_videos(records).values())
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            chunks = list(pool.map(lambda v: run_video(v, w, cfg), videos))
    else:
        chunks = [run_video(v, w, cfg) for v in videos]
    return [d for chunk in chunks for d in chunk]


def run_to_files(records, w, cfg: PipelineConfig, out_path, workers: int = 1) -> list[Detection]:
    """Write the detections file plus a resolved-config snapshot next to it."""
    dets = run_stream(records, w, cfg, workers)
    write_detections(dets, out_path)
    dump_config(cfg, Path(str(out_path) + ".config.json"))
    return dets


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from a score-ordered TP indicator."""
    if n_gt == 0:
        return float("nan")
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).tiny)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def ap_per_class(detections: Sequence[Detection], gts: Sequence[GroundTruthBox],
                 iou_threshold: float = 0.5) -> dict[int, float]:
    """Greedy score-ordered matching per class; each ground truth matches at most once."""
    out = {}
    for c in sorted({g.class_id for g in gts}):
        gt_by_frame: dict = {}
        for g in gts:
            if g.class_id == c:
                gt_by_frame.setdefault((g.video_id, g.frame_id), []).append(g.box.as_array())
        gt_by_frame = {k: np.array(v) for k, v in gt_by_frame.items()}
        matched = {k: np.zeros(len(v), dtype=bool) for k, v in gt_by_frame.items()}
        dets = [d for d in detections if d.class_id == c]
        order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
        tp = np.zeros(len(dets))
        for rank, i in enumerate(order):
            d = dets[i]
            key = (d.video_id, d.frame_id)
            if key not in gt_by_frame:
                continue
            ious = iou_matrix(d.box.as_array()[None], gt_by_frame[key])[0]
            j = int(np.argmax(ious))
            if ious[j] >= iou_threshold and not matched[key][j]:
                matched[key][j] = True
                tp[rank] = 1.0
        out[c] = average_precision(tp, sum(len(v) for v in gt_by_frame.values()))
    return out


def ap50(detections: Sequence[Detection], gts: Sequence[GroundTruthBox]) -> float:
    """Mean over ground-truth classes of AP at IoU 0.5; NaN when there is no ground truth."""
    per_class = ap_per_class(detections, gts, 0.5)
    if not per_class:
        return float("nan")
    return float(np.mean(list(per_class.values())))


def count_ops(cfg: PipelineConfig, N: int, d_q: int = 64, num_classes: int = 6,
              mode: Optional[str] = None) -> dict:
    """Closed-form multiply-accumulate counts of one aggregation over N proposals.

    ``stages`` uses the same keys as :class:`OpCounter`; ``per_head_branch``
    gives the attention terms for a single head of a single branch.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    mode = mode or cfg.mode
    m, dh, D = cfg.m, cfg.d_head, cfg.m * cfg.d_head
    stages = {
        "projection_v": m * N * d_q * dh,
        "projection_qk": 2 * 2 * m * N * d_q * dh,
        "attention_logits": 2 * m * N * N * dh,
        "attention_values": 2 * m * N * N * dh,
        "similarity": N * N * D,
        "pooling": N * N * 2 * D,
        "classify": N * 4 * D * num_classes,
    }
    if mode == "affinity":
        stages["hadamard"] = 2 * m * N * N
    return {
        "N": N,
        "stages": stages,
        "per_head_branch": {"attention_logits": N * N * dh, "attention_values": N * N * dh,
                            "projection_qk": 2 * N * d_q * dh},
        "attention": stages["attention_logits"] + stages["attention_values"],
        "total": sum(stages.values()),
    }


def _frames_in(records) -> int:
    return len(records)


def ablate(records: Sequence[FrameRecord], w, base_cfg: PipelineConfig, param: str, values: Sequence,
           workers: int = 1) -> list[dict]:
    """One full evaluation per swept value: AP50, mean ms per frame and attention MACs per keyframe."""
    if param not in SWEEPABLE:
        raise ConfigError(f"cannot sweep {param!r}; choose from {SWEEPABLE}")
    gts = ground_truth_of(records)
    num_classes = next(r.num_classes for r in records if len(r))
    d_q = next(r.d_q for r in records if len(r))
    rows = []
    for value in values:
        cfg = base_cfg.with_(**{param: value})
        t0 = time.perf_counter()
        dets = run_stream(records, w, cfg, workers)
        ms = 1000.0 * (time.perf_counter() - t0) / max(_frames_in(records), 1)
        n_ref = (cfg.f_g + 1) if cfg.sampling_mode == "global" else max(cfg.f_l, 1)
        macs = 0 if cfg.mode == "baseline" else count_ops(cfg, n_ref * cfg.a, d_q, num_classes + 1)["attention"]
        rows.append({"param": param, "value": value, "ap50": ap50(dets, gts), "ms_per_frame": ms,
                     "attention_macs": macs})
    return rows


def write_ablation(rows: Sequence[dict], table_path, plot_path) -> None:
    """Machine-readable table (JSON lines) plus two-column plot data (value index for categorical sweeps)."""
    Path(table_path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    lines = []
    for i, r in enumerate(rows):
        x = r["value"] if isinstance(r["value"], (int, float)) else i
        lines.append(f"{x} {r['ap50']:.6f}")
    Path(plot_path).write_text("\n".join(lines) + "\n")
