"""Synthetic video feature streams standing in for a trained one-stage detector.

Each object follows a linear box trajectory and emits one dense prediction
per frame. Its classification feature is a class prototype plus isotropic
noise; its regression feature is a per-object embedding plus noise. Class
scores are read off the noisy feature through the prototypes (a logistic
head), so a noisy feature also yields unreliable scores. A fixed share of
frames per video is degraded: larger feature noise and all scores scaled
down. Background predictions sit near their own prototype, orthogonal to
every class, and carry low scores.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigError
from .stream import FrameRecord

SCORE_GAIN = 6.0
SCORE_BIAS = 3.0
BACKGROUND_SPREAD = 0.5


@dataclass(frozen=True)
class SynthConfig:
    num_videos: int = 14
    frames_per_video: int = 30
    num_classes: int = 5
    objects_per_video: int = 2
    canvas_size: float = 640.0
    d_q: int = 64
    feature_noise_clean: float = 0.05
    degrade_fraction: float = 0.3
    degrade_noise: float = 0.8
    degrade_conf_scale: float = 0.5
    background_preds_per_frame: int = 80
    seed: int = 0

    def __post_init__(self):
        for name in ("num_videos", "frames_per_video", "num_classes", "objects_per_video", "d_q"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.background_preds_per_frame < 0 or self.seed < 0:
            raise ConfigError("background_preds_per_frame and seed must be >= 0")
        if self.canvas_size <= 64:
            raise ConfigError("canvas_size must exceed 64")
        if self.feature_noise_clean < 0:
            raise ConfigError("feature_noise_clean must be >= 0")
        if not 0.0 <= self.degrade_fraction <= 1.0:
            raise ConfigError("degrade_fraction must lie in [0, 1]")
        if self.degrade_fraction > 0 and not self.degrade_noise > self.feature_noise_clean:
            raise ConfigError("degrade_noise must exceed feature_noise_clean")
        if not 0.0 < self.degrade_conf_scale <= 1.0:
            raise ConfigError("degrade_conf_scale must lie in (0, 1]")

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def class_prototypes(num_classes: int, d_q: int, seed: int) -> np.ndarray:
    """Unit-norm prototypes, mutually orthogonal when num_classes <= d_q.

    Callers ask for one more than the class count; the last row is the
    background prototype.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC1A55]))
    raw = rng.standard_normal((d_q, num_classes))
    if num_classes <= d_q:
        q, r = np.linalg.qr(raw)
        protos = (q * np.sign(np.diag(r))).T
    else:
        protos = raw.T
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def class_scores_from_features(feats: np.ndarray, protos: np.ndarray) -> np.ndarray:
    return _sigmoid(SCORE_GAIN * feats @ protos.T - SCORE_BIAS)


def _random_boxes(rng, n, canvas):
    w = rng.uniform(24.0, 160.0, n)
    h = rng.uniform(24.0, 160.0, n)
    x1 = rng.uniform(0.0, canvas - w)
    y1 = rng.uniform(0.0, canvas - h)
    return np.stack([x1, y1, x1 + w, y1 + h], axis=1)


def generate_video(cfg: SynthConfig, video_id: int, protos: np.ndarray | None = None) -> list[FrameRecord]:
    if protos is None:
        protos = class_prototypes(cfg.num_classes + 1, cfg.d_q, cfg.seed)
    protos, bg_proto = protos[:-1], protos[-1]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, video_id]))
    F, n_obj, d_q, canvas = cfg.frames_per_video, cfg.objects_per_video, cfg.d_q, cfg.canvas_size
    n_deg = int(round(cfg.degrade_fraction * F))
    degraded = np.zeros(F, dtype=bool)
    degraded[rng.choice(F, size=n_deg, replace=False)] = True

    # round-robin over videos keeps every class represented in small streams
    classes = (video_id * n_obj + np.arange(n_obj) + cfg.seed) % cfg.num_classes
    embed = rng.standard_normal((n_obj, d_q))
    embed /= np.linalg.norm(embed, axis=1, keepdims=True)
    size = rng.uniform(64.0, 0.35 * canvas, (n_obj, 2))
    start = rng.uniform(0.0, 1.0, (n_obj, 2)) * (canvas - size)
    end = rng.uniform(0.0, 1.0, (n_obj, 2)) * (canvas - size)
    grid = max(4 * (n_obj + cfg.background_preds_per_frame), 1024)

    frames = []
    for t in range(F):
        frac = t / max(F - 1, 1)
        tl = start + frac * (end - start)
        gt = np.concatenate([tl, tl + size], axis=1)
        scale = cfg.degrade_conf_scale if degraded[t] else 1.0

        jitter = rng.normal(0.0, 0.03, (n_obj, 4)) * np.repeat(size, 2, axis=1)
        obj_boxes = np.clip(gt + jitter, 0.0, canvas)
        obj_cls = protos[classes] + cfg.feature_noise_clean * rng.standard_normal((n_obj, d_q))
        if degraded[t]:
            # appearance confusion: extra noise inside the span of the class prototypes
            obj_cls += cfg.degrade_noise * rng.standard_normal((n_obj, cfg.num_classes)) @ protos
        obj_reg = embed + cfg.feature_noise_clean * rng.standard_normal((n_obj, d_q))
        obj_scores = scale * class_scores_from_features(obj_cls, protos)
        obj_iou = scale * rng.uniform(0.7, 0.95, n_obj)

        n_bg = cfg.background_preds_per_frame
        bg_boxes = _random_boxes(rng, n_bg, canvas)
        bg_cls = bg_proto + BACKGROUND_SPREAD * rng.standard_normal((n_bg, d_q)) / np.sqrt(d_q)
        bg_reg = rng.standard_normal((n_bg, d_q)) / np.sqrt(d_q)
        bg_scores = scale * class_scores_from_features(bg_cls, protos) * rng.uniform(0.2, 1.0, (n_bg, 1))
        bg_iou = scale * rng.uniform(0.05, 0.4, n_bg)

        frames.append(FrameRecord(
            video_id=video_id,
            frame_id=t,
            boxes=np.concatenate([obj_boxes, bg_boxes]),
            class_scores=np.concatenate([obj_scores, bg_scores]),
            iou_scores=np.concatenate([obj_iou, bg_iou]),
            feature_cls=np.concatenate([obj_cls, bg_cls]),
            feature_reg=np.concatenate([obj_reg, bg_reg]),
            position_ids=rng.choice(grid, size=n_obj + n_bg, replace=False),
            gt_boxes=gt,
            gt_classes=classes,
            degraded=bool(degraded[t]),
        ))
    return frames


def generate(cfg: SynthConfig, workers: int = 1) -> list[FrameRecord]:
    """All frames of all videos, ordered by (video_id, frame_id); independent of ``workers``."""
    protos = class_prototypes(cfg.num_classes + 1, cfg.d_q, cfg.seed)
    ids = range(cfg.num_videos)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            videos = list(pool.map(lambda v: generate_video(cfg, v, protos), ids))
    else:
        videos = [generate_video(cfg, v, protos) for v in ids]
    return [frame for video in videos for frame in video]


def split_videos(records, n_first: int):
    """Partition a stream by video: the first ``n_first`` video ids, then the rest."""
    ids = sorted({r.video_id for r in records})
    first = set(ids[:n_first])
    return [r for r in records if r.video_id in first], [r for r in records if r.video_id not in first]
