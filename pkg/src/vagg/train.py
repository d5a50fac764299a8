"""Cross-entropy fine-tuning of the aggregation weights with hand-written gradients."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, StateError
from .fam import (AggregationBatch, AttentionTrace, FamWeights, attention_forward, pool_matrix,
                  softmax_rows, value_similarity)
from .fsm import FrameFeatureSet, select_features
from .geometry import iou_matrix
from .stream import FrameRecord, group_videos

log = logging.getLogger(__name__)

_ATTENTION_MODE = {"affinity": "affinity", "qk": "qk", "cosine_diag": "cosine"}


@dataclass
class LossCache:
    weights: FamWeights
    version: int
    trace: AttentionTrace
    pool: np.ndarray
    Z: np.ndarray
    probs: np.ndarray
    labels: np.ndarray
    used: bool = False


def forward_loss(batch: AggregationBatch, labels, w: FamWeights, tau: float,
                 mode: str = "affinity") -> tuple[float, LossCache]:
    """Mean cross-entropy of the refined class probabilities against ``labels``."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size != batch.N or batch.N < 1:
        raise ValueError(f"need one label per row ({batch.N}), got {labels.size}")
    if np.any((labels < 0) | (labels >= w.num_classes)):
        raise IndexError(f"labels must lie in [0, {w.num_classes})")
    trace = AttentionTrace(X=(), S=())
    SA_F = attention_forward(batch, w, mode, trace=trace)
    # survivor sets are treated as constants when differentiating
    M = pool_matrix(value_similarity(SA_F[:, w.D:]), tau)
    Z = np.concatenate([M @ SA_F, SA_F], axis=1)
    probs = softmax_rows(Z @ w.W_out)
    picked = probs[np.arange(batch.N), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    return loss, LossCache(w, w.version, trace, M, Z, probs, labels)


def _softmax_backward(P: np.ndarray, dP: np.ndarray) -> np.ndarray:
    return P * (dP - np.sum(dP * P, axis=1, keepdims=True))


def backward(cache: LossCache) -> FamWeights:
    """Gradients of the cached loss with respect to every weight matrix."""
    w = cache.weights
    if cache.version != w.version:
        raise StateError("weights changed since forward_loss; cache is stale")
    N, D, dh = cache.Z.shape[0], w.D, w.d_head
    grads = FamWeights.zeros_like(w)
    tr = cache.trace

    dlogits = cache.probs.copy()
    dlogits[np.arange(N), cache.labels] -= 1.0
    dlogits /= N
    grads.W_out[...] = cache.Z.T @ dlogits
    dZ = dlogits @ w.W_out.T
    dF = dZ[:, 2 * D:] + cache.pool.T @ dZ[:, :2 * D]
    dSA, dVfull = dF[:, :D], dF[:, D:]

    scale = 1.0 / np.sqrt(dh)
    X_cls = tr.X[0]
    for h in range(w.m):
        dH = dSA[:, h * dh:(h + 1) * dh]
        V = tr.V[h]
        dV = dVfull[:, h * dh:(h + 1) * dh].copy()
        for b in range(2):
            P = tr.weights[b][h]
            dV += P.T @ dH
            if tr.Q[b][h] is None:
                continue
            dL = _softmax_backward(P, dH @ V.T)
            dA = dL if tr.S[b] is None else tr.S[b] * dL
            dA *= scale
            grads.W_q[b, h] = tr.X[b].T @ (dA @ tr.K[b][h])
            grads.W_k[b, h] = tr.X[b].T @ (dA.T @ tr.Q[b][h])
        grads.W_v[h] = X_cls.T @ dV
    cache.used = True
    return grads


def assign_labels(fs: FrameFeatureSet, gt_boxes, gt_classes, background: int,
                  iou_threshold: float = 0.5) -> np.ndarray:
    """Class of the best-overlapping ground truth when IoU >= threshold, else ``background``."""
    labels = np.full(fs.a_eff, background, dtype=np.int64)
    if fs.a_eff == 0 or gt_boxes is None or len(gt_boxes) == 0:
        return labels
    ious = iou_matrix(fs.boxes, gt_boxes)
    best = ious.argmax(axis=1)
    hit = ious[np.arange(fs.a_eff), best] >= iou_threshold
    labels[hit] = np.asarray(gt_classes)[best[hit]]
    return labels


def training_batches(records: Sequence[FrameRecord], cfg, rng: np.random.Generator,
                     num_classes: int, cache: Optional[dict] = None):
    """One pass over every frame: each video's frames shuffled and cut into groups of cfg.train_frames."""
    videos = group_videos(records)
    order = list(videos)
    rng.shuffle(order)
    cache = {} if cache is None else cache
    for vid in order:
        frames = videos[vid]
        if not all(f.has_ground_truth for f in frames):
            raise DataError(f"video {vid} lacks ground truth; training needs labelled streams")
        perm = rng.permutation(len(frames))
        for start in range(0, len(frames), cfg.train_frames):
            group = sorted(int(i) for i in perm[start:start + cfg.train_frames])
            sets, labels = [], []
            for i in group:
                key = (vid, frames[i].frame_id)
                if key not in cache:
                    fs = select_features(frames[i], cfg)
                    cache[key] = (fs, assign_labels(fs, frames[i].gt_boxes, frames[i].gt_classes, num_classes))
                fs, lab = cache[key]
                sets.append(fs)
                labels.append(lab)
            batch = AggregationBatch.from_feature_sets(sets)
            if batch.N:
                yield batch, np.concatenate(labels)


def evaluate_loss(records, w: FamWeights, cfg, seed: int = 0) -> float:
    """Mean loss over one deterministic pass of batches, without updating weights."""
    mode = _ATTENTION_MODE[cfg.mode]
    rng = np.random.default_rng(seed)
    losses = [forward_loss(b, y, w, cfg.tau, mode)[0]
              for b, y in training_batches(records, cfg, rng, w.num_classes - 1)]
    return float(np.mean(losses))


def train(records: Sequence[FrameRecord], cfg, epochs: int, lr: float, seed: int,
          weights: Optional[FamWeights] = None, validation: Optional[Sequence[FrameRecord]] = None,
          metrics_path=None, workers: int = 1) -> FamWeights:
    """Plain SGD over shuffled frame groups; deterministic for a given seed.

    The background class is appended after the stream's classes. Each epoch
    appends a JSON line (epoch, loss, ap50) to ``metrics_path`` when given;
    ap50 is measured on ``validation`` if supplied.
    """
    if cfg.mode == "baseline":
        raise ValueError("baseline mode has no trainable aggregation")
    if epochs < 0 or lr < 0:
        raise ValueError("epochs and lr must be non-negative")
    records = list(records)
    if not records or not all(r.has_ground_truth for r in records):
        raise DataError("training stream must carry ground truth")
    nonempty = [r for r in records if len(r)]
    num_classes, d_q = nonempty[0].num_classes, nonempty[0].d_q
    w = weights.copy() if weights is not None else FamWeights.init(d_q, cfg.m, cfg.d_head, num_classes + 1, seed)
    mode = _ATTENTION_MODE[cfg.mode]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A1]))
    selected: dict = {}
    lines = []
    for epoch in range(1, epochs + 1):
        losses = []
        for batch, labels in training_batches(records, cfg, rng, num_classes, selected):
            loss, cache = forward_loss(batch, labels, w, cfg.tau, mode)
            grads = backward(cache)
            w.sgd_step(grads, lr)
            losses.append(loss)
        entry = {"epoch": epoch, "loss": float(np.mean(losses)), "ap50": None}
        if validation is not None:
            from .pipeline import ap50, ground_truth_of, run_stream
            dets = run_stream(validation, w.copy(), cfg, workers=workers)
            entry["ap50"] = ap50(dets, ground_truth_of(validation))
        log.info("epoch %d loss %.5f ap50 %s", epoch, entry["loss"], entry["ap50"])
        lines.append(json.dumps(entry, sort_keys=True))
    if metrics_path is not None:
        with open(metrics_path, "w") as fh:
            fh.write("".join(line + "\n" for line in lines))
    return w
