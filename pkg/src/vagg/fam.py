"""Cross-frame feature aggregation.

Proposals from all sampled frames are stacked into one batch and attend to
each other with multi-head scaled dot-product attention. In the affinity
mode the attention logits toward key ``j`` are multiplied (elementwise,
before the softmax) by the detector's confidence in proposal ``j``. The
classification and regression branches share one value projection built
from classification features. Aggregated features are concatenated with the
raw values, average-pooled over references whose layer-normalized value
similarity reaches ``tau``, and classified by a single linear layer.

All arithmetic runs in float64; weights and features are stored as float32
on disk only.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import FormatError, NumericError, SchemaError

BRANCHES = ("cls", "reg")
LN_EPS = 1e-5
ATTENTION_MODES = ("affinity", "qk", "cosine")

_W_HEADER = struct.Struct("<4sHHHHH")
W_MAGIC = b"VAGW"
W_VERSION = 1


@dataclass(eq=False)
class FamWeights:
    """Projection matrices of the aggregation module.

    W_q, W_k: (2, m, d_q, d_head), indexed [branch, head]; branch 0 is cls,
    branch 1 is reg. W_v: (m, d_q, d_head), shared by both branches.
    W_out: (4 * m * d_head, num_classes), applied to [pooled, own row].
    """

    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray
    W_out: np.ndarray
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        for name in ("W_q", "W_k", "W_v", "W_out"):
            setattr(self, name, np.array(getattr(self, name), dtype=np.float64))
        self.check()

    @property
    def m(self) -> int:
        return self.W_v.shape[0]

    @property
    def d_q(self) -> int:
        return self.W_v.shape[1]

    @property
    def d_head(self) -> int:
        return self.W_v.shape[2]

    @property
    def D(self) -> int:
        return self.m * self.d_head

    @property
    def num_classes(self) -> int:
        return self.W_out.shape[1]

    def check(self) -> None:
        m, d_q, d_head = self.W_v.shape
        qk_shape = (2, m, d_q, d_head)
        if self.W_q.shape != qk_shape or self.W_k.shape != qk_shape:
            raise SchemaError(f"W_q/W_k shapes {self.W_q.shape}/{self.W_k.shape}, expected {qk_shape}")
        if self.W_out.ndim != 2 or self.W_out.shape[0] != 4 * m * d_head:
            raise SchemaError(f"W_out shape {self.W_out.shape}, expected ({4 * m * d_head}, num_classes)")
        for name, arr in self.arrays().items():
            if not np.all(np.isfinite(arr)):
                raise NumericError("weights", name)

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W_q": self.W_q, "W_k": self.W_k, "W_v": self.W_v, "W_out": self.W_out}

    def copy(self) -> "FamWeights":
        return FamWeights(**{k: v.copy() for k, v in self.arrays().items()})

    @classmethod
    def zeros_like(cls, other: "FamWeights") -> "FamWeights":
        return cls(**{k: np.zeros_like(v) for k, v in other.arrays().items()})

    @classmethod
    def init(cls, d_q: int, m: int, d_head: int, num_classes: int, seed: int = 0,
             qk_scale: float = np.sqrt(3.0)) -> "FamWeights":
        """Random starting point for fine-tuning.

        W_v ~ U(-1/sqrt(d_q), 1/sqrt(d_q)) and W_out = 0, so training starts
        from uniform class predictions. W_q ~ U(-qk_scale, qk_scale) with
        W_k tied to W_q: for unit-norm inputs the projected entries then have
        unit variance and the initial logits rank keys by feature similarity.
        """
        rng = np.random.default_rng(seed)
        s = 1.0 / np.sqrt(d_q)
        W_q = rng.uniform(-qk_scale, qk_scale, (2, m, d_q, d_head))
        return cls(
            W_q=W_q,
            W_k=W_q.copy(),
            W_v=rng.uniform(-s, s, (m, d_q, d_head)),
            W_out=np.zeros((4 * m * d_head, num_classes)),
        )

    def sgd_step(self, grads: "FamWeights", lr: float) -> None:
        for name, arr in self.arrays().items():
            arr -= lr * getattr(grads, name)
        self.version += 1

    def allclose(self, other: "FamWeights", atol=0.0) -> bool:
        return all(np.allclose(a, b, rtol=0, atol=atol) for a, b in zip(self.arrays().values(),
                                                                        other.arrays().values()))

    def save(self, path) -> None:
        """Write the framed float32 weights file; bytes depend only on the values."""
        header = _W_HEADER.pack(W_MAGIC, W_VERSION, self.m, self.d_head, self.d_q, self.num_classes)
        body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in self.arrays().values())
        Path(path).write_bytes(header + body)

    @classmethod
    def load(cls, path) -> "FamWeights":
        buf = Path(path).read_bytes()
        if len(buf) < _W_HEADER.size:
            raise FormatError("weights file shorter than its header")
        magic, version, m, d_head, d_q, num_classes = _W_HEADER.unpack_from(buf, 0)
        if magic != W_MAGIC:
            raise FormatError(f"bad weights magic {magic!r}")
        if version != W_VERSION:
            raise FormatError(f"unsupported weights version {version}")
        D = m * d_head
        shapes = [(2, m, d_q, d_head), (2, m, d_q, d_head), (m, d_q, d_head), (4 * D, num_classes)]
        total = sum(int(np.prod(s)) for s in shapes)
        if len(buf) != _W_HEADER.size + 4 * total:
            raise SchemaError(f"weights payload of {len(buf) - _W_HEADER.size} bytes, expected {4 * total}")
        flat = np.frombuffer(buf, dtype="<f4", offset=_W_HEADER.size).astype(np.float64)
        parts, off = [], 0
        for s in shapes:
            size = int(np.prod(s))
            parts.append(flat[off:off + size].reshape(s))
            off += size
        return cls(*parts)


@dataclass(eq=False)
class AggregationBatch:
    """Row-stacked proposals of several frames (frame order, then confidence order)."""

    C_all: np.ndarray
    R_all: np.ndarray
    P_all: np.ndarray
    frame_of_row: np.ndarray

    def __post_init__(self):
        self.C_all = np.asarray(self.C_all, dtype=np.float64)
        self.R_all = np.asarray(self.R_all, dtype=np.float64)
        self.P_all = np.asarray(self.P_all, dtype=np.float64).reshape(-1, 2)
        self.frame_of_row = np.asarray(self.frame_of_row, dtype=np.int64).reshape(-1)
        n = self.C_all.shape[0]
        if not (self.R_all.shape == self.C_all.shape and self.P_all.shape[0] == n == self.frame_of_row.size):
            raise SchemaError("aggregation batch arrays disagree in row count or width")

    @property
    def N(self) -> int:
        return self.C_all.shape[0]

    @classmethod
    def from_feature_sets(cls, sets: Sequence) -> "AggregationBatch":
        sets = list(sets)
        d_q = next((s.C.shape[1] for s in sets if s.a_eff), 0)
        return cls(
            C_all=np.concatenate([s.C.reshape(-1, d_q) for s in sets]) if sets else np.zeros((0, 0)),
            R_all=np.concatenate([s.R.reshape(-1, d_q) for s in sets]) if sets else np.zeros((0, 0)),
            P_all=np.concatenate([s.P.reshape(-1, 2) for s in sets]) if sets else np.zeros((0, 2)),
            frame_of_row=np.concatenate([np.full(s.a_eff, s.frame_id) for s in sets]) if sets else [],
        )

    def permuted(self, perm) -> "AggregationBatch":
        perm = np.asarray(perm)
        return AggregationBatch(self.C_all[perm], self.R_all[perm], self.P_all[perm], self.frame_of_row[perm])


class OpCounter:
    """Tallies multiply-accumulates of every matrix product, keyed by stage."""

    def __init__(self):
        self.macs: dict[str, int] = {}

    def add(self, stage: str, count: int) -> None:
        self.macs[stage] = self.macs.get(stage, 0) + int(count)

    def matmul(self, stage: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.add(stage, a.shape[0] * a.shape[1] * b.shape[1])
        return a @ b

    @property
    def total(self) -> int:
        return sum(self.macs.values())


def _mm(counter: Optional[OpCounter], stage: str, a, b):
    return a @ b if counter is None else counter.matmul(stage, a, b)


def _finite(stage: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(stage)
    return arr


def scaled_dot_attention_logits(Q, K) -> np.ndarray:
    """A[i, j] = <Q_i, K_j> / sqrt(d)."""
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if Q.ndim != 2 or Q.shape != K.shape or Q.shape[1] < 1:
        raise ValueError(f"Q and K must be equal-shape (n, d>=1) matrices, got {Q.shape} and {K.shape}")
    return Q @ K.T / np.sqrt(Q.shape[1])


def build_score_matrices(P_all) -> tuple[np.ndarray, np.ndarray]:
    """Repeat each score row N times: S[i, j] is the score of key proposal j."""
    P = np.asarray(P_all, dtype=np.float64).reshape(-1, 2)
    n = P.shape[0]
    return np.tile(P[:, 0], (n, 1)), np.tile(P[:, 1], (n, 1))


def softmax_rows(X: np.ndarray) -> np.ndarray:
    Z = np.exp(X - X.max(axis=1, keepdims=True))
    return Z / Z.sum(axis=1, keepdims=True)


def layernorm_rows(X, eps: float = LN_EPS) -> np.ndarray:
    """Per-row standardization with population variance, no affine parameters.

    A single column has zero variance and maps to zeros, like any constant row.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] < 1:
        raise ValueError("layernorm_rows needs an (N, D>=1) matrix")
    mu = X.mean(axis=1, keepdims=True)
    var = X.var(axis=1, keepdims=True)
    return (X - mu) / np.sqrt(var + eps)


def value_similarity(V_full, counter: Optional[OpCounter] = None) -> np.ndarray:
    """Layer-normalized inner products divided by the width, so self-similarity is ~1."""
    Z = layernorm_rows(V_full)
    return _mm(counter, "similarity", Z, Z.T) / Z.shape[1]


def survivor_mask(sim: np.ndarray, tau: float) -> np.ndarray:
    mask = sim >= tau
    np.fill_diagonal(mask, True)
    return mask


def pool_matrix(sim: np.ndarray, tau: float) -> np.ndarray:
    """Row-stochastic averaging matrix over each row's survivor set."""
    mask = survivor_mask(sim, tau).astype(np.float64)
    return mask / mask.sum(axis=1, keepdims=True)


def average_pool_refs(SA_F, V_c_full, tau: float, counter: Optional[OpCounter] = None) -> np.ndarray:
    """Mean of SA_F over the rows whose value similarity to row i is >= tau (row i always included)."""
    SA_F = np.asarray(SA_F, dtype=np.float64)
    sim = value_similarity(V_c_full, counter)
    return _mm(counter, "pooling", pool_matrix(sim, tau), SA_F)


def classify(pooled, key, w: FamWeights, counter: Optional[OpCounter] = None) -> np.ndarray:
    """Softmax over classes of [pooled, key] @ W_out."""
    Z = np.concatenate([np.asarray(pooled, np.float64), np.asarray(key, np.float64)], axis=1)
    if Z.shape[1] != w.W_out.shape[0]:
        raise SchemaError(f"classifier input width {Z.shape[1]} != W_out rows {w.W_out.shape[0]}")
    return softmax_rows(_mm(counter, "classify", Z, w.W_out))


def _cosine_matrix(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    U = X / safe[:, None]
    return U @ U.T


@dataclass
class AttentionTrace:
    """Per-head intermediates of one attention pass, kept for backward and diagnostics."""

    X: tuple  # (C_all, R_all)
    S: tuple  # (S_c, S_r), None entries when unmodulated
    Q: list = field(default_factory=list)  # [branch][head]
    K: list = field(default_factory=list)
    weights: list = field(default_factory=list)  # softmax outputs [branch][head]
    V: list = field(default_factory=list)  # [head]


def attention_forward(batch: AggregationBatch, w: FamWeights, mode: str = "affinity",
                      counter: Optional[OpCounter] = None, trace: Optional[AttentionTrace] = None):
    if mode not in ATTENTION_MODES:
        raise ValueError(f"attention mode must be one of {ATTENTION_MODES}, got {mode!r}")
    if batch.N < 1:
        raise ValueError("aggregation needs at least one proposal")
    if batch.C_all.shape[1] != w.d_q:
        raise SchemaError(f"feature width {batch.C_all.shape[1]} != weights d_q {w.d_q}")
    X = (batch.C_all, batch.R_all)
    if mode == "affinity":
        S = build_score_matrices(batch.P_all)
        if counter is not None:
            counter.add("hadamard", 2 * w.m * batch.N * batch.N)
    else:
        S = (None, None)
    if mode == "cosine":
        cos = tuple(_cosine_matrix(x) for x in X)
    scale = 1.0 / np.sqrt(w.d_head)
    if trace is not None:
        trace.X, trace.S = X, S
        trace.Q, trace.K, trace.weights = [[], []], [[], []], [[], []]
    heads, values = [], []
    for h in range(w.m):
        V = _finite("value_projection", _mm(counter, "projection_v", batch.C_all, w.W_v[h]))
        out = 0.0
        for b in range(2):
            if mode == "cosine":
                Q = K = None
                logits = cos[b]
            else:
                Q = _mm(counter, "projection_qk", X[b], w.W_q[b, h])
                K = _mm(counter, "projection_qk", X[b], w.W_k[b, h])
                logits = _mm(counter, "attention_logits", Q, K.T) * scale
                if S[b] is not None:
                    logits = S[b] * logits
            P = softmax_rows(_finite(f"attention_logits[{BRANCHES[b]},{h}]", logits))
            out = out + _mm(counter, "attention_values", P, V)
            if trace is not None:
                trace.Q[b].append(Q)
                trace.K[b].append(K)
                trace.weights[b].append(P)
        heads.append(out)
        values.append(V)
        if trace is not None:
            trace.V.append(V)
    SA = _finite("aggregation", np.concatenate(heads, axis=1))
    return np.concatenate([SA, np.concatenate(values, axis=1)], axis=1)


def affinity_attention(batch: AggregationBatch, w: FamWeights, mode: str = "affinity",
                       counter: Optional[OpCounter] = None) -> np.ndarray:
    """Aggregated features SA_F (N x 2D): [SA_c + SA_r summed per head and concatenated, V_c]."""
    return attention_forward(batch, w, mode, counter)


def fam_forward(batch: AggregationBatch, w: FamWeights, mode: str, tau: float,
                counter: Optional[OpCounter] = None) -> np.ndarray:
    """Refined class probabilities (N x num_classes) for every row of the batch."""
    SA_F = affinity_attention(batch, w, mode, counter)
    pooled = average_pool_refs(SA_F, SA_F[:, w.D:], tau, counter)
    return _finite("classify", classify(pooled, SA_F, w, counter))


def cosine_select(batch: AggregationBatch, key_row: int, top_n: int) -> list[int]:
    """Rows of C_all most cosine-similar to the key row (key excluded, zero-norm rows skipped)."""
    if not 0 <= key_row < batch.N:
        raise IndexError(f"key_row {key_row} outside [0, {batch.N})")
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    C = batch.C_all
    norms = np.linalg.norm(C, axis=1)
    if norms[key_row] == 0:
        return []
    cand = np.array([j for j in range(batch.N) if j != key_row and norms[j] > 0], dtype=np.int64)
    if cand.size == 0:
        return []
    sims = (C[cand] @ C[key_row]) / (norms[cand] * norms[key_row])
    order = np.argsort(-sims, kind="stable")
    return [int(cand[i]) for i in order[:top_n]]


def reference_ranking(batch: AggregationBatch, w: FamWeights, key_row: int, mode: str,
                      top_n: int = 4) -> list[int]:
    """References contributing most to a key proposal, self excluded.

    ``cosine`` ranks by raw feature cosine; ``qk``/``affinity`` rank by the
    attention weight averaged over heads and both branches.
    """
    if mode == "cosine":
        return cosine_select(batch, key_row, top_n)
    trace = AttentionTrace(X=(), S=())
    attention_forward(batch, w, mode, trace=trace)
    weight = sum(P[key_row] for branch in trace.weights for P in branch)
    weight = np.asarray(weight, dtype=np.float64).copy()
    weight[key_row] = -np.inf
    order = np.argsort(-weight, kind="stable")
    return [int(j) for j in order[:min(top_n, batch.N - 1)]]
