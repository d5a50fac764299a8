"""Explicit-loop reference implementations, written without touching vagg.fam internals."""
import math

import numpy as np


def _softmax(row):
    mx = max(row)
    ex = [math.exp(v - mx) for v in row]
    s = sum(ex)
    return [e / s for e in ex]


def _project(X, W):
    n, d_in = len(X), len(X[0])
    d_out = len(W[0])
    return [[sum(X[i][t] * W[t][c] for t in range(d_in)) for c in range(d_out)] for i in range(n)]


def _layernorm(row, eps=1e-5):
    mu = sum(row) / len(row)
    var = sum((v - mu) ** 2 for v in row) / len(row)
    return [(v - mu) / math.sqrt(var + eps) for v in row]


def attention_oracle(C, R, P, W_q, W_k, W_v, modulate):
    """SA_F rows: [sum over branches of attended values per head, raw values per head]."""
    C, R, P = np.asarray(C).tolist(), np.asarray(R).tolist(), np.asarray(P).tolist()
    n = len(C)
    m, dh = len(W_v), len(W_v[0][0])
    agg = [[0.0] * (m * dh) for _ in range(n)]
    raw = [[0.0] * (m * dh) for _ in range(n)]
    for h in range(m):
        V = _project(C, np.asarray(W_v[h]).tolist())
        for i in range(n):
            for c in range(dh):
                raw[i][h * dh + c] = V[i][c]
        for b, X in enumerate((C, R)):
            Q = _project(X, np.asarray(W_q[b][h]).tolist())
            K = _project(X, np.asarray(W_k[b][h]).tolist())
            for i in range(n):
                logits = []
                for j in range(n):
                    a = sum(Q[i][c] * K[j][c] for c in range(dh)) / math.sqrt(dh)
                    if modulate:
                        a *= P[j][b]
                    logits.append(a)
                wts = _softmax(logits)
                for c in range(dh):
                    agg[i][h * dh + c] += sum(wts[j] * V[j][c] for j in range(n))
    return [agg[i] + raw[i] for i in range(n)]


def similarity_oracle(V_full):
    Z = [_layernorm(list(r)) for r in np.asarray(V_full).tolist()]
    D = len(Z[0])
    return [[sum(a * b for a, b in zip(Z[i], Z[j])) / D for j in range(len(Z))] for i in range(len(Z))]


def pool_oracle(SA_F, V_full, tau):
    sim = similarity_oracle(V_full)
    SA_F = np.asarray(SA_F).tolist()
    out = []
    for i in range(len(SA_F)):
        members = [j for j in range(len(SA_F)) if j == i or sim[i][j] >= tau]
        out.append([sum(SA_F[j][c] for j in members) / len(members) for c in range(len(SA_F[0]))])
    return out


def classify_oracle(pooled, key, W_out):
    W_out = np.asarray(W_out).tolist()
    out = []
    for p, k in zip(np.asarray(pooled).tolist(), np.asarray(key).tolist()):
        z = p + k
        logits = [sum(z[t] * W_out[t][c] for t in range(len(z))) for c in range(len(W_out[0]))]
        out.append(_softmax(logits))
    return out


def fam_oracle(C, R, P, w, modulate, tau):
    SA_F = attention_oracle(C, R, P, w.W_q, w.W_k, w.W_v, modulate)
    D = w.m * w.d_head
    V_full = [row[D:] for row in SA_F]
    pooled = pool_oracle(SA_F, V_full, tau)
    return np.array(classify_oracle(pooled, SA_F, w.W_out))


def random_weights(rng, d_q, m, dh, num_classes):
    from vagg.fam import FamWeights
    D = m * dh
    return FamWeights(
        W_q=rng.normal(0, 0.8, (2, m, d_q, dh)),
        W_k=rng.normal(0, 0.8, (2, m, d_q, dh)),
        W_v=rng.normal(0, 0.8, (m, d_q, dh)),
        W_out=rng.normal(0, 0.8, (4 * D, num_classes)),
    )


def random_batch(rng, n, d_q, frames=2):
    from vagg.fam import AggregationBatch
    return AggregationBatch(
        C_all=rng.normal(size=(n, d_q)),
        R_all=rng.normal(size=(n, d_q)),
        P_all=rng.uniform(0, 1, (n, 2)),
        frame_of_row=np.sort(rng.integers(0, frames, n)),
    )


def finite_difference_grads(loss_fn, w, h=1e-4):
    """Central differences of loss_fn(w) for every entry of every weight matrix."""
    out = {}
    for name, arr in w.arrays().items():
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            plus = loss_fn(w)
            arr[idx] = old - h
            minus = loss_fn(w)
            arr[idx] = old
            num[idx] = (plus - minus) / (2 * h)
        out[name] = num
    return out


def relative_error(analytic, numeric):
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradient_toy_instance():
    """N=6, m=2, d_head=3 batch over two frames with a non-trivial survivor structure at tau=0.2."""
    from vagg.fam import AggregationBatch, FamWeights
    rng = np.random.default_rng(2024)
    N, d_q, m, dh, C = 6, 5, 2, 3, 4
    batch = AggregationBatch(rng.normal(size=(N, d_q)), rng.normal(size=(N, d_q)),
                             rng.uniform(0.1, 1.0, (N, 2)), np.arange(N) // 3)
    w = FamWeights.init(d_q, m, dh, C, seed=1, qk_scale=1.0)
    w.W_k[...] = rng.uniform(-1, 1, w.W_k.shape)
    w.W_out[...] = rng.normal(size=w.W_out.shape)
    labels = rng.integers(0, C, N)
    return batch, w, labels, 0.2
