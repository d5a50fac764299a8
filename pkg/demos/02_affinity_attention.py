"""How confidence scores steer cross-frame attention.

Stack proposals from a few frames, then compare plain query-key attention
with the affinity variant, where each logit is multiplied by the key's
score before the softmax. A low-score key has its logit pulled toward
zero, a neutral value rather than a mask: its weight flattens toward the
average, so feature similarity alone can no longer hand it a large share.
"""
import numpy as np

from vagg import AggregationBatch, FamWeights, PipelineConfig, SynthConfig, generate, select_features
from vagg.fam import AttentionTrace, attention_forward, value_similarity, survivor_mask

cfg = PipelineConfig(a=6)
records = generate(SynthConfig(num_videos=1, frames_per_video=6, seed=2))
sets = [select_features(r, cfg) for r in records[:4]]
batch = AggregationBatch.from_feature_sets(sets)
w = FamWeights.init(batch.C_all.shape[1], cfg.m, cfg.d_head, 6, seed=0)
print(f"{batch.N} proposals from {len(sets)} frames")

# %% attention of the first key proposal, head 0, classification branch
weights = {}
for mode in ("qk", "affinity"):
    tr = AttentionTrace(X=(), S=())
    attention_forward(batch, w, mode, trace=tr)
    weights[mode] = tr.weights[0][0][0]
cls_score = batch.P_all[:, 0]
low = cls_score < np.median(cls_score)
for mode, row in weights.items():
    print(f"{mode:8s} low-score keys: total {row[low].sum():.3f}, largest single weight {row[low].max():.3f}")

# %% with every score at 1 the two modes coincide
ones = AggregationBatch(batch.C_all, batch.R_all, np.ones_like(batch.P_all), batch.frame_of_row)
same = np.array_equal(attention_forward(ones, w, "qk"), attention_forward(ones, w, "affinity"))
print("unit scores give identical outputs:", same)

# %% survivors for average pooling shrink as tau rises; self always stays
SA_F = attention_forward(batch, w, "affinity")
sim = value_similarity(SA_F[:, w.D:])
for tau in (0.0, 0.5, 0.75, 1.0):
    print(f"tau={tau:4.2f} mean survivors per row: {survivor_mask(sim, tau).sum(axis=1).mean():.2f}")
