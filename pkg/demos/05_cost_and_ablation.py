"""Cost of aggregation and a quick threshold sweep.

Attention cost is quadratic in the number of stacked proposals, so the
reference count and the per-frame cap trade accuracy for time.
"""
import time

import numpy as np

from vagg import AggregationBatch, FamWeights, PipelineConfig, SynthConfig, count_ops, fam_forward, generate, train
from vagg.pipeline import ablate
from vagg.synth import split_videos

cfg = PipelineConfig()

# %% closed-form counts: doubling N multiplies attention MACs by four
for n in (256, 512, 1024):
    ops = count_ops(cfg, n)
    print(f"N={n:5d} attention MACs {ops['attention']:>13,d}  total {ops['total']:>13,d}")

# %% measured time of one aggregation grows faster than N
w = FamWeights.init(64, cfg.m, cfg.d_head, 6, seed=0)
rng = np.random.default_rng(0)
for n in (256, 512, 1024):
    batch = AggregationBatch(rng.normal(size=(n, 64)), rng.normal(size=(n, 64)), rng.uniform(size=(n, 2)),
                             np.zeros(n))
    t0 = time.perf_counter()
    fam_forward(batch, w, "affinity", cfg.tau)
    print(f"N={n:5d} {1e3 * (time.perf_counter() - t0):7.1f} ms")

# %% a small sweep over the pooling threshold
tr, ev = split_videos(generate(SynthConfig(num_videos=8, seed=1)), 6)
w = train(tr, cfg.with_(seed=1), epochs=6, lr=0.5, seed=1)
for row in ablate(ev, w, cfg.with_(seed=1, f_g=7), "tau", [0.0, 0.5, 0.75, 1.0]):
    print(f"tau={row['value']:4.2f} AP50 {row['ap50']:.4f}  {row['ms_per_frame']:.1f} ms/frame")
