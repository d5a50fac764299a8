"""Train the aggregation weights and compare against the raw detector.

A small version of the end-to-end comparison: same stream, three decoders.
Degraded frames are where aggregation should earn its keep.
"""
import numpy as np

from vagg import PipelineConfig, SynthConfig, ap50, generate, run_stream, train
from vagg.pipeline import ground_truth_of
from vagg.synth import split_videos

scfg = SynthConfig(num_videos=10, seed=0)
tr, ev = split_videos(generate(scfg), 7)
gts = ground_truth_of(ev)
cfg = PipelineConfig(seed=0)

# %% the raw detector, decoded per frame
print(f"baseline  AP50 {ap50(run_stream(ev, None, cfg.with_(mode='baseline')), gts):.4f}")

# %% two attention variants, trained the same way
for mode in ("qk", "affinity"):
    c = cfg.with_(mode=mode)
    w = train(tr, c, epochs=8, lr=0.5, seed=0)
    dets = run_stream(ev, w, c)
    print(f"{mode:9s} AP50 {ap50(dets, gts):.4f}")

# %% AP50 restricted to degraded frames shows where the gain comes from
deg = {(r.video_id, r.frame_id) for r in ev if r.degraded}
gts_deg = [g for g in gts if (g.video_id, g.frame_id) in deg]
for name, c, weights in (("baseline", cfg.with_(mode="baseline"), None), ("affinity", cfg, w)):
    dets = [d for d in run_stream(ev, weights, c) if (d.video_id, d.frame_id) in deg]
    print(f"degraded frames only, {name:8s} AP50 {ap50(dets, gts_deg):.4f}")
