"""Feature selection on one synthetic frame.

A dense detector emits many overlapping predictions per frame. Selection
keeps the k most confident, suppresses near-duplicates, and caps the rest
at a, so only a handful of rows reach the aggregation step.
"""
import numpy as np

from vagg import PipelineConfig, SynthConfig, generate, select_features, top_k_select

# %% one short video, default generator settings otherwise
records = generate(SynthConfig(num_videos=1, frames_per_video=4, seed=1))
frame = records[0]
print(f"frame {frame.frame_id}: {len(frame)} dense predictions, {len(frame.gt_boxes)} objects")

# %% confidence is max class score times the IoU score
conf = frame.confidences()
print("top five confidences:", np.round(np.sort(conf)[::-1][:5], 3))

# %% top-k alone (ties broken by position id)
top = top_k_select(frame, 10)
print("top-10 classes:", [int(np.argmax(p.class_scores)) for p in top])

# %% full selection with the default thresholds
cfg = PipelineConfig()
fs = select_features(frame, cfg)
print(f"selected {fs.a_eff} rows (cap a={cfg.a}); P columns are (class score, IoU score)")
print(np.round(fs.P[:5], 3))

# %% the object predictions should lead the list
n_obj = len(frame.gt_classes)
print("object rows among the first five:", sorted(set(fs.source_rows[:5].tolist()) & set(range(n_obj))))

# %% a tiny cap: the order of survivors never changes as a grows
for a in (2, 5, 10):
    rows = select_features(frame, cfg.with_(a=a)).source_rows
    print(f"a={a:2d}", rows.tolist())
