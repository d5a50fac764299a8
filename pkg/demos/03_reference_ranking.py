"""Which references does a degraded key proposal listen to?

For an object seen on a degraded frame, rank the other proposals three
ways: raw feature cosine, trained query-key attention, and trained
affinity attention. A useful ranking puts clean views of the same object
first.
"""
import numpy as np

from vagg import AggregationBatch, PipelineConfig, SynthConfig, generate, select_features, train
from vagg.fam import reference_ranking
from vagg.synth import split_videos
from vagg.train import assign_labels

scfg = SynthConfig(num_videos=6, seed=3)
tr, ev = split_videos(generate(scfg), 5)
cfg = PipelineConfig(seed=3, f_g=7)
models = {m: train(tr, cfg.with_(mode=m), 6, 0.5, seed=3) for m in ("qk", "affinity")}

# %% a degraded keyframe plus seven clean references from the held-out video
video = ev
key = next(i for i, r in enumerate(video) if r.degraded)
refs = [i for i, r in enumerate(video) if not r.degraded and i != key][:7]
frames = [key] + refs
sets = [select_features(video[i], cfg) for i in frames]
batch = AggregationBatch.from_feature_sets(sets)
labels = np.concatenate([assign_labels(s, video[i].gt_boxes, video[i].gt_classes, scfg.num_classes)
                         for s, i in zip(sets, frames)])
key_row = int(np.flatnonzero(labels[:sets[0].a_eff] < scfg.num_classes)[0])
target = labels[key_row]
print(f"key frame {key} (degraded), key proposal class {target}")

# %% share of the top four that are the same object class, clean frames only
for mode in ("cosine", "qk", "affinity"):
    w = models.get(mode, models["qk"])
    top = reference_ranking(batch, w, key_row, mode, top_n=4)
    hits = sum(labels[j] == target for j in top)
    print(f"{mode:8s} top-4 rows {top}  same class: {hits}/4")
