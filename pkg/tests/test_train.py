import json

import numpy as np
import pytest

from vagg.config import PipelineConfig
from vagg.errors import DataError, StateError
from vagg.fam import AggregationBatch, FamWeights, attention_forward, pool_matrix, value_similarity
from vagg.fsm import select_features
from vagg.stream import FrameRecord
from vagg.synth import SynthConfig, generate
from vagg.train import assign_labels, backward, evaluate_loss, forward_loss, train

from oracles import (fam_oracle, finite_difference_grads, gradient_toy_instance, random_batch,
                     random_weights, relative_error)

SMALL_SYNTH = SynthConfig(num_videos=2, frames_per_video=10, background_preds_per_frame=12, d_q=16)
SMALL_CFG = PipelineConfig(a=8, m=2, d_head=4, f_g=3, train_frames=4)


def test_survivor_sets_have_margin():
    # finite differences only agree if no similarity sits right at the threshold
    batch, w, labels, tau = gradient_toy_instance()
    sim = value_similarity(attention_forward(batch, w, "affinity")[:, w.D:])
    off = sim[~np.eye(batch.N, dtype=bool)]
    assert np.abs(off - tau).min() > 1e-3
    M = pool_matrix(sim, tau)
    assert ((M > 0).sum(axis=1) > 1).any()


@pytest.mark.parametrize("mode", ["affinity", "qk", "cosine"])
def test_gradients_match_finite_differences(mode):
    batch, w, labels, tau = gradient_toy_instance()
    loss, cache = forward_loss(batch, labels, w, tau, mode)
    grads = backward(cache)
    numeric = finite_difference_grads(lambda ww: forward_loss(batch, labels, ww, tau, mode)[0], w)
    for name, g in grads.arrays().items():
        if mode == "cosine" and name in ("W_q", "W_k"):
            assert not g.any()
            continue
        assert np.linalg.norm(numeric[name]) > 1e-6, name
        assert relative_error(g, numeric[name]) < 1e-4, name


def test_forward_loss_matches_oracle():
    batch, w, labels, tau = gradient_toy_instance()
    for mode in ("affinity", "qk"):
        loss, _ = forward_loss(batch, labels, w, tau, mode)
        probs = fam_oracle(batch.C_all, batch.R_all, batch.P_all, w, mode == "affinity", tau)
        want = -np.mean(np.log(probs[np.arange(batch.N), labels]))
        assert loss == pytest.approx(want, abs=1e-10)


def test_uniform_prediction_loss(rng):
    w = random_weights(rng, 4, 2, 2, 5)
    w.W_out[:] = 0.0
    loss, _ = forward_loss(random_batch(rng, 6, 4), rng.integers(0, 5, 6), w, 0.5)
    assert loss == pytest.approx(np.log(5), abs=1e-12)


def test_single_class_has_zero_loss_and_gradients(rng):
    w = random_weights(rng, 4, 2, 2, 1)
    loss, cache = forward_loss(random_batch(rng, 5, 4), np.zeros(5), w, 0.5)
    assert loss == 0.0
    for g in backward(cache).arrays().values():
        assert not g.any()


def test_zeroed_head_gets_no_attention_gradient(rng):
    # with head 1's value projection and its classifier rows at zero, nothing downstream depends on
    # that head's queries and keys
    w = random_weights(rng, 4, 2, 2, 3)
    w.W_v[1] = 0.0
    D, dh = w.D, w.d_head
    for block in range(4):
        w.W_out[block * D + dh:block * D + 2 * dh] = 0.0
    loss, cache = forward_loss(random_batch(rng, 6, 4), rng.integers(0, 3, 6), w, 0.5)
    g = backward(cache)
    assert not g.W_q[:, 1].any() and not g.W_k[:, 1].any()
    assert np.abs(g.W_q[:, 0]).max() > 0


def test_labels_are_range_checked(rng):
    w = random_weights(rng, 4, 1, 2, 3)
    batch = random_batch(rng, 3, 4)
    with pytest.raises(IndexError):
        forward_loss(batch, [0, 1, 3], w, 0.5)
    with pytest.raises(IndexError):
        forward_loss(batch, [0, -1, 2], w, 0.5)
    with pytest.raises(ValueError):
        forward_loss(batch, [0, 1], w, 0.5)


def test_stale_cache_raises(rng):
    w = random_weights(rng, 4, 1, 2, 3)
    _, cache = forward_loss(random_batch(rng, 3, 4), [0, 1, 2], w, 0.5)
    w.sgd_step(FamWeights.zeros_like(w), 0.1)
    with pytest.raises(StateError):
        backward(cache)


def test_assign_labels():
    frame = FrameRecord(0, 0, [[0, 0, 10, 10], [50, 50, 60, 60], [0, 0, 9, 10]], [[0.9, 0.1]] * 3,
                        [0.9, 0.8, 0.7], np.eye(3), np.eye(3), [0, 1, 2])
    fs = select_features(frame, PipelineConfig(nms_select=1.0))
    labels = assign_labels(fs, np.array([[0, 0, 10, 10]]), np.array([1]), background=2)
    assert dict(zip(fs.source_rows.tolist(), labels.tolist())) == {0: 1, 1: 2, 2: 1}


def test_lr_zero_leaves_weights_unchanged():
    records = generate(SMALL_SYNTH)
    start = FamWeights.init(16, 2, 4, 6, seed=3)
    w = train(records, SMALL_CFG, epochs=2, lr=0.0, seed=3, weights=start)
    assert w.allclose(start)


def test_training_is_deterministic(tmp_path):
    records = generate(SMALL_SYNTH)
    a = train(records, SMALL_CFG, 2, 0.5, seed=7, metrics_path=tmp_path / "a.jsonl")
    b = train(records, SMALL_CFG, 2, 0.5, seed=7, metrics_path=tmp_path / "b.jsonl")
    assert a.allclose(b)
    a.save(tmp_path / "a.bin")
    b.save(tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_metrics_log_lines(tmp_path):
    records = generate(SMALL_SYNTH)
    train(records, SMALL_CFG, 3, 0.5, seed=1, validation=records, metrics_path=tmp_path / "m.jsonl")
    rows = [json.loads(line) for line in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2, 3]
    assert all(r["loss"] >= 0 and 0 <= r["ap50"] <= 1 for r in rows)


@pytest.mark.parametrize("seed", range(5))
def test_one_epoch_reduces_loss(seed):
    records = generate(SynthConfig(num_videos=3, seed=seed))
    cfg = PipelineConfig(seed=seed)
    init = FamWeights.init(64, cfg.m, cfg.d_head, 6, seed)
    before = evaluate_loss(records, init, cfg)
    after = evaluate_loss(records, train(records, cfg, 1, 0.5, seed), cfg)
    assert after < before


def test_training_needs_ground_truth():
    records = [FrameRecord(r.video_id, r.frame_id, r.boxes, r.class_scores, r.iou_scores, r.feature_cls,
                           r.feature_reg, r.position_ids) for r in generate(SMALL_SYNTH)]
    with pytest.raises(DataError):
        train(records, SMALL_CFG, 1, 0.5, seed=0)


def test_training_rejects_baseline_mode():
    with pytest.raises(ValueError):
        train(generate(SMALL_SYNTH), SMALL_CFG.with_(mode="baseline"), 1, 0.5, seed=0)
