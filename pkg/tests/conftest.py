import numpy as np
import pytest

from vagg.stream import FrameRecord


def random_frame(rng, n=20, num_classes=3, d_q=8, video_id=0, frame_id=0, with_gt=False, canvas=100.0):
    x1 = rng.uniform(0, canvas * 0.7, n)
    y1 = rng.uniform(0, canvas * 0.7, n)
    w = rng.uniform(5, canvas * 0.3, n)
    h = rng.uniform(5, canvas * 0.3, n)
    kw = {}
    if with_gt:
        kw = dict(gt_boxes=[[10, 10, 40, 40]], gt_classes=[int(rng.integers(num_classes))])
    return FrameRecord(
        video_id=video_id,
        frame_id=frame_id,
        boxes=np.stack([x1, y1, x1 + w, y1 + h], axis=1),
        class_scores=rng.uniform(0, 1, (n, num_classes)),
        iou_scores=rng.uniform(0, 1, n),
        feature_cls=rng.normal(size=(n, d_q)),
        feature_reg=rng.normal(size=(n, d_q)),
        position_ids=rng.permutation(4 * n)[:n],
        **kw,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
