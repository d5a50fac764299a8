"""Reference-frame sampling around a keyframe."""
from __future__ import annotations

import numpy as np


def _check(video_len: int, count: int, key_idx: int) -> None:
    if video_len < 1:
        raise ValueError(f"video_len must be >= 1, got {video_len}")
    if not 0 <= key_idx < video_len:
        raise IndexError(f"key_idx {key_idx} outside [0, {video_len})")
    if count < 0:
        raise ValueError(f"reference count must be >= 0, got {count}")


def draw_rng(seed: int, video_id: int, key_idx: int) -> np.random.Generator:
    """Generator keyed on (seed, video, keyframe) so draws do not depend on evaluation order."""
    return np.random.default_rng(np.random.SeedSequence([seed, video_id, key_idx]))


def sample_global(video_len: int, f_g: int, key_idx: int, seed: int, video_id: int = 0) -> list[int]:
    """The keyframe plus f_g distinct frames drawn uniformly from the rest of the video."""
    _check(video_len, f_g, key_idx)
    if f_g >= video_len - 1:
        return list(range(video_len))
    others = np.array([i for i in range(video_len) if i != key_idx])
    picked = draw_rng(seed, video_id, key_idx).choice(others, size=f_g, replace=False)
    return sorted([key_idx, *(int(i) for i in picked)])


def sample_local(video_len: int, f_l: int, key_idx: int) -> list[int]:
    """A window of f_l consecutive frames centred on the keyframe.

    Near the video ends the window is shifted rather than shrunk. The
    keyframe is always part of the output, so f_l = 0 yields just the key.
    """
    _check(video_len, f_l, key_idx)
    length = max(f_l, 1)
    if length >= video_len:
        return list(range(video_len))
    start = key_idx - (length - 1) // 2
    start = min(max(start, 0), video_len - length)
    return list(range(start, start + length))


def sample_references(video_len: int, key_idx: int, cfg, video_id: int = 0) -> list[int]:
    if cfg.sampling_mode == "global":
        return sample_global(video_len, cfg.f_g, key_idx, cfg.seed, video_id)
    return sample_local(video_len, cfg.f_l, key_idx)
