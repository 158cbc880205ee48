"""Temporal chrominance trigger.

The blue channel of frame ``j`` (1-based) is scaled by
``(1 - delta) + delta * cos(2*pi*(j - 1) / period)``; red and green are
left untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .video import Dataset, LabeledVideo, as_video

BLUE = 2
MAX_DELTA = 0.5


@dataclass(frozen=True)
class TriggerParams:
    delta: float
    period: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.delta <= MAX_DELTA:
            # negative blue intensities above 0.5 are meaningless, so fail loudly
            raise ValueError(f"delta must lie in [0, {MAX_DELTA}], got {self.delta}")
        if not self.period >= 1.0:
            raise ValueError(f"period must be >= 1, got {self.period}")
        object.__setattr__(self, "delta", float(self.delta))
        object.__setattr__(self, "period", float(self.period))


def modulation_factor(j, p: TriggerParams):
    """Blue-channel gain for 1-based frame number(s) ``j``."""
    j = np.asarray(j)
    if np.any(j < 1):
        raise ValueError("frame numbers are 1-based")
    out = (1.0 - p.delta) + p.delta * np.cos(2.0 * math.pi * (j - 1) / p.period)
    return float(out) if out.ndim == 0 else out


def frame_factors(n_frames: int, p: TriggerParams) -> np.ndarray:
    return modulation_factor(np.arange(1, n_frames + 1), p)


def is_identity(p: TriggerParams) -> bool:
    return p.delta == 0.0 or p.period == 1.0


def poison_video(x: np.ndarray, p: TriggerParams) -> np.ndarray:
    x = as_video(x)
    if is_identity(p):
        return x
    out = x.copy()
    gains = frame_factors(len(x), p).astype(out.dtype)
    out[..., BLUE] *= gains[:, None, None]
    out.flags.writeable = False
    return out


def poison_frames(frames: np.ndarray, frame_numbers: np.ndarray, p: TriggerParams) -> np.ndarray:
    """Apply the trigger to loose frames given their 1-based source positions."""
    frames = np.asarray(frames)
    if is_identity(p):
        return frames
    out = frames.copy()
    gains = modulation_factor(np.asarray(frame_numbers), p)
    out[..., BLUE] *= np.asarray(gains, dtype=out.dtype).reshape(-1, 1, 1)
    return out


def poison_subset(d: Dataset, indices: Iterable[int], p: TriggerParams) -> Dataset:
    """Trigger the items at ``indices``; labels stay as they are."""
    indices = list(indices)
    for i in indices:
        if not 0 <= i < len(d):
            raise IndexError(f"index {i} out of range for dataset of size {len(d)}")
    updates = {}
    for i in indices:
        it = d.items[i]
        updates[i] = LabeledVideo(poison_video(it.video, p), it.label, it.identity)
    return d.replace(updates)
