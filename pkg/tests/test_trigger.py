import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tcbackdoor.trigger import TriggerParams, modulation_factor, poison_frames, poison_subset, poison_video
from tcbackdoor.video import Dataset, LabeledVideo


def scalar_oracle(x, delta, period):
    """Apply the blue-channel gain pixel by pixel with plain Python floats."""
    out = np.array(x, dtype=np.float32, copy=True)
    L, H, W, _ = out.shape
    for t in range(L):
        j = t + 1
        gain = np.float32((1.0 - delta) + delta * math.cos(2.0 * math.pi * (j - 1) / period))
        for r in range(H):
            for c in range(W):
                out[t, r, c, 2] = np.float32(out[t, r, c, 2]) * gain
    return out


@pytest.mark.parametrize(
    "j, delta, period, expected",
    [(1, 0.3, 8, 1.0), (2, 0.07, 2, 0.86), (3, 0.1, 8, 0.9)],
)
def test_modulation_factor_values(j, delta, period, expected):
    assert modulation_factor(j, TriggerParams(delta, period)) == pytest.approx(expected, abs=1e-12)


def test_modulation_factor_rejects_zero_based_index():
    with pytest.raises(ValueError):
        modulation_factor(0, TriggerParams(0.1, 2))


@pytest.mark.parametrize("delta, period", [(-0.1, 2), (0.51, 2), (0.1, 0.5)])
def test_invalid_params(delta, period):
    with pytest.raises(ValueError):
        TriggerParams(delta, period)


def test_non_integer_period_allowed():
    p = TriggerParams(0.2, 2.5)
    assert p.period == 2.5
    assert modulation_factor(2, p) == pytest.approx(0.8 + 0.2 * math.cos(2 * math.pi / 2.5))


@st.composite
def video_and_params(draw):
    L = draw(st.integers(1, 6))
    H = draw(st.integers(1, 4))
    W = draw(st.integers(1, 4))
    seed = draw(st.integers(0, 2**32 - 1))
    x = np.random.default_rng(seed).uniform(0, 1, (L, H, W, 3)).astype(np.float32)
    delta = draw(st.floats(0.0, 0.5))
    period = draw(st.floats(1.0, 20.0))
    return x, TriggerParams(delta, period)


@settings(max_examples=200, deadline=None)
@given(video_and_params())
def test_matches_scalar_oracle_and_keeps_range(case):
    x, p = case
    y = poison_video(x, p)
    assert np.array_equal(y, scalar_oracle(x, p.delta, p.period))
    assert np.array_equal(y[..., :2], x[..., :2])
    assert y.min() >= 0.0 and y.max() <= 1.0


@settings(max_examples=50, deadline=None)
@given(video_and_params())
def test_double_application_squares_the_gain(case):
    x, p = case
    twice = poison_video(poison_video(x, p), p)
    gains = np.array([modulation_factor(j, p) for j in range(1, len(x) + 1)])
    expected = x[..., 2].astype(np.float64) * gains[:, None, None] ** 2
    np.testing.assert_allclose(twice[..., 2], expected, rtol=1e-6, atol=1e-7)


def test_identity_cases_are_exact():
    x = np.random.default_rng(0).uniform(0, 1, (5, 3, 3, 3)).astype(np.float32)
    assert poison_video(x, TriggerParams(0.0, 4)).tobytes() == x.tobytes()
    assert poison_video(x, TriggerParams(0.3, 1)).tobytes() == x.tobytes()


def test_period_two_scales_even_frames_only():
    x = np.random.default_rng(1).uniform(0, 1, (6, 4, 4, 3)).astype(np.float32)
    y = poison_video(x, TriggerParams(0.07, 2))
    for t in range(6):
        # storage frame t is frame number t + 1
        if t % 2 == 0:
            assert np.array_equal(y[t], x[t])
        else:
            assert np.array_equal(y[t, ..., 2], x[t, ..., 2] * np.float32(0.86))
            assert np.array_equal(y[t, ..., :2], x[t, ..., :2])


def test_poison_frames_agrees_with_poison_video():
    x = np.random.default_rng(2).uniform(0, 1, (8, 4, 4, 3)).astype(np.float32)
    p = TriggerParams(0.3, 2)
    assert np.array_equal(poison_frames(x, np.arange(1, 9), p), poison_video(x, p))


def _dataset(n=6):
    rng = np.random.default_rng(3)
    return Dataset(tuple(LabeledVideo(rng.uniform(0, 1, (4, 4, 4, 3)).astype(np.float32), i % 2, i) for i in range(n)), "train")


def test_poison_subset_changes_exactly_the_chosen_items():
    d = _dataset()
    out = poison_subset(d, [0, 3, 4], TriggerParams(0.1, 2))
    changed = [i for i in range(len(d)) if out[i].video.tobytes() != d[i].video.tobytes()]
    assert changed == [0, 3, 4]
    assert [it.label for it in out] == [it.label for it in d]


def test_poison_subset_noops():
    d = _dataset()
    for out in (poison_subset(d, [], TriggerParams(0.3, 2)), poison_subset(d, range(len(d)), TriggerParams(0.0, 2))):
        assert all(a.video.tobytes() == b.video.tobytes() for a, b in zip(d, out))


def test_poison_subset_out_of_range():
    with pytest.raises(IndexError):
        poison_subset(_dataset(), [6], TriggerParams(0.1, 2))
