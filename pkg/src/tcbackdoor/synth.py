"""Seeded synthetic alive / rebroadcast video corpus.

Alive clips show an identity-coloured Gaussian blob with a fine skin
texture, drifting by a mean-reverting random walk under mildly flickering
warm (red/green) light. The texture moves with the face, so most of the
alive temporal variance is local rather than global.
Rebroadcast clips render the same kind of scene, then damp its temporal
variation, overlay a fixed-phase horizontal screen banding, add a warm
colour cast and a global all-channel refresh flicker.

Boundary ("hard") clips: alive ones move half as much and pick up a
half-contrast, screen-aligned banding, a slight cast and a weak all-channel
flicker, so they resemble replays; rebroadcast ones get half-contrast banding.

The blue plane carries no class or identity information: each clip gets a
random, temporally flat blue level shared by background and face. Both
classes then go through a camera white-balance wander (independent
per-channel frame gains), which masks small blue oscillations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .video import ALIVE, REBROADCAST, Dataset, IdentityDataset, LabeledVideo, extract_faces

TEMPORAL_DAMPING = 0.3


@dataclass(frozen=True)
class GenConfig:
    n_identities: int = 10
    videos_per_class_train: int = 200
    videos_per_class_test: int = 100
    height: int = 32
    width: int = 32
    frames: int = 16
    hardness: float = 0.3
    rebroadcast_ratio: float = 1.0  # 3.0 mirrors a 410 / 1200 style imbalance
    identity_train_fraction: float = 0.7
    seed: int = 0

    # renderer knobs
    motion_std: float = 1.0  # px per frame
    flicker_std: float = 0.02
    noise_std: float = 0.01
    banding: float = 0.15
    banding_period: float = 3.0  # rows; keep off multiples of the 4x4 pooling
    cast: float = 0.04
    screen_flicker_std: float = 0.08
    blue_range: tuple[float, float] = (0.15, 0.8)
    hard_alive_cast: float = 0.04
    hard_alive_banding: float = 0.5  # fraction of the screen banding contrast
    hard_alive_flicker: float = 0.03
    white_balance_jitter: float = 0.07  # max per-channel gain std
    texture: float = 2.0  # skin texture contrast, moves with the face

    def __post_init__(self):
        if min(self.n_identities, self.videos_per_class_train, self.videos_per_class_test) < 1:
            raise ValueError("counts must be >= 1")
        if self.n_identities < 2:
            raise ValueError("need at least two identities for disjoint train/test pools")
        if not 0.0 <= self.hardness <= 1.0:
            raise ValueError("hardness must lie in [0, 1]")
        if min(self.height, self.width, self.frames) < 1:
            raise ValueError("geometry must be positive")

    @property
    def geometry(self) -> tuple[int, int, int]:
        return self.frames, self.height, self.width

    def identity_pools(self) -> tuple[range, range]:
        n_train = self.n_identities // 2
        return range(0, n_train), range(n_train, self.n_identities)


@dataclass(frozen=True)
class _Identity:
    color_rg: tuple[float, float]
    center: tuple[float, float]
    sigma: float
    aspect: float
    waves: np.ndarray  # (k, 3): row freq, col freq, phase of the skin texture


def _texture_waves(rng: np.random.Generator, k: int = 3) -> np.ndarray:
    freq = 2 * math.pi / rng.uniform(5.0, 9.0, k)
    angle = rng.uniform(0, math.pi, k)
    return np.stack([freq * np.cos(angle), freq * np.sin(angle), rng.uniform(0, 2 * math.pi, k)], axis=1)


def _identities(cfg: GenConfig) -> list[_Identity]:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xFACE]))
    out = []
    for _ in range(cfg.n_identities):
        out.append(
            _Identity(
                color_rg=tuple(rng.uniform(0.45, 0.95, 2)),
                center=(cfg.height * rng.uniform(0.35, 0.65), cfg.width * rng.uniform(0.35, 0.65)),
                sigma=min(cfg.height, cfg.width) * rng.uniform(0.12, 0.22),
                aspect=rng.uniform(0.7, 1.4),
                waves=_texture_waves(rng),
            )
        )
    return out


def _stripes(cfg: GenConfig, contrast: float, phase: float) -> np.ndarray:
    rows = np.arange(cfg.height)[None, :, None, None]
    return 1.0 + contrast * np.cos(2 * math.pi * rows / cfg.banding_period + phase)


def _render(cfg: GenConfig, ident: _Identity, rng: np.random.Generator, motion_scale: float) -> np.ndarray:
    L, H, W = cfg.frames, cfg.height, cfg.width
    rows = np.arange(H)[:, None]
    cols = np.arange(W)[None, :]

    bg_rg = rng.uniform(0.2, 0.45, 2)
    tilt = rng.normal(0.0, 0.04, 2)
    ramp = (rows / max(H - 1, 1) - 0.5) * tilt[0] + (cols / max(W - 1, 1) - 0.5) * tilt[1]
    blue = rng.uniform(*cfg.blue_range)

    pos = np.zeros(2)
    video = np.empty((L, H, W, 3))
    for t in range(L):
        pos = 0.8 * pos + rng.normal(0.0, cfg.motion_std * motion_scale, 2)
        cy, cx = ident.center[0] + pos[0], ident.center[1] + pos[1]
        r2 = ((rows - cy) / ident.sigma) ** 2 + ((cols - cx) / (ident.sigma * ident.aspect)) ** 2
        mask = np.exp(-0.5 * r2)
        if cfg.texture:
            phase = ident.waves[:, 0, None, None] * (rows - cy) + ident.waves[:, 1, None, None] * (cols - cx)
            mask = mask * (1.0 + cfg.texture * np.cos(phase + ident.waves[:, 2, None, None]).mean(axis=0))
        gain = 1.0 + rng.normal(0.0, cfg.flicker_std * motion_scale)
        for c in range(2):
            plane = bg_rg[c] + ramp + mask * (ident.color_rg[c] - bg_rg[c])
            video[t, :, :, c] = plane * gain
        video[t, :, :, 2] = blue
    return video


def _rebroadcast(cfg: GenConfig, video: np.ndarray, rng: np.random.Generator, banding: float) -> np.ndarray:
    mean = video.mean(axis=0, keepdims=True)
    out = mean + TEMPORAL_DAMPING * (video - mean)
    out = out * _stripes(cfg, banding, 0.0)
    # display refresh flicker: global, all channels, frame to frame
    out = out * (1.0 + rng.normal(0.0, cfg.screen_flicker_std, (len(out), 1, 1, 1)))
    cast = cfg.cast * rng.uniform(0.5, 1.0)
    out[..., 0] += cast
    out[..., 1] += 0.5 * cast
    return out


def render_video(cfg: GenConfig, ident: _Identity, label: int, hard: bool, rng: np.random.Generator) -> np.ndarray:
    motion_scale = 0.5 if (hard and label == ALIVE) else 1.0
    video = _render(cfg, ident, rng, motion_scale)
    if hard and label == ALIVE:
        # striped backdrop aligned with the screen banding, plus a slight cast
        video = video * _stripes(cfg, cfg.hard_alive_banding * cfg.banding, 0.0)
        cast = cfg.hard_alive_cast * rng.uniform(0.5, 1.0)
        video[..., 0] += cast
        video[..., 1] += 0.5 * cast
        if cfg.hard_alive_flicker:
            # mains-lit room: all-channel frame flicker like a screen's
            video = video * (1.0 + rng.normal(0.0, cfg.hard_alive_flicker, (len(video), 1, 1, 1)))
    if label == REBROADCAST:
        video = _rebroadcast(cfg, video, rng, cfg.banding * (0.5 if hard else 1.0))
    # camera white-balance wander: independent per-channel frame gains, both classes
    wb_amp = rng.uniform(0.0, cfg.white_balance_jitter, 3)
    video = video * (1.0 + rng.normal(0.0, 1.0, (len(video), 1, 1, 3)) * wb_amp)
    video = video + rng.normal(0.0, cfg.noise_std, video.shape)
    return np.clip(video, 0.0, 1.0).astype(np.float32)


_SPLIT_CODES = {"train": 0, "test": 1}


def _class_size(cfg: GenConfig, split: str, label: int) -> int:
    n_alive = cfg.videos_per_class_train if split == "train" else cfg.videos_per_class_test
    return n_alive if label == ALIVE else max(1, int(round(n_alive * cfg.rebroadcast_ratio)))


def hard_indices(cfg: GenConfig, split: str, label: int) -> list[int]:
    """Positions (within the class, in generation order) of the boundary clips."""
    count = _class_size(cfg, split, label)
    pick = np.random.default_rng(np.random.SeedSequence([cfg.seed, _SPLIT_CODES[split], label, 0xA11]))
    return sorted(pick.choice(count, size=int(math.floor(cfg.hardness * count)), replace=False).tolist())


def _make_split(cfg: GenConfig, identities: list[_Identity], split: str, pool: range) -> Dataset:
    n_alive, n_rebroadcast = _class_size(cfg, split, ALIVE), _class_size(cfg, split, REBROADCAST)
    split_code = _SPLIT_CODES[split]
    items = []
    for label, count in ((ALIVE, n_alive), (REBROADCAST, n_rebroadcast)):
        hard_set = set(hard_indices(cfg, split, label))
        for k in range(count):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, split_code, label, k]))
            identity = int(pool[int(rng.integers(len(pool)))])
            video = render_video(cfg, identities[identity], label, k in hard_set, rng)
            items.append(LabeledVideo(video, label, identity))
    return Dataset(tuple(items), split)


def split_identity_frames(faces: IdentityDataset, train_fraction: float, seed: int):
    """Per identity, shuffle its frames and cut them train_fraction : rest."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1D]))
    train_idx, test_idx = [], []
    for ident in np.unique(faces.identities):
        idx = np.flatnonzero(faces.identities == ident)
        idx = idx[rng.permutation(len(idx))]
        cut = int(round(train_fraction * len(idx)))
        train_idx.extend(idx[:cut].tolist())
        test_idx.extend(idx[cut:].tolist())
    return faces.subset(sorted(train_idx)), faces.subset(sorted(test_idx))


def generate(cfg: GenConfig):
    """Return ``(train, test, id_train, id_test)``.

    Train and test videos use disjoint identity pools. The identity frames
    come from the alive test videos (the people enrolled for recognition),
    split 7:3 per identity by default.
    """
    identities = _identities(cfg)
    train_pool, test_pool = cfg.identity_pools()
    train = _make_split(cfg, identities, "train", train_pool)
    test = _make_split(cfg, identities, "test", test_pool)
    faces = extract_faces(test, n_identities=cfg.n_identities)
    id_train, id_test = split_identity_frames(faces, cfg.identity_train_fraction, cfg.seed)
    return train, test, id_train, id_test
