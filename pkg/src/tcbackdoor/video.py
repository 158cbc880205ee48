"""Video data model, binary tensor format and dataset manifests.

Videos are float32 arrays shaped ``(L, H, W, 3)`` with values in [0, 1].
Storage indices are 0-based; the trigger module converts to 1-based frame
numbers itself.

Tensor file layout::

    b"CPV1" | u32 H | u32 W | u32 C (=3) | u32 L | f32[L*H*W*C]

all little-endian, payload in (frame, row, col, channel) order.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

TENSOR_MAGIC = b"CPV1"
_HEADER = struct.Struct("<4sIIII")

ALIVE = 0
REBROADCAST = 1
SPLITS = ("train", "test")


class FormatError(ValueError):
    """Raised for malformed tensor files or manifests."""


class ShapeMismatchError(FormatError):
    pass


class PixelRangeError(ValueError):
    pass


def as_video(x, copy: bool = False) -> np.ndarray:
    """Validate ``x`` as an ``(L, H, W, 3)`` float32 video and freeze it."""
    arr = np.array(x, dtype=np.float32, copy=copy or None)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeMismatchError(f"expected (L, H, W, 3) video, got shape {arr.shape}")
    if min(arr.shape[:3]) < 1:
        raise ShapeMismatchError(f"empty video dimension in shape {arr.shape}")
    check_unit_range(arr)
    if arr.flags.writeable:
        if arr is x:
            arr = arr.copy()
        arr.flags.writeable = False
    return arr


def check_unit_range(arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise PixelRangeError("non-finite pixel values")
    lo, hi = float(arr.min()), float(arr.max())
    if lo < 0.0 or hi > 1.0:
        raise PixelRangeError(f"pixel values outside [0, 1]: min={lo}, max={hi}")


@dataclass(frozen=True)
class LabeledVideo:
    video: np.ndarray
    label: int
    identity: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "video", as_video(self.video))
        if self.label not in (ALIVE, REBROADCAST):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.identity is not None:
            object.__setattr__(self, "identity", int(self.identity))

    @property
    def geometry(self) -> tuple[int, int, int]:
        """(H, W, L) of the video."""
        L, H, W, _ = self.video.shape
        return H, W, L


@dataclass(frozen=True)
class Dataset:
    items: tuple[LabeledVideo, ...]
    split: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[LabeledVideo]:
        return iter(self.items)

    def __getitem__(self, i: int) -> LabeledVideo:
        return self.items[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([it.label for it in self.items], dtype=np.int64)

    def videos(self) -> np.ndarray:
        """Stack all videos into an ``(N, L, H, W, 3)`` array."""
        return np.stack([it.video for it in self.items])

    def class_counts(self) -> tuple[int, int]:
        labels = self.labels
        return int((labels == ALIVE).sum()), int((labels == REBROADCAST).sum())

    def replace(self, updates: dict[int, LabeledVideo]) -> "Dataset":
        items = list(self.items)
        for i, item in updates.items():
            items[i] = item
        return Dataset(tuple(items), self.split)


@dataclass(frozen=True)
class ClassView:
    """Items of one class together with their indices in the parent dataset."""

    label: int
    indices: tuple[int, ...]
    items: tuple[LabeledVideo, ...]

    def __len__(self) -> int:
        return len(self.items)

    def videos(self) -> np.ndarray:
        return np.stack([it.video for it in self.items])


def filter_by_class(d: Dataset, label: int) -> ClassView:
    idx = tuple(i for i, it in enumerate(d.items) if it.label == label)
    return ClassView(label, idx, tuple(d.items[i] for i in idx))


@dataclass(frozen=True)
class IdentityDataset:
    """Face frames labelled by identity.

    ``frame_numbers`` holds the 1-based position of each frame inside its
    source video so a temporal trigger can be re-applied frame by frame.
    """

    frames: np.ndarray  # (N, H, W, 3)
    identities: np.ndarray  # (N,)
    frame_numbers: np.ndarray  # (N,), 1-based
    n_identities: int

    def __post_init__(self):
        ids = np.asarray(self.identities, dtype=np.int64)
        if len(ids) and (ids.min() < 0 or ids.max() >= self.n_identities):
            raise ValueError("identity outside {0, ..., n-1}")
        object.__setattr__(self, "identities", ids)
        object.__setattr__(self, "frame_numbers", np.asarray(self.frame_numbers, dtype=np.int64))
        object.__setattr__(self, "frames", np.asarray(self.frames, dtype=np.float32))

    def __len__(self) -> int:
        return len(self.identities)

    def subset(self, idx) -> "IdentityDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return IdentityDataset(self.frames[idx], self.identities[idx], self.frame_numbers[idx], self.n_identities)


def extract_faces(d: Dataset | Sequence[LabeledVideo], n_identities: Optional[int] = None) -> IdentityDataset:
    """Split every alive video into identity-labelled frames.

    Synthetic frames are already face crops, so no localisation happens here.
    """
    items = list(d)
    missing = [i for i, it in enumerate(items) if it.identity is None]
    if missing:
        raise ValueError(f"items without identity: {missing[:5]}")
    alive = [it for it in items if it.label == ALIVE]
    if n_identities is None:
        n_identities = max((it.identity for it in items), default=-1) + 1
    if not alive:
        H, W = (items[0].geometry[:2]) if items else (1, 1)
        return IdentityDataset(np.zeros((0, H, W, 3), np.float32), np.zeros(0), np.zeros(0), n_identities)
    frames = np.concatenate([it.video for it in alive])
    ids = np.concatenate([np.full(len(it.video), it.identity) for it in alive])
    nums = np.concatenate([np.arange(1, len(it.video) + 1) for it in alive])
    return IdentityDataset(frames, ids, nums, n_identities)


# -- binary tensors ---------------------------------------------------------


def encode_tensor(video: np.ndarray) -> bytes:
    v = as_video(video)
    L, H, W, C = v.shape
    return _HEADER.pack(TENSOR_MAGIC, H, W, C, L) + v.astype("<f4").tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated tensor header")
    magic, H, W, C, L = _HEADER.unpack_from(buf)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if C != 3:
        raise ShapeMismatchError(f"expected 3 channels, header says {C}")
    n = H * W * C * L
    payload = buf[_HEADER.size:]
    if len(payload) != 4 * n:
        raise ShapeMismatchError(f"payload holds {len(payload)} bytes, header implies {4 * n}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(L, H, W, C).astype(np.float32)
    return as_video(arr)


def write_tensor(path: Path | str, video: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(video))


def read_tensor(path: Path | str) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# -- manifests --------------------------------------------------------------


def save_dataset(d: Dataset, path: Path | str) -> None:
    """Write ``path`` (JSON manifest) plus one tensor file per video.

    Tensors go to ``<stem>_tensors/`` next to the manifest; paths in the
    manifest are relative to the manifest's directory.
    """
    if len(d) == 0:
        raise ValueError("refusing to save an empty dataset")
    path = Path(path)
    tdir = path.parent / f"{path.stem}_tensors"
    tdir.mkdir(parents=True, exist_ok=True)
    geometries = {it.geometry for it in d}
    entries = []
    for i, it in enumerate(d):
        rel = f"{tdir.name}/{i:06d}.cpv"
        write_tensor(path.parent / rel, it.video)
        entry = {"tensor_path": rel, "label": it.label}
        if it.identity is not None:
            entry["identity"] = it.identity
        entries.append(entry)
    manifest = {"split": d.split, "items": entries}
    if len(geometries) == 1:
        H, W, L = geometries.pop()
        manifest["geometry"] = {"H": H, "W": W, "L": L}
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def save_overlay(d: Dataset, path: Path | str, base: Dataset, base_path: Path | str) -> int:
    """Save ``d`` as a manifest that reuses ``base``'s tensor files.

    Items identical to the base item at the same position point at the base
    tensor; only changed videos are written. Returns the number written.
    """
    if len(d) != len(base):
        raise ValueError("overlay and base differ in length")
    path, base_path = Path(path), Path(base_path)
    base_entries = json.loads(base_path.read_text())["items"]
    tdir = path.parent / f"{path.stem}_tensors"
    entries, written = [], 0
    for i, (it, ref) in enumerate(zip(d, base)):
        if it.video.tobytes() == ref.video.tobytes():
            target = base_path.parent / base_entries[i]["tensor_path"]
            rel = os.path.relpath(target, path.parent)
        else:
            tdir.mkdir(parents=True, exist_ok=True)
            rel = f"{tdir.name}/{i:06d}.cpv"
            write_tensor(path.parent / rel, it.video)
            written += 1
        entry = {"tensor_path": Path(rel).as_posix(), "label": it.label}
        if it.identity is not None:
            entry["identity"] = it.identity
        entries.append(entry)
    manifest = {"split": d.split, "items": entries}
    geometries = {it.geometry for it in d}
    if len(geometries) == 1:
        H, W, L = geometries.pop()
        manifest["geometry"] = {"H": H, "W": W, "L": L}
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return written


def load_dataset(path: Path | str) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text())
        entries = manifest["items"]
        split = manifest["split"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed manifest {path}: {exc}") from exc
    geom = manifest.get("geometry")
    items = []
    for i, entry in enumerate(entries):
        tpath = path.parent / entry["tensor_path"]
        if not tpath.is_file():
            raise FileNotFoundError(f"tensor file missing for item {i}: {tpath}")
        video = read_tensor(tpath)
        if geom is not None:
            L, H, W, _ = video.shape
            if (H, W, L) != (geom["H"], geom["W"], geom["L"]):
                raise ShapeMismatchError(
                    f"item {i}: manifest declares H,W,L={geom['H']},{geom['W']},{geom['L']}, "
                    f"tensor header has {H},{W},{L}"
                )
        items.append(LabeledVideo(video, int(entry["label"]), entry.get("identity")))
    return Dataset(tuple(items), split)
