import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tcbackdoor.video import (
    ALIVE,
    REBROADCAST,
    Dataset,
    FormatError,
    LabeledVideo,
    PixelRangeError,
    ShapeMismatchError,
    as_video,
    decode_tensor,
    encode_tensor,
    extract_faces,
    filter_by_class,
    load_dataset,
    save_dataset,
)


def random_video(rng, L=4, H=8, W=8):
    return rng.uniform(0, 1, (L, H, W, 3)).astype(np.float32)


@pytest.fixture
def small_dataset():
    rng = np.random.default_rng(0)
    items = [LabeledVideo(random_video(rng), lab, ident) for lab, ident in [(0, 1), (1, 1), (0, 2), (1, 3)]]
    return Dataset(tuple(items), "train")


unit_floats = st.floats(0.0, 1.0, width=32, allow_subnormal=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 6), st.integers(1, 6), st.just(3)), elements=unit_floats))
def test_tensor_roundtrip_is_lossless(x):
    back = decode_tensor(encode_tensor(x))
    assert back.shape == x.shape
    assert back.tobytes() == x.tobytes()


def test_tensor_layout_matches_format():
    x = np.arange(2 * 3 * 4 * 3, dtype=np.float32).reshape(2, 3, 4, 3) / 100
    buf = encode_tensor(x)
    assert buf[:4] == b"CPV1"
    assert struct.unpack("<IIII", buf[4:20]) == (3, 4, 3, 2)  # H, W, C, L
    payload = np.frombuffer(buf[20:], dtype="<f4")
    # (frame, row, col, channel) order
    assert payload[0] == x[0, 0, 0, 0] and payload[1] == x[0, 0, 0, 1] and payload[3] == x[0, 0, 1, 0]
    assert payload[3 * 4 * 3] == x[1, 0, 0, 0]


def test_decode_rejects_bad_magic_and_truncation():
    buf = encode_tensor(np.zeros((1, 2, 2, 3), np.float32))
    with pytest.raises(FormatError):
        decode_tensor(b"XXXX" + buf[4:])
    with pytest.raises(ShapeMismatchError):
        decode_tensor(buf[:-4])


def test_pixels_outside_unit_range_are_rejected():
    x = np.full((1, 2, 2, 3), 0.5, np.float32)
    x[0, 0, 0, 2] = 1.0001
    with pytest.raises(PixelRangeError):
        as_video(x)
    x[0, 0, 0, 2] = -1e-6
    with pytest.raises(PixelRangeError):
        LabeledVideo(x, 0)


def test_save_load_roundtrip(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path / "d.json")
    back = load_dataset(tmp_path / "d.json")
    assert back.split == "train"
    assert back.class_counts() == (2, 2)
    for a, b in zip(small_dataset, back):
        assert a.label == b.label and a.identity == b.identity
        assert a.video.tobytes() == b.video.tobytes()


def test_save_is_deterministic(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path / "a" / "d.json")
    save_dataset(small_dataset, tmp_path / "b" / "d.json")
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_save_empty_dataset_fails(tmp_path):
    with pytest.raises(ValueError):
        save_dataset(Dataset((), "train"), tmp_path / "d.json")


def test_manifest_schema(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path / "d.json")
    manifest = json.loads((tmp_path / "d.json").read_text())
    assert manifest["split"] == "train"
    assert [it["label"] for it in manifest["items"]] == [0, 1, 0, 1]
    assert all("tensor_path" in it and "identity" in it for it in manifest["items"])


def test_declared_length_mismatch_is_rejected(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path / "d.json")
    manifest = json.loads((tmp_path / "d.json").read_text())
    manifest["geometry"]["L"] = 5
    (tmp_path / "d.json").write_text(json.dumps(manifest))
    with pytest.raises(ShapeMismatchError):
        load_dataset(tmp_path / "d.json")


def test_truncated_tensor_file_is_rejected(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path / "d.json")
    tensor = next((tmp_path / "d_tensors").iterdir())
    tensor.write_bytes(tensor.read_bytes()[:-8])
    with pytest.raises(ShapeMismatchError):
        load_dataset(tmp_path / "d.json")


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope.json")


def test_loader_rejects_out_of_range_payload(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path / "d.json")
    tensor = sorted((tmp_path / "d_tensors").iterdir())[0]
    buf = bytearray(tensor.read_bytes())
    buf[20:24] = struct.pack("<f", 1.5)
    tensor.write_bytes(bytes(buf))
    with pytest.raises(PixelRangeError):
        load_dataset(tmp_path / "d.json")


def test_filter_by_class_keeps_original_indices(small_dataset):
    view = filter_by_class(small_dataset, ALIVE)
    assert view.indices == (0, 2)
    assert all(it.label == ALIVE for it in view.items)


def test_filter_absent_class_is_empty():
    rng = np.random.default_rng(1)
    d = Dataset((LabeledVideo(random_video(rng), 0),), "test")
    assert len(filter_by_class(d, REBROADCAST)) == 0


@given(st.lists(st.sampled_from([0, 1]), max_size=30))
def test_class_views_partition_the_dataset(labels):
    video = np.zeros((1, 1, 1, 3), np.float32)
    d = Dataset(tuple(LabeledVideo(video, lab) for lab in labels), "train")
    alive, rebroadcast = filter_by_class(d, 0), filter_by_class(d, 1)
    assert len(alive) + len(rebroadcast) == len(d)
    assert sorted(alive.indices + rebroadcast.indices) == list(range(len(d)))


def test_extract_faces_counts_and_identities():
    rng = np.random.default_rng(2)
    items = [LabeledVideo(random_video(rng, L=16), 0, 3), LabeledVideo(random_video(rng, L=16), 0, 5), LabeledVideo(random_video(rng, L=16), 1, 4)]
    faces = extract_faces(items, n_identities=6)
    assert len(faces) == 32
    assert faces.identities.tolist() == [3] * 16 + [5] * 16
    assert faces.frame_numbers.tolist() == list(range(1, 17)) * 2
    assert np.array_equal(faces.frames[16], items[1].video[0])


def test_extract_faces_without_alive_videos():
    rng = np.random.default_rng(3)
    faces = extract_faces([LabeledVideo(random_video(rng), 1, 0)], n_identities=2)
    assert len(faces) == 0


def test_extract_faces_requires_identity():
    rng = np.random.default_rng(4)
    with pytest.raises(ValueError):
        extract_faces([LabeledVideo(random_video(rng), 0, None)])


def test_videos_are_immutable(small_dataset):
    with pytest.raises(ValueError):
        small_dataset[0].video[0, 0, 0, 0] = 0.3
