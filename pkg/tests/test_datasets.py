import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cafd.datasets import (
    CorruptPayloadError,
    DatasetError,
    ShapeGenConfig,
    ShapeMismatchError,
    generate_synthetic,
    load_dataset,
    save_dataset,
    split,
    to_float,
    to_uint8,
)


def small(seed=7, **kw):
    return generate_synthetic(ShapeGenConfig(num_classes=4, samples_per_class=10, image_size=32, seed=seed, **kw))


def test_generate_balanced():
    ds = small()
    assert len(ds) == 40
    assert np.bincount(ds.labels).tolist() == [10, 10, 10, 10]
    assert ds.images.dtype == np.uint8 and ds.images.shape == (40, 3, 32, 32)


def test_generate_deterministic():
    assert small().images.tobytes() == small().images.tobytes()


def test_generate_seed_changes_data():
    a = hashlib.sha256(small(7).images.tobytes()).hexdigest()
    b = hashlib.sha256(small(8).images.tobytes()).hexdigest()
    assert a != b


def test_unsupported_num_classes():
    with pytest.raises(DatasetError):
        generate_synthetic(ShapeGenConfig(num_classes=99))


def test_single_channel():
    ds = small(channels=1)
    assert ds.images.shape[1] == 1


def test_dataset_is_immutable():
    ds = small()
    with pytest.raises(ValueError):
        ds.images[0, 0, 0, 0] = 1


def test_round_trip(tmp_path):
    ds = small()
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert np.array_equal(back.images, ds.images)
    assert np.array_equal(back.labels, ds.labels)
    assert back.num_classes == ds.num_classes
    assert back.meta == ds.meta


def test_truncated_payload(tmp_path):
    save_dataset(small(), tmp_path / "d")
    p = tmp_path / "d" / "data.bin"
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(CorruptPayloadError):
        load_dataset(tmp_path / "d")


def test_header_count_mismatch(tmp_path):
    ds = small()
    save_dataset(ds.subset(range(39)), tmp_path / "d")
    meta_path = tmp_path / "d" / "meta.json"
    meta = json.loads(meta_path.read_text())
    meta["n"] = 40
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(ShapeMismatchError):
        load_dataset(tmp_path / "d")


def test_corrupt_header(tmp_path):
    save_dataset(small(), tmp_path / "d")
    (tmp_path / "d" / "meta.json").write_text("{not json")
    with pytest.raises(CorruptPayloadError):
        load_dataset(tmp_path / "d")


def test_flipped_byte_fails_checksum(tmp_path):
    save_dataset(small(), tmp_path / "d")
    p = tmp_path / "d" / "data.bin"
    raw = bytearray(p.read_bytes())
    raw[100] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(CorruptPayloadError):
        load_dataset(tmp_path / "d")


def test_split_sizes():
    train, val, test = split(small(), (0.5, 0.25, 0.25), seed=3)
    assert (len(train), len(val), len(test)) == (20, 10, 10)


def test_split_deterministic():
    a = split(small(), (0.5, 0.25, 0.25), seed=3)
    b = split(small(), (0.5, 0.25, 0.25), seed=3)
    assert [p.meta["indices"] for p in a] == [p.meta["indices"] for p in b]


def test_split_rejects_bad_fractions():
    with pytest.raises(DatasetError):
        split(small(), (0.9, 0.9, 0.1), seed=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.lists(st.integers(1, 10), min_size=2, max_size=4))
def test_split_is_partition(seed, weights):
    ds = small()
    fr = [w / sum(weights) for w in weights]
    if any(round(f * len(ds)) < 1 for f in fr[:-1]):
        return
    try:
        parts = split(ds, fr, seed=seed)
    except DatasetError:
        return  # an empty remainder part
    idx = [i for p in parts for i in p.meta["indices"]]
    assert sorted(idx) == list(range(len(ds)))


def test_byte_float_round_trip_all_values():
    b = np.arange(256, dtype=np.uint8)
    f = to_float(b)
    assert np.all(f == b / 255.0)
    assert np.array_equal(to_uint8(f), b)
