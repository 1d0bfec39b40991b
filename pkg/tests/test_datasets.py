"""Dataset loading, synthetic generation, normalization and splitting."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mimleak.datasets import (
    Dataset,
    GeometryError,
    InsufficientDataError,
    ParseError,
    SpecError,
    SplitSpec,
    load_dataset,
    load_idx,
    normalize,
    parse_synth_spec,
    save_idx,
    save_raw_tensor,
    split,
    synth_generate,
)


def test_idx_loader_contract(tmp_path):
    rng = np.random.default_rng(0)
    raw = rng.integers(0, 256, size=(10, 28, 28), dtype=np.uint8)
    path = tmp_path / "ten-images.idx"
    path.write_bytes(struct.pack(">IIII", 0x00000803, 10, 28, 28) + raw.tobytes())
    ds = load_idx(path)
    assert ds.images.shape == (10, 1, 28, 28)
    assert ds.labels is None
    np.testing.assert_allclose(ds.images[:, 0] * 255.0, raw, atol=1e-4)


def test_idx_labels_sibling(tmp_path):
    raw = np.zeros((4, 8, 8), dtype=np.uint8)
    (tmp_path / "toy-images.idx").write_bytes(
        struct.pack(">IIII", 0x00000803, 4, 8, 8) + raw.tobytes()
    )
    (tmp_path / "toy-labels.idx").write_bytes(
        struct.pack(">II", 0x00000801, 4) + bytes([0, 1, 2, 3])
    )
    ds = load_idx(tmp_path / "toy-images.idx")
    np.testing.assert_array_equal(ds.labels, [0, 1, 2, 3])


def test_idx_truncation_is_parse_error(tmp_path):
    blob = struct.pack(">IIII", 0x00000803, 10, 28, 28) + b"\x00" * 100
    path = tmp_path / "short-images.idx"
    path.write_bytes(blob)
    with pytest.raises(ParseError, match="offset"):
        load_idx(path)


def test_idx_bad_magic(tmp_path):
    path = tmp_path / "bad.idx"
    path.write_bytes(b"\xff\xff\xff\xff" + b"\x00" * 8)
    with pytest.raises(ParseError, match="magic"):
        load_idx(path)


def test_idx_roundtrip(tmp_path):
    ds = synth_generate("blobs,n=6,side=16,classes=3,seed=2")
    save_idx(tmp_path / "blob-images.idx", ds)
    back = load_idx(tmp_path / "blob-images.idx")
    assert back.images.shape == ds.images.shape
    np.testing.assert_array_equal(back.labels, ds.labels)
    # u8 quantization: within half a step
    assert np.abs(back.images - ds.images).max() <= 0.5 / 255.0 + 1e-6


def test_raw_tensor_roundtrip_bit_identical(tmp_path):
    ds = synth_generate("stripes,n=5,side=16,classes=2,seed=3")
    path = tmp_path / "set.bin"
    save_raw_tensor(path, ds)
    back = load_dataset(path, "raw-tensor")
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_raw_tensor_rejects_truncation(tmp_path):
    ds = synth_generate("stripes,n=5,side=16,classes=2,seed=3")
    path = tmp_path / "set.bin"
    save_raw_tensor(path, ds)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(ParseError):
        load_dataset(path, "raw-tensor")


def test_synth_spec_parsing():
    family, params = parse_synth_spec("blobs,n=4,side=32,classes=2,seed=1")
    assert family == "blobs"
    assert params["n"] == 4 and params["classes"] == 2

    with pytest.raises(SpecError, match="family"):
        parse_synth_spec("clouds,n=4")
    with pytest.raises(SpecError, match="key"):
        parse_synth_spec("blobs,m=4")


def test_synth_counts_and_labels():
    ds = synth_generate("blobs,n=4,side=32,classes=2,seed=1")
    assert ds.n == 4
    assert set(np.unique(ds.labels)).issubset({0, 1})
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


def test_synth_regeneration_deterministic():
    a = synth_generate("blobs,n=32,side=16,classes=4,seed=9")
    b = synth_generate("blobs,n=32,side=16,classes=4,seed=9")
    assert a.images.tobytes() == b.images.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


def test_synth_distinct_seeds_differ():
    a = synth_generate("blobs,n=8,side=16,classes=2,seed=1")
    b = synth_generate("blobs,n=8,side=16,classes=2,seed=2")
    assert a.images.tobytes() != b.images.tobytes()


def test_stripes_monte_carlo_mean_matches_analytic():
    # cos with uniform random phase averages to zero -> per-pixel mean 0.5
    ds = synth_generate("stripes,n=10000,side=8,classes=10,seed=5")
    per_pixel = ds.images.mean(axis=0)
    assert np.abs(per_pixel - 0.5).max() < 0.02


def test_normalize_stats_and_idempotence():
    ds = normalize(synth_generate("blobs,n=64,side=16,classes=3,seed=4"))
    assert np.abs(ds.images.mean(axis=(0, 2, 3))).max() < 0.05
    assert np.abs(ds.images.std(axis=(0, 2, 3)) - 1.0).max() < 0.05
    again = normalize(ds)
    assert np.abs(again.images - ds.images).max() <= 1e-6


def test_split_exact_partition():
    ds = synth_generate("blobs,n=100,side=16,classes=2,seed=0")
    parts = split(ds, SplitSpec(25, 25, 25, 25, seed=1))
    all_indices = np.concatenate(
        [parts.shadow_train, parts.shadow_test, parts.target_train, parts.target_test]
    )
    assert sorted(all_indices) == list(range(100))


def test_split_deterministic():
    ds = synth_generate("blobs,n=60,side=16,classes=2,seed=0")
    spec = SplitSpec(10, 10, 10, 10, seed=42)
    a, b = split(ds, spec), split(ds, spec)
    for name in ("shadow_train", "shadow_test", "target_train", "target_test"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_split_insufficient_data():
    ds = synth_generate("blobs,n=100,side=16,classes=2,seed=0")
    with pytest.raises(InsufficientDataError, match="120"):
        split(ds, SplitSpec(60, 60, 0, 0, seed=1))


@settings(max_examples=200, deadline=None)
@given(
    counts=st.tuples(*(st.integers(min_value=0, max_value=40) for _ in range(4))),
    seed=st.integers(min_value=0, max_value=2**32 - 1),
)
def test_split_disjointness_property(counts, seed):
    ds = _tiny_dataset()
    spec = SplitSpec(*counts, seed=seed)
    if sum(counts) > ds.n:
        with pytest.raises(InsufficientDataError):
            split(ds, spec)
        return
    parts = split(ds, spec).as_dict()
    names = list(parts)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            assert not set(parts[a]) & set(parts[b])
    for name, count in zip(names, counts):
        assert len(parts[name]) == count


_CACHED = {}


def _tiny_dataset() -> Dataset:
    if "ds" not in _CACHED:
        _CACHED["ds"] = synth_generate("blobs,n=120,side=8,classes=2,seed=0")
    return _CACHED["ds"]


def test_geometry_validation():
    with pytest.raises(GeometryError):
        Dataset(
            name="bad",
            images=np.zeros((2, 1, 4, 5), dtype=np.float32),
            labels=None,
            mean=np.zeros(1),
            std=np.ones(1),
        )
