"""Checkpoint container: roundtrips, truncation, headers."""

import numpy as np
import pytest

from mimleak.checkpoint import (
    MAGIC,
    CheckpointError,
    dump_tensors,
    dump_with_header,
    load_tensors,
    load_with_header,
    parse_tensors,
    parse_with_header,
    save_tensors,
)


def sample_tensors():
    rng = np.random.default_rng(0)
    return {
        "weights": rng.standard_normal((3, 4)).astype(np.float32),
        "bias": rng.standard_normal(4).astype(np.float32),
        "scalarish": np.array([1.5], dtype=np.float32),
    }


def test_roundtrip_bit_identical(tmp_path):
    tensors = sample_tensors()
    path = tmp_path / "model.ckpt"
    save_tensors(path, tensors)
    loaded = load_tensors(path)
    assert list(loaded) == list(tensors)
    for name in tensors:
        assert loaded[name].dtype == np.float32
        np.testing.assert_array_equal(loaded[name], tensors[name])


def test_magic_and_layout():
    blob = dump_tensors({"x": np.zeros((2, 2), dtype=np.float32)})
    assert blob[:4] == MAGIC
    # version 1, count 1
    assert blob[4:8] == (1).to_bytes(4, "little")
    assert blob[8:12] == (1).to_bytes(4, "little")


def test_truncation_reports_offset():
    blob = dump_tensors(sample_tensors())
    with pytest.raises(CheckpointError, match="offset"):
        parse_tensors(blob[:-3])


def test_bad_magic_rejected():
    with pytest.raises(CheckpointError, match="magic"):
        parse_tensors(b"NOPE" + b"\x00" * 16)


def test_trailing_garbage_rejected():
    blob = dump_tensors(sample_tensors())
    with pytest.raises(CheckpointError, match="trailing"):
        parse_tensors(blob + b"\x00")


def test_header_roundtrip(tmp_path):
    header = {"mask_ratio": "0.75", "train_seed": "7"}
    blob = dump_with_header(header, sample_tensors())
    got_header, got_tensors = parse_with_header(blob)
    assert got_header == header
    np.testing.assert_array_equal(got_tensors["bias"], sample_tensors()["bias"])


def test_headerless_blob_parses_with_empty_header():
    blob = dump_tensors(sample_tensors())
    header, tensors = parse_with_header(blob)
    assert header == {}
    assert set(tensors) == set(sample_tensors())


def test_header_rejects_newlines():
    with pytest.raises(CheckpointError):
        dump_with_header({"bad": "a\nb"}, {})
    with pytest.raises(CheckpointError):
        dump_with_header({"a=b": "c"}, {})
