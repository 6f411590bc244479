import numpy as np
import pytest

from deltadiff.checkpoint import (
    CheckpointError,
    checkpoint_exists,
    load_checkpoint,
    save_checkpoint,
)
from deltadiff.rng import RngStream


def test_roundtrip_bit_exact(tmp_path):
    rng = RngStream(1, 0)
    tensors = {
        "layers.0.W": rng.gaussian((4, 3)) * 1e-7,
        "layers.0.b": rng.gaussian(4),
        "scalarish": np.array(3.141592653589793),
    }
    save_checkpoint(tmp_path / "ck", tensors, {"stage": "test", "seed": 1})
    loaded, meta = load_checkpoint(tmp_path / "ck")
    assert meta["stage"] == "test"
    for name, arr in tensors.items():
        assert loaded[name].shape == arr.shape
        assert np.array_equal(loaded[name], np.asarray(arr))


def test_missing_manifest(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)
    assert not checkpoint_exists(tmp_path)


def test_name_collisions_resolved(tmp_path):
    tensors = {"a/b": np.zeros(2), "a.b": np.ones(2)}
    save_checkpoint(tmp_path / "ck", tensors, {})
    loaded, _ = load_checkpoint(tmp_path / "ck")
    assert not loaded["a/b"].any()
    assert loaded["a.b"].all()


def test_truncated_blob_detected(tmp_path):
    save_checkpoint(tmp_path / "ck", {"w": np.zeros(8)}, {})
    blob = tmp_path / "ck" / "w.f64"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="w"):
        load_checkpoint(tmp_path / "ck")
