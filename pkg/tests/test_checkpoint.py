import struct

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from checkpoint import (
    FORMAT_VERSION,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    load_checkpoint_with_meta,
    save_checkpoint,
)
from engine.serialize import pack_tensors, unpack_tensors
from errors import CorruptPayload, ShapeMismatch, VersionMismatch
from tabnet import FeatureScaler, TabNetModel


class TestPackTensors:
    def test_manifest_is_name_ordered_and_contiguous(self):
        tensors = {"b": np.ones((2, 2), dtype=np.float32), "a": np.arange(3.0)}
        manifest, payload = pack_tensors(tensors)
        assert [entry.name for entry in manifest] == ["a", "b"]
        assert manifest[0].offset == 0 and manifest[1].offset == manifest[0].nbytes
        assert len(payload) == 3 * 8 + 4 * 4
        restored = unpack_tensors([entry.model_dump() for entry in manifest], payload)
        assert restored["b"].dtype == np.float32
        assert_array_equal(restored["a"], tensors["a"])

    def test_truncated_payload(self):
        manifest, payload = pack_tensors({"w": np.ones(4)})
        with pytest.raises(CorruptPayload):
            unpack_tensors(manifest, payload[:-1])

    def test_integer_tensors_rejected(self):
        with pytest.raises(CorruptPayload):
            pack_tensors({"w": np.ones(2, dtype=np.int64)})


class TestCheckpointContainer:
    def test_bad_magic(self):
        with pytest.raises(CorruptPayload):
            decode_checkpoint(b"NOPE" + b"\x00" * 64)

    def test_version_checked_before_checksum(self):
        blob = bytearray(encode_checkpoint({"k": 1}, {"w": np.ones(2)}))
        blob[4:6] = struct.pack("<H", FORMAT_VERSION + 1)
        with pytest.raises(VersionMismatch):
            decode_checkpoint(bytes(blob))

    def test_flipped_payload_byte_detected(self):
        blob = bytearray(encode_checkpoint({"k": 1}, {"w": np.ones(2)}))
        blob[-40] ^= 0xFF
        with pytest.raises(CorruptPayload):
            decode_checkpoint(bytes(blob))

    def test_truncation_detected(self):
        blob = encode_checkpoint({"k": 1}, {"w": np.ones(2)})
        with pytest.raises(CorruptPayload):
            decode_checkpoint(blob[:-5])


class TestSaveLoad:
    def test_forecasts_preserved_bitwise(self, tmp_path, small_config, rng):
        scaler = FeatureScaler(mean=rng.normal(size=3), scale=rng.uniform(0.5, 2.0, size=3))
        model = TabNetModel(small_config, scaler=scaler)
        window = rng.normal(size=(12, 4)).astype(np.float32)
        path = save_checkpoint(model, tmp_path / "model.tabn", meta={"target": "sbp"})

        restored, meta = load_checkpoint_with_meta(path)
        assert meta == {"target": "sbp"}
        assert restored.config == small_config
        assert_array_equal(restored.scaler.mean, scaler.mean)
        assert_array_equal(restored.predict(window), model.predict(window))
        for name, value in model.state_dict().items():
            assert_array_equal(restored.state_dict()[name], value)

    def test_same_model_same_bytes(self, tmp_path, small_config):
        first = save_checkpoint(TabNetModel(small_config), tmp_path / "a.tabn").read_bytes()
        second = save_checkpoint(TabNetModel(small_config), tmp_path / "b.tabn").read_bytes()
        assert first == second

    def test_missing_file(self, tmp_path):
        with pytest.raises(CorruptPayload):
            load_checkpoint(tmp_path / "absent.tabn")

    def test_parameter_shape_mismatch(self, small_config):
        params = TabNetModel(small_config).state_dict()
        params["embed.W"] = np.zeros((5, 8), dtype=np.float32)
        with pytest.raises(ShapeMismatch):
            TabNetModel(small_config, parameters=params)
