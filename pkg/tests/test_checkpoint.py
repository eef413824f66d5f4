import json
import struct
import zlib

import numpy as np
import pytest
import torch

from eibert.checkpoint import (MAGIC, checkpoint_meta, decode_checkpoint, encode_checkpoint, load_checkpoint,
                               read_checkpoint, save_checkpoint)
from eibert.distill import prepare_student
from eibert.errors import FormatError, IntegrityError
from eibert.model import build_model, run_forward
from eibert.quant import QuantConfig, quantize_model

from conftest import random_batch, tiny_spec


@pytest.fixture(scope="module")
def student():
    teacher = build_model(tiny_spec(hidden_dim=24, embed_dim=24, share_layers=False, seed=3))
    return prepare_student(teacher, build_model(tiny_spec(init_std=0.2)), "cross-kd")


@pytest.fixture(scope="module")
def qmodel(student):
    ids, mask = random_batch(batch=16, length=9, seed=2)
    q, _ = quantize_model(student, ids, mask, QuantConfig(iters=2))
    return q


def header_of(data: bytes) -> dict:
    (n,) = struct.unpack_from("<Q", data, 8)
    return json.loads(data[16:16 + n])


class TestRoundTrip:
    def test_model_bytes_stable(self, student, tmp_path):
        a = save_checkpoint(student, tmp_path / "a.eibt").read_bytes()
        b = save_checkpoint(load_checkpoint(tmp_path / "a.eibt"), tmp_path / "b.eibt").read_bytes()
        assert a == b

    def test_model_tensors_identical(self, student, tmp_path):
        loaded = load_checkpoint(save_checkpoint(student, tmp_path / "m.eibt"))
        for (n, p), (m, q) in zip(student.named_parameters(), loaded.named_parameters()):
            assert n == m and torch.equal(p, q)
        assert loaded.head_uses_projector and loaded.projector_shape == student.projector_shape

    def test_model_logits_identical(self, student, tmp_path):
        loaded = load_checkpoint(save_checkpoint(student, tmp_path / "m.eibt"))
        ids, mask = random_batch(seed=7)
        assert torch.equal(run_forward(student, ids, mask).logits, run_forward(loaded, ids, mask).logits)

    def test_64bit_round_trip(self, tmp_path, f64):
        m = build_model(tiny_spec())
        a = encode_checkpoint(m)
        assert encode_checkpoint(decode_checkpoint(a)) == a

    def test_quantized(self, qmodel, tmp_path):
        path = save_checkpoint(qmodel, tmp_path / "q.eibt")
        loaded = load_checkpoint(path)
        assert loaded == qmodel
        assert encode_checkpoint(loaded) == path.read_bytes()
        ids, mask = random_batch(seed=1)
        assert np.array_equal(loaded.quantized_forward(ids, mask), qmodel.quantized_forward(ids, mask))

    def test_meta(self, student, tmp_path):
        path = save_checkpoint(student, tmp_path / "m.eibt", meta={"stage": "distill", "seed": 4})
        assert checkpoint_meta(path) == {"stage": "distill", "seed": 4}


class TestSchema:
    def test_prefix(self, student):
        data = encode_checkpoint(student)
        assert data[:4] == MAGIC
        assert struct.unpack_from("<I", data, 4) == (1,)
        h = header_of(data)
        assert h["format"] == "EIBT" and h["kind"] == "model"
        assert all(e["dtype"] == "f32" for e in h["tensors"])

    def test_every_i8_tensor_has_a_step(self, qmodel):
        h = header_of(encode_checkpoint(qmodel))
        names = {e["name"]: e for e in h["tensors"]}
        int8 = [e for e in h["tensors"] if e["dtype"] == "i8"]
        assert int8
        for e in int8:
            step = names[e["name"] + ".step"]
            assert e["step"] == step["name"] and step["dtype"] == "f32" and step["shape"] == []

    def test_offsets_are_contiguous(self, qmodel):
        data = encode_checkpoint(qmodel)
        h = header_of(data)
        offset = 0
        for e in h["tensors"]:
            assert e["offset"] == offset
            offset += e["nbytes"]
        assert 16 + len(json.dumps(h, sort_keys=True, separators=(",", ":"))) + offset == len(data)

    def test_no_minus_128(self, qmodel):
        _, tensors = read_checkpoint(encode_checkpoint(qmodel))
        assert all(a.min() >= -127 for a in tensors.values() if a.dtype == np.int8)


class TestRejection:
    def test_every_truncation_rejected(self, qmodel):
        data = encode_checkpoint(qmodel)
        for n in list(range(0, 64)) + list(range(64, len(data), 97)) + [len(data) - 1]:
            with pytest.raises(FormatError) as info:
                decode_checkpoint(data[:n])
            assert info.value.offset is not None

    def test_truncated_file_leaves_nothing(self, student, tmp_path):
        path = save_checkpoint(student, tmp_path / "m.eibt")
        path.write_bytes(path.read_bytes()[:-10])
        result = None
        with pytest.raises(FormatError):
            result = load_checkpoint(path)
        assert result is None

    def test_trailing_bytes(self, student):
        with pytest.raises(FormatError):
            decode_checkpoint(encode_checkpoint(student) + b"\0")

    def test_bad_magic(self, student):
        data = bytearray(encode_checkpoint(student))
        data[:4] = b"NOPE"
        with pytest.raises(FormatError) as info:
            decode_checkpoint(bytes(data))
        assert info.value.offset == 0

    def test_unknown_version(self, student):
        data = bytearray(encode_checkpoint(student))
        struct.pack_into("<I", data, 4, 2)
        with pytest.raises(FormatError) as info:
            decode_checkpoint(bytes(data))
        assert info.value.offset == 4

    def test_corrupt_tensor_named(self, student):
        data = bytearray(encode_checkpoint(student))
        h = header_of(bytes(data))
        entry = h["tensors"][3]
        (n,) = struct.unpack_from("<Q", data, 8)
        data[16 + n + entry["offset"]] ^= 0xFF
        with pytest.raises(IntegrityError) as info:
            decode_checkpoint(bytes(data))
        assert info.value.tensor == entry["name"]

    def test_minus_128_rejected(self, qmodel):
        data = bytearray(encode_checkpoint(qmodel))
        h = header_of(bytes(data))
        (n,) = struct.unpack_from("<Q", data, 8)
        entry = next(e for e in h["tensors"] if e["dtype"] == "i8")
        pos = 16 + n + entry["offset"]
        data[pos] = 0x80
        entry["crc32"] = zlib.crc32(bytes(data[pos:pos + entry["nbytes"]]))
        head = json.dumps(h, sort_keys=True, separators=(",", ":")).encode()
        rebuilt = bytes(data[:8]) + struct.pack("<Q", len(head)) + head + bytes(data[16 + n:])
        with pytest.raises(IntegrityError) as info:
            decode_checkpoint(rebuilt)
        assert info.value.tensor == entry["name"]

    def test_not_a_model(self):
        with pytest.raises(TypeError):
            encode_checkpoint({"weights": 1})

    def test_no_partial_file_on_failure(self, student, tmp_path, monkeypatch):
        import eibert.data

        path = tmp_path / "m.eibt"
        save_checkpoint(student, path)
        original = path.read_bytes()

        def killed(*args):
            raise KeyboardInterrupt

        # die after the temporary file is written but before it is renamed
        monkeypatch.setattr(eibert.data.os, "replace", killed)
        with pytest.raises(KeyboardInterrupt):
            save_checkpoint(build_model(tiny_spec(seed=9)), path)
        assert path.read_bytes() == original
        assert sorted(p.name for p in tmp_path.iterdir()) == ["m.eibt"]
