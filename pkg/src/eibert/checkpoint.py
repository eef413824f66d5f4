"""Binary checkpoints ("EIBT").

Layout::

    b"EIBT" | u32 LE version | u64 LE header length | UTF-8 JSON header | data blob

The header lists each tensor with its dtype (``f32`` or ``i8``), shape, offset
into the blob, byte length and CRC-32.  Every ``i8`` tensor names a companion
f32 scalar ``<tensor>.step``.  Files are written through a temporary file and
renamed into place, and a reader builds nothing until the whole file checks out.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from .data import atomic_write_bytes
from .errors import FormatError, IntegrityError
from .model import Dense, ModelSpec, TransformerModel, attach_projector, build_model
from .quant import QuantizedModel

MAGIC = b"EIBT"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"f32": np.dtype("<f4"), "i8": np.dtype("i1")}


def projector_dim(obj) -> int | None:
    if isinstance(obj, TransformerModel):
        return None if obj.projector is None else int(obj.projector_shape[1])
    return obj.projector_dim


def _structure(obj) -> dict:
    return {
        "projector_dim": projector_dim(obj),
        "head_uses_projector": bool(obj.head_uses_projector),
        "head_dim": int(obj.head_dim),
    }


def _model_tensors(model: TransformerModel) -> list[tuple[str, str, np.ndarray]]:
    return [(n, "f32", p.detach().cpu().numpy().astype("<f4")) for n, p in model.named_parameters()]


def _qmodel_tensors(q: QuantizedModel) -> list[tuple[str, str, np.ndarray]]:
    out = []
    for n in sorted(q.codes):
        out.append((n, "i8", q.codes[n]))
        out.append((f"{n}.step", "f32", np.asarray(q.steps[n], dtype="<f4")))
    for n in sorted(q.residual):
        out.append((n, "f32", q.residual[n].astype("<f4")))
    for n in sorted(q.act_scales):
        out.append((f"{n}.act_scale", "f32", np.asarray(q.act_scales[n], dtype="<f4")))
    return out


def encode_checkpoint(obj, meta: dict | None = None) -> bytes:
    if isinstance(obj, QuantizedModel):
        kind, tensors = "quantized", _qmodel_tensors(obj)
    elif isinstance(obj, TransformerModel):
        kind, tensors = "model", _model_tensors(obj)
    else:
        raise TypeError(f"cannot checkpoint {type(obj).__name__}")
    entries, chunks, offset = [], [], 0
    for name, dtype, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entry = {"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset,
                 "nbytes": len(raw), "crc32": zlib.crc32(raw)}
        if dtype == "i8":
            entry["step"] = f"{name}.step"
        entries.append(entry)
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format": "EIBT",
        "kind": kind,
        "spec": obj.spec.to_dict(),
        "structure": _structure(obj),
        "meta": meta or {},
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + b"".join(chunks)


def save_checkpoint(obj, path, meta: dict | None = None) -> Path:
    path = Path(path)
    atomic_write_bytes(path, encode_checkpoint(obj, meta))
    return path


def read_checkpoint(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Validate ``data`` and return the header plus every tensor as an array."""
    if len(data) < _PREFIX.size:
        raise FormatError(f"file is {len(data)} bytes, shorter than the {_PREFIX.size}-byte prefix",
                          offset=len(data))
    magic, version, head_len = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}", offset=4)
    blob_start = _PREFIX.size + head_len
    if blob_start > len(data):
        raise FormatError(f"header claims {head_len} bytes but the file ends early", offset=len(data))
    try:
        header = json.loads(data[_PREFIX.size:blob_start].decode("utf-8"))
        entries = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable header: {exc}", offset=_PREFIX.size) from exc

    tensors: dict[str, np.ndarray] = {}
    expected = 0
    for e in entries:
        name = e.get("name", "?")
        dtype = _DTYPES.get(e.get("dtype"))
        if dtype is None:
            raise FormatError(f"tensor {name!r} has unsupported dtype {e.get('dtype')!r}", offset=_PREFIX.size)
        start, nbytes = blob_start + e["offset"], e["nbytes"]
        count = int(np.prod(e["shape"], dtype=np.int64))
        if count * dtype.itemsize != nbytes:
            raise FormatError(f"tensor {name!r}: shape {e['shape']} does not match {nbytes} bytes",
                              offset=start)
        if start + nbytes > len(data):
            raise FormatError(f"truncated inside tensor {name!r}", offset=len(data))
        raw = data[start:start + nbytes]
        if zlib.crc32(raw) != e["crc32"]:
            raise IntegrityError("checksum mismatch", tensor=name, offset=start)
        arr = np.frombuffer(raw, dtype=dtype).reshape(e["shape"]).copy()
        if e["dtype"] == "i8":
            if arr.size and int(arr.min()) < -127:
                raise IntegrityError("holds code -128", tensor=name, offset=start)
            if e.get("step") != f"{name}.step":
                raise IntegrityError("no step scalar recorded", tensor=name, offset=start)
        tensors[name] = arr
        expected = max(expected, e["offset"] + nbytes)
    if blob_start + expected != len(data):
        raise FormatError(f"{len(data) - blob_start - expected} unexpected trailing bytes",
                          offset=blob_start + expected)
    for e in entries:
        if e["dtype"] == "i8" and e["step"] not in tensors:
            raise IntegrityError(f"step scalar {e['step']!r} missing", tensor=e["name"])
    return header, tensors


def decode_checkpoint(data: bytes):
    header, tensors = read_checkpoint(data)
    spec = ModelSpec.from_dict(header["spec"])
    st = header["structure"]
    if header["kind"] == "quantized":
        codes = {n: a for n, a in tensors.items() if a.dtype == np.int8}
        steps = {n: float(tensors[f"{n}.step"]) for n in codes}
        scales = {n[: -len(".act_scale")]: float(a) for n, a in tensors.items() if n.endswith(".act_scale")}
        skip = {f"{n}.step" for n in codes} | {f"{n}.act_scale" for n in scales}
        residual = {n: a for n, a in tensors.items() if n not in codes and n not in skip}
        return QuantizedModel(spec, codes, steps, residual, scales, st["projector_dim"],
                              st["head_uses_projector"], st["head_dim"])
    if header["kind"] != "model":
        raise FormatError(f"unknown checkpoint kind {header['kind']!r}", offset=_PREFIX.size)
    model = build_model(spec)
    if st["head_dim"] != spec.hidden_dim:
        model.pooler = Dense(st["head_dim"], st["head_dim"])
        model.classifier = Dense(st["head_dim"], spec.num_classes)
    if st["projector_dim"] is not None:
        attach_projector(model, st["projector_dim"], st["head_uses_projector"])
    params = dict(model.named_parameters())
    if set(params) != set(tensors):
        missing, extra = set(params) - set(tensors), set(tensors) - set(params)
        raise FormatError(f"tensor set mismatch (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})",
                          offset=_PREFIX.size)
    with torch.no_grad():
        for n, p in params.items():
            if tuple(tensors[n].shape) != tuple(p.shape):
                raise FormatError(f"tensor {n!r} has shape {tensors[n].shape}, expected {tuple(p.shape)}",
                                  offset=_PREFIX.size)
            p.copy_(torch.from_numpy(tensors[n]).to(p.dtype))
    return model


def load_checkpoint(path):
    """Load a :class:`TransformerModel` or :class:`QuantizedModel`."""
    return decode_checkpoint(Path(path).read_bytes())


def checkpoint_meta(path) -> dict:
    header, _ = read_checkpoint(Path(path).read_bytes())
    return header["meta"]
