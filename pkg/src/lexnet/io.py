"""Single-file model container.

Layout::

    MAGIC (8 bytes) | version (uint16 LE) | header length (uint32 LE) | header JSON
    | raw little-endian arrays, back to back | sha256 of everything before (32 bytes)

The header records the backbone config, the label map, prototype bookkeeping
(class ids, stable ids, provenance), the training-config snapshot and one
entry per array (name, group, dtype, shape, byte offset).  Nothing time- or
host-dependent is written, so identical models give identical files.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .backbone import Backbone, BackboneConfig
from .lproto import LastLayer, PrototypeSet, Provenance
from .model import LexNetModel

MAGIC = b"LEXNET\x00\x1a"
VERSION = 1
_PRE = struct.Struct("<HI")


class ModelFileError(ValueError):
    pass


class UnsupportedVersionError(ModelFileError):
    pass


class ChecksumError(ModelFileError):
    pass


class TruncatedFileError(ModelFileError):
    pass


def _arrays(model: LexNetModel) -> list[tuple[str, str, np.ndarray]]:
    out = [(p.name, p.group, p.data) for p in model.params]
    for bn in model.backbone.bn_layers:
        out.append((f"{bn.name}.running_mean", "bn_state", bn.state.mean))
        out.append((f"{bn.name}.running_var", "bn_state", bn.state.var))
    return out


def model_bytes(model: LexNetModel) -> bytes:
    protos = model.prototypes
    entries, blobs, offset = [], [], 0
    for name, group, arr in _arrays(model):
        a = np.ascontiguousarray(arr, dtype=np.asarray(arr).dtype.newbyteorder("<"))
        raw = a.tobytes()
        entries.append({"name": name, "group": group, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": model.config.to_dict(),
        "dtype": np.dtype(model.dtype).name,
        "n_classes": model.n_classes,
        "label_names": list(model.label_names),
        "bn_initialized": [bool(bn.state.initialized) for bn in model.backbone.bn_layers],
        "prototypes": {
            "class_ids": protos.class_ids,
            "ids": protos.ids,
            "cap": protos.cap,
            "provenance": [p.to_dict() if p is not None else None for p in protos.provenance],
        },
        "projected": bool(model.projected),
        "train_config": model.train_config,
        "meta": model.meta,
        "arrays": entries,
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + _PRE.pack(VERSION, len(hjson)) + hjson + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def save_model(model: LexNetModel, path) -> str:
    """Write the model; returns the hex sha256 stored in the trailer."""
    data = model_bytes(model)
    Path(path).write_bytes(data)
    return data[-32:].hex()


def model_checksum(model: LexNetModel) -> str:
    return model_bytes(model)[-32:].hex()


def file_checksum(path) -> str:
    data = Path(path).read_bytes()
    if len(data) < 32:
        raise TruncatedFileError(f"{path}: file too short")
    return data[-32:].hex()


def load_model_bytes(data: bytes) -> LexNetModel:
    head = len(MAGIC) + _PRE.size
    if len(data) < head + 32:
        raise TruncatedFileError("model file is truncated")
    if data[:len(MAGIC)] != MAGIC:
        raise ModelFileError("not a LEXNet model file (bad magic bytes)")
    version, hlen = _PRE.unpack_from(data, len(MAGIC))
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported model file version {version} (this build reads {VERSION})")
    if len(data) < head + hlen + 32:
        raise TruncatedFileError("model file is truncated")
    try:
        header = json.loads(data[head:head + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        if hashlib.sha256(data[:-32]).digest() != data[-32:]:
            raise ChecksumError("model file checksum mismatch") from exc
        raise ModelFileError(f"unreadable header: {exc}") from exc
    payload_start = head + hlen
    payload_len = sum(e["nbytes"] for e in header["arrays"])
    if len(data) < payload_start + payload_len + 32:
        raise TruncatedFileError("model file is truncated")
    if len(data) != payload_start + payload_len + 32:
        raise ModelFileError("trailing bytes after model payload")
    if hashlib.sha256(data[:-32]).digest() != data[-32:]:
        raise ChecksumError("model file checksum mismatch")

    arrays = {}
    for e in header["arrays"]:
        start = payload_start + e["offset"]
        a = np.frombuffer(data[start:start + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        arrays[e["name"]] = a.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))

    dtype = np.dtype(header["dtype"]).type
    config = BackboneConfig.from_dict(header["config"])
    backbone = Backbone(config, np.random.default_rng(0), dtype)
    for p in backbone.params:
        p.data = arrays[p.name].copy()
    for bn, init in zip(backbone.bn_layers, header["bn_initialized"]):
        bn.state.mean = arrays[f"{bn.name}.running_mean"].copy()
        bn.state.var = arrays[f"{bn.name}.running_var"].copy()
        bn.state.initialized = bool(init)
    ph = header["prototypes"]
    prov = [Provenance.from_dict(p) if p is not None else None for p in ph["provenance"]]
    protos = PrototypeSet(arrays["prototypes"].copy(), ph["class_ids"], ph["ids"], prov, ph["cap"])
    last = LastLayer(arrays["last_layer"].copy())
    model = LexNetModel(backbone, protos, last, header["n_classes"], header["label_names"])
    model.projected = header["projected"]
    model.train_config = header["train_config"]
    model.meta = header["meta"]
    return model


def load_model(path) -> LexNetModel:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"model file not found: {p}")
    return load_model_bytes(p.read_bytes())
