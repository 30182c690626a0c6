"""Binary checkpoints of a training state.

Layout (all integers little-endian)::

    magic      8 bytes  b"UMCKPT\\x00\\x01"
    version    uint32
    header     uint64 length + UTF-8 JSON (sorted keys)
    blob       uint64 length + raw float64 data
    digest     32 bytes sha256 over everything above

The JSON header lists every tensor with its name, shape and offset into the
blob, together with the configuration, category table, counters and the
random generator state. Writing is deterministic, so save -> load -> save
reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .network import UniverseModel
from .training import Optimizer, TrainConfig, TrainState

MAGIC = b"UMCKPT\x00\x01"
VERSION = 1
_DIGEST = 32


class CheckpointError(Exception):
    pass


class CheckpointIntegrityError(CheckpointError):
    """Truncated, corrupted or otherwise unreadable file."""


class CheckpointVersionError(CheckpointError):
    """File written by an incompatible format version; needs migration."""

    def __init__(self, found: int):
        super().__init__(
            f"checkpoint format version {found} is not supported (expected {VERSION}); "
            "re-export it with a matching release or migrate it first"
        )
        self.found = found


def _tensors(state: TrainState) -> list[tuple[str, np.ndarray]]:
    out = []
    opt = state.optimizer
    for p in state.model.parameters():
        out.append((f"param/{p.name}", p.data))
        out.append((f"adam_m/{p.name}", opt.m[p.name]))
        out.append((f"adam_v/{p.name}", opt.v[p.name]))
    return out


def encode_checkpoint(state: TrainState) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in _tensors(state):
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    model = state.model
    header = {
        "config": state.config.to_dict(),
        "categories": [
            {"name": name, "d": model.categories[i]} for i, name in enumerate(state.category_names)
        ],
        "iteration": state.iteration,
        "optimizer": {"kind": state.optimizer.kind, "step_count": state.optimizer.step_count},
        "rng": state.rng.bit_generator.state,
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = b"".join(chunks)
    body = (
        MAGIC
        + struct.pack("<I", VERSION)
        + struct.pack("<Q", len(head))
        + head
        + struct.pack("<Q", len(blob))
        + blob
    )
    return body + hashlib.sha256(body).digest()


def save_checkpoint(state: TrainState, path) -> None:
    """Write atomically: a crash mid-write never leaves a half-written checkpoint."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(state))
    os.replace(tmp, path)


def _split(raw: bytes) -> tuple[dict, bytes]:
    if len(raw) < len(MAGIC) + 4:
        raise CheckpointIntegrityError("file too short to be a checkpoint")
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointIntegrityError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, len(MAGIC))
    if version != VERSION:
        raise CheckpointVersionError(version)
    if len(raw) < len(MAGIC) + 12 + _DIGEST:
        raise CheckpointIntegrityError("truncated checkpoint")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointIntegrityError("checksum mismatch: file is truncated or corrupted")
    pos = len(MAGIC) + 4
    (hlen,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    header = json.loads(body[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    (blen,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    blob = body[pos:]
    if len(blob) != blen:
        raise CheckpointIntegrityError(f"blob length {len(blob)} != declared {blen}")
    return header, blob


def decode_checkpoint(raw: bytes) -> TrainState:
    header, blob = _split(raw)
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        if start + 8 * count > len(blob):
            raise CheckpointIntegrityError(f"tensor {entry['name']} runs past the data blob")
        arrays[entry["name"]] = (
            np.frombuffer(blob, dtype="<f8", count=count, offset=start).reshape(shape).copy()
        )
    config = TrainConfig(**header["config"])
    names = [c["name"] for c in header["categories"]]
    model = UniverseModel({i: c["d"] for i, c in enumerate(header["categories"])}, config.network)
    params = model.parameters()
    expected = {f"{kind}/{p.name}" for p in params for kind in ("param", "adam_m", "adam_v")}
    if expected != set(arrays):
        missing = sorted(expected - set(arrays))[:3]
        extra = sorted(set(arrays) - expected)[:3]
        raise CheckpointError(f"tensor set mismatch (missing {missing}, unexpected {extra})")
    opt_info = header["optimizer"]
    opt = Optimizer(params, opt_info["kind"], config.beta1, config.beta2, config.eps)
    opt.step_count = int(opt_info["step_count"])
    for p in params:
        value = arrays[f"param/{p.name}"]
        if value.shape != p.data.shape:
            raise CheckpointError(f"{p.name}: shape {value.shape} != model {p.data.shape}")
        p.data[...] = value
        opt.m[p.name][...] = arrays[f"adam_m/{p.name}"]
        opt.v[p.name][...] = arrays[f"adam_v/{p.name}"]
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng"]
    return TrainState(model, opt, config, names, int(header["iteration"]), rng)


def load_checkpoint(path) -> TrainState:
    return decode_checkpoint(Path(path).read_bytes())
