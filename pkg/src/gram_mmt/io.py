"""Binary persistence: cached vision encodings and model checkpoints.

Vision store layout (little-endian)::

    b"VSTR" | u32 version | u32 e | u64 count
    count x (u32 id_len | utf-8 id | u64 byte offset into payload)
    payload: count x e float32
    u64 checksum (blake2b-64 of every preceding byte)

Checkpoint layout::

    b"GCKP" | u32 version | u64 header_len | JSON header | tensor payload | u64 checksum
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .model import ModelConfig, attach_adapters, build_base, gate_values, is_gated

STORE_MAGIC = b"VSTR"
STORE_VERSION = 1
CKPT_MAGIC = b"GCKP"
CKPT_VERSION = 1


class StoreError(ValueError):
    pass


class MissingImageError(LookupError):
    def __init__(self, image_id: str):
        super().__init__(f"missing image id {image_id!r}")
        self.image_id = image_id


class CheckpointError(ValueError):
    pass


def _checksum(buf: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(buf, digest_size=8).digest(), "little")


# --- vision encoding store --------------------------------------------------

class VisionEncodingStore:
    """Read-only map from image id to a length-``enc_dim`` float32 vector."""

    def __init__(self, enc_dim: int, ids: list[str], rows: np.ndarray):
        rows = np.ascontiguousarray(rows, dtype="<f4").reshape(len(ids), enc_dim)
        self.enc_dim = enc_dim
        self.ids = list(ids)
        self._index = {}
        for i, image_id in enumerate(self.ids):
            if image_id in self._index:
                raise StoreError(f"duplicate image id {image_id!r}")
            self._index[image_id] = i
        self._rows = rows
        self._rows.setflags(write=False)

    @classmethod
    def from_entries(cls, entries: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]],
                     enc_dim: int | None = None) -> "VisionEncodingStore":
        items = list(entries.items()) if isinstance(entries, Mapping) else list(entries)
        if enc_dim is None:
            if not items:
                raise StoreError("enc_dim is required for an empty store")
            enc_dim = int(np.size(items[0][1]))
        ids, rows = [], []
        for image_id, vec in items:
            vec = np.asarray(vec, dtype=np.float32).reshape(-1)
            if vec.size != enc_dim:
                raise StoreError(f"image {image_id!r} has length {vec.size}, expected e={enc_dim}")
            ids.append(str(image_id))
            rows.append(vec)
        matrix = np.stack(rows) if rows else np.zeros((0, enc_dim), dtype=np.float32)
        return cls(enc_dim, ids, matrix)

    def __len__(self):
        return len(self.ids)

    def __contains__(self, image_id):
        return image_id in self._index

    def lookup(self, image_id: str) -> np.ndarray:
        try:
            return self._rows[self._index[image_id]]
        except KeyError:
            raise MissingImageError(image_id) from None

    def items(self):
        for image_id in self.ids:
            yield image_id, self.lookup(image_id)


def store_write(path, entries, enc_dim: int | None = None) -> VisionEncodingStore:
    store = entries if isinstance(entries, VisionEncodingStore) else \
        VisionEncodingStore.from_entries(entries, enc_dim)
    e = store.enc_dim
    parts = [STORE_MAGIC, struct.pack("<IIQ", STORE_VERSION, e, len(store))]
    for i, image_id in enumerate(store.ids):
        raw = image_id.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<Q", i * e * 4))
    parts.append(store._rows.astype("<f4").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<Q", _checksum(body)))
    return store


def store_read(path) -> VisionEncodingStore:
    buf = Path(path).read_bytes()
    if len(buf) < 28 or buf[:4] != STORE_MAGIC:
        raise StoreError(f"{path}: not a vision store (bad magic)")
    body, (stored,) = buf[:-8], struct.unpack("<Q", buf[-8:])
    if _checksum(body) != stored:
        raise StoreError(f"{path}: checksum mismatch")
    version, e, count = struct.unpack_from("<IIQ", body, 4)
    if version != STORE_VERSION:
        raise StoreError(f"{path}: unsupported store version {version} (expected {STORE_VERSION})")
    pos = 20
    ids, offsets = [], []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        ids.append(body[pos:pos + n].decode("utf-8"))
        pos += n
        (off,) = struct.unpack_from("<Q", body, pos)
        offsets.append(off)
        pos += 8
    payload = np.frombuffer(body, dtype="<f4", offset=pos)
    if payload.size != count * e:
        raise StoreError(f"{path}: payload holds {payload.size} floats, expected {count * e}")
    rows = np.stack([payload[o // 4: o // 4 + e] for o in offsets]) if count else np.zeros((0, e))
    return VisionEncodingStore(e, ids, rows)


def store_lookup(store: VisionEncodingStore, image_id: str) -> np.ndarray:
    return store.lookup(image_id)


# --- checkpoints ------------------------------------------------------------

@dataclass
class Checkpoint:
    model: object
    optimizer: dict | None = None
    rng: dict | None = None
    meta: dict = field(default_factory=dict)
    gates: list = field(default_factory=list)


def checkpoint_save(model, path, optimizer: dict | None = None, rng: dict | None = None,
                    meta: dict | None = None) -> None:
    """``optimizer`` is ``{"step": int, "m": {name: array}, "v": {name: array}}``."""
    tensors, chunks, offset = [], [], 0

    def add(name, arr, trainable=None):
        nonlocal offset
        arr = np.ascontiguousarray(arr)
        raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        entry = {"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>=|"),
                 "offset": offset, "nbytes": len(raw)}
        if trainable is not None:
            entry["trainable"] = trainable
        tensors.append(entry)
        chunks.append(raw)
        offset += len(raw)

    for p in model.parameters():
        add(p.name, p.data, p.trainable)
    opt_header = None
    if optimizer is not None:
        opt_header = {"step": int(optimizer["step"])}
        for kind in ("m", "v"):
            for name, arr in optimizer[kind].items():
                add(f"adam.{kind}/{name}", arr)
    header = {
        "kind": "gated" if is_gated(model) else "base",
        "config": model.config.to_dict(),
        "tensors": tensors,
        "gates": [list(g) for g in gate_values(model)],
        "optimizer": opt_header,
        "rng": rng,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hbytes)) + hbytes + b"".join(chunks)
    Path(path).write_bytes(body + struct.pack("<Q", _checksum(body)))


def checkpoint_read(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < 24 or buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, (stored,) = buf[:-8], struct.unpack("<Q", buf[-8:])
    if _checksum(body) != stored:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    version, hlen = struct.unpack_from("<IQ", body, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} unsupported (expected {CKPT_VERSION})")
    header = json.loads(body[16:16 + hlen].decode("utf-8"))
    payload = body[16 + hlen:]

    cfg = ModelConfig(**header["config"])
    base = build_base(cfg, 0)
    model = attach_adapters(base, cfg, 0) if header["kind"] == "gated" else base
    params = model.named_parameters()
    opt = None if header["optimizer"] is None else {"step": header["optimizer"]["step"], "m": {}, "v": {}}
    for t in header["tensors"]:
        arr = np.frombuffer(payload, dtype=np.dtype("<" + t["dtype"]),
                            count=int(np.prod(t["shape"], dtype=np.int64)), offset=t["offset"])
        arr = arr.astype(arr.dtype.newbyteorder("=")).reshape(t["shape"])
        name = t["name"]
        if name.startswith("adam."):
            kind, pname = name[5:].split("/", 1)
            opt[kind][pname] = arr.copy()
            continue
        if name not in params:
            raise CheckpointError(f"{path}: unknown tensor {name!r}")
        p = params.pop(name)
        p.data = arr.copy()
        p.trainable = t["trainable"]
        p.zero_grad()
    if params:
        raise CheckpointError(f"{path}: missing tensors {sorted(params)[:3]}")
    return Checkpoint(model, opt, header.get("rng"), header.get("meta", {}), header.get("gates", []))


def checkpoint_load(path):
    return checkpoint_read(path).model

