"""Binary checkpoints for :class:`~blockvit.vit.ViTModel`.

Layout (all integers little-endian)::

    magic   b"BVITCKPT"
    version u16
    doc     u32 length + UTF-8 JSON (config, block tags, head strategy, extra)
    count   u32
    tensor  u16 name length, name, u8 dtype code, u8 ndim, u32 dims..., raw values
    ...
    sha256  32 bytes over everything above

Values are stored as raw little-endian bytes, so a round trip is bitwise.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptionError, DataError, VersionError
from .numerics import Tensor
from .vit import ClassifierHead, Origin, TransformerBlock, ViTConfig, ViTModel

MAGIC = b"BVITCKPT"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {v: k for k, v in _DTYPES.items()}


def _model_doc(model: ViTModel, extra: dict | None) -> dict:
    return {
        "config": model.cfg.to_dict(),
        "blocks": [{"origin": b.origin.value, "trainable": b.trainable} for b in model.blocks],
        "head": None if model.head is None else {"strategy": model.head.strategy.value},
        "requires_grad": {n: bool(t.requires_grad) for n, t in model.named_parameters()},
        "extra": extra or {},
    }


def dumps(model: ViTModel, extra: dict | None = None) -> bytes:
    doc = json.dumps(_model_doc(model, extra), sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(doc)), doc]
    params = model.named_parameters()
    parts.append(struct.pack("<I", len(params)))
    for name, t in params:
        arr = np.ascontiguousarray(t.data)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise TypeError(f"unsupported dtype {arr.dtype} for {name}")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", _CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(dt, copy=False).tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptionError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf: bytes) -> tuple[ViTModel, dict]:
    """Parse checkpoint bytes; returns ``(model, extra)``."""
    if len(buf) < len(MAGIC) + 2 + 32 or buf[:len(MAGIC)] != MAGIC:
        raise CorruptionError("not a blockvit checkpoint (bad magic or too short)")
    body, digest = buf[:-32], buf[-32:]
    (version,) = struct.unpack("<H", body[len(MAGIC):len(MAGIC) + 2])
    if version != VERSION:
        raise VersionError(f"checkpoint version {version}, this build reads version {VERSION}")
    if hashlib.sha256(body).digest() != digest:
        raise CorruptionError("checksum mismatch")
    r = _Reader(body)
    r.take(len(MAGIC) + 2)
    (doc_len,) = r.unpack("<I")
    try:
        doc = json.loads(r.take(doc_len).decode())
    except ValueError as exc:
        raise CorruptionError(f"unreadable config document: {exc}") from None
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CorruptionError(f"unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(r.take(n), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(body):
        raise CorruptionError("trailing bytes after tensor records")
    return _build(doc, arrays), doc.get("extra", {})


def _build(doc: dict, arrays: dict) -> ViTModel:
    cfg = ViTConfig(**doc["config"])
    grads = doc["requires_grad"]

    def t(name):
        if name not in arrays:
            raise CorruptionError(f"tensor {name} missing from checkpoint")
        return Tensor(arrays[name], requires_grad=grads.get(name, True))

    embed = {k: t(k) for k in ("patch_embed.weight", "patch_embed.bias", "cls_token", "pos_embed")}
    blocks = []
    for i, tag in enumerate(doc["blocks"]):
        params = {k: t(f"blocks.{i}.{k}") for k in TransformerBlock.PARAM_NAMES}
        blk = TransformerBlock(params, Origin(tag["origin"]), tag["trainable"])
        for k, v in params.items():  # keep per-tensor flags exactly as saved
            v.requires_grad = grads.get(f"blocks.{i}.{k}", tag["trainable"])
        blocks.append(blk)
    norm = {k: t(k) for k in ("norm.weight", "norm.bias")}
    head = None
    if doc["head"] is not None:
        head = ClassifierHead(t("head.weight"), t("head.bias"), doc["head"]["strategy"])
    return ViTModel(cfg, embed, blocks, norm, head)


def save_checkpoint(model: ViTModel, path, extra: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(model, extra))
    tmp.replace(path)


def load_checkpoint(path, with_extra: bool = False):
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} does not exist")
    model, extra = loads(path.read_bytes())
    return (model, extra) if with_extra else model


__all__ = ["MAGIC", "VERSION", "dumps", "loads", "save_checkpoint", "load_checkpoint"]
