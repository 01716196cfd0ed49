"""Versioned little-endian binary container for experiment state.

Layout::

    b"AEMBCKPT" | u32 version | u32 n_sections
    n_sections x ( u16 name_len | name utf-8 | u64 payload_len | payload )

Embedding banks are stored with their own snapshot format; every other
section is an array: ``u32 ndim | u64 shape[ndim] | float64 data``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .embedding import EmbeddingBank
from .errors import SnapshotError
from .framework import AutoEmbModel

MAGIC = b"AEMBCKPT"
VERSION = 1


def encode_array(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f8")
    return struct.pack(f"<I{a.ndim}Q", a.ndim, *a.shape) + a.tobytes()


def decode_array(blob: bytes) -> np.ndarray:
    (ndim,) = struct.unpack_from("<I", blob, 0)
    shape = struct.unpack_from(f"<{ndim}Q", blob, 4)
    off = 4 + 8 * ndim
    return np.frombuffer(blob, dtype="<f8", offset=off).reshape(shape).astype(np.float64)


def pack_sections(sections: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    for name, payload in sections.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<Q", len(payload)) + payload)
    return b"".join(parts)


def unpack_sections(blob: bytes) -> dict:
    if blob[:8] != MAGIC:
        raise SnapshotError("not an autoemb checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise SnapshotError(f"unsupported checkpoint version {version}")
    pos, out = 16, {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", blob, pos)
        name = blob[pos + 2:pos + 2 + ln].decode("utf-8")
        pos += 2 + ln
        (size,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        out[name] = blob[pos:pos + size]
        pos += size
    if pos != len(blob):
        raise SnapshotError("trailing bytes in checkpoint")
    return out


def model_sections(model: AutoEmbModel) -> dict:
    sec = {}
    if model.mode == "fse":
        sec["user_table"] = encode_array(model.user_table.data)
        sec["item_table"] = encode_array(model.item_table.data)
    else:
        sec["user_bank"] = model.user_bank.to_bytes()
        sec["item_bank"] = model.item_bank.to_bytes()
    for side in ("user", "item"):
        ctrl = getattr(model, f"{side}_controller")
        if ctrl is not None:
            for k, p in enumerate(ctrl.parameters()):
                sec[f"{side}_controller/{k}"] = encode_array(p.data)
            ctx = getattr(model, f"{side}_context")
            sec[f"{side}_context/prev_weights"] = encode_array(ctx.prev_weights)
            sec[f"{side}_context/prev_loss"] = encode_array(ctx.prev_loss)
            sec[f"{side}_context/loss_ema"] = encode_array(ctx.loss_ema)
        logits = getattr(model, f"{side}_logits")
        if logits is not None:
            sec[f"{side}_logits"] = encode_array(logits.data)
    for k, p in enumerate(model.dlrs.parameters()):
        sec[f"dlrs/{k}"] = encode_array(p.data)
    return sec


def save(model: AutoEmbModel, path) -> None:
    Path(path).write_bytes(pack_sections(model_sections(model)))


def load_into(model: AutoEmbModel, path) -> AutoEmbModel:
    """Overwrite ``model``'s state from a checkpoint written for the same architecture."""
    sec = unpack_sections(Path(path).read_bytes())

    def put(target, name):
        if name not in sec:
            raise SnapshotError(f"checkpoint lacks section {name!r}")
        arr = decode_array(sec[name])
        if arr.shape != target.shape:
            raise SnapshotError(f"section {name!r}: shape {arr.shape} != {target.shape}")
        target[...] = arr

    if model.mode == "fse":
        put(model.user_table.data, "user_table")
        put(model.item_table.data, "item_table")
    else:
        model.user_bank = EmbeddingBank.from_bytes(sec["user_bank"])
        model.item_bank = EmbeddingBank.from_bytes(sec["item_bank"])
    for side in ("user", "item"):
        ctrl = getattr(model, f"{side}_controller")
        if ctrl is not None:
            for k, p in enumerate(ctrl.parameters()):
                put(p.data, f"{side}_controller/{k}")
            ctx = getattr(model, f"{side}_context")
            put(ctx.prev_weights, f"{side}_context/prev_weights")
            put(ctx.prev_loss, f"{side}_context/prev_loss")
            put(ctx.loss_ema, f"{side}_context/loss_ema")
        logits = getattr(model, f"{side}_logits")
        if logits is not None:
            put(logits.data, f"{side}_logits")
    for k, p in enumerate(model.dlrs.parameters()):
        put(p.data, f"dlrs/{k}")
    return model
