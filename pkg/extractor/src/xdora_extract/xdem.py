"""Writer for the XDEM embedding container consumed by the engine.

Layout, little-endian: magic "XDEM", version u32=1, flags u32 (bit0:
captions present), record_count u64, d_v u32, S u32, d_t u32; then per
record id_len u16 + UTF-8 id, label i32, image_embedding d_v x f32,
token_embeddings S*d_t x f32 row-major, attention_mask S x u8, and, when
the captions flag is set, cap_len u32 + UTF-8 caption.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"XDEM"
VERSION = 1
_HEADER = struct.Struct("<4sIIQIII")
_FLAG_CAPTIONS = 1


@dataclass
class XdemRecord:
    id: str
    label: int
    image_embedding: np.ndarray    # (d_v,) float32
    token_embeddings: np.ndarray   # (S, d_t) float32
    attention_mask: np.ndarray     # (S,) uint8
    caption: str | None = None


def write_xdem(path: str | Path, records: list[XdemRecord],
               d_v: int, S: int, d_t: int) -> None:
    captions = any(r.caption is not None for r in records)
    parts = [_HEADER.pack(MAGIC, VERSION, _FLAG_CAPTIONS if captions else 0,
                          len(records), d_v, S, d_t)]
    for rec in records:
        assert rec.image_embedding.shape == (d_v,)
        assert rec.token_embeddings.shape == (S, d_t)
        assert rec.attention_mask.shape == (S,)
        rid = rec.id.encode("utf-8")
        parts.append(struct.pack("<H", len(rid)))
        parts.append(rid)
        parts.append(struct.pack("<i", rec.label))
        parts.append(np.ascontiguousarray(rec.image_embedding,
                                          dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(rec.token_embeddings,
                                          dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(rec.attention_mask,
                                          dtype=np.uint8).tobytes())
        if captions:
            cap = (rec.caption or "").encode("utf-8")
            parts.append(struct.pack("<I", len(cap)))
            parts.append(cap)
    Path(path).write_bytes(b"".join(parts))
