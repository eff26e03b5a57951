"""Manifest -> encoders -> XDEM pipeline."""

from __future__ import annotations

import json
from pathlib import Path

from PIL import Image

from .config import ExtractConfig
from .encoders import TextEncoder, VisionEncoder
from .xdem import XdemRecord, write_xdem


class MissingImage(Exception):
    pass


def read_manifest(path: str | Path) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def extract(manifest_path: str | Path, out_path: str | Path,
            config: ExtractConfig,
            images_root: str | Path | None = None) -> int:
    """Encode every manifest row and write one XDEM file.

    Manifest rows: {"id": str, "image": path, "caption": str,
    "label": int|null}. Returns the number of records written.
    """
    rows = read_manifest(manifest_path)
    if not rows:
        raise ValueError(f"manifest {manifest_path} is empty")
    root = Path(images_root) if images_root else Path(".")

    for i, row in enumerate(rows):
        image_path = root / row["image"]
        if not image_path.is_file():
            raise MissingImage(
                f"manifest row {i} (id {row.get('id')!r}): "
                f"image {image_path} not found")

    vision = VisionEncoder(config)
    text = TextEncoder(config)

    records: list[XdemRecord] = []
    for start in range(0, len(rows), config.batch_size):
        batch = rows[start:start + config.batch_size]
        images = [Image.open(root / row["image"]) for row in batch]
        captions = [row["caption"] for row in batch]
        image_vecs = vision.encode(images)
        token_mats, masks = text.encode(captions)
        for j, row in enumerate(batch):
            label = row.get("label")
            records.append(XdemRecord(
                id=str(row["id"]),
                label=-1 if label is None else int(label),
                image_embedding=image_vecs[j],
                token_embeddings=token_mats[j],
                attention_mask=masks[j],
                caption=row["caption"]))

    write_xdem(out_path, records, config.d_v, config.max_tokens, config.d_t)
    return len(records)
