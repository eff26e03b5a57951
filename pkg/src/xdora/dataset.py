"""Embedding datasets: the XDEM container format, source-label remapping,
stratified splitting, and class weighting.

XDEM layout (little-endian throughout)::

    magic "XDEM" | version u32=1 | flags u32 (bit0: captions present)
    | record_count u64 | d_v u32 | S u32 | d_t u32
    then per record:
      id_len u16 + UTF-8 id
      label i32                      (-1 = unlabeled)
      image_embedding   d_v x f32
      token_embeddings  S*d_t x f32  (row-major)
      attention_mask    S x u8       (1 = real token, 0 = padding)
      [cap_len u32 + UTF-8 caption]  (only when flags bit0 is set)
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BadMagic,
    ClassTooSmall,
    DimensionMismatch,
    EmptyClass,
    InvalidRecord,
    TruncatedFile,
    UnknownSourceLabel,
    UnlabeledRecord,
    VersionMismatch,
)
from .rng import make_rng

XDEM_MAGIC = b"XDEM"
XDEM_VERSION = 1
_HEADER = struct.Struct("<4sIIQIII")
_FLAG_CAPTIONS = 1


# ---------------------------------------------------------------------------
# records and taxonomies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetHeader:
    d_v: int
    S: int
    d_t: int


@dataclass
class EmbeddingRecord:
    """One sample's precomputed encoder output; the engine's universal input."""

    id: str
    label: int                      # -1 = unlabeled, else 0..C-1
    image_embedding: np.ndarray     # (d_v,) float32
    token_embeddings: np.ndarray    # (S, d_t) float32
    attention_mask: np.ndarray      # (S,) uint8
    caption: str | None = None


@dataclass(frozen=True)
class LabelTaxonomy:
    task: str
    classes: tuple[str, ...]

    @property
    def C(self) -> int:
        return len(self.classes)

    def index_of(self, name: str) -> int:
        return self.classes.index(name)


TASK1 = LabelTaxonomy("task1", ("Non-Hate", "Hate"))
TASK2 = LabelTaxonomy("task2", ("TI", "TC", "TO", "TS"))


def taxonomy_for(task: str) -> LabelTaxonomy:
    if task.lower() == "task1":
        return TASK1
    if task.lower() == "task2":
        return TASK2
    raise ValueError(f"unknown task {task!r}; expected 'task1' or 'task2'")


# ---------------------------------------------------------------------------
# XDEM read/write
# ---------------------------------------------------------------------------

def _validate_record(rec: EmbeddingRecord, d_v: int, S: int, d_t: int) -> None:
    if rec.image_embedding.shape != (d_v,):
        raise DimensionMismatch(
            f"record {rec.id!r}: image embedding {rec.image_embedding.shape} != ({d_v},)")
    if rec.token_embeddings.shape != (S, d_t):
        raise DimensionMismatch(
            f"record {rec.id!r}: token embeddings {rec.token_embeddings.shape} != ({S}, {d_t})")
    if rec.attention_mask.shape != (S,):
        raise DimensionMismatch(
            f"record {rec.id!r}: attention mask {rec.attention_mask.shape} != ({S},)")
    if not np.all(np.isin(rec.attention_mask, (0, 1))):
        raise InvalidRecord(f"record {rec.id!r}: mask bytes must be 0 or 1")
    if int(rec.attention_mask.sum()) < 1:
        raise InvalidRecord(f"record {rec.id!r}: mask admits no real token")
    if rec.label < -1:
        raise InvalidRecord(f"record {rec.id!r}: label {rec.label} out of range")
    if not (np.all(np.isfinite(rec.image_embedding))
            and np.all(np.isfinite(rec.token_embeddings))):
        raise InvalidRecord(f"record {rec.id!r}: non-finite embedding values")


def save_embeddings(path: str | Path, records: Sequence[EmbeddingRecord]) -> None:
    """Write records to an XDEM file. Dimensions come from the first record."""
    if not records:
        raise ValueError("cannot save an empty record sequence (dims unknown)")
    d_v = int(records[0].image_embedding.shape[0])
    S, d_t = (int(x) for x in records[0].token_embeddings.shape)
    captions = any(r.caption is not None for r in records)
    flags = _FLAG_CAPTIONS if captions else 0

    parts = [_HEADER.pack(XDEM_MAGIC, XDEM_VERSION, flags, len(records), d_v, S, d_t)]
    for rec in records:
        _validate_record(rec, d_v, S, d_t)
        rid = rec.id.encode("utf-8")
        if len(rid) > 0xFFFF:
            raise InvalidRecord(f"record id too long ({len(rid)} bytes)")
        parts.append(struct.pack("<H", len(rid)))
        parts.append(rid)
        parts.append(struct.pack("<i", rec.label))
        parts.append(np.ascontiguousarray(rec.image_embedding, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(rec.token_embeddings, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(rec.attention_mask, dtype=np.uint8).tobytes())
        if captions:
            cap = (rec.caption or "").encode("utf-8")
            parts.append(struct.pack("<I", len(cap)))
            parts.append(cap)
    Path(path).write_bytes(b"".join(parts))


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFile(
                f"need {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def load_embeddings(path: str | Path) -> tuple[list[EmbeddingRecord], DatasetHeader]:
    """Read an XDEM file; round-trips bit-exactly through save_embeddings."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise TruncatedFile(f"file shorter than header ({len(data)} bytes)")
    magic, version, flags, count, d_v, S, d_t = _HEADER.unpack_from(data, 0)
    if magic != XDEM_MAGIC:
        raise BadMagic(f"expected {XDEM_MAGIC!r}, found {magic!r}")
    if version != XDEM_VERSION:
        raise VersionMismatch(f"unsupported XDEM version {version}")
    captions = bool(flags & _FLAG_CAPTIONS)

    cur = _Cursor(data)
    cur.pos = _HEADER.size
    records: list[EmbeddingRecord] = []
    for _ in range(count):
        (id_len,) = struct.unpack("<H", cur.take(2))
        rid = cur.take(id_len).decode("utf-8")
        (label,) = struct.unpack("<i", cur.take(4))
        img = np.frombuffer(cur.take(4 * d_v), dtype="<f4").copy()
        tok = np.frombuffer(cur.take(4 * S * d_t), dtype="<f4").reshape(S, d_t).copy()
        mask = np.frombuffer(cur.take(S), dtype=np.uint8).copy()
        cap = None
        if captions:
            (cap_len,) = struct.unpack("<I", cur.take(4))
            cap = cur.take(cap_len).decode("utf-8")
        rec = EmbeddingRecord(rid, label, img, tok, mask, cap)
        _validate_record(rec, d_v, S, d_t)
        records.append(rec)
    if cur.pos != len(data):
        raise TruncatedFile(
            f"{len(data) - cur.pos} trailing bytes after {count} records")
    return records, DatasetHeader(d_v, S, d_t)


# ---------------------------------------------------------------------------
# source-label remapping
# ---------------------------------------------------------------------------

MAP_TO = "map-to"
KEEP_AS_NONHATE = "keep-as-nonhate"
DISCARD = "discard"


@dataclass(frozen=True)
class RemapRule:
    source_label: str
    action: str                 # MAP_TO | KEEP_AS_NONHATE | DISCARD
    target: int | None = None   # task2 class index for MAP_TO


# Source aggression taxonomy -> hate-target taxonomy. Political aggression
# attacks organizations, gendered aggression attacks individuals, religious
# aggression attacks communities; the residual bucket has no counterpart.
DEFAULT_REMAP_RULES: tuple[RemapRule, ...] = (
    RemapRule("Political", MAP_TO, TASK2.index_of("TO")),
    RemapRule("Gender", MAP_TO, TASK2.index_of("TI")),
    RemapRule("Religious", MAP_TO, TASK2.index_of("TC")),
    RemapRule("Others", DISCARD),
    RemapRule("Non-aggression", KEEP_AS_NONHATE),
)


@dataclass(frozen=True)
class RemapResult:
    task1_label: int | None
    task2_label: int | None
    discarded: bool


def remap_label(source: str,
                rules: Sequence[RemapRule] = DEFAULT_REMAP_RULES) -> RemapResult:
    """Apply the remapping rule table to one source label."""
    for rule in rules:
        if rule.source_label == source:
            if rule.action == DISCARD:
                return RemapResult(None, None, True)
            if rule.action == KEEP_AS_NONHATE:
                return RemapResult(TASK1.index_of("Non-Hate"), None, False)
            if rule.action == MAP_TO:
                return RemapResult(TASK1.index_of("Hate"), rule.target, False)
            raise ValueError(f"unknown rule action {rule.action!r}")
    raise UnknownSourceLabel(f"no rule for source label {source!r}")


def remap_manifest(
    rows: Iterable[dict],
    rules: Sequence[RemapRule] = DEFAULT_REMAP_RULES,
    keep_nonaggression: float = 1.0,
    seed: int = 42,
) -> list[dict]:
    """Remap a JSON-lines manifest of {"id", "source_label"} rows.

    ``keep_nonaggression`` subsamples the kept Non-aggression rows (seeded,
    without replacement); the rest are discarded. Output rows carry
    {"id", "task1_label", "task2_label", "discarded"}.
    """
    rows = list(rows)
    nonagg_idx = [i for i, r in enumerate(rows)
                  if r["source_label"] == "Non-aggression"]
    keep_count = round(keep_nonaggression * len(nonagg_idx))
    rng = make_rng(seed)
    kept = set(rng.choice(nonagg_idx, size=keep_count, replace=False).tolist()) \
        if nonagg_idx else set()

    out = []
    for i, row in enumerate(rows):
        res = remap_label(row["source_label"], rules)
        if row["source_label"] == "Non-aggression" and i not in kept:
            res = RemapResult(None, None, True)
        out.append({
            "id": row["id"],
            "task1_label": res.task1_label,
            "task2_label": res.task2_label,
            "discarded": res.discarded,
        })
    return out


def read_manifest(path: str | Path) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# stratified splitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 42

    def __post_init__(self):
        if any(f <= 0 for f in self.fractions):
            raise ValueError("split fractions must be positive")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {self.fractions}")


def _exact_fraction(f: float) -> Fraction:
    # 0.1 etc. arrive as floats; recover the intended rational so the
    # half-up boundary cases are decided exactly, not by float noise.
    return Fraction(f).limit_denominator(1_000_000)


def split_counts(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    """Per-class (train, valid, test) counts for a class of size ``n``.

    The validation count rounds half-up, the test count floors, and train
    takes the remainder, so evaluation splits are filled before training.
    """
    f_valid = _exact_fraction(fractions[1])
    f_test = _exact_fraction(fractions[2])
    valid = math.floor(n * f_valid + Fraction(1, 2))
    test = math.floor(n * f_test)
    train = n - valid - test
    if train < 0:
        raise ValueError(f"fractions {fractions} over-allocate a class of size {n}")
    return train, valid, test


def stratified_split_indices(
    labels: Sequence[int], spec: SplitSpec
) -> tuple[list[int], list[int], list[int]]:
    """Disjoint, exhaustive, per-class deterministic index split."""
    labels = [int(x) for x in labels]
    for i, y in enumerate(labels):
        if y < 0:
            raise UnlabeledRecord(f"record at position {i} is unlabeled")
    by_class: dict[int, list[int]] = {}
    for i, y in enumerate(labels):
        by_class.setdefault(y, []).append(i)

    rng = make_rng(spec.seed)
    train: list[int] = []
    valid: list[int] = []
    test: list[int] = []
    for cls in sorted(by_class):
        members = by_class[cls]
        if len(members) < 3:
            raise ClassTooSmall(f"class {cls} has only {len(members)} members")
        _, n_valid, n_test = split_counts(len(members), spec.fractions)
        perm = rng.permutation(len(members))
        shuffled = [members[j] for j in perm]
        valid.extend(sorted(shuffled[:n_valid]))
        test.extend(sorted(shuffled[n_valid:n_valid + n_test]))
        train.extend(sorted(shuffled[n_valid + n_test:]))
    return sorted(train), sorted(valid), sorted(test)


def stratified_split(
    records: Sequence[EmbeddingRecord], spec: SplitSpec
) -> tuple[list[EmbeddingRecord], list[EmbeddingRecord], list[EmbeddingRecord]]:
    tr, va, te = stratified_split_indices([r.label for r in records], spec)
    return ([records[i] for i in tr],
            [records[i] for i in va],
            [records[i] for i in te])


# ---------------------------------------------------------------------------
# class weights
# ---------------------------------------------------------------------------

def class_weights(labels: Sequence[int], C: int) -> np.ndarray:
    """Inverse-frequency weights w_c = N / (C * n_c)."""
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0):
        raise UnlabeledRecord("class weights require fully labeled data")
    if np.any(labels >= C):
        raise EmptyClass(f"label {labels.max()} outside 0..{C - 1}")
    counts = np.bincount(labels, minlength=C)
    if np.any(counts == 0):
        missing = int(np.argmin(counts))
        raise EmptyClass(f"class {missing} has no samples")
    n = float(labels.size)
    return n / (C * counts.astype(np.float64))
