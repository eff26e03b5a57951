"""Prompt construction and the vision-language inference service client.

Prompt text is a frozen template so golden tests can assert bytes: a
step-by-step preamble, the task's label definitions, one line per
exemplar ("Caption: <caption> -> Label: <name>", with a unicode arrow),
and a final query line the service completes. Exemplars are text-only;
only the query may carry an image.

The wire protocol is a minimal JSON shape any local or hosted model can
adapt to: request {"task", "prompt", "image_base64"}, response {"text"}.
"""

from __future__ import annotations

import base64
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import requests

from .dataset import EmbeddingRecord, LabelTaxonomy, taxonomy_for
from .errors import (
    ClassMissing,
    EmptyCaption,
    MissingCaption,
    ServiceError,
    Transport,
    UnbalancedExemplars,
    Unparseable,
)
from .fusion import FusionConfig, FusionParams, forward
from .retrieval import FlatIndex, top_k_per_class

ENDPOINT_ENV_VAR = "XDORA_LVLM_ENDPOINT"

ZERO_SHOT = "zero-shot"
FEW_SHOT = "few-shot"
RAG = "rag"
PROMPT_MODES = (ZERO_SHOT, FEW_SHOT, RAG)

_PREAMBLE = """\
You are a meme content classifier. You will receive the test meme's caption \
text, and its image when available.
Follow these steps:
1. Inspect the image for visual cues such as symbols, gestures, and facial \
expressions.
2. Inspect the caption for textual signals such as slang, sarcasm, or an \
offensive tone, and reason over image and caption together to judge intent.
3. If labeled examples are given below, learn from how each caption maps to \
its label.
4. Decide the label from the task definition below; when the case is \
ambiguous, choose the most plausible label.
Respond with exactly one label and nothing else.
"""

_TASK_BLOCKS = {
    "task1": """\
Task: decide whether the meme is hateful.
Labels:
- Non-Hate (0): the meme does not target anyone with hateful intent.
- Hate (1): the meme directly or implicitly targets an individual or group \
with hateful intent.
""",
    "task2": """\
Task: identify which kind of entity the hateful meme targets.
Labels:
- TI (0): a targeted individual, a specific person.
- TC (1): a targeted community, a group sharing beliefs or ideology.
- TO (2): a targeted organization, a group with shared goals or membership.
- TS (3): a targeted society, a population defined by geography or identity.
""",
}


@dataclass(frozen=True)
class Exemplar:
    caption: str
    label_name: str


@dataclass(frozen=True)
class Prompt:
    task: str
    system_preamble: str
    exemplars: tuple[Exemplar, ...]
    query_caption: str
    image_ref: str | bytes | None = None

    @property
    def text(self) -> str:
        parts = [self.system_preamble]
        if self.exemplars:
            parts.append("Examples:")
            for ex in self.exemplars:
                parts.append(f"Caption: {ex.caption} → Label: {ex.label_name}")
            parts.append("")
        parts.append(f"Caption: {self.query_caption} → Label:")
        return "\n".join(parts)


@dataclass(frozen=True)
class ServiceResponse:
    raw_text: str
    parsed_label: int | None


def _check_balanced(exemplars: Sequence[Exemplar],
                    taxonomy: LabelTaxonomy) -> None:
    counts = {name: 0 for name in taxonomy.classes}
    for ex in exemplars:
        if ex.label_name not in counts:
            raise UnbalancedExemplars(
                f"exemplar label {ex.label_name!r} not in task {taxonomy.task}")
        counts[ex.label_name] += 1
    if len(set(counts.values())) != 1 or next(iter(counts.values())) == 0:
        raise UnbalancedExemplars(
            f"exemplars must cover every class equally, got counts {counts}")


def build_prompt(task: str, query_caption: str,
                 exemplars: Sequence[Exemplar] = (),
                 mode: str = ZERO_SHOT,
                 image_ref: str | bytes | None = None) -> Prompt:
    """Deterministic prompt for one query; identical inputs give identical
    bytes."""
    if mode not in PROMPT_MODES:
        raise ValueError(f"mode must be one of {PROMPT_MODES}, got {mode!r}")
    taxonomy = taxonomy_for(task)
    if not query_caption or not query_caption.strip():
        raise EmptyCaption("query caption is empty")
    if mode == ZERO_SHOT:
        if exemplars:
            raise UnbalancedExemplars("zero-shot prompts take no exemplars")
    else:
        if not exemplars:
            raise UnbalancedExemplars(f"{mode} prompts require exemplars")
        for ex in exemplars:
            if not ex.caption or not ex.caption.strip():
                raise EmptyCaption("exemplar caption is empty")
        _check_balanced(exemplars, taxonomy)
    preamble = _PREAMBLE + _TASK_BLOCKS[taxonomy.task]
    return Prompt(taxonomy.task, preamble, tuple(exemplars), query_caption,
                  image_ref)


def select_exemplars(
    index: FlatIndex | None,
    params: FusionParams | None,
    config: FusionConfig,
    test_record: EmbeddingRecord,
    k: int,
    mode: str,
    train_records: Sequence[EmbeddingRecord],
    rng=None,
) -> list[Exemplar]:
    """k exemplars per class, via retrieval (rag) or seeded sampling.

    Rag mode queries the index with the test record's fused vector; random
    mode samples uniformly per class without replacement. Exemplar order
    is class block 0..C-1 in both modes.
    """
    captions = {r.id: r.caption for r in train_records}
    if mode == RAG:
        if index is None or params is None or config is None:
            raise ValueError("rag mode needs an index, params, and config")
        z, _ = forward(test_record, params, config)
        result = top_k_per_class(index, z, k, config.C)
        if result.missing_classes:
            raise ClassMissing(
                f"index has no entries for classes {result.missing_classes}")
        taxonomy = taxonomy_for("task1" if config.C == 2 else "task2")
        exemplars = []
        for nb in result.neighbors:
            caption = captions.get(nb.id)
            if not caption:
                raise MissingCaption(f"record {nb.id!r} has no caption")
            exemplars.append(Exemplar(caption, taxonomy.classes[nb.label]))
        return exemplars

    if mode == FEW_SHOT:
        if rng is None:
            raise ValueError("random exemplar selection needs an rng")
        labeled = [r for r in train_records if r.label >= 0]
        taxonomy = taxonomy_for("task1" if config.C == 2 else "task2")
        exemplars = []
        for cls in range(taxonomy.C):
            members = [r for r in labeled if r.label == cls]
            if len(members) < k:
                raise ClassMissing(
                    f"class {cls} has {len(members)} records, need {k}")
            chosen = rng.choice(len(members), size=k, replace=False)
            for j in chosen:
                rec = members[int(j)]
                if not rec.caption:
                    raise MissingCaption(f"record {rec.id!r} has no caption")
                exemplars.append(Exemplar(rec.caption, taxonomy.classes[cls]))
        return exemplars

    raise ValueError(f"mode must be {RAG!r} or {FEW_SHOT!r}, got {mode!r}")


_TOKEN_RE = re.compile(r"[A-Za-z]+(?:-[A-Za-z]+)*|\d+")


def parse_response(raw: str, task: str) -> int:
    """First token that names a label (case-insensitive) or its integer."""
    taxonomy = taxonomy_for(task)
    lookup = {name.lower(): i for i, name in enumerate(taxonomy.classes)}
    lookup.update({str(i): i for i in range(taxonomy.C)})
    for token in _TOKEN_RE.findall(raw):
        hit = lookup.get(token.lower())
        if hit is not None:
            return hit
    raise Unparseable(f"no label token for {task} in {raw!r}")


# ---------------------------------------------------------------------------
# service client
# ---------------------------------------------------------------------------

def resolve_endpoint(flag_value: str | None = None) -> str:
    """Explicit flag wins; falls back to the XDORA_LVLM_ENDPOINT env var."""
    endpoint = flag_value or os.environ.get(ENDPOINT_ENV_VAR)
    if not endpoint:
        raise ValueError(
            f"no endpoint given and {ENDPOINT_ENV_VAR} is not set")
    return endpoint


def _image_to_base64(image_ref: str | bytes | None) -> str | None:
    if image_ref is None:
        return None
    data = image_ref if isinstance(image_ref, bytes) else Path(image_ref).read_bytes()
    return base64.b64encode(data).decode("ascii")


class LvlmClient:
    """HTTP client for the external inference service.

    Retries transport failures and 5xx answers with exponential backoff;
    well-formed responses are never retried. Requests run under a
    concurrency cap and are joined in input order.
    """

    def __init__(self, endpoint: str | None = None, timeout: float = 30.0,
                 retries: int = 2, backoff: float = 0.25, concurrency: int = 1):
        self.endpoint = resolve_endpoint(endpoint)
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.concurrency = max(1, concurrency)

    def classify(self, prompt: Prompt,
                 retries: int | None = None) -> ServiceResponse:
        payload = {
            "task": prompt.task,
            "prompt": prompt.text,
            "image_base64": _image_to_base64(prompt.image_ref),
        }
        attempts = (self.retries if retries is None else retries) + 1
        last_exc: Exception | None = None
        for attempt in range(attempts):
            if attempt > 0 and self.backoff > 0:
                time.sleep(self.backoff * (2 ** (attempt - 1)))
            try:
                resp = requests.post(self.endpoint, json=payload,
                                     timeout=self.timeout)
            except requests.RequestException as exc:
                last_exc = exc
                continue
            if resp.status_code >= 500:
                last_exc = ServiceError(resp.status_code, resp.text)
                continue
            if resp.status_code != 200:
                raise ServiceError(resp.status_code, resp.text)
            try:
                text = resp.json()["text"]
            except (ValueError, KeyError):
                raise ServiceError(resp.status_code, resp.text)
            try:
                label = parse_response(text, prompt.task)
            except Unparseable:
                label = None
            return ServiceResponse(raw_text=text, parsed_label=label)
        if isinstance(last_exc, ServiceError):
            raise last_exc
        raise Transport(f"request failed after {attempts} attempts: {last_exc}")

    def classify_many(self, prompts: Sequence[Prompt]) -> list[ServiceResponse]:
        if self.concurrency == 1:
            return [self.classify(p) for p in prompts]
        with ThreadPoolExecutor(max_workers=self.concurrency) as pool:
            return list(pool.map(self.classify, prompts))


def classify_via_service(prompt: Prompt, client: LvlmClient,
                         retries: int | None = None) -> ServiceResponse:
    return client.classify(prompt, retries=retries)
