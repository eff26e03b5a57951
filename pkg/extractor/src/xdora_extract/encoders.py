"""Encoder wrappers: pretrained checkpoints or offline random-init twins.

Offline mode builds the same architecture family from its configuration
(no download) with truncated depth and a smaller hash-bucket vocabulary;
the output dimensions are exactly those of the real checkpoints, which is
what the downstream container format validates against.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch
from PIL import Image

from .config import TEXT_ENCODERS, VISION_ENCODERS, ExtractConfig


class TokenizerFailure(Exception):
    pass


class EncoderDimMismatch(Exception):
    pass


# standard preprocessing constants for the supported checkpoints
_CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
_CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)

_IMAGE_SIZE = 224


def preprocess_image(image: Image.Image, vision_encoder: str) -> torch.Tensor:
    """Resize to 224x224, scale to [0,1], normalize per encoder. CHW."""
    mean, std = (_CLIP_MEAN, _CLIP_STD) if vision_encoder == "clip-vit-b32" \
        else (_IMAGENET_MEAN, _IMAGENET_STD)
    image = image.convert("RGB").resize((_IMAGE_SIZE, _IMAGE_SIZE),
                                        Image.BICUBIC)
    arr = np.asarray(image, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(mean, dtype=np.float32)) \
        / np.asarray(std, dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1))


class HashTokenizer:
    """Deterministic whitespace tokenizer for offline mode.

    Ids come from crc32 buckets so the mapping is stable across runs and
    platforms. 0 is padding; real tokens map into [1, vocab).
    """

    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size

    def __call__(self, texts: list[str], max_tokens: int):
        ids = np.zeros((len(texts), max_tokens), dtype=np.int64)
        mask = np.zeros((len(texts), max_tokens), dtype=np.int64)
        for row, text in enumerate(texts):
            pieces = text.split()
            if not pieces:
                raise TokenizerFailure(f"caption {row} has no tokens")
            for col, piece in enumerate(pieces[:max_tokens]):
                bucket = zlib.crc32(piece.encode("utf-8")) % (self.vocab_size - 1)
                ids[row, col] = bucket + 1
                mask[row, col] = 1
        return torch.from_numpy(ids), torch.from_numpy(mask)


class _HfTokenizer:
    def __init__(self, checkpoint: str):
        from transformers import AutoTokenizer
        self._tok = AutoTokenizer.from_pretrained(checkpoint)

    def __call__(self, texts: list[str], max_tokens: int):
        try:
            enc = self._tok(texts, padding="max_length", truncation=True,
                            max_length=max_tokens, return_tensors="pt")
        except Exception as exc:
            raise TokenizerFailure(str(exc)) from exc
        return enc["input_ids"], enc["attention_mask"]


class VisionEncoder:
    """Image -> single pooled vector of length d_v."""

    def __init__(self, config: ExtractConfig):
        self.name = config.vision_encoder
        self.dim = config.d_v
        info = VISION_ENCODERS[self.name]
        torch.manual_seed(config.seed)
        if self.name == "clip-vit-b32":
            from transformers import CLIPVisionConfig, CLIPVisionModelWithProjection
            if config.random_init:
                cfg = CLIPVisionConfig(
                    num_hidden_layers=config.random_init_layers)
                self.model = CLIPVisionModelWithProjection(cfg)
            else:
                self.model = CLIPVisionModelWithProjection.from_pretrained(
                    info.checkpoint)
        else:
            from transformers import Dinov2Config, Dinov2Model
            if config.random_init:
                cfg = Dinov2Config(num_hidden_layers=config.random_init_layers)
                self.model = Dinov2Model(cfg)
            else:
                self.model = Dinov2Model.from_pretrained(info.checkpoint)
        self.model.eval().to(config.device)
        self.device = config.device

    @torch.no_grad()
    def encode(self, images: list[Image.Image]) -> np.ndarray:
        pixels = torch.stack([preprocess_image(im, self.name)
                              for im in images]).to(self.device)
        if self.name == "clip-vit-b32":
            out = self.model(pixel_values=pixels).image_embeds
        else:
            # class token of the final layer is the pooled representation
            out = self.model(pixel_values=pixels).last_hidden_state[:, 0]
        arr = out.cpu().numpy().astype(np.float32)
        if arr.shape[1] != self.dim:
            raise EncoderDimMismatch(
                f"{self.name} produced dim {arr.shape[1]}, declared {self.dim}")
        return arr


class TextEncoder:
    """Caption -> (S, d_t) token embeddings plus the attention mask."""

    def __init__(self, config: ExtractConfig):
        self.name = config.text_encoder
        self.dim = config.d_t
        self.max_tokens = config.max_tokens
        info = TEXT_ENCODERS[self.name]
        torch.manual_seed(config.seed + 1)
        if config.random_init:
            self.tokenizer = HashTokenizer(config.random_init_vocab)
        else:
            self.tokenizer = _HfTokenizer(info.checkpoint)
        if self.name == "xglm-564m":
            from transformers import XGLMConfig, XGLMModel
            if config.random_init:
                cfg = XGLMConfig(num_layers=config.random_init_layers,
                                 vocab_size=config.random_init_vocab)
                self.model = XGLMModel(cfg)
            else:
                self.model = XGLMModel.from_pretrained(info.checkpoint)
        else:
            from transformers import XLMRobertaConfig, XLMRobertaModel
            if config.random_init:
                cfg = XLMRobertaConfig(
                    num_hidden_layers=config.random_init_layers,
                    vocab_size=config.random_init_vocab,
                    hidden_size=1024, num_attention_heads=16,
                    intermediate_size=4096,
                    max_position_embeddings=config.max_tokens + 8)
                self.model = XLMRobertaModel(cfg)
            else:
                self.model = XLMRobertaModel.from_pretrained(info.checkpoint)
        self.model.eval().to(config.device)
        self.device = config.device

    @torch.no_grad()
    def encode(self, captions: list[str]) -> tuple[np.ndarray, np.ndarray]:
        ids, mask = self.tokenizer(captions, self.max_tokens)
        ids = ids.to(self.device)
        mask = mask.to(self.device)
        hidden = self.model(input_ids=ids,
                            attention_mask=mask).last_hidden_state
        tokens = hidden.cpu().numpy().astype(np.float32)
        if tokens.shape[2] != self.dim:
            raise EncoderDimMismatch(
                f"{self.name} produced dim {tokens.shape[2]}, "
                f"declared {self.dim}")
        mask_np = mask.cpu().numpy().astype(np.uint8)
        tokens[mask_np == 0] = 0.0      # padding rows are all-zero
        return tokens, mask_np
