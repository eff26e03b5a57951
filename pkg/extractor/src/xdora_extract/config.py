"""Extraction configuration and the encoder registry."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class EncoderInfo:
    name: str
    checkpoint: str
    dim: int


VISION_ENCODERS = {
    "clip-vit-b32": EncoderInfo("clip-vit-b32",
                                "openai/clip-vit-base-patch32", 512),
    "dinov2-base": EncoderInfo("dinov2-base", "facebook/dinov2-base", 768),
}

TEXT_ENCODERS = {
    "xglm-564m": EncoderInfo("xglm-564m", "facebook/xglm-564M", 1024),
    "xlm-r-large": EncoderInfo("xlm-r-large", "xlm-roberta-large", 1024),
}


@dataclass(frozen=True)
class ExtractConfig:
    vision_encoder: str = "clip-vit-b32"
    text_encoder: str = "xlm-r-large"
    max_tokens: int = 64          # captions are truncated/padded to this S
    batch_size: int = 8
    device: str = "cpu"
    # offline mode: same architecture families instantiated from config
    # with random weights, truncated depth, and a reduced hash vocabulary;
    # output dimensions are identical to the pretrained checkpoints
    random_init: bool = False
    random_init_layers: int = 2
    random_init_vocab: int = 8192
    seed: int = 42

    def __post_init__(self):
        if self.vision_encoder not in VISION_ENCODERS:
            raise ValueError(f"unknown vision encoder {self.vision_encoder!r}; "
                             f"choose from {sorted(VISION_ENCODERS)}")
        if self.text_encoder not in TEXT_ENCODERS:
            raise ValueError(f"unknown text encoder {self.text_encoder!r}; "
                             f"choose from {sorted(TEXT_ENCODERS)}")
        if self.max_tokens < 1 or self.batch_size < 1:
            raise ValueError("max_tokens and batch_size must be positive")

    @property
    def d_v(self) -> int:
        return VISION_ENCODERS[self.vision_encoder].dim

    @property
    def d_t(self) -> int:
        return TEXT_ENCODERS[self.text_encoder].dim
