"""Command line for the embedding extractor."""

from __future__ import annotations

import argparse
import json
import sys

from .config import TEXT_ENCODERS, VISION_ENCODERS, ExtractConfig
from .extract import extract


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="xdora-extract",
        description="Encode images and captions into an XDEM embedding file")
    ap.add_argument("--manifest", required=True,
                    help="JSONL rows {id, image, caption, label}")
    ap.add_argument("--images-root", default=None)
    ap.add_argument("--out", required=True)
    ap.add_argument("--vision-encoder", default="clip-vit-b32",
                    choices=sorted(VISION_ENCODERS))
    ap.add_argument("--text-encoder", default="xlm-r-large",
                    choices=sorted(TEXT_ENCODERS))
    ap.add_argument("--max-tokens", type=int, default=64)
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--device", default="cpu")
    ap.add_argument("--random-init", action="store_true",
                    help="offline mode: real architectures, random weights")
    ap.add_argument("--random-init-layers", type=int, default=2)
    ap.add_argument("--random-init-vocab", type=int, default=8192)
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args(argv)

    config = ExtractConfig(
        vision_encoder=args.vision_encoder, text_encoder=args.text_encoder,
        max_tokens=args.max_tokens, batch_size=args.batch_size,
        device=args.device, random_init=args.random_init,
        random_init_layers=args.random_init_layers,
        random_init_vocab=args.random_init_vocab, seed=args.seed)
    print(json.dumps({"event": "config", **vars(args)}), file=sys.stderr)
    try:
        count = extract(args.manifest, args.out, config,
                        images_root=args.images_root)
    except Exception as exc:
        print(json.dumps({"event": "error", "kind": type(exc).__name__,
                          "message": str(exc)}), file=sys.stderr)
        return 2
    print(json.dumps({"event": "done", "records": count,
                      "d_v": config.d_v, "S": config.max_tokens,
                      "d_t": config.d_t}), file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
