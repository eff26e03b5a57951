"""Command-line surface wiring the library into end-to-end workflows:
remap -> split -> train -> embed-fused/index-build -> predict/knn/fuse ->
prompt-build/lvlm-classify -> evaluate.

Exit codes: 0 success, 1 usage error, 2 data error, 3 service error.
Every run echoes its resolved configuration as a JSON line on stderr, and
output files are written to a temp path and atomically renamed, so a
failing run never leaves a partial file behind.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    SplitSpec,
    load_embeddings,
    read_manifest,
    remap_manifest,
    save_embeddings,
    stratified_split,
    taxonomy_for,
)
from .ensemble import (
    DEFAULT_ALPHA_GRID,
    grid_search_alpha,
    model_and_retrieval_probs,
)
from .errors import ServiceError, Transport, XdoraError
from .evaluation import (
    Prediction,
    evaluate,
    format_report,
    read_predictions,
    report_to_dict,
)
from .fusion import FusionConfig, forward_batch, load_model, records_to_arrays, save_model
from .prompting import LvlmClient, build_prompt, select_exemplars
from .retrieval import FlatIndex, build_index, load_index, predict_knn, save_index
from .rng import make_rng
from .training import TrainSpec, train


class _Parser(argparse.ArgumentParser):
    # usage problems exit 1; argparse's default of 2 is reserved for data errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _log(event: str, **fields) -> None:
    print(json.dumps({"event": event, **fields}, default=str), file=sys.stderr)


def _atomic_write_bytes(path: str, data: bytes) -> None:
    path = str(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".",
                               prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_text(path: str, text: str) -> None:
    _atomic_write_bytes(path, text.encode("utf-8"))


def _atomic_write_jsonl(path: str, rows) -> None:
    _atomic_write_text(path, "".join(
        json.dumps(row, ensure_ascii=False) + "\n" for row in rows))


def _atomic_save(save_fn, path: str, *args) -> None:
    """Run a binary writer against a temp file, then rename into place."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-",
                               suffix=os.path.basename(path))
    os.close(fd)
    try:
        save_fn(tmp, *args)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _probs(vec: np.ndarray) -> list[float]:
    return [float(x) for x in vec]


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------

def _cmd_remap(args) -> int:
    rows = read_manifest(args.manifest)
    out = remap_manifest(rows, keep_nonaggression=args.keep_nonaggression,
                         seed=args.seed)
    _atomic_write_jsonl(args.out, out)
    _log("done", mapped=sum(1 for r in out if not r["discarded"]),
         discarded=sum(1 for r in out if r["discarded"]))
    return 0


def _cmd_split(args) -> int:
    records, _ = load_embeddings(args.input)
    spec = SplitSpec(tuple(args.fractions), seed=args.seed)
    tr, va, te = stratified_split(records, spec)
    _atomic_save(save_embeddings, args.out_train, tr)
    _atomic_save(save_embeddings, args.out_valid, va)
    _atomic_save(save_embeddings, args.out_test, te)
    _log("done", train=len(tr), valid=len(va), test=len(te))
    return 0


def _cmd_train(args) -> int:
    train_records, header = load_embeddings(args.train)
    valid_records, _ = load_embeddings(args.valid)
    taxonomy = taxonomy_for(args.task)
    config = FusionConfig(
        d_v=header.d_v, d_t=header.d_t, S=header.S, heads=args.heads,
        C=taxonomy.C, dropout_rate=args.dropout, hidden_dim=args.hidden_dim)
    spec = TrainSpec(
        batch_size=args.batch_size, learning_rate=args.lr,
        weight_decay=args.weight_decay, max_epochs=args.max_epochs,
        patience=args.patience, optimizer=args.optimizer, seed=args.seed)
    params, log = train(train_records, valid_records, config, spec)
    _atomic_save(save_model, args.out, params, config)
    if args.log:
        _atomic_write_jsonl(args.log, log)
    for entry in log:
        _log("epoch", **entry)
    _log("done", model=args.out, best_valid_accuracy=max(
        e["valid_accuracy"] for e in log))
    return 0


def _fused_vectors(params, config, records, batch_size=256):
    out = np.zeros((len(records), config.fused_dim))
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        v0, t, mask, _ = records_to_arrays(chunk, config)
        z, _, _ = forward_batch(params, config, v0, t, mask)
        out[start:start + len(chunk)] = z
    return out


def _cmd_embed_fused(args) -> int:
    params, config = load_model(args.model)
    records, _ = load_embeddings(args.data)
    z = _fused_vectors(params, config, records)
    index = build_index(
        (records[i].id, records[i].label, z[i]) for i in range(len(records)))
    _atomic_save(save_index, args.out, index)
    _log("done", entries=len(index), dim=index.dim)
    return 0


def _cmd_index_build(args) -> int:
    merged_ids: list[str] = []
    merged_labels: list[int] = []
    merged_keys = []
    dim = None
    for path in args.inputs:
        index = load_index(path)
        if dim is None:
            dim = index.dim
        elif index.dim != dim:
            raise XdoraError(f"{path}: dim {index.dim} != {dim}")
        merged_ids.extend(index.ids)
        merged_labels.extend(int(x) for x in index.labels)
        merged_keys.append(index.keys)
    index = FlatIndex(merged_ids, np.asarray(merged_labels, dtype=np.int64),
                      np.concatenate(merged_keys, axis=0))
    _atomic_save(save_index, args.out, index)
    _log("done", entries=len(index), dim=index.dim)
    return 0


def _cmd_predict(args) -> int:
    params, config = load_model(args.model)
    records, _ = load_embeddings(args.data)
    v0, t, mask, labels = records_to_arrays(records, config)
    _, probs, _ = forward_batch(params, config, v0, t, mask)
    rows = [{"id": r.id, "pred": int(np.argmax(probs[i])),
             "gold": int(labels[i]), "y_model": _probs(probs[i])}
            for i, r in enumerate(records)]
    _atomic_write_jsonl(args.out, rows)
    _log("done", predictions=len(rows))
    return 0


def _cmd_knn(args) -> int:
    params, config = load_model(args.model)
    index = load_index(args.index)
    records, _ = load_embeddings(args.data)
    z = _fused_vectors(params, config, records)
    rows = []
    for i, r in enumerate(records):
        pred, probs = predict_knn(index, z[i], args.k, config.C,
                                  per_class=args.per_class,
                                  uniform_weights=args.majority)
        rows.append({"id": r.id, "pred": pred, "gold": int(r.label),
                     "y_retrieval": _probs(probs)})
    _atomic_write_jsonl(args.out, rows)
    _log("done", predictions=len(rows))
    return 0


def _cmd_fuse(args) -> int:
    params, config = load_model(args.model)
    index = load_index(args.index)
    records, _ = load_embeddings(args.data)
    y_model, y_retr = model_and_retrieval_probs(
        params, config, index, records, args.k, per_class=args.per_class)
    fused = args.alpha * y_model + (1.0 - args.alpha) * y_retr
    rows = [{"id": r.id,
             "y_model": _probs(y_model[i]),
             "y_retrieval": _probs(y_retr[i]),
             "y_fused": _probs(fused[i]),
             "label": int(np.argmax(fused[i])),
             "gold": int(r.label)}
            for i, r in enumerate(records)]
    _atomic_write_jsonl(args.out, rows)
    _log("done", predictions=len(rows), alpha=args.alpha)
    return 0


def _cmd_grid_alpha(args) -> int:
    params, config = load_model(args.model)
    index = load_index(args.index)
    records, _ = load_embeddings(args.valid)
    best, table = grid_search_alpha(params, config, index, records,
                                    grid=args.grid, k=args.k,
                                    per_class=args.per_class)
    result = {"best_alpha": best, "table": table}
    if args.out:
        _atomic_write_text(args.out, json.dumps(result, indent=2) + "\n")
    print(json.dumps(result, indent=2))
    _log("done", best_alpha=best)
    return 0


def _cmd_prompt_build(args) -> int:
    records, _ = load_embeddings(args.data)
    rows = []
    if args.mode == "zero-shot":
        for r in records:
            prompt = build_prompt(args.task, r.caption or "", mode="zero-shot")
            rows.append({"id": r.id, "task": args.task,
                         "prompt": prompt.text, "gold": int(r.label)})
    else:
        train_records, _ = load_embeddings(args.train)
        params, config = load_model(args.model) if args.model else (None, None)
        index = load_index(args.index) if args.index else None
        rng = make_rng(args.seed)
        for r in records:
            exemplars = select_exemplars(index, params, config, r, args.k,
                                         args.mode, train_records, rng)
            prompt = build_prompt(args.task, r.caption or "", exemplars,
                                  mode=args.mode)
            rows.append({"id": r.id, "task": args.task,
                         "prompt": prompt.text, "gold": int(r.label)})
    _atomic_write_jsonl(args.out, rows)
    _log("done", prompts=len(rows), mode=args.mode)
    return 0


def _cmd_lvlm_classify(args) -> int:
    prompts = read_manifest(args.prompts)
    client = LvlmClient(endpoint=args.endpoint, timeout=args.timeout,
                        retries=args.retries, backoff=args.backoff,
                        concurrency=args.jobs)
    rows = []
    for row in prompts:
        # the stored text is already fully rendered; send it verbatim
        response = client.classify(_PreRendered(row["task"], row["prompt"]))
        pred = response.parsed_label if response.parsed_label is not None else -1
        rows.append({"id": row["id"], "pred": pred, "gold": int(row["gold"]),
                     "raw_text": response.raw_text,
                     "unparseable": response.parsed_label is None})
    _atomic_write_jsonl(args.out, rows)
    _log("done", predictions=len(rows),
         unparseable=sum(1 for r in rows if r["unparseable"]))
    return 0


class _PreRendered:
    """Adapter giving an already-rendered prompt the Prompt interface."""

    def __init__(self, task: str, text: str, image_ref=None):
        self.task = task
        self._text = text
        self.image_ref = image_ref

    @property
    def text(self) -> str:
        return self._text


def _cmd_evaluate(args) -> int:
    taxonomy = taxonomy_for(args.task)
    preds = read_predictions(args.preds)
    report = evaluate(preds, taxonomy.C, class_names=taxonomy.classes,
                      bootstrap_iterations=args.bootstrap, seed=args.seed)
    print(format_report(report))
    if args.out:
        _atomic_write_text(args.out,
                           json.dumps(report_to_dict(report), indent=2) + "\n")
    _log("done", macro_f1=report.macro_f1)
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def _add_seed(p):
    p.add_argument("--seed", type=int, default=42)


def build_parser() -> _Parser:
    parser = _Parser(prog="xdora", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("remap", help="remap a source-label manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--keep-nonaggression", type=float, default=1.0)
    _add_seed(p)
    p.set_defaults(fn=_cmd_remap)

    p = sub.add_parser("split", help="stratified train/valid/test split")
    p.add_argument("--input", required=True)
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-valid", required=True)
    p.add_argument("--out-test", required=True)
    p.add_argument("--fractions", type=float, nargs=3, default=[0.8, 0.1, 0.1])
    _add_seed(p)
    p.set_defaults(fn=_cmd_split)

    p = sub.add_parser("train", help="train the fusion network")
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--task", required=True, choices=["task1", "task2"])
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None, help="training log JSONL path")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=2e-5)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--max-epochs", type=int, default=20)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--optimizer", choices=["adamw", "sgd"], default="adamw")
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--hidden-dim", type=int, default=512)
    p.add_argument("--dropout", type=float, default=0.1)
    _add_seed(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("embed-fused",
                       help="dump fused vectors of a dataset to an index file")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_embed_fused)

    p = sub.add_parser("index-build", help="merge/validate index files")
    p.add_argument("--inputs", required=True, nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_index_build)

    p = sub.add_parser("predict", help="model-only classification")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_predict)

    p = sub.add_parser("knn", help="retrieval-only classification")
    p.add_argument("--model", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--per-class", action="store_true")
    p.add_argument("--majority", action="store_true",
                   help="uniform weights (majority voting) instead of "
                        "similarity weighting")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_knn)

    p = sub.add_parser("fuse", help="ensemble model and retrieval predictions")
    p.add_argument("--model", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--alpha", type=float, default=0.6)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--per-class", action="store_true", default=True)
    p.add_argument("--global-k", dest="per_class", action="store_false")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_fuse)

    p = sub.add_parser("grid-alpha", help="grid-search the ensemble weight")
    p.add_argument("--model", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--grid", type=float, nargs="+",
                   default=list(DEFAULT_ALPHA_GRID))
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--per-class", action="store_true", default=True)
    p.add_argument("--global-k", dest="per_class", action="store_false")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_grid_alpha)

    p = sub.add_parser("prompt-build", help="build classification prompts")
    p.add_argument("--task", required=True, choices=["task1", "task2"])
    p.add_argument("--data", required=True, help="test XDEM with captions")
    p.add_argument("--mode", choices=["zero-shot", "few-shot", "rag"],
                   default="rag")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--model", default=None)
    p.add_argument("--index", default=None)
    p.add_argument("--train", default=None, help="train XDEM with captions")
    p.add_argument("--out", required=True)
    _add_seed(p)
    p.set_defaults(fn=_cmd_prompt_build)

    p = sub.add_parser("lvlm-classify",
                       help="send prompts to the inference service")
    p.add_argument("--prompts", required=True)
    p.add_argument("--endpoint", default=None,
                   help="service URL (or set XDORA_LVLM_ENDPOINT)")
    p.add_argument("--retries", type=int, default=2)
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--backoff", type=float, default=0.25)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_lvlm_classify)

    p = sub.add_parser("evaluate", help="score a prediction file")
    p.add_argument("--preds", required=True)
    p.add_argument("--task", required=True, choices=["task1", "task2"])
    p.add_argument("--bootstrap", type=int, default=0,
                   help="bootstrap iterations for CIs (0 = off)")
    p.add_argument("--out", default=None)
    _add_seed(p)
    p.set_defaults(fn=_cmd_evaluate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    resolved = {k: v for k, v in vars(args).items() if k != "fn"}
    _log("config", **resolved)
    try:
        return args.fn(args)
    except (Transport, ServiceError) as exc:
        _log("error", kind=type(exc).__name__, message=str(exc))
        return 3
    except (XdoraError, OSError, ValueError, KeyError) as exc:
        _log("error", kind=type(exc).__name__, message=str(exc))
        return 2


if __name__ == "__main__":
    sys.exit(main())
