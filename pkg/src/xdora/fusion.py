"""Dual co-attention fusion network.

Pipeline per sample: project the pooled vision vector into the text width
and replicate it across the token axis, run two multihead cross-attention
blocks over it (visual queries against text keys, with text values in one
block and visual values in the other), concatenate both attention outputs
with the raw streams, pool over the sequence axis with per-channel soft
attention, and classify the pooled vector with a two-layer LeakyReLU MLP.

Everything is plain float64 numpy with a hand-derived backward pass; the
finite-difference checker in ``numerics`` validates every gradient. The
pooled vector doubles as the retrieval key, so ``forward`` exposes it.

Weight files ("XDMW") store the config as canonical JSON followed by the
parameter tensors as little-endian f32 in the fixed order of
``param_names``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import EmbeddingRecord
from .errors import (
    AllMasked,
    BadMagic,
    DimensionMismatch,
    LabelOutOfRange,
    TruncatedFile,
    VersionMismatch,
)
from .numerics import leaky_relu, sigmoid, softmax

XDMW_MAGIC = b"XDMW"
XDMW_VERSION = 1

LEAKY_SLOPE = 0.01
LOG_CLAMP = 1e-12
MASKED_SCORE = -1e30  # underflows to exactly zero weight after softmax

I2T = "i2t"  # visual queries, text keys, text values
I2I = "i2i"  # visual queries, text keys, visual values
ATTN_BLOCKS = (I2T, I2I)


@dataclass(frozen=True)
class FusionConfig:
    d_v: int
    d_t: int
    S: int
    heads: int = 8
    C: int = 2
    dropout_rate: float = 0.1
    hidden_dim: int = 512

    def __post_init__(self):
        if self.d_t % self.heads != 0:
            raise ValueError(f"d_t={self.d_t} not divisible by heads={self.heads}")
        if self.C not in (2, 4):
            raise ValueError(f"C must be 2 or 4, got {self.C}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        for field in ("d_v", "d_t", "S", "heads", "hidden_dim"):
            if getattr(self, field) <= 0:
                raise ValueError(f"{field} must be positive")

    @property
    def fused_dim(self) -> int:
        return 4 * self.d_t

    @property
    def n_logits(self) -> int:
        # binary head is one logit through a sigmoid; multiclass is C logits
        return 1 if self.C == 2 else self.C

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "FusionConfig":
        return cls(**json.loads(text))


FusionParams = dict[str, np.ndarray]


def param_names(config: FusionConfig) -> list[str]:
    """Canonical parameter order (also the XDMW tensor order)."""
    names = ["w_v", "b_v"]
    for blk in ATTN_BLOCKS:
        for comp in ("q", "k", "v", "o"):
            names += [f"{blk}_w{comp}", f"{blk}_b{comp}"]
    names += ["mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"]
    return names


def param_shapes(config: FusionConfig) -> dict[str, tuple[int, ...]]:
    d_t = config.d_t
    shapes: dict[str, tuple[int, ...]] = {
        "w_v": (config.d_v, d_t), "b_v": (d_t,),
        "mlp_w1": (config.fused_dim, config.hidden_dim),
        "mlp_b1": (config.hidden_dim,),
        "mlp_w2": (config.hidden_dim, config.n_logits),
        "mlp_b2": (config.n_logits,),
    }
    for blk in ATTN_BLOCKS:
        for comp in ("q", "k", "v", "o"):
            shapes[f"{blk}_w{comp}"] = (d_t, d_t)
            shapes[f"{blk}_b{comp}"] = (d_t,)
    return shapes


def init_params(config: FusionConfig, rng: np.random.Generator) -> FusionParams:
    """Glorot-uniform matrices, zero biases, drawn in canonical order."""
    params: FusionParams = {}
    shapes = param_shapes(config)
    for name in param_names(config):
        shape = shapes[name]
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return params


def copy_params(params: FusionParams) -> FusionParams:
    return {k: v.copy() for k, v in params.items()}


# ---------------------------------------------------------------------------
# batched forward
# ---------------------------------------------------------------------------

def records_to_arrays(records: Sequence[EmbeddingRecord], config: FusionConfig):
    """Stack records into (V0, T, mask, labels) float64 batch arrays."""
    if not records:
        raise ValueError("empty record batch")
    for r in records:
        if r.image_embedding.shape != (config.d_v,) \
                or r.token_embeddings.shape != (config.S, config.d_t):
            raise DimensionMismatch(
                f"record {r.id!r} dims do not match config "
                f"(d_v={config.d_v}, S={config.S}, d_t={config.d_t})")
    v0 = np.stack([r.image_embedding for r in records]).astype(np.float64)
    t = np.stack([r.token_embeddings for r in records]).astype(np.float64)
    mask = np.stack([r.attention_mask for r in records]).astype(np.float64)
    labels = np.array([r.label for r in records], dtype=np.int64)
    return v0, t, mask, labels


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, s, d = x.shape
    return x.reshape(b, s, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dh)


def _attention_forward(params, blk, q_in, k_in, v_in, mask, heads, cache=None):
    """Multihead attention with masked keys. Inputs (B, S, d_t)."""
    q = q_in @ params[f"{blk}_wq"] + params[f"{blk}_bq"]
    k = k_in @ params[f"{blk}_wk"] + params[f"{blk}_bk"]
    v = v_in @ params[f"{blk}_wv"] + params[f"{blk}_bv"]
    qh, kh, vh = (_split_heads(x, heads) for x in (q, k, v))
    scale = np.sqrt(qh.shape[-1])
    scores = qh @ kh.swapaxes(-1, -2) / scale            # (B, H, S, S)
    scores = np.where(mask[:, None, None, :] > 0, scores, MASKED_SCORE)
    attn = softmax(scores, axis=-1)
    ctx = attn @ vh                                       # (B, H, S, dh)
    merged = _merge_heads(ctx)
    out = merged @ params[f"{blk}_wo"] + params[f"{blk}_bo"]
    if cache is not None:
        cache[blk] = {"qh": qh, "kh": kh, "vh": vh, "attn": attn,
                      "merged": merged, "q_in": q_in, "k_in": k_in, "v_in": v_in}
    return out


def forward_batch(
    params: FusionParams,
    config: FusionConfig,
    v0: np.ndarray,
    t: np.ndarray,
    mask: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    want_cache: bool = False,
):
    """Full forward pass on a batch.

    Returns (fused (B, 4*d_t), probs (B, C), cache or None). Eval mode is
    a pure function: no rng is consumed and no state mutates.
    """
    b = v0.shape[0]
    if v0.shape != (b, config.d_v) or t.shape != (b, config.S, config.d_t) \
            or mask.shape != (b, config.S):
        raise DimensionMismatch(
            f"batch shapes {v0.shape}/{t.shape}/{mask.shape} do not match config")
    if np.any(mask.sum(axis=1) < 1):
        raise AllMasked("a record's attention mask admits no key position")

    cache: dict = {} if want_cache else None

    v1 = v0 @ params["w_v"] + params["b_v"]               # (B, d_t)
    v = np.repeat(v1[:, None, :], config.S, axis=1)       # replicate over tokens

    a1 = _attention_forward(params, I2T, v, t, t, mask, config.heads, cache)
    a2 = _attention_forward(params, I2I, v, t, v, mask, config.heads, cache)

    f = np.concatenate([a1, a2, v, t], axis=2)            # (B, S, 4*d_t)
    alpha = softmax(f, axis=1)                            # per-channel over tokens
    z = np.sum(alpha * f, axis=1)                         # (B, 4*d_t)

    h_pre = z @ params["mlp_w1"] + params["mlp_b1"]
    h = leaky_relu(h_pre, LEAKY_SLOPE)
    if train_mode and config.dropout_rate > 0.0:
        if rng is None:
            raise ValueError("train-mode dropout requires an rng")
        keep = (rng.random(h.shape) >= config.dropout_rate)
        drop_mask = keep / (1.0 - config.dropout_rate)    # inverted dropout
    else:
        drop_mask = None
    h_d = h * drop_mask if drop_mask is not None else h
    logits = h_d @ params["mlp_w2"] + params["mlp_b2"]

    if config.C == 2:
        s = sigmoid(logits[:, 0])
        probs = np.stack([1.0 - s, s], axis=1)
    else:
        probs = softmax(logits, axis=1)

    if want_cache:
        cache.update({
            "v0": v0, "t": t, "mask": mask, "v1": v1, "v": v,
            "a1": a1, "a2": a2, "f": f, "alpha": alpha, "z": z,
            "h_pre": h_pre, "h": h, "drop_mask": drop_mask, "h_d": h_d,
            "logits": logits, "probs": probs,
        })
    return z, probs, cache


# ---------------------------------------------------------------------------
# single-record surfaces
# ---------------------------------------------------------------------------

def project_vision(v0: np.ndarray, params: FusionParams,
                   config: FusionConfig) -> np.ndarray:
    """Project a vision vector to d_t and replicate it across all S rows."""
    v0 = np.asarray(v0, dtype=np.float64)
    if v0.shape != (config.d_v,):
        raise DimensionMismatch(f"vision vector {v0.shape} != ({config.d_v},)")
    v1 = v0 @ params["w_v"] + params["b_v"]
    return np.repeat(v1[None, :], config.S, axis=0)


def coattend(v: np.ndarray, t: np.ndarray, mask: np.ndarray,
             params: FusionParams, config: FusionConfig, mode: str) -> np.ndarray:
    """One co-attention block on a single sample (S, d_t) pair."""
    if mode not in ATTN_BLOCKS:
        raise ValueError(f"mode must be one of {ATTN_BLOCKS}, got {mode!r}")
    v = np.asarray(v, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if v.shape != (config.S, config.d_t) or t.shape != (config.S, config.d_t):
        raise DimensionMismatch(f"expected ({config.S}, {config.d_t}) inputs")
    if mask.shape != (config.S,):
        raise DimensionMismatch(f"mask {mask.shape} != ({config.S},)")
    if mask.sum() < 1:
        raise AllMasked("mask admits no key position")
    value = t if mode == I2T else v
    out = _attention_forward(params, mode, v[None], t[None], value[None],
                             mask[None], config.heads)
    return out[0]


def fuse_pool(a1: np.ndarray, a2: np.ndarray, v: np.ndarray,
              t: np.ndarray) -> np.ndarray:
    """Soft attention pooling over the sequence axis of [a1 | a2 | v | t]."""
    mats = [np.asarray(m, dtype=np.float64) for m in (a1, a2, v, t)]
    if len({m.shape for m in mats}) != 1 or mats[0].ndim != 2:
        raise DimensionMismatch(
            f"fuse_pool inputs must share one 2-D shape, got "
            f"{[m.shape for m in mats]}")
    f = np.concatenate(mats, axis=1)          # (S, 4*d_t)
    alpha = softmax(f, axis=0)                # per channel over positions
    return np.sum(alpha * f, axis=0)


def classify(z: np.ndarray, params: FusionParams, config: FusionConfig,
             train_mode: bool = False,
             rng: np.random.Generator | None = None):
    """MLP head on a fused vector. Returns (logits, probs)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (config.fused_dim,):
        raise DimensionMismatch(f"fused vector {z.shape} != ({config.fused_dim},)")
    h = leaky_relu(z @ params["mlp_w1"] + params["mlp_b1"], LEAKY_SLOPE)
    if train_mode and config.dropout_rate > 0.0:
        if rng is None:
            raise ValueError("train-mode dropout requires an rng")
        keep = (rng.random(h.shape) >= config.dropout_rate)
        h = h * keep / (1.0 - config.dropout_rate)
    logits = h @ params["mlp_w2"] + params["mlp_b2"]
    if config.C == 2:
        s = float(sigmoid(logits[0:1])[0])
        probs = np.array([1.0 - s, s])
    else:
        probs = softmax(logits[None], axis=1)[0]
    return logits, probs


def forward(record: EmbeddingRecord, params: FusionParams, config: FusionConfig,
            train_mode: bool = False, rng: np.random.Generator | None = None):
    """Forward one record. Returns (fused vector, probability vector)."""
    v0, t, mask, _ = records_to_arrays([record], config)
    z, probs, _ = forward_batch(params, config, v0, t, mask,
                                train_mode=train_mode, rng=rng)
    return z[0], probs[0]


# ---------------------------------------------------------------------------
# loss and backward
# ---------------------------------------------------------------------------

def loss(probs: np.ndarray, labels: Sequence[int],
         weights: np.ndarray) -> float:
    """Mean weighted cross-entropy, log clamped at LOG_CLAMP."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    c = probs.shape[1]
    if np.any(labels < 0) or np.any(labels >= c):
        raise LabelOutOfRange(f"labels must lie in 0..{c - 1}")
    picked = probs[np.arange(labels.size), labels]
    return float(np.mean(-weights[labels] * np.log(np.maximum(picked, LOG_CLAMP))))


def _logit_grad(cache, labels, weights, config):
    """d loss / d logits for the mean weighted cross-entropy.

    Assumes the LOG_CLAMP guard is inactive (true away from exactly
    saturated probabilities, which gradient tests avoid).
    """
    b = labels.size
    w = weights[labels][:, None] / b
    if config.C == 2:
        s = cache["probs"][:, 1]
        return (w[:, 0] * (s - labels))[:, None]
    onehot = np.zeros_like(cache["probs"])
    onehot[np.arange(b), labels] = 1.0
    return w * (cache["probs"] - onehot)


def _linear_backward(x_in, w, d_out):
    """Gradients of y = x_in @ w + b for (B, S, *) or (B, *) inputs."""
    xf = x_in.reshape(-1, x_in.shape[-1])
    df = d_out.reshape(-1, d_out.shape[-1])
    dw = xf.T @ df
    db = df.sum(axis=0)
    dx = d_out @ w.T
    return dx, dw, db


def _attention_backward(params, blk, cache, d_out, grads):
    """Backward through one attention block; returns (dq_in, dk_in, dv_in)."""
    c = cache[blk]
    d_merged, dwo, dbo = _linear_backward(c["merged"], params[f"{blk}_wo"], d_out)
    grads[f"{blk}_wo"] += dwo
    grads[f"{blk}_bo"] += dbo

    heads = c["attn"].shape[1]
    d_ctx = _split_heads(d_merged, heads)                 # (B, H, S, dh)
    attn, vh, qh, kh = c["attn"], c["vh"], c["qh"], c["kh"]

    d_attn = d_ctx @ vh.swapaxes(-1, -2)
    d_vh = attn.swapaxes(-1, -2) @ d_ctx
    # softmax rows: masked columns hold exactly zero weight, so their
    # gradient vanishes without special casing
    d_scores = attn * (d_attn - np.sum(attn * d_attn, axis=-1, keepdims=True))
    scale = np.sqrt(qh.shape[-1])
    d_qh = d_scores @ kh / scale
    d_kh = d_scores.swapaxes(-1, -2) @ qh / scale

    dq = _merge_heads(d_qh)
    dk = _merge_heads(d_kh)
    dv = _merge_heads(d_vh)

    dq_in, dwq, dbq = _linear_backward(c["q_in"], params[f"{blk}_wq"], dq)
    dk_in, dwk, dbk = _linear_backward(c["k_in"], params[f"{blk}_wk"], dk)
    dv_in, dwv, dbv = _linear_backward(c["v_in"], params[f"{blk}_wv"], dv)
    grads[f"{blk}_wq"] += dwq
    grads[f"{blk}_bq"] += dbq
    grads[f"{blk}_wk"] += dwk
    grads[f"{blk}_bk"] += dbk
    grads[f"{blk}_wv"] += dwv
    grads[f"{blk}_bv"] += dbv
    return dq_in, dk_in, dv_in


def backward_batch(params: FusionParams, config: FusionConfig, cache: dict,
                   labels: np.ndarray, weights: np.ndarray) -> FusionParams:
    """Hand-derived gradients of the batch loss for every parameter."""
    grads: FusionParams = {name: np.zeros_like(params[name])
                           for name in param_names(config)}

    d_logits = _logit_grad(cache, labels, weights, config)

    # MLP head
    d_hd, dw2, db2 = _linear_backward(cache["h_d"], params["mlp_w2"], d_logits)
    grads["mlp_w2"] += dw2
    grads["mlp_b2"] += db2
    d_h = d_hd * cache["drop_mask"] if cache["drop_mask"] is not None else d_hd
    d_hpre = d_h * np.where(cache["h_pre"] > 0, 1.0, LEAKY_SLOPE)
    d_z, dw1, db1 = _linear_backward(cache["z"], params["mlp_w1"], d_hpre)
    grads["mlp_w1"] += dw1
    grads["mlp_b1"] += db1

    # attention pooling: z_j = sum_s alpha_sj f_sj with alpha = softmax_s(f)
    f, alpha, z = cache["f"], cache["alpha"], cache["z"]
    d_f = d_z[:, None, :] * alpha * (1.0 + f - z[:, None, :])

    d_t_dim = config.d_t
    d_a1 = d_f[:, :, 0 * d_t_dim:1 * d_t_dim]
    d_a2 = d_f[:, :, 1 * d_t_dim:2 * d_t_dim]
    d_v = d_f[:, :, 2 * d_t_dim:3 * d_t_dim].copy()
    d_t = d_f[:, :, 3 * d_t_dim:4 * d_t_dim].copy()

    dq1, dk1, dv1 = _attention_backward(params, I2T, cache, d_a1, grads)
    d_v += dq1
    d_t += dk1 + dv1                      # text is both key and value here
    dq2, dk2, dv2 = _attention_backward(params, I2I, cache, d_a2, grads)
    d_v += dq2 + dv2                      # vision is both query and value here
    d_t += dk2

    # replication across S rows sums back into the projected vector
    d_v1 = d_v.sum(axis=1)
    grads["w_v"] += cache["v0"].T @ d_v1
    grads["b_v"] += d_v1.sum(axis=0)
    return grads


def batch_loss_and_grads(params, config, v0, t, mask, labels, weights,
                         train_mode=True, rng=None):
    _, probs, cache = forward_batch(params, config, v0, t, mask,
                                    train_mode=train_mode, rng=rng,
                                    want_cache=True)
    value = loss(probs, labels, weights)
    grads = backward_batch(params, config, cache, labels, weights)
    return value, grads


# ---------------------------------------------------------------------------
# XDMW weight files
# ---------------------------------------------------------------------------

def save_model(path: str | Path, params: FusionParams,
               config: FusionConfig) -> None:
    cfg = config.to_json().encode("utf-8")
    parts = [XDMW_MAGIC, struct.pack("<I", XDMW_VERSION),
             struct.pack("<I", len(cfg)), cfg]
    shapes = param_shapes(config)
    for name in param_names(config):
        if params[name].shape != shapes[name]:
            raise DimensionMismatch(
                f"parameter {name} has shape {params[name].shape}, "
                f"expected {shapes[name]}")
        parts.append(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_model(path: str | Path) -> tuple[FusionParams, FusionConfig]:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise TruncatedFile("model file shorter than its header")
    if data[:4] != XDMW_MAGIC:
        raise BadMagic(f"expected {XDMW_MAGIC!r}, found {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != XDMW_VERSION:
        raise VersionMismatch(f"unsupported XDMW version {version}")
    (cfg_len,) = struct.unpack_from("<I", data, 8)
    pos = 12
    if pos + cfg_len > len(data):
        raise TruncatedFile("config JSON extends past end of file")
    config = FusionConfig.from_json(data[pos:pos + cfg_len].decode("utf-8"))
    pos += cfg_len

    params: FusionParams = {}
    for name in param_names(config):
        shape = param_shapes(config)[name]
        n = int(np.prod(shape))
        if pos + 4 * n > len(data):
            raise TruncatedFile(f"tensor {name} extends past end of file")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos)
        params[name] = arr.astype(np.float64).reshape(shape)
        pos += 4 * n
    if pos != len(data):
        raise TruncatedFile(f"{len(data) - pos} trailing bytes after tensors")
    return params, config
