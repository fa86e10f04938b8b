"""A small BERT-style transformer encoder with a contrastive projection head.

Inputs start with [CLS]; a second segment, when present, is separated by
[SEP] and distinguished with segment embeddings. Positions are numbered
0..len-1 over the whole (possibly bilingual) sequence with no reset, and
there are no language embeddings. The sentence representation is the final
[CLS] hidden state (mean pooling is available behind a config switch), fed
through an L2-normalize -> linear -> ReLU -> linear projection whose output
is normalized again before any similarity use.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .tokenizer import CLS, PAD

INIT_STD = 0.02
NEG_INF = -1e9  # additive attention mask for padding


class SequenceTooLongError(ValueError):
    pass


class InputFormatError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 2
    hidden_size: int = 64
    ff_size: int = 256
    num_heads: int = 4
    vocab_size: int = 512
    max_positions: int = 128
    proj_size: int = 32
    num_segments: int = 2
    mean_pool: bool = False

    def __post_init__(self):
        if self.hidden_size % self.num_heads != 0:
            raise ValueError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}"
            )
        if self.proj_size < 1:
            raise ValueError("proj_size must be >= 1")

    @property
    def head_size(self) -> int:
        return self.hidden_size // self.num_heads


# the full-scale configuration the architecture is meant to mirror
FULL_SCALE_CONFIG = EncoderConfig(
    num_layers=12,
    hidden_size=768,
    ff_size=3072,
    num_heads=12,
    vocab_size=110_000,
    max_positions=512,
    proj_size=300,
)


def parameter_count_formula(cfg: EncoderConfig) -> int:
    """Closed-form parameter count for one encoder instance."""
    d, ff, v = cfg.hidden_size, cfg.ff_size, cfg.vocab_size
    emb = v * d + cfg.max_positions * d + cfg.num_segments * d + 2 * d
    per_layer = 4 * (d * d + d) + 2 * d + (d * ff + ff) + (ff * d + d) + 2 * d
    proj = d * d + d * cfg.proj_size
    mlm = v
    return emb + cfg.num_layers * per_layer + proj + mlm


def _truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(np.float32)


class EncoderParams:
    """Named parameter tensors for one encoder instance."""

    def __init__(self, config: EncoderConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors
        expected = parameter_count_formula(config)
        actual = self.parameter_count()
        if actual != expected:
            raise AssertionError(f"parameter count {actual} != formula {expected}")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def named(self) -> dict[str, Tensor]:
        return self.tensors

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "EncoderParams":
        tensors = {
            k: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=t.name)
            for k, t in self.tensors.items()
        }
        return EncoderParams(self.config, tensors)

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.tensors.items():
            src = arrays[k]
            if src.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k}: {src.shape} vs {t.data.shape}")
            t.data = src.astype(np.float32).copy()


def init_params(config: EncoderConfig, seed: int, trainable: bool = True) -> EncoderParams:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE0C]))
    d, ff, v = config.hidden_size, config.ff_size, config.vocab_size
    t: dict[str, Tensor] = {}

    def param(name, arr):
        t[name] = Tensor(arr, requires_grad=trainable, name=name)

    param("tok_emb", _truncated_normal(rng, (v, d)))
    param("pos_emb", _truncated_normal(rng, (config.max_positions, d)))
    param("seg_emb", _truncated_normal(rng, (config.num_segments, d)))
    param("emb_ln_g", np.ones(d, dtype=np.float32))
    param("emb_ln_b", np.zeros(d, dtype=np.float32))
    for i in range(config.num_layers):
        p = f"layer{i}."
        for w in ("wq", "wk", "wv", "wo"):
            param(p + w, _truncated_normal(rng, (d, d)))
            param(p + w.replace("w", "b"), np.zeros(d, dtype=np.float32))
        param(p + "ln1_g", np.ones(d, dtype=np.float32))
        param(p + "ln1_b", np.zeros(d, dtype=np.float32))
        param(p + "w_ff1", _truncated_normal(rng, (d, ff)))
        param(p + "b_ff1", np.zeros(ff, dtype=np.float32))
        param(p + "w_ff2", _truncated_normal(rng, (ff, d)))
        param(p + "b_ff2", np.zeros(d, dtype=np.float32))
        param(p + "ln2_g", np.ones(d, dtype=np.float32))
        param(p + "ln2_b", np.zeros(d, dtype=np.float32))
    param("proj_w1", _truncated_normal(rng, (d, d)))
    param("proj_w2", _truncated_normal(rng, (d, config.proj_size)))
    param("mlm_bias", np.zeros(v, dtype=np.float32))
    return EncoderParams(config, t)


def pad_batch(
    sequences: Sequence[Sequence[int]], segment_ids: Sequence[Sequence[int]] | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-pad to a rectangle; returns (ids, segments, mask)."""
    n = len(sequences)
    width = max(len(s) for s in sequences)
    ids = np.full((n, width), PAD, dtype=np.int64)
    segs = np.zeros((n, width), dtype=np.int64)
    mask = np.zeros((n, width), dtype=np.float32)
    for i, s in enumerate(sequences):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
        if segment_ids is not None:
            segs[i, : len(s)] = segment_ids[i]
    return ids, segs, mask


def encode_batch(
    params: EncoderParams,
    ids: np.ndarray,
    segment_ids: np.ndarray | None = None,
    pad_mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """Forward a padded (batch, seq) id matrix.

    Returns (hidden states (B, T, d), sentence vector (B, d)). The sentence
    vector is the [CLS] hidden state, or a masked mean of the final layer
    when the config requests mean pooling. Rows are independent: batching
    [x, y] equals batching [y, x] with rows swapped.
    """
    cfg = params.config
    ids = np.asarray(ids, dtype=np.int64)
    b, t = ids.shape
    if t > cfg.max_positions:
        raise SequenceTooLongError(f"sequence length {t} exceeds max positions {cfg.max_positions}")
    if not np.all(ids[:, 0] == CLS):
        raise InputFormatError("every input must start with [CLS]")
    if pad_mask is None:
        pad_mask = (ids != PAD).astype(np.float32)
    if segment_ids is None:
        segment_ids = np.zeros_like(ids)

    d = cfg.hidden_size
    positions = np.broadcast_to(np.arange(t, dtype=np.int64), (b, t))
    x = nx.embedding_sum(
        (params["tok_emb"], params["pos_emb"], params["seg_emb"]),
        (ids, positions, segment_ids),
    )
    x = nx.layer_norm(x, params["emb_ln_g"], params["emb_ln_b"])

    attn_bias = ((1.0 - pad_mask) * NEG_INF)[:, None, None, :].astype(np.float32)
    scale = 1.0 / np.sqrt(cfg.head_size)
    for i in range(cfg.num_layers):
        p = f"layer{i}."

        def heads(w_name, b_name):
            h = nx.linear(x, params[p + w_name], params[p + b_name])
            return nx.split_heads(h, cfg.num_heads)

        q = heads("wq", "bq")
        k = heads("wk", "bk")
        v = heads("wv", "bv")
        scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), scale)
        weights = nx.masked_softmax(scores, attn_bias, axis=-1)
        ctx = nx.merge_heads(nx.matmul(weights, v))
        attn_out = nx.linear(ctx, params[p + "wo"], params[p + "bo"])
        x = nx.residual_layer_norm(x, attn_out, params[p + "ln1_g"], params[p + "ln1_b"])
        ff = nx.gelu(nx.linear(x, params[p + "w_ff1"], params[p + "b_ff1"]))
        ff = nx.linear(ff, params[p + "w_ff2"], params[p + "b_ff2"])
        x = nx.residual_layer_norm(x, ff, params[p + "ln2_g"], params[p + "ln2_b"])

    if cfg.mean_pool:
        m = Tensor(pad_mask[:, :, None])
        summed = nx.reduce_sum(nx.mul(x, m), axis=1)
        counts = Tensor(pad_mask.sum(axis=1, keepdims=True))
        sent = nx.mul(summed, Tensor(1.0 / counts.data))
    else:
        flat = nx.reshape(x, (b * t, d))
        sent = nx.gather_rows(flat, np.arange(b, dtype=np.int64) * t)
    return x, sent


def forward(
    params: EncoderParams, token_ids: Sequence[int], segment_ids: Sequence[int] | None = None
) -> tuple[Tensor, Tensor]:
    """Single-sequence forward: per-token hidden states and the [CLS] vector."""
    ids = np.asarray([token_ids], dtype=np.int64)
    segs = None if segment_ids is None else np.asarray([segment_ids], dtype=np.int64)
    hidden, sent = encode_batch(params, ids, segs)
    return nx.reshape(hidden, hidden.shape[1:]), nx.reshape(sent, (params.config.hidden_size,))


def project(params: EncoderParams, h: Tensor) -> Tensor:
    """Sentence vector -> normalized contrastive embedding.

    The hidden vector is L2-normalized, passed through linear/ReLU/linear,
    and the result normalized again so downstream dot products are cosines.
    Accepts a single (d,) vector or a (B, d) batch.
    """
    single = h.data.ndim == 1
    if single:
        h = nx.reshape(h, (1, h.shape[0]))
    h_norm = nx.l2_normalize(h, axis=-1)
    z = nx.matmul(nx.relu(nx.matmul(h_norm, params["proj_w1"])), params["proj_w2"])
    z = nx.l2_normalize(z, axis=-1)
    if single:
        z = nx.reshape(z, (z.shape[1],))
    return z


def sentence_embed(params: EncoderParams, token_ids: Sequence[int]) -> np.ndarray:
    """Deterministic unit-norm embedding of one (un-prefixed) token sequence."""
    return sentence_embed_batch(params, [token_ids])[0]


def sentence_embed_batch(params: EncoderParams, texts: Sequence[Sequence[int]]) -> np.ndarray:
    """Embed many token sequences; returns a (N, proj_size) float32 matrix."""
    cfg = params.config
    out = np.empty((len(texts), cfg.proj_size), dtype=np.float32)
    with nx.no_grad():
        for lo in range(0, len(texts), 256):
            chunk = [[CLS, *t] for t in texts[lo : lo + 256]]
            ids, _, mask = pad_batch(chunk)
            _, sent = encode_batch(params, ids, pad_mask=mask)
            z = project(params, sent)
            out[lo : lo + len(chunk)] = z.data
    return out
