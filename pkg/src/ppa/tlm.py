"""Word-level alignment: masked prediction over concatenated sentence pairs.

A pair becomes [CLS] first [SEP] second [SEP] with the side order taken from
the same coin flip that routed sides to the contrastive encoders. Segment
ids split at the middle [SEP]; positions continue across the boundary. The
monolingual variant treats each side as its own [CLS] side [SEP] sequence
with the identical masking scheme.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoder as enc, numerics as nx
from .corpus import ParallelPair
from .numerics import Tensor
from .tokenizer import CLS, MASK, NUM_RESERVED, PAD, SEP

IGNORE_LABEL = -1
MASK_RATE = 0.15
MASK_TOKEN_PROB = 0.8  # of selected: [MASK]
RANDOM_TOKEN_PROB = 0.1  # of selected: random non-reserved token; rest unchanged

_UNMASKABLE = (PAD, CLS, SEP, MASK)


@dataclass
class MaskedBatch:
    """One masked sequence: inputs, gold labels at masked slots, segments."""

    input_ids: list[int]
    label_ids: list[int]  # original token at masked positions, IGNORE_LABEL elsewhere
    mask_positions: list[int]
    segment_ids: list[int]


def build_tlm_input(pair: ParallelPair, shuffle_flag: bool) -> tuple[list[int], list[int]]:
    """[CLS] first [SEP] second [SEP]; the flag puts the translation first."""
    first, second = (pair.tgt, pair.src) if shuffle_flag else (pair.src, pair.tgt)
    ids = [CLS, *first, SEP, *second, SEP]
    segments = [0] * (len(first) + 2) + [1] * (len(second) + 1)
    return ids, segments


def apply_masking(
    ids: list[int],
    segment_ids: list[int],
    vocab_size: int,
    rng: np.random.Generator,
    mask_rate: float = MASK_RATE,
) -> MaskedBatch:
    """Independently mask each non-special token with probability mask_rate.

    Selected tokens become [MASK] 80% of the time, a random non-reserved
    token 10%, and stay unchanged 10%; labels record the originals.
    """
    n = len(ids)
    maskable = np.array([t not in _UNMASKABLE for t in ids])
    if not maskable.any():
        raise ValueError("sequence has no maskable tokens")
    selected = (rng.random(n) < mask_rate) & maskable
    action = rng.random(n)
    out = list(ids)
    labels = [IGNORE_LABEL] * n
    positions: list[int] = []
    for i in np.flatnonzero(selected):
        labels[i] = ids[i]
        positions.append(int(i))
        if action[i] < MASK_TOKEN_PROB:
            out[i] = MASK
        elif action[i] < MASK_TOKEN_PROB + RANDOM_TOKEN_PROB:
            out[i] = int(rng.integers(NUM_RESERVED, vocab_size))
        # else: keep the original token
    return MaskedBatch(
        input_ids=out, label_ids=labels, mask_positions=positions, segment_ids=list(segment_ids)
    )


def make_tlm_example(
    pair: ParallelPair, shuffle_flag: bool, vocab_size: int, rng: np.random.Generator
) -> MaskedBatch:
    ids, segments = build_tlm_input(pair, shuffle_flag)
    return apply_masking(ids, segments, vocab_size, rng)


def mlm_variant(
    pair: ParallelPair, vocab_size: int, rng: np.random.Generator
) -> tuple[MaskedBatch, MaskedBatch]:
    """Ablation form: mask each side as its own monolingual sequence."""
    out = []
    for side in (pair.src, pair.tgt):
        ids = [CLS, *side, SEP]
        segments = [0] * len(ids)
        out.append(apply_masking(ids, segments, vocab_size, rng))
    return out[0], out[1]


def tlm_loss(params: enc.EncoderParams, batch: list[MaskedBatch]) -> Tensor:
    """Mean masked-token cross-entropy with a tied-embedding output layer.

    Zero masked positions across the batch yields a constant 0 loss with no
    gradient path.
    """
    total_masked = sum(len(b.mask_positions) for b in batch)
    if total_masked == 0:
        return Tensor(np.zeros((), dtype=np.float32))
    ids, segs, mask = enc.pad_batch(
        [b.input_ids for b in batch], [b.segment_ids for b in batch]
    )
    hidden, _ = enc.encode_batch(params, ids, segs, mask)
    b, t = ids.shape
    flat_idx = np.array(
        [i * t + p for i, ex in enumerate(batch) for p in ex.mask_positions], dtype=np.int64
    )
    targets = np.array(
        [ex.label_ids[p] for ex in batch for p in ex.mask_positions], dtype=np.int64
    )
    flat = nx.reshape(hidden, (b * t, params.config.hidden_size))
    picked = nx.gather_rows(flat, flat_idx)
    logits = nx.linear(picked, nx.transpose(params["tok_emb"], (1, 0)), params["mlm_bias"])
    return nx.cross_entropy_rows(logits, targets)


def restore_original(batch: MaskedBatch) -> list[int]:
    """Undo masking/random substitutions using the stored labels."""
    out = list(batch.input_ids)
    for p in batch.mask_positions:
        out[p] = batch.label_ids[p]
    return out
