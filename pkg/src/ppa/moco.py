"""Sentence-level contrastive alignment: dual encoders, EMA, negative queue.

The query encoder trains by gradient; the key encoder follows it through an
exponential moving average and never receives gradients. Key embeddings from
each step are pushed into a fixed-size FIFO ring of unit vectors that serves
as the negative pool. The loss is cross-entropy over the positive similarity
and all queued similarities, scaled by a temperature; the positive term is
included in the denominator (K+1 logits, target index 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoder as enc, numerics as nx
from .corpus import AlignmentBatch
from .numerics import Tensor


class ConfigurationError(ValueError):
    pass


@dataclass
class MoCoState:
    """Everything the contrastive branch mutates during training."""

    query_params: enc.EncoderParams
    key_params: enc.EncoderParams
    queue: np.ndarray  # (K, proj_size), unit rows; ring buffer
    cursor: int  # next write position = oldest entry
    m: float
    tau: float

    @property
    def queue_size(self) -> int:
        return self.queue.shape[0]


def init_moco(
    config: enc.EncoderConfig,
    queue_size: int,
    m: float,
    tau: float,
    seed: int,
    batch_size: int | None = None,
) -> MoCoState:
    """Fresh state: key encoder copies the query encoder exactly,
    queue filled with random unit vectors."""
    if not 0.0 <= m <= 1.0:
        raise ConfigurationError(f"momentum coefficient must be in [0, 1], got {m}")
    if tau <= 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    if batch_size is not None and queue_size < batch_size:
        raise ConfigurationError(
            f"queue size {queue_size} smaller than batch size {batch_size}"
        )
    query = enc.init_params(config, seed=seed, trainable=True)
    key = query.copy()
    key.set_requires_grad(False)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E0]))
    q = rng.standard_normal((queue_size, config.proj_size)).astype(np.float32)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return MoCoState(query_params=query, key_params=key, queue=q, cursor=0, m=m, tau=tau)


def sync_key_encoder(state: MoCoState) -> None:
    """Copy query weights into the key encoder (phase boundaries only)."""
    for name, t in state.query_params.named().items():
        state.key_params[name].data = t.data.copy()


def momentum_update(state: MoCoState) -> None:
    """key <- m * key + (1 - m) * query, elementwise; query untouched."""
    m = np.float32(state.m)
    one_minus = np.float32(1.0) - m
    for name, q in state.query_params.named().items():
        k = state.key_params[name]
        k.data = m * k.data + one_minus * q.data


def info_nce(z_q, z_pos, queue: np.ndarray, tau: float) -> Tensor:
    """Contrastive loss for one query against its positive and K negatives."""
    z_q = z_q if isinstance(z_q, Tensor) else Tensor(z_q)
    z_pos = z_pos if isinstance(z_pos, Tensor) else Tensor(z_pos)
    queue = np.asarray(queue, dtype=np.float32)
    d = z_q.shape[-1]
    if z_pos.shape != (d,) or queue.ndim != 2 or queue.shape[1] != d:
        raise nx.ShapeError(
            f"info_nce dimension mismatch: query {z_q.shape}, positive {z_pos.shape}, "
            f"queue {queue.shape}"
        )
    q2 = nx.reshape(z_q, (1, d))
    l_pos = nx.reduce_sum(nx.mul(q2, z_pos), axis=-1, keepdims=True)
    l_neg = nx.matmul(q2, Tensor(queue.T))
    logits = nx.scale(nx.concat([l_pos, l_neg], axis=1), 1.0 / tau)
    return nx.cross_entropy(nx.reshape(logits, (logits.shape[1],)), 0)


def info_nce_batch(z_q: Tensor, z_pos: np.ndarray, queue: np.ndarray, tau: float) -> Tensor:
    """Mean InfoNCE over a batch; positives and queue carry no gradient."""
    b, d = z_q.shape
    z_pos = np.asarray(z_pos, dtype=np.float32)
    if z_pos.shape != (b, d) or queue.shape[1] != d:
        raise nx.ShapeError(
            f"info_nce_batch mismatch: queries {z_q.shape}, positives {z_pos.shape}, "
            f"queue {queue.shape}"
        )
    l_pos = nx.reduce_sum(nx.mul(z_q, Tensor(z_pos)), axis=-1, keepdims=True)
    l_neg = nx.matmul(z_q, Tensor(queue.T.copy()))
    logits = nx.scale(nx.concat([l_pos, l_neg], axis=1), 1.0 / tau)
    return nx.cross_entropy_rows(logits, np.zeros(b, dtype=np.int64))


def encode_queries(state: MoCoState, batch: AlignmentBatch) -> Tensor:
    """Query-side embeddings with gradient history."""
    ids, _, mask = enc.pad_batch(batch.query_inputs)
    _, sent = enc.encode_batch(state.query_params, ids, pad_mask=mask)
    return enc.project(state.query_params, sent)


def encode_keys(state: MoCoState, batch: AlignmentBatch) -> np.ndarray:
    """Key-side embeddings from the momentum encoder, detached."""
    with nx.no_grad():
        ids, _, mask = enc.pad_batch(batch.key_inputs)
        _, sent = enc.encode_batch(state.key_params, ids, pad_mask=mask)
        return enc.project(state.key_params, sent).data


def enqueue(state: MoCoState, keys: np.ndarray) -> None:
    """FIFO write: the batch's keys evict the oldest entries."""
    n, k = keys.shape[0], state.queue_size
    if n > k:
        raise ConfigurationError(f"cannot enqueue {n} keys into a queue of {k}")
    pos = (state.cursor + np.arange(n)) % k
    state.queue[pos] = keys
    state.cursor = int((state.cursor + n) % k)


def queue_age_ordered(state: MoCoState) -> np.ndarray:
    """Queue contents oldest first (the cursor marks the oldest slot)."""
    return np.roll(state.queue, -state.cursor, axis=0)


def alignment_step(state: MoCoState, batch: AlignmentBatch) -> float:
    """One contrastive-only step: loss, gradients for the query side, queue
    update, then the EMA. The loss uses the pre-step queue; the optimizer is
    the caller's job."""
    z_q = encode_queries(state, batch)
    z_k = encode_keys(state, batch)
    loss = info_nce_batch(z_q, z_k, state.queue, state.tau)
    loss.backward()
    enqueue(state, z_k)
    momentum_update(state)
    return loss.item()
