"""Downstream heads over the aligned encoder, plus the evaluation metrics.

Sequence-pair classification reads a linear head off the final [CLS] state
of [CLS] a [SEP] b [SEP] inputs (segments 0/1). Extractive QA scores every
context token with two linear maps for answer start/end; predictions are
constrained to the context span. Zero-shot evaluation takes only a trained
model and a test set, so target-language training labels cannot leak in.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import corpus, encoder as enc, numerics as nx, trainer
from .corpus import LabeledPairExample, ParallelPair
from .numerics import Tensor
from .tokenizer import CLS, SEP


class DataError(ValueError):
    pass


@dataclass
class FinetuneConfig:
    batch_size: int = 32
    max_seq_len: int = 128
    peak_lr: float = 3e-3  # desk-scale default; presets below carry the published values
    warmup_fraction: float = 0.1
    warmup_steps: int = -1  # >= 0 overrides the fraction
    weight_decay: float = 0.01
    epochs: int = 5
    seed: int = 0
    freeze_encoder: bool = False
    max_answer_len: int = 8

    def __post_init__(self):
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise trainer.ConfigurationError("warmup_fraction must be in [0, 1]")


def xnli_mode(**overrides) -> FinetuneConfig:
    """Published pair-classification settings: batch 32, len 128, lr 5e-5,
    warm-up over the first 1000 iterations, 2 epochs."""
    base = dict(batch_size=32, max_seq_len=128, peak_lr=5e-5, warmup_steps=1000, epochs=2)
    base.update(overrides)
    return FinetuneConfig(**base)


def mlqa_mode(**overrides) -> FinetuneConfig:
    """Published span-QA settings: max length 386, lr 3e-5, otherwise as above."""
    base = dict(batch_size=32, max_seq_len=386, peak_lr=3e-5, warmup_steps=1000, epochs=2)
    base.update(overrides)
    return FinetuneConfig(**base)


# ---------------------------------------------------------------------------
# Pair classification
# ---------------------------------------------------------------------------


@dataclass
class ClassifierModel:
    encoder: enc.EncoderParams
    head_w: Tensor  # (hidden, num_classes)
    head_b: Tensor  # (num_classes,)

    @property
    def num_classes(self) -> int:
        return self.head_b.shape[0]


def _pair_input(ex: LabeledPairExample, max_seq_len: int) -> tuple[list[int], list[int]]:
    ids = [CLS, *ex.text_a, SEP, *ex.text_b, SEP]
    segs = [0] * (len(ex.text_a) + 2) + [1] * (len(ex.text_b) + 1)
    if len(ids) > max_seq_len:
        keep = max_seq_len
        ids, segs = ids[:keep], segs[:keep]
    return ids, segs


def _classifier_logits(model: ClassifierModel, examples: Sequence[LabeledPairExample],
                       max_seq_len: int, freeze_encoder: bool = False) -> Tensor:
    inputs = [_pair_input(ex, max_seq_len) for ex in examples]
    ids, segs, mask = enc.pad_batch([i for i, _ in inputs], [s for _, s in inputs])
    if freeze_encoder:
        with nx.no_grad():
            _, sent = enc.encode_batch(model.encoder, ids, segs, mask)
        sent = sent.detach()
    else:
        _, sent = enc.encode_batch(model.encoder, ids, segs, mask)
    return nx.linear(sent, model.head_w, model.head_b)


def init_classifier(encoder: enc.EncoderParams, num_classes: int, seed: int) -> ClassifierModel:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF7]))
    d = encoder.config.hidden_size
    w = Tensor(rng.normal(0, enc.INIT_STD, (d, num_classes)).astype(np.float32),
               requires_grad=True, name="head_w")
    b = Tensor(np.zeros(num_classes, dtype=np.float32), requires_grad=True, name="head_b")
    return ClassifierModel(encoder=encoder, head_w=w, head_b=b)


def finetune_classifier(
    encoder: enc.EncoderParams,
    train_set: Sequence[LabeledPairExample],
    cfg: FinetuneConfig,
    num_classes: int,
) -> tuple[ClassifierModel, list[float]]:
    """Cross-entropy training of head plus (optionally frozen) encoder.

    Returns the model and per-epoch mean losses. Deterministic per seed.
    The model trains on a private copy of the encoder weights.
    """
    if not train_set:
        raise DataError("empty training set")
    bad = [ex.label for ex in train_set if not 0 <= ex.label < num_classes]
    if bad:
        raise DataError(f"label {bad[0]} outside 0..{num_classes - 1}")
    model = init_classifier(encoder.copy(), num_classes, cfg.seed)
    if cfg.freeze_encoder:
        model.encoder.set_requires_grad(False)
    params: dict[str, Tensor] = {"head_w": model.head_w, "head_b": model.head_b}
    if not cfg.freeze_encoder:
        params.update(model.encoder.named())
    opt = trainer.OptState()
    epoch_losses: list[float] = []
    batches_per_epoch = None
    step = 0
    for epoch in range(cfg.epochs):
        seed = np.random.SeedSequence([cfg.seed, 0xF8, epoch]).generate_state(1)[0]
        batches = corpus.make_labeled_batches(train_set, cfg.batch_size, int(seed))
        if batches_per_epoch is None:
            batches_per_epoch = len(batches)
        total_steps = cfg.epochs * batches_per_epoch
        losses = []
        for batch in batches:
            logits = _classifier_logits(model, batch, cfg.max_seq_len, cfg.freeze_encoder)
            targets = np.array([ex.label for ex in batch], dtype=np.int64)
            loss = nx.cross_entropy_rows(logits, targets)
            loss.backward()
            grads = {k: t.grad for k, t in params.items() if t.grad is not None}
            trainer.clip_global_norm(grads)
            lr = trainer.lr_at(min(step + 1, total_steps), total_steps, _sched_proxy(cfg))
            trainer.optimizer_step(params, grads, opt, lr, cfg.weight_decay)
            for t in params.values():
                t.grad = None
            losses.append(loss.item())
            step += 1
        epoch_losses.append(float(np.mean(losses)))
    return model, epoch_losses


def _sched_proxy(cfg: FinetuneConfig) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        peak_lr=cfg.peak_lr, warmup_fraction=cfg.warmup_fraction, warmup_steps=cfg.warmup_steps
    )


def classify(model: ClassifierModel, examples: Sequence[LabeledPairExample],
             max_seq_len: int = 128) -> np.ndarray:
    preds = np.empty(len(examples), dtype=np.int64)
    with nx.no_grad():
        for lo in range(0, len(examples), 128):
            chunk = examples[lo : lo + 128]
            logits = _classifier_logits(model, chunk, max_seq_len, freeze_encoder=True)
            preds[lo : lo + len(chunk)] = logits.data.argmax(axis=1)
    return preds


def evaluate_classifier(model: ClassifierModel, examples: Sequence[LabeledPairExample],
                        max_seq_len: int = 128) -> float:
    preds = classify(model, examples, max_seq_len)
    gold = np.array([ex.label for ex in examples])
    return float((preds == gold).mean())


def evaluate_zero_shot(model: ClassifierModel, test_set: Sequence[LabeledPairExample],
                       max_seq_len: int = 128) -> float:
    """Direct application of a trained model to another language's test set.

    The interface admits no training data, so nothing can leak from the
    target language.
    """
    return evaluate_classifier(model, test_set, max_seq_len)


# ---------------------------------------------------------------------------
# Extractive span QA
# ---------------------------------------------------------------------------


@dataclass
class QAExample:
    question: tuple[int, ...]
    context: tuple[int, ...]
    answer_start: int  # token index within context
    answer_end: int  # inclusive
    example_id: int = 0

    def validate(self) -> None:
        if not (0 <= self.answer_start <= self.answer_end < len(self.context)):
            raise DataError(
                f"example {self.example_id}: span [{self.answer_start}, {self.answer_end}] "
                f"outside context of {len(self.context)} tokens"
            )


@dataclass
class SpanModel:
    encoder: enc.EncoderParams
    start_w: Tensor  # (hidden,) as (hidden, 1)
    end_w: Tensor
    start_b: Tensor  # (1,)
    end_b: Tensor
    max_answer_len: int = 8


def _qa_input(ex: QAExample, max_seq_len: int) -> tuple[list[int], list[int], int]:
    """Returns (ids, segments, context offset); context must fit whole."""
    ids = [CLS, *ex.question, SEP, *ex.context, SEP]
    if len(ids) > max_seq_len:
        raise enc.SequenceTooLongError(
            f"example {ex.example_id}: {len(ids)} tokens exceeds {max_seq_len}"
        )
    offset = len(ex.question) + 2
    segs = [0] * offset + [1] * (len(ex.context) + 1)
    return ids, segs, offset


def init_span_model(encoder: enc.EncoderParams, seed: int, max_answer_len: int = 8) -> SpanModel:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF9]))
    d = encoder.config.hidden_size

    def head(name):
        return Tensor(rng.normal(0, enc.INIT_STD, (d, 1)).astype(np.float32),
                      requires_grad=True, name=name)

    return SpanModel(
        encoder=encoder,
        start_w=head("start_w"), end_w=head("end_w"),
        start_b=Tensor(np.zeros(1, dtype=np.float32), requires_grad=True, name="start_b"),
        end_b=Tensor(np.zeros(1, dtype=np.float32), requires_grad=True, name="end_b"),
        max_answer_len=max_answer_len,
    )


def _span_logits(model: SpanModel, examples: Sequence[QAExample], max_seq_len: int):
    """Per-example start/end logits restricted to context positions."""
    prepared = [_qa_input(ex, max_seq_len) for ex in examples]
    ids, segs, mask = enc.pad_batch([p[0] for p in prepared], [p[1] for p in prepared])
    hidden, _ = enc.encode_batch(model.encoder, ids, segs, mask)
    b, t = ids.shape
    flat = nx.reshape(hidden, (b * t, model.encoder.config.hidden_size))
    start_all = nx.linear(flat, model.start_w, model.start_b)  # (b*t, 1)
    end_all = nx.linear(flat, model.end_w, model.end_b)
    out = []
    for i, (ex, (_, _, offset)) in enumerate(zip(examples, prepared)):
        rows = i * t + offset + np.arange(len(ex.context), dtype=np.int64)
        s = nx.reshape(nx.gather_rows(start_all, rows), (len(ex.context),))
        e = nx.reshape(nx.gather_rows(end_all, rows), (len(ex.context),))
        out.append((s, e))
    return out


def finetune_span(
    encoder: enc.EncoderParams, train_set: Sequence[QAExample], cfg: FinetuneConfig
) -> tuple[SpanModel, list[float]]:
    """Train start/end heads plus encoder; loss is the mean of the two
    cross-entropies over context positions."""
    if not train_set:
        raise DataError("empty training set")
    for ex in train_set:
        ex.validate()
    model = init_span_model(encoder.copy(), cfg.seed, cfg.max_answer_len)
    params: dict[str, Tensor] = {
        "start_w": model.start_w, "end_w": model.end_w,
        "start_b": model.start_b, "end_b": model.end_b,
    }
    params.update(model.encoder.named())
    opt = trainer.OptState()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xFA]))
    epoch_losses: list[float] = []
    n_batches = (len(train_set) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * n_batches
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        losses = []
        for lo in range(0, len(train_set), cfg.batch_size):
            batch = [train_set[int(i)] for i in order[lo : lo + cfg.batch_size]]
            logit_pairs = _span_logits(model, batch, cfg.max_seq_len)
            acc = None
            for ex, (s, e) in zip(batch, logit_pairs):
                ce = nx.add(nx.cross_entropy(s, ex.answer_start), nx.cross_entropy(e, ex.answer_end))
                acc = ce if acc is None else nx.add(acc, ce)
            loss = nx.scale(acc, 0.5 / len(batch))
            loss.backward()
            grads = {k: t.grad for k, t in params.items() if t.grad is not None}
            trainer.clip_global_norm(grads)
            lr = trainer.lr_at(min(step + 1, total_steps), total_steps, _sched_proxy(cfg))
            trainer.optimizer_step(params, grads, opt, lr, cfg.weight_decay)
            for t in params.values():
                t.grad = None
            losses.append(loss.item())
            step += 1
        epoch_losses.append(float(np.mean(losses)))
    return model, epoch_losses


def decode_span(start_logits: np.ndarray, end_logits: np.ndarray, max_answer_len: int) -> tuple[int, int]:
    """Best (start, end) maximizing the summed logits subject to
    start <= end <= start + max_answer_len; ties break to the earliest
    start, then the shortest span."""
    n = len(start_logits)
    best = (-np.inf, 0, 0)
    for s in range(n):
        hi = min(n, s + max_answer_len + 1)
        for e in range(s, hi):
            score = float(start_logits[s] + end_logits[e])
            if score > best[0]:
                best = (score, s, e)
    return best[1], best[2]


def predict_span(model: SpanModel, example: QAExample, max_seq_len: int = 128) -> tuple[int, int]:
    with nx.no_grad():
        (s, e), = _span_logits(model, [example], max_seq_len)
    return decode_span(s.data, e.data, model.max_answer_len)


def evaluate_span_exact_match(model: SpanModel, examples: Sequence[QAExample],
                              max_seq_len: int = 128) -> float:
    hits = 0
    for ex in examples:
        pred = predict_span(model, ex, max_seq_len)
        hits += pred == (ex.answer_start, ex.answer_end)
    return hits / len(examples)


# ---------------------------------------------------------------------------
# Retrieval
# ---------------------------------------------------------------------------


def evaluate_retrieval(encoder: enc.EncoderParams, pairs: Sequence[ParallelPair]) -> float:
    """Top-1 accuracy of ranking every target side by cosine for each source."""
    if not pairs:
        raise DataError("retrieval needs at least one pair")
    src = enc.sentence_embed_batch(encoder, [list(p.src) for p in pairs])
    tgt = enc.sentence_embed_batch(encoder, [list(p.tgt) for p in pairs])
    sims = src @ tgt.T  # unit vectors: dot = cosine
    top1 = sims.argmax(axis=1)
    return float((top1 == np.arange(len(pairs))).mean())


def write_predictions_tsv(path, ids: Sequence[int], predictions: Sequence[int]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, p in zip(ids, predictions):
            fh.write(f"{i}\t{p}\n")


def write_eval_report_csv(path, rows: Sequence[tuple[str, str, float]]) -> None:
    """Rows of (task, language, metric value)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("task,language,metric\n")
        for task, lang, value in rows:
            fh.write(f"{task},{lang},{repr(float(value))}\n")
