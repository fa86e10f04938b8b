"""The multi-task alignment loop: sum the enabled losses, backprop, AdamW.

Each step draws one batch of pairs; the same per-pair coin flips route sides
to the two contrastive encoders and fix concatenation order for the masked
word-level objective, so both objectives always see the same batch. An
optional masked-LM warm-up phase on the monolingual sides runs first as the
desk-scale stand-in for starting from a pretrained encoder; the key encoder
re-syncs to the query encoder when the alignment phase begins.

All per-step randomness derives from (seed, epoch/step) seed sequences, so
a checkpoint needs only the step counter to resume bit-identically.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import corpus, encoder as enc, moco, numerics as nx, tlm
from .corpus import AlignmentBatch, ParallelPair
from .moco import MoCoState

GRAD_CLIP_NORM = 1.0
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8

_WARMUP_TAG, _EPOCH_TAG, _STEP_TAG = 0x3A1, 0x3A2, 0x3A3


class ConfigurationError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_seq_len: int = 128
    peak_lr: float = 1e-3
    warmup_fraction: float = 0.1
    warmup_steps: int = -1  # >= 0 overrides warmup_fraction
    weight_decay: float = 0.01
    epochs: int = 3
    queue_size: int = 256
    momentum: float = 0.99
    temperature: float = 0.05
    seed: int = 0
    use_moco: bool = True
    use_tlm: bool = True
    use_mlm_instead_of_tlm: bool = False
    mlm_warmup_steps: int = 0

    def __post_init__(self):
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigurationError(f"warmup_fraction must be in [0, 1], got {self.warmup_fraction}")
        if self.use_tlm and self.use_mlm_instead_of_tlm:
            raise ConfigurationError("use_tlm and use_mlm_instead_of_tlm are mutually exclusive")

    @property
    def word_level_enabled(self) -> bool:
        return self.use_tlm or self.use_mlm_instead_of_tlm


def paper_mode(**overrides) -> TrainConfig:
    """The published full-scale hyperparameters, kept configurable."""
    base = dict(
        batch_size=128,
        max_seq_len=128,
        peak_lr=3e-5,
        warmup_fraction=0.10,
        weight_decay=0.01,
        epochs=10,
        queue_size=32_000,
        momentum=0.999,
        temperature=0.05,
    )
    base.update(overrides)
    return TrainConfig(**base)


# flat key=value config files -------------------------------------------------

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def config_to_text(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(TrainConfig):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> TrainConfig:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _FIELD_TYPES:
            raise ConfigurationError(f"line {lineno}: unknown config key {key!r}")
        t = _FIELD_TYPES[key]
        if t in ("bool", bool):
            if val.lower() not in ("true", "false"):
                raise ConfigurationError(f"line {lineno}: bad boolean {val!r}")
            values[key] = val.lower() == "true"
        elif t in ("int", int):
            values[key] = int(val)
        else:
            values[key] = float(val)
    return TrainConfig(**values)


# learning-rate schedule -------------------------------------------------------


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear ramp to the peak over the warm-up span, then linear decay to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = cfg.warmup_steps if cfg.warmup_steps >= 0 else round(cfg.warmup_fraction * total_steps)
    warm = min(warm, total_steps)
    if step <= warm:
        return cfg.peak_lr * (step / warm) if warm > 0 else cfg.peak_lr
    return cfg.peak_lr * (total_steps - step) / (total_steps - warm)


# AdamW ------------------------------------------------------------------------


@dataclass
class OptState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def optimizer_step(
    params: dict[str, nx.Tensor],
    grads: dict[str, np.ndarray],
    opt: OptState,
    lr: float,
    weight_decay: float,
) -> None:
    """Decoupled-decay adaptive update with bias correction, in place.

    Parameters without a gradient entry still receive weight decay (their
    moments update with a zero gradient).
    """
    opt.t += 1
    t = opt.t
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
        m = opt.m.setdefault(name, np.zeros_like(p.data))
        v = opt.v.setdefault(name, np.zeros_like(p.data))
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        if weight_decay:
            p.data -= np.float32(lr * weight_decay) * p.data
        p.data -= np.float32(lr) * (m_hat / (np.sqrt(v_hat) + ADAM_EPS))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float = GRAD_CLIP_NORM) -> float:
    total = float(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0:
        s = np.float32(max_norm / norm)
        for g in grads.values():
            g *= s
    return float(norm)


# metrics ----------------------------------------------------------------------


@dataclass
class StepRow:
    step: int
    l_moco: float | None
    l_tlm: float | None
    l_total: float
    lr: float


@dataclass
class TrainMetrics:
    steps: list[StepRow] = field(default_factory=list)
    epoch_retrieval: list[tuple[int, float]] = field(default_factory=list)

    def write_csv(self, path) -> None:
        def cell(v):
            return "" if v is None else repr(float(v))

        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step,l_moco,l_tlm,l_total,lr\n")
            for r in self.steps:
                fh.write(
                    f"{r.step},{cell(r.l_moco)},{cell(r.l_tlm)},{cell(r.l_total)},{cell(r.lr)}\n"
                )

    def write_epoch_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,retrieval_top1\n")
            for epoch, acc in self.epoch_retrieval:
                fh.write(f"{epoch},{repr(float(acc))}\n")


# training loop ----------------------------------------------------------------


def _steps_per_epoch(n_pairs: int, batch_size: int) -> int:
    return (n_pairs + batch_size - 1) // batch_size


def total_step_count(n_pairs: int, cfg: TrainConfig) -> int:
    return cfg.mlm_warmup_steps + cfg.epochs * _steps_per_epoch(n_pairs, cfg.batch_size)


def _epoch_batches(pairs: Sequence[ParallelPair], cfg: TrainConfig, epoch: int) -> list[AlignmentBatch]:
    seed = np.random.SeedSequence([cfg.seed, _EPOCH_TAG, epoch]).generate_state(1)[0]
    return list(corpus.make_alignment_batches(pairs, cfg.batch_size, int(seed)))


def _warmup_batch(pairs: Sequence[ParallelPair], cfg: TrainConfig, step: int,
                  vocab_size: int) -> list[tlm.MaskedBatch]:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _WARMUP_TAG, step]))
    take = max(1, cfg.batch_size // 2)
    idx = rng.choice(len(pairs), size=min(take, len(pairs)), replace=len(pairs) < take)
    out: list[tlm.MaskedBatch] = []
    for i in idx:
        a, b = tlm.mlm_variant(pairs[int(i)], vocab_size, rng)
        out.extend((a, b))
    return out


def _word_level_batch(batch: AlignmentBatch, by_id: dict[int, ParallelPair],
                      cfg: TrainConfig, step: int, vocab_size: int) -> list[tlm.MaskedBatch]:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _STEP_TAG, step]))
    out: list[tlm.MaskedBatch] = []
    for pid, flag in zip(batch.pair_ids, batch.shuffle_flags):
        pair = by_id[pid]
        if cfg.use_tlm:
            out.append(tlm.make_tlm_example(pair, flag, vocab_size, rng))
        else:
            out.extend(tlm.mlm_variant(pair, vocab_size, rng))
    return out


def train_ppa(
    state: MoCoState,
    pairs: Sequence[ParallelPair],
    cfg: TrainConfig,
    heldout_pairs: Sequence[ParallelPair] | None = None,
    opt: OptState | None = None,
    start_step: int = 0,
    stop_after: int | None = None,
    metrics: TrainMetrics | None = None,
) -> tuple[MoCoState, OptState, TrainMetrics]:
    """Run (or resume) the full loop; deterministic for a given config.

    ``start_step`` resumes a restored state mid-run; ``stop_after`` halts
    after that many global steps (for checkpoint tests). The returned
    metrics only cover the steps executed in this call.
    """
    if not pairs:
        raise ConfigurationError("training corpus is empty")
    if cfg.epochs > 0 and not (cfg.use_moco or cfg.word_level_enabled):
        raise ConfigurationError("all objectives disabled: enable MoCo, TLM or MLM")
    if cfg.use_moco and cfg.queue_size < cfg.batch_size:
        raise ConfigurationError(
            f"queue size {cfg.queue_size} smaller than batch size {cfg.batch_size}"
        )
    opt = opt or OptState()
    metrics = metrics or TrainMetrics()
    vocab_size = state.query_params.config.vocab_size
    by_id = {p.pair_id: p for p in pairs}
    per_epoch = _steps_per_epoch(len(pairs), cfg.batch_size)
    total = total_step_count(len(pairs), cfg)
    stop_at = total if stop_after is None else min(total, stop_after)

    params = state.query_params.named()
    epoch_cache: tuple[int, list[AlignmentBatch]] | None = None

    for step in range(start_step, stop_at):
        in_warmup = step < cfg.mlm_warmup_steps
        lr = lr_at(step + 1, total, cfg)
        l_moco_t = l_tlm_t = None
        keys = None

        if in_warmup:
            word_batch = _warmup_batch(pairs, cfg, step, vocab_size)
            l_tlm_t = tlm.tlm_loss(state.query_params, word_batch)
            loss = l_tlm_t
        else:
            if step == cfg.mlm_warmup_steps and cfg.mlm_warmup_steps > 0 and cfg.use_moco:
                moco.sync_key_encoder(state)
            epoch = (step - cfg.mlm_warmup_steps) // per_epoch
            b_idx = (step - cfg.mlm_warmup_steps) % per_epoch
            if epoch_cache is None or epoch_cache[0] != epoch:
                epoch_cache = (epoch, _epoch_batches(pairs, cfg, epoch))
            batch = epoch_cache[1][b_idx]
            parts = []
            if cfg.use_moco:
                z_q = moco.encode_queries(state, batch)
                keys = moco.encode_keys(state, batch)
                l_moco_t = moco.info_nce_batch(z_q, keys, state.queue, state.tau)
                parts.append(l_moco_t)
            if cfg.word_level_enabled:
                word_batch = _word_level_batch(batch, by_id, cfg, step, vocab_size)
                l_tlm_t = tlm.tlm_loss(state.query_params, word_batch)
                parts.append(l_tlm_t)
            loss = parts[0] if len(parts) == 1 else nx.add(parts[0], parts[1])

        loss.backward()
        grads = {k: t.grad for k, t in params.items() if t.grad is not None}
        clip_global_norm(grads)
        optimizer_step(params, grads, opt, lr, cfg.weight_decay)
        state.query_params.zero_grad()

        if not in_warmup and cfg.use_moco and keys is not None:
            moco.enqueue(state, keys)
            moco.momentum_update(state)

        metrics.steps.append(
            StepRow(
                step=step,
                l_moco=None if l_moco_t is None else l_moco_t.item(),
                l_tlm=None if l_tlm_t is None else l_tlm_t.item(),
                l_total=loss.item(),
                lr=lr,
            )
        )

        last_of_epoch = (
            not in_warmup
            and (step - cfg.mlm_warmup_steps) % per_epoch == per_epoch - 1
        )
        if last_of_epoch and heldout_pairs:
            from .finetune import evaluate_retrieval

            epoch = (step - cfg.mlm_warmup_steps) // per_epoch
            acc = evaluate_retrieval(state.query_params, heldout_pairs)
            metrics.epoch_retrieval.append((epoch, acc))

    return state, opt, metrics


# checkpointing ------------------------------------------------------------------

_CKPT_VERSION = 1


def checkpoint(state: MoCoState, opt: OptState, cfg: TrainConfig, step: int, path) -> None:
    """Write everything needed to resume bit-identically: both encoders,
    optimizer moments, queue + cursor, step counter and configs."""
    tensors: dict[str, np.ndarray] = {}
    for name, t in state.query_params.named().items():
        tensors[f"q.{name}"] = t.data
    for name, t in state.key_params.named().items():
        tensors[f"k.{name}"] = t.data
    for name, m in opt.m.items():
        tensors[f"opt_m.{name}"] = m
    for name, v in opt.v.items():
        tensors[f"opt_v.{name}"] = v
    tensors["queue"] = state.queue
    meta = {
        "version": _CKPT_VERSION,
        "step": step,
        "cursor": state.cursor,
        "opt_t": opt.t,
        "m": state.m,
        "tau": state.tau,
        "train_config": dataclasses.asdict(cfg),
        "encoder_config": dataclasses.asdict(state.query_params.config),
    }
    nx.save_tensors(path, tensors, meta=meta)


def restore(path) -> tuple[MoCoState, OptState, TrainConfig, int]:
    """Load a checkpoint; refuses (with a diagnostic) rather than partially load."""
    try:
        arrays, meta = nx.load_tensors(path)
    except nx.TensorFileError as e:
        raise CheckpointError(str(e)) from e
    if meta.get("version") != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
    try:
        enc_cfg = enc.EncoderConfig(**meta["encoder_config"])
        cfg = TrainConfig(**meta["train_config"])
        step = int(meta["step"])
        cursor = int(meta["cursor"])
        opt_t = int(meta["opt_t"])
        m, tau = float(meta["m"]), float(meta["tau"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: bad checkpoint metadata: {e}") from e

    query = enc.init_params(enc_cfg, seed=0, trainable=True)
    key = enc.init_params(enc_cfg, seed=0, trainable=False)
    opt = OptState(t=opt_t)
    try:
        query.load_arrays({n: arrays[f"q.{n}"] for n in query.named()})
        key.load_arrays({n: arrays[f"k.{n}"] for n in key.named()})
        for n in query.named():
            if f"opt_m.{n}" in arrays:
                opt.m[n] = arrays[f"opt_m.{n}"].copy()
                opt.v[n] = arrays[f"opt_v.{n}"].copy()
        queue = arrays["queue"].copy()
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: checkpoint does not match model: {e}") from e
    state = MoCoState(query_params=query, key_params=key, queue=queue, cursor=cursor, m=m, tau=tau)
    return state, opt, cfg, step
