"""Parallel-data ingestion, batching, synthetic bilingual corpora, code-switching.

The synthetic second language is a "cipher": a fixed bijective word
substitution of the base language plus local reordering (adjacent swaps with
probability 0.3), so alignment quality is measurable against the emitted
ground-truth word map while string matching alone cannot solve the task.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tokenizer as tk

MIN_SIDE_TOKENS = 10  # either side shorter than this is dropped
SPECIALS_PER_PAIR = 3  # [CLS] plus two [SEP] in the concatenated input
SWAP_PROB = 0.3


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ParallelPair:
    """One source/translation sentence pair, already tokenized to ids."""

    src: tuple[int, ...]
    tgt: tuple[int, ...]
    pair_id: int


@dataclass
class LoadReport:
    kept: int = 0
    dropped_short: int = 0
    dropped_long: int = 0

    @property
    def total(self) -> int:
        return self.kept + self.dropped_short + self.dropped_long


@dataclass
class AlignmentBatch:
    """Per-pair [CLS]-prefixed inputs for the two contrastive encoders.

    shuffle_flags[i] is True iff the translation side went to the query
    encoder for pair i; the flag also fixes concatenation order downstream.
    """

    query_inputs: list[list[int]]
    key_inputs: list[list[int]]
    shuffle_flags: list[bool]
    pair_ids: list[int]

    def __len__(self) -> int:
        return len(self.pair_ids)


@dataclass
class LabeledPairExample:
    """A classification example: two token sequences and a class id."""

    text_a: tuple[int, ...]
    text_b: tuple[int, ...]
    label: int
    language_tag: str
    group: int | None = None  # co-batch tag set by augmentation


def pair_passes_filter(src_len: int, tgt_len: int, max_seq_len: int) -> bool:
    if min(src_len, tgt_len) < MIN_SIDE_TOKENS:
        return False
    return src_len + tgt_len + SPECIALS_PER_PAIR <= max_seq_len


def load_parallel(path, v: tk.Vocab, max_seq_len: int = 128) -> tuple[list[ParallelPair], LoadReport]:
    """Read a src<TAB>tgt TSV, tokenize, and apply the length filter.

    Keeps file order. Short means either side under 10 tokens; long means
    the combined length including [CLS] and two [SEP] exceeds max_seq_len.
    """
    pairs: list[ParallelPair] = []
    report = LoadReport()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise CorpusFormatError(
                    f"{path}: line {lineno}: expected 2 tab-separated fields, got {len(fields)}"
                )
            src = tuple(tk.encode(v, fields[0]))
            tgt = tuple(tk.encode(v, fields[1]))
            if min(len(src), len(tgt)) < MIN_SIDE_TOKENS:
                report.dropped_short += 1
                continue
            if len(src) + len(tgt) + SPECIALS_PER_PAIR > max_seq_len:
                report.dropped_long += 1
                continue
            pairs.append(ParallelPair(src=src, tgt=tgt, pair_id=lineno - 1))
            report.kept += 1
    return pairs, report


def make_alignment_batches(
    pairs: Sequence[ParallelPair], batch_size: int, seed: int
) -> Iterator[AlignmentBatch]:
    """One epoch of batches: seeded pair shuffle plus per-pair side flips.

    Side assignment is an independent fair coin per pair. The final partial
    batch is kept. Deterministic for a given seed.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    flips = rng.random(len(pairs)) < 0.5
    for lo in range(0, len(pairs), batch_size):
        chunk = order[lo : lo + batch_size]
        batch = AlignmentBatch([], [], [], [])
        for j in chunk:
            p = pairs[j]
            flag = bool(flips[j])
            first, second = (p.tgt, p.src) if flag else (p.src, p.tgt)
            batch.query_inputs.append([tk.CLS, *first])
            batch.key_inputs.append([tk.CLS, *second])
            batch.shuffle_flags.append(flag)
            batch.pair_ids.append(p.pair_id)
        yield batch


# ---------------------------------------------------------------------------
# Synthetic bilingual corpus
# ---------------------------------------------------------------------------

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"

DET, ADJ, NOUN, VERB, ADV = range(5)
_CLASS_SHARE = {DET: 0.04, ADJ: 0.18, VERB: 0.26, ADV: 0.07}  # nouns take the rest

# word-class markov chain: sentences are random walks over these transitions
_TRANSITIONS = {
    DET: [(ADJ, 0.35), (NOUN, 0.65)],
    ADJ: [(ADJ, 0.15), (NOUN, 0.85)],
    NOUN: [(VERB, 0.7), (NOUN, 0.15), (DET, 0.15)],
    VERB: [(DET, 0.5), (NOUN, 0.25), (ADV, 0.25)],
    ADV: [(DET, 0.6), (VERB, 0.2), (NOUN, 0.2)],
}


@dataclass
class CipherSpec:
    """The generated toy language pair: word stock, classes, and word map."""

    words_a: list[str]
    words_b: list[str]  # words_b[i] translates words_a[i]
    classes: dict[int, list[int]] = field(default_factory=dict)  # class -> word indices
    topic_of_noun: dict[int, int] = field(default_factory=dict)  # word index -> topic id

    @property
    def word_map(self) -> dict[str, str]:
        return dict(zip(self.words_a, self.words_b))


def _syllable_words(n: int, rng: np.random.Generator) -> list[str]:
    """First n distinct CV(CV(CV)) strings from a seeded shuffle of the space."""
    syllables = [c + v for c, v in itertools.product(_CONSONANTS, _VOWELS)]
    pool: list[str] = []
    for length in (2, 3):
        combos = list(itertools.product(syllables, repeat=length))
        rng.shuffle(combos)
        pool.extend("".join(c) for c in combos)
        if len(pool) >= n:
            break
    if len(pool) < n:
        raise ValueError(f"cannot generate {n} distinct words")
    return pool[:n]


def _cipher_word(word: str, letter_map: dict[str, str]) -> str:
    return "".join(letter_map[ch] for ch in reversed(word)).upper()


def build_cipher_spec(vocab_words: int, seed: int, num_topics: int = 3) -> CipherSpec:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC1]))
    words_a = _syllable_words(vocab_words, rng)
    letters = sorted(set(_CONSONANTS + _VOWELS))
    shuffled = list(letters)
    rng.shuffle(shuffled)
    letter_map = dict(zip(letters, shuffled))
    words_b = [_cipher_word(w, letter_map) for w in words_a]
    if len(set(words_b)) != len(words_b):
        raise AssertionError("cipher produced colliding words")

    spec = CipherSpec(words_a=words_a, words_b=words_b)
    idx = list(range(vocab_words))
    rng.shuffle(idx)
    cursor = 0
    for cls, share in _CLASS_SHARE.items():
        take = max(2, int(round(share * vocab_words)))
        spec.classes[cls] = sorted(idx[cursor : cursor + take])
        cursor += take
    spec.classes[NOUN] = sorted(idx[cursor:])
    for rank, w in enumerate(spec.classes[NOUN]):
        spec.topic_of_noun[w] = rank % num_topics
    return spec


def _walk_sentence(
    spec: CipherSpec,
    length: int,
    rng: np.random.Generator,
    noun_pool: Sequence[int] | None = None,
) -> list[int]:
    """Random walk over the class chain; returns word indices."""
    words: list[int] = []
    state = DET
    while len(words) < length:
        pool = spec.classes[state]
        if state == NOUN and noun_pool is not None:
            pool = noun_pool
        words.append(pool[rng.integers(len(pool))])
        nexts, probs = zip(*_TRANSITIONS[state])
        state = nexts[rng.choice(len(nexts), p=np.array(probs))]
    return words


def _local_reorder(words: list[str], rng: np.random.Generator, swap_prob: float = SWAP_PROB) -> list[str]:
    """Swap non-overlapping adjacent pairs, each with probability swap_prob."""
    out = list(words)
    i = 0
    while i < len(out) - 1:
        if rng.random() < swap_prob:
            out[i], out[i + 1] = out[i + 1], out[i]
            i += 2
        else:
            i += 1
    return out


def make_parallel_sentence(
    spec: CipherSpec,
    length: int,
    rng: np.random.Generator,
    noun_pool: Sequence[int] | None = None,
) -> tuple[str, str]:
    idxs = _walk_sentence(spec, length, rng, noun_pool)
    a = [spec.words_a[i] for i in idxs]
    b = _local_reorder([spec.words_b[i] for i in idxs], rng)
    return " ".join(a), " ".join(b)


def generate_cipher_corpus(
    n_pairs: int,
    vocab_words: int,
    seed: int,
    out_prefix,
    min_len: int = 10,
    max_len: int = 40,
) -> tuple[str, str]:
    """Write <prefix>.parallel.tsv and <prefix>.wordmap.tsv; returns the paths.

    Language B is the word-for-word image of language A under the emitted
    map, up to local reordering. Deterministic for a given seed.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    spec = build_cipher_spec(vocab_words, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC2]))
    parallel_path = f"{out_prefix}.parallel.tsv"
    map_path = f"{out_prefix}.wordmap.tsv"
    with open(parallel_path, "w", encoding="utf-8") as fh:
        for _ in range(n_pairs):
            length = int(rng.integers(min_len, max_len + 1))
            a, b = make_parallel_sentence(spec, length, rng)
            fh.write(f"{a}\t{b}\n")
    with open(map_path, "w", encoding="utf-8") as fh:
        for wa, wb in zip(spec.words_a, spec.words_b):
            fh.write(f"{wa}\t{wb}\n")
    return parallel_path, map_path


# ---------------------------------------------------------------------------
# Toy classification task: 3-way topic-offset relation between two sentences
# ---------------------------------------------------------------------------


def generate_classification_corpus(
    n_examples: int,
    spec: CipherSpec,
    seed: int,
    num_topics: int = 3,
    min_len: int = 6,
    max_len: int = 12,
) -> list[tuple[str, str, str, str, int]]:
    """Premise/hypothesis pairs labeled by relative noun-topic offset.

    Returns (a_text_a, a_text_b, b_text_a, b_text_b, label) rows: the same
    example in language A and its language-B translation. Label k means the
    hypothesis topic is (premise topic + k) mod num_topics, so solving the
    task requires knowing word-topic membership, not surface overlap.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC3]))
    topic_nouns: dict[int, list[int]] = {t: [] for t in range(num_topics)}
    for w, t in spec.topic_of_noun.items():
        topic_nouns[t].append(w)
    rows = []
    word_map = spec.word_map
    for i in range(n_examples):
        t_a = int(rng.integers(num_topics))
        label = i % num_topics  # balanced labels
        t_b = (t_a + label) % num_topics
        len_a = int(rng.integers(min_len, max_len + 1))
        len_b = int(rng.integers(min_len, max_len + 1))
        idx_a = _walk_sentence(spec, len_a, rng, noun_pool=topic_nouns[t_a])
        idx_b = _walk_sentence(spec, len_b, rng, noun_pool=topic_nouns[t_b])
        a_prem = " ".join(spec.words_a[j] for j in idx_a)
        a_hyp = " ".join(spec.words_a[j] for j in idx_b)
        b_prem = " ".join(_local_reorder([word_map[w] for w in a_prem.split()], rng))
        b_hyp = " ".join(_local_reorder([word_map[w] for w in a_hyp.split()], rng))
        rows.append((a_prem, a_hyp, b_prem, b_hyp, label))
    return rows


def write_labeled_tsv(path, rows: Sequence[tuple[str, str, int]], language: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a, b, label in rows:
            fh.write(f"{a}\t{b}\t{label}\t{language}\n")


def load_labeled(path, v: tk.Vocab) -> list[LabeledPairExample]:
    """Read a text_a<TAB>text_b<TAB>label<TAB>language TSV."""
    out: list[LabeledPairExample] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise CorpusFormatError(
                    f"{path}: line {lineno}: expected 4 tab-separated fields, got {len(fields)}"
                )
            a, b, label_s, lang = fields
            try:
                label = int(label_s)
            except ValueError as e:
                raise CorpusFormatError(f"{path}: line {lineno}: bad label {label_s!r}") from e
            out.append(
                LabeledPairExample(
                    text_a=tuple(tk.encode(v, a)),
                    text_b=tuple(tk.encode(v, b)),
                    label=label,
                    language_tag=lang,
                )
            )
    return out


# ---------------------------------------------------------------------------
# Code-switching augmentation
# ---------------------------------------------------------------------------


def code_switch_augment(
    examples: Sequence[tuple[LabeledPairExample | None, LabeledPairExample | None]],
) -> list[LabeledPairExample]:
    """Cross the two language versions of each example into two mixed pairs.

    Each (english-side, target-side) input yields (a_tgt, b_en) and
    (a_en, b_tgt); the all-target original is excluded. Both outputs carry
    the same co-batch group tag so batching keeps them together.
    """
    out: list[LabeledPairExample] = []
    for i, pair in enumerate(examples):
        en, tgt = pair
        if en is None or tgt is None:
            raise CorpusFormatError(f"example {i}: missing counterpart translation")
        if en.label != tgt.label:
            raise CorpusFormatError(
                f"example {i}: labels differ between languages ({en.label} vs {tgt.label})"
            )
        out.append(
            LabeledPairExample(
                text_a=tgt.text_a,
                text_b=en.text_b,
                label=en.label,
                language_tag=f"{tgt.language_tag}+{en.language_tag}",
                group=i,
            )
        )
        out.append(
            LabeledPairExample(
                text_a=en.text_a,
                text_b=tgt.text_b,
                label=en.label,
                language_tag=f"{en.language_tag}+{tgt.language_tag}",
                group=i,
            )
        )
    return out


def make_labeled_batches(
    examples: Sequence[LabeledPairExample], batch_size: int, seed: int
) -> list[list[LabeledPairExample]]:
    """Shuffled batches that never split a co-batch group across batches."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    units: dict[object, list[LabeledPairExample]] = {}
    order: list[object] = []
    for j, ex in enumerate(examples):
        key = ("g", ex.group) if ex.group is not None else ("i", j)
        if key not in units:
            units[key] = []
            order.append(key)
        units[key].append(ex)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(order))
    batches: list[list[LabeledPairExample]] = []
    current: list[LabeledPairExample] = []
    for k in perm:
        unit = units[order[k]]
        if current and len(current) + len(unit) > batch_size:
            batches.append(current)
            current = []
        current.extend(unit)
    if current:
        batches.append(current)
    return batches
