"""Subword vocabulary and greedy longest-match encoding.

A deterministic stand-in for a trained WordPiece vocabulary: frequent whole
words plus single characters (word-initial and ``##``-prefixed continuation
forms) guarantee coverage, and encoding is greedy longest-match within each
whitespace-separated word. Reserved ids 0..4 are [PAD], [UNK], [CLS], [SEP],
[MASK] and are never produced by text encoding.
"""

from __future__ import annotations

from collections import Counter
from typing import Iterable, Sequence

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
RESERVED_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
NUM_RESERVED = len(RESERVED_TOKENS)

CONT = "##"


class VocabError(ValueError):
    pass


class Vocab:
    """Bijective token <-> id map with fixed reserved ids.

    Immutable after construction; safe to share across threads.
    """

    def __init__(self, tokens: Sequence[str], lowercase: bool = False):
        if list(tokens[:NUM_RESERVED]) != list(RESERVED_TOKENS):
            raise VocabError("first five vocabulary entries must be the reserved tokens")
        self.id_to_token: tuple[str, ...] = tuple(tokens)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(tokens)}
        if len(self.token_to_id) != len(tokens):
            raise VocabError("duplicate token in vocabulary")
        self.lowercase = lowercase
        self._max_token_len = max(len(t) for t in tokens)

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.id_to_token:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path, lowercase: bool = False) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        return cls(tokens, lowercase=lowercase)


def build_vocab(corpus: Iterable[str], target_size: int, lowercase: bool = False) -> Vocab:
    """Frequency-ranked vocabulary over a line stream.

    Single characters (both word-initial and continuation form) are always
    admitted first so any word can be segmented, then whole words fill the
    remaining budget in frequency order, ties broken lexicographically.
    Deterministic for a given corpus and size.
    """
    if target_size <= NUM_RESERVED:
        raise VocabError(f"target_size must exceed {NUM_RESERVED} reserved tokens")
    word_freq: Counter[str] = Counter()
    char_freq: Counter[str] = Counter()
    empty = True
    for line in corpus:
        if lowercase:
            line = line.lower()
        for word in line.split():
            empty = False
            word_freq[word] += 1
            for i, ch in enumerate(word):
                char_freq[CONT + ch if i > 0 else ch] += 1
    if empty:
        raise VocabError("empty corpus")

    tokens: list[str] = list(RESERVED_TOKENS)
    chosen = set(tokens)

    def admit(tok: str) -> None:
        if tok not in chosen and len(tokens) < target_size:
            tokens.append(tok)
            chosen.add(tok)

    for tok, _ in sorted(char_freq.items(), key=lambda kv: (-kv[1], kv[0])):
        admit(tok)
    for tok, _ in sorted(word_freq.items(), key=lambda kv: (-kv[1], kv[0])):
        if tok in RESERVED_TOKENS or len(tok) == 1:
            continue
        admit(tok)
    return Vocab(tokens, lowercase=lowercase)


def _encode_word(v: Vocab, word: str, out: list[int]) -> None:
    pos = 0
    unk_open = False
    while pos < len(word):
        end = len(word)
        match_id = None
        while end > pos:
            piece = word[pos:end]
            if pos > 0:
                piece = CONT + piece
            match_id = v.token_to_id.get(piece)
            if match_id is not None and match_id >= NUM_RESERVED:
                break
            match_id = None
            end -= 1
        if match_id is None:
            if not unk_open:
                out.append(UNK)
                unk_open = True
            pos += 1
        else:
            out.append(match_id)
            unk_open = False
            pos = end


def encode(v: Vocab, text: str) -> list[int]:
    """Greedy longest-match ids for ``text``; unmatched spans collapse to [UNK].

    Total on valid UTF-8 and deterministic; never emits [PAD]/[CLS]/[SEP]/[MASK].
    """
    if v.lowercase:
        text = text.lower()
    out: list[int] = []
    for word in text.split():
        _encode_word(v, word, out)
    return out


def decode(v: Vocab, ids: Sequence[int]) -> str:
    """Inverse of encode up to [UNK] substitution and whitespace normalization."""
    words: list[str] = []
    for i in ids:
        tok = v.id_to_token[i]
        if tok.startswith(CONT) and len(tok) > len(CONT) and words:
            words[-1] += tok[len(CONT):]
        else:
            words.append(tok)
    return " ".join(words)
