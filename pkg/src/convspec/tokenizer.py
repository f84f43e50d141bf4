"""Deterministic subword vocabulary and greedy longest-match encoder.

Vocab file: UTF-8, one subword per line; line ``i`` (0-based) holds id
``i + 5``. Ids 0..4 are the fixed specials PAD, UNK, CLS, SEP, MASK and are not
written to the file.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from ._util import nfkc

PAD, UNK, CLS, SEP, MASK = range(5)
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
NUM_SPECIALS = len(SPECIAL_TOKENS)

_UNSPACED_RANGES = (
    (0x3040, 0x30FF),  # kana
    (0x3400, 0x4DBF),  # CJK ext A
    (0x4E00, 0x9FFF),  # CJK unified
    (0xF900, 0xFAFF),  # CJK compatibility
    (0x3000, 0x303F),  # CJK punctuation
    (0x20000, 0x2FFFF),
)


def is_unspaced_char(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _UNSPACED_RANGES)


def pre_tokenize(text: str) -> list[str]:
    """Whitespace split; characters of unspaced scripts become their own words."""
    words = []
    for chunk in nfkc(text).split():
        buf = ""
        for ch in chunk:
            if is_unspaced_char(ch):
                if buf:
                    words.append(buf)
                    buf = ""
                words.append(ch)
            else:
                buf += ch
        if buf:
            words.append(buf)
    return words


def join_words(words: Sequence[str]) -> str:
    out = ""
    for i, w in enumerate(words):
        if i and not (is_unspaced_char(w[0]) or is_unspaced_char(words[i - 1][-1])):
            out += " "
        out += w
    return out


class Vocab:
    def __init__(self, subwords: Sequence[str]):
        subwords = list(subwords)
        if any(not s for s in subwords):
            raise ValueError("empty subword in vocab")
        if len(set(subwords)) != len(subwords):
            raise ValueError("duplicate subword in vocab")
        self._subwords = subwords
        self._index = {s: i + NUM_SPECIALS for i, s in enumerate(subwords)}
        self._longest = max((len(s) for s in subwords), default=1)

    pad_id, unk_id, cls_id, sep_id, mask_id = PAD, UNK, CLS, SEP, MASK

    def __len__(self):
        return NUM_SPECIALS + len(self._subwords)

    @property
    def size(self) -> int:
        return len(self)

    @property
    def subwords(self) -> list[str]:
        return list(self._subwords)

    def __contains__(self, piece: str) -> bool:
        return piece in self._index

    def __eq__(self, other):
        return isinstance(other, Vocab) and self._subwords == other._subwords

    def id(self, piece: str) -> int:
        return self._index.get(piece, UNK)

    def token(self, i: int) -> str:
        if i < NUM_SPECIALS:
            return SPECIAL_TOKENS[i]
        return self._subwords[i - NUM_SPECIALS]

    def is_special(self, i: int) -> bool:
        return i < NUM_SPECIALS

    def tokenize_word(self, word: str) -> list[int]:
        ids, i = [], 0
        while i < len(word):
            for j in range(min(len(word), i + self._longest), i, -1):
                k = self._index.get(word[i:j])
                if k is not None:
                    ids.append(k)
                    i = j
                    break
            else:
                ids.append(UNK)
                i += 1
        return ids

    def tokenize(self, text: str) -> tuple[list[int], list[bool]]:
        """Subword ids without specials, plus a word-start flag per id."""
        ids, starts = [], []
        for w in pre_tokenize(text):
            pieces = self.tokenize_word(w)
            ids.extend(pieces)
            starts.extend([True] + [False] * (len(pieces) - 1))
        return ids, starts

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for s in self._subwords:
                f.write(s + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.rstrip("\n")])


def build_vocab(corpus: Iterable[str], target_size: int, min_size: int = NUM_SPECIALS + 1) -> Vocab:
    """Frequency-driven pair merging over pre-tokenized words.

    Every character seen in the corpus is kept, so the result can exceed
    ``target_size`` when the alphabet alone is larger. Merges need a pair
    count of at least 2; ties go to the lexicographically smallest pair.
    """
    if target_size < min_size or target_size <= NUM_SPECIALS:
        raise ValueError(f"target_size {target_size} too small (minimum {max(min_size, NUM_SPECIALS + 1)})")
    word_freq: Counter = Counter()
    for line in corpus:
        word_freq.update(pre_tokenize(line))
    if not word_freq:
        raise ValueError("cannot build a vocabulary from an empty corpus")

    char_freq: Counter = Counter()
    for w, c in word_freq.items():
        for ch in w:
            char_freq[ch] += c
    units = [ch for ch, _ in sorted(char_freq.items(), key=lambda kv: (-kv[1], kv[0]))]
    known = set(units)

    words = {tuple(w): c for w, c in word_freq.items()}
    while NUM_SPECIALS + len(units) < target_size:
        pairs: Counter = Counter()
        for w, c in words.items():
            for a, b in zip(w, w[1:]):
                pairs[(a, b)] += c
        if not pairs:
            break
        best_count = max(pairs.values())
        if best_count < 2:
            break
        a, b = min(p for p, c in pairs.items() if c == best_count)
        merged = a + b
        new_words = {}
        for w, c in words.items():
            out, i = [], 0
            while i < len(w):
                if i + 1 < len(w) and w[i] == a and w[i + 1] == b:
                    out.append(merged)
                    i += 2
                else:
                    out.append(w[i])
                    i += 1
            new_words[tuple(out)] = new_words.get(tuple(out), 0) + c
        words = new_words
        if merged not in known:
            known.add(merged)
            units.append(merged)
    return Vocab(units)


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    type_ids: tuple[int, ...]
    # word-start flags for decoding; not part of the model input
    word_starts: tuple[bool, ...] | None = None

    def __post_init__(self):
        if len(self.ids) != len(self.type_ids):
            raise ValueError("ids and type_ids differ in length")
        if self.word_starts is not None and len(self.word_starts) != len(self.ids):
            raise ValueError("word_starts and ids differ in length")

    def __len__(self):
        return len(self.ids)

    def non_special_positions(self) -> list[int]:
        return [i for i, t in enumerate(self.ids) if t >= NUM_SPECIALS]


def encode(text: str, vocab: Vocab, max_len: int = 256) -> TokenSequence:
    """``[CLS] pieces [SEP]``, truncated from the right but always ending in SEP."""
    if max_len < 2:
        raise ValueError("max_len must be at least 2")
    ids, starts = vocab.tokenize(text)
    ids, starts = ids[: max_len - 2], starts[: max_len - 2]
    full = (CLS, *ids, SEP)
    return TokenSequence(full, (0,) * len(full), (True, *starts, True))


def encode_pair(context_text: str, response_text: str, vocab: Vocab, per_side_max: int = 128) -> TokenSequence:
    """``[CLS] context [SEP] response [SEP]`` with per-side budgets.

    The context side (type 0) is CLS + context + SEP; the response side
    (type 1) is response + SEP. Each side holds at most ``per_side_max``
    positions.
    """
    if per_side_max < 2:
        raise ValueError("per_side_max must be at least 2")
    c_ids, c_st = vocab.tokenize(context_text)
    r_ids, r_st = vocab.tokenize(response_text)
    c_ids, c_st = c_ids[: per_side_max - 2], c_st[: per_side_max - 2]
    r_ids, r_st = r_ids[: per_side_max - 1], r_st[: per_side_max - 1]
    ids = (CLS, *c_ids, SEP, *r_ids, SEP)
    type_ids = (0,) * (len(c_ids) + 2) + (1,) * (len(r_ids) + 1)
    starts = (True, *c_st, True, *r_st, True)
    return TokenSequence(ids, type_ids, starts)


def _decode_span(ids, starts, vocab: Vocab) -> str:
    words: list[str] = []
    for i, s in zip(ids, starts):
        piece = vocab.token(i)
        if s or not words:
            words.append(piece)
        else:
            words[-1] += piece
    return join_words(words)


def decode(seq: TokenSequence, vocab: Vocab) -> str:
    """Inverse of :func:`encode` for in-vocabulary, untruncated text."""
    starts = seq.word_starts or (True,) * len(seq.ids)
    keep = [(i, s) for i, s in zip(seq.ids, starts) if i not in (PAD, CLS, SEP)]
    return _decode_span([i for i, _ in keep], [s for _, s in keep], vocab)


def decode_pair(seq: TokenSequence, vocab: Vocab) -> tuple[str, str]:
    starts = seq.word_starts or (True,) * len(seq.ids)
    first_sep = seq.ids.index(SEP)
    ctx = [(i, s) for i, s in zip(seq.ids[1:first_sep], starts[1:first_sep])]
    resp = [(i, s) for i, s in zip(seq.ids[first_sep + 1:], starts[first_sep + 1:]) if i not in (PAD, SEP)]
    return (_decode_span([i for i, _ in ctx], [s for _, s in ctx], vocab),
            _decode_span([i for i, _ in resp], [s for _, s in resp], vocab))
