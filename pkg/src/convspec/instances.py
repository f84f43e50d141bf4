"""Specialization training instances: MLM, TLM and response selection (RS).

Instance file (``schema`` 1): JSON lines, one instance per line::

    {"schema": 1, "kind": "mlm"|"tlm"|"rs", "ids": [...], "type_ids": [...],
     "mlm_labels": [[position, original_id], ...], "rs_label": true|false|null,
     "provenance": {...}}
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np

from ._util import derive_seed, ordered_map, rng_for, round_half_up
from .subtitles import ParallelDialog, ParallelUtterancePair
from .tokenizer import CLS, MASK, NUM_SPECIALS, SEP, TokenSequence, Vocab, encode_pair

INSTANCE_SCHEMA = 1


@dataclass(frozen=True)
class MaskingConfig:
    mask_rate: float = 0.15
    replace_mask_p: float = 0.8
    replace_random_p: float = 0.1
    keep_p: float = 0.1
    min_masked: int = 1

    def __post_init__(self):
        if not 0 < self.mask_rate < 1:
            raise ValueError("mask_rate must be in (0, 1)")
        if abs(self.replace_mask_p + self.replace_random_p + self.keep_p - 1.0) > 1e-9:
            raise ValueError("replacement fractions must sum to 1")

    def n_masked(self, n: int) -> int:
        return min(n, max(self.min_masked, round_half_up(self.mask_rate * n)))


@dataclass(frozen=True)
class TlmConfig:
    k_min: int = 2
    k_max: int = 15
    layout: Literal["block", "alternating"] = "block"
    max_len: int = 256

    def __post_init__(self):
        if not 2 <= self.k_min <= self.k_max:
            raise ValueError("need 2 <= k_min <= k_max")
        if self.layout not in ("block", "alternating"):
            raise ValueError(f"unknown TLM layout {self.layout!r}")


@dataclass(frozen=True)
class RsConfig:
    mode: Literal["mono", "cross"] = "mono"
    m_min: int = 1
    m_max: int = 3
    hard_negatives_per_positive: int = 1
    min_hard_offset: int = 2
    context_min: int = 1
    context_max: int = 3
    positives_per_dialog: int = 1
    # cross mode only: source-language context with target-language response
    reverse: bool = False
    per_side_max: int = 128

    def __post_init__(self):
        if self.mode not in ("mono", "cross"):
            raise ValueError(f"unknown RS mode {self.mode!r}")
        if not 0 <= self.m_min <= self.m_max:
            raise ValueError("need 0 <= m_min <= m_max")
        if self.min_hard_offset < 2:
            raise ValueError("hard negatives must be non-immediate (min_hard_offset >= 2)")
        if not 1 <= self.context_min <= self.context_max:
            raise ValueError("need 1 <= context_min <= context_max")


@dataclass(frozen=True)
class TrainingInstance:
    kind: Literal["mlm", "tlm", "rs"]
    tokens: TokenSequence
    mlm_labels: tuple[tuple[int, int], ...] = ()
    rs_label: bool | None = None
    provenance: dict = field(default_factory=dict, compare=True)

    def __post_init__(self):
        if self.kind in ("mlm", "tlm") and not self.mlm_labels:
            raise ValueError(f"{self.kind} instance without labels")
        if self.kind == "rs" and self.rs_label is None:
            raise ValueError("rs instance without label")

    def original_ids(self) -> list[int]:
        ids = list(self.tokens.ids)
        for pos, orig in self.mlm_labels:
            ids[pos] = orig
        return ids

    def to_json(self) -> dict:
        return {
            "schema": INSTANCE_SCHEMA,
            "kind": self.kind,
            "ids": list(self.tokens.ids),
            "type_ids": list(self.tokens.type_ids),
            "mlm_labels": [list(p) for p in self.mlm_labels],
            "rs_label": self.rs_label,
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, obj) -> "TrainingInstance":
        if obj.get("schema") != INSTANCE_SCHEMA:
            raise ValueError(f"unsupported instance schema {obj.get('schema')!r}")
        return cls(
            kind=obj["kind"],
            tokens=TokenSequence(tuple(obj["ids"]), tuple(obj["type_ids"])),
            mlm_labels=tuple((int(p), int(i)) for p, i in obj["mlm_labels"]),
            rs_label=obj["rs_label"],
            provenance=obj.get("provenance", {}),
        )


def write_instances(path, instances: Iterable[TrainingInstance]):
    with open(path, "w", encoding="utf-8") as f:
        for inst in instances:
            f.write(json.dumps(inst.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


def read_instances(path) -> list[TrainingInstance]:
    with open(path, encoding="utf-8") as f:
        return [TrainingInstance.from_json(json.loads(line)) for line in f if line.strip()]


def _vocab_size(vocab) -> int:
    return vocab if isinstance(vocab, int) else len(vocab)


def _mask(seq: TokenSequence, cfg: MaskingConfig, rng: np.random.Generator, vocab_size: int):
    candidates = seq.non_special_positions()
    if not candidates:
        raise ValueError("sequence has no maskable (non-special) tokens")
    n = cfg.n_masked(len(candidates))
    chosen = np.sort(rng.choice(np.array(candidates), size=n, replace=False))
    ids = list(seq.ids)
    labels = []
    for pos in chosen.tolist():
        labels.append((pos, ids[pos]))
        u = rng.random()
        if u < cfg.replace_mask_p:
            ids[pos] = MASK
        elif u < cfg.replace_mask_p + cfg.replace_random_p:
            ids[pos] = int(rng.integers(NUM_SPECIALS, vocab_size))
    return TokenSequence(tuple(ids), seq.type_ids, seq.word_starts), tuple(labels)


def gen_mlm(seq: TokenSequence, cfg: MaskingConfig, seed, vocab: Vocab | int,
            provenance: dict | None = None) -> TrainingInstance:
    """Mask ``round(rate * n)`` (at least ``min_masked``) non-special positions, 80/10/10."""
    rng = rng_for("mlm", seed)
    tokens, labels = _mask(seq, cfg, rng, _vocab_size(vocab))
    prov = dict(provenance or {})
    prov["seed"] = seed
    return TrainingInstance("mlm", tokens, labels, None, prov)


def gen_mlm_corpus(texts: Sequence[str], vocab: Vocab, cfg: MaskingConfig = MaskingConfig(), seed=0,
                   max_len: int = 256, workers: int = 1) -> list[TrainingInstance]:
    from .tokenizer import encode

    def one(item):
        i, text = item
        seq = encode(text, vocab, max_len)
        if not seq.non_special_positions():
            return None
        return gen_mlm(seq, cfg, derive_seed(seed, i), vocab, {"line": i})

    out = ordered_map(one, list(enumerate(texts)), workers=workers)
    return [x for x in out if x is not None]


def _tlm_layout(src: list[list[int]], tgt: list[list[int]], layout: str):
    ids, types = [CLS], [0]
    if layout == "block":
        for u in src:
            ids += u
            types += [0] * len(u)
        ids.append(SEP)
        types.append(0)
        for u in tgt:
            ids += u
            types += [1] * len(u)
        ids.append(SEP)
        types.append(1)
    else:
        for s, t in zip(src, tgt):
            ids += s + [SEP]
            types += [0] * (len(s) + 1)
            ids += t + [SEP]
            types += [1] * (len(t) + 1)
    return ids, types


def gen_tlm(pd: ParallelDialog, cfg: TlmConfig, mask: MaskingConfig, seed, vocab: Vocab) -> TrainingInstance | None:
    """Interleave K consecutive source lines with their translations, then mask.

    Returns ``None`` (skip) when the dialog is shorter than ``k_min``. If the
    sampled window does not fit ``max_len``, K is reduced while it stays at
    or above ``k_min``; beyond that the last utterances are cut.
    """
    if len(pd) < cfg.k_min:
        return None
    rng = rng_for("tlm", seed)
    k = int(rng.integers(cfg.k_min, min(cfg.k_max, len(pd)) + 1))
    start = int(rng.integers(0, len(pd) - k + 1))
    window = pd.pairs[start: start + k]
    src = [vocab.tokenize(p.src_text)[0] for p in window]
    tgt = [vocab.tokenize(p.tgt_text)[0] for p in window]
    overhead = 3 if cfg.layout == "block" else 1 + 2 * k
    truncated = False
    while sum(map(len, src)) + sum(map(len, tgt)) + overhead > cfg.max_len:
        if len(src) > cfg.k_min:
            src.pop()
            tgt.pop()
            overhead = 3 if cfg.layout == "block" else 1 + 2 * len(src)
        else:
            truncated = True
            longest = max(range(len(src) * 2), key=lambda j: len((src + tgt)[j]))
            side = src if longest < len(src) else tgt
            side[longest % len(src)] = side[longest % len(src)][:-1]
    k_used = len(src)
    ids, types = _tlm_layout(src, tgt, cfg.layout)
    seq = TokenSequence(tuple(ids), tuple(types))
    tokens, labels = _mask(seq, mask, rng, len(vocab))
    prov = {
        "imdb_id": pd.imdb_id,
        "span": [window[0].line_index, window[k_used - 1].line_index],
        "k": k_used,
        "layout": cfg.layout,
        "seed": seed,
    }
    if truncated:
        prov["truncated"] = True
    return TrainingInstance("tlm", tokens, labels, None, prov)


def gen_tlm_corpus(dialogs: Sequence[ParallelDialog], vocab: Vocab, cfg: TlmConfig = TlmConfig(),
                   mask: MaskingConfig = MaskingConfig(), seed=0, per_dialog: int = 1,
                   workers: int = 1) -> list[TrainingInstance]:
    jobs = [(d, j) for d in dialogs for j in range(per_dialog)]
    out = ordered_map(lambda job: gen_tlm(job[0], cfg, mask, derive_seed(seed, job[0].imdb_id, job[0].start, job[1]), vocab),
                      jobs, workers=workers)
    return [x for x in out if x is not None]


class _MoviePool:
    """All pairs of the pool, laid out so that each movie is one contiguous block."""

    def __init__(self, dialogs: Sequence[ParallelDialog]):
        movies: dict[str, dict[int, ParallelUtterancePair]] = {}
        for d in dialogs:
            bucket = movies.setdefault(d.imdb_id, {})
            for p in d.pairs:
                bucket[p.line_index] = p
        self.pairs: list[ParallelUtterancePair] = []
        self.block: dict[str, tuple[int, int]] = {}
        for imdb_id, bucket in movies.items():
            lo = len(self.pairs)
            self.pairs.extend(bucket[i] for i in sorted(bucket))
            self.block[imdb_id] = (lo, len(self.pairs))

    def movie(self, imdb_id: str) -> list[ParallelUtterancePair]:
        lo, hi = self.block[imdb_id]
        return self.pairs[lo:hi]

    def sample_other(self, imdb_id: str, m: int, rng: np.random.Generator) -> list[ParallelUtterancePair]:
        lo, hi = self.block[imdb_id]
        n_other = len(self.pairs) - (hi - lo)
        m = min(m, n_other)
        picks = rng.choice(n_other, size=m, replace=False)
        return [self.pairs[int(i) if i < lo else int(i) + (hi - lo)] for i in picks]


def _rs_texts(cfg: RsConfig):
    if cfg.mode == "mono":
        return "tgt", "tgt"
    return ("src", "tgt") if cfg.reverse else ("tgt", "src")


def _rs_for_dialog(d: ParallelDialog, ordinal: int, pool: _MoviePool, cfg: RsConfig, seed,
                   vocab: Vocab) -> list[TrainingInstance]:
    if len(d) < 2:
        return []
    rng = rng_for("rs", seed, d.imdb_id, d.start, ordinal)
    c_hi = min(cfg.context_max, len(d) - 1)
    if c_hi < cfg.context_min:
        return []
    c = int(rng.integers(cfg.context_min, c_hi + 1))
    start = int(rng.integers(0, len(d) - c))
    context = d.pairs[start: start + c]
    response = d.pairs[start + c]
    ctx_end = context[-1].line_index
    ctx_side, resp_side = _rs_texts(cfg)
    ctx_text = " ".join(p.text(ctx_side) for p in context)
    group = f"{d.imdb_id}:{d.start}:{ordinal}"

    def make(resp: ParallelUtterancePair, role: str) -> TrainingInstance:
        tokens = encode_pair(ctx_text, resp.text(resp_side), vocab, cfg.per_side_max)
        prov = {
            "group": group,
            "role": role,
            "imdb_id": d.imdb_id,
            "context_span": [context[0].line_index, ctx_end],
            "response_imdb_id": resp.imdb_id,
            "response_line": resp.line_index,
            "seed": seed,
        }
        return TrainingInstance("rs", tokens, (), role == "true", prov)

    out = [make(response, "true")]
    hard_pool = [p for p in pool.movie(d.imdb_id) if p.line_index >= ctx_end + cfg.min_hard_offset]
    n_hard = min(cfg.hard_negatives_per_positive, len(hard_pool))
    if n_hard:
        for i in sorted(rng.choice(len(hard_pool), size=n_hard, replace=False).tolist()):
            out.append(make(hard_pool[i], "hard"))
    m = int(rng.integers(cfg.m_min, cfg.m_max + 1))
    for p in pool.sample_other(d.imdb_id, m, rng):
        out.append(make(p, "easy"))
    return out


def gen_rs(pd_pool: Sequence[ParallelDialog], cfg: RsConfig, seed, vocab: Vocab,
           workers: int = 1) -> list[TrainingInstance]:
    """Response-selection instances with same-movie hard and cross-movie easy negatives.

    For each dialog (and each of ``positives_per_dialog`` draws) one context
    of consecutive lines is paired with its immediate successor (label true),
    with up to ``hard_negatives_per_positive`` later lines of the same movie
    at offset ``>= min_hard_offset`` after the context, and with
    ``m ~ U{m_min..m_max}`` lines from other movies.
    """
    if len({d.imdb_id for d in pd_pool}) < 2:
        raise ValueError("RS generation needs dialogs from at least two imdb ids (easy negatives)")
    pool = _MoviePool(pd_pool)
    jobs = [(d, j) for d in pd_pool for j in range(cfg.positives_per_dialog)]
    batches = ordered_map(lambda job: _rs_for_dialog(job[0], job[1], pool, cfg, seed, vocab), jobs, workers=workers)
    return [inst for b in batches for inst in b]


def rs_balance(instances: Iterable[TrainingInstance]) -> dict[str, int]:
    """Exact counts of positives, hard and easy negatives."""
    c = Counter(inst.provenance.get("role") for inst in instances if inst.kind == "rs")
    return {"true": c["true"], "hard": c["hard"], "easy": c["easy"]}
