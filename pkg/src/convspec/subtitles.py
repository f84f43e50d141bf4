"""Parallel subtitle dialogs and flat (non-conversational) corpora.

Normalized parallel record file
-------------------------------
UTF-8 text, one record per line, four tab-separated fields::

    imdb_id <TAB> line_index <TAB> src_text <TAB> tgt_text

Blank lines and lines starting with ``#`` are ignored. Texts may not contain
tabs or newlines; the offline converter from raw subtitle dumps is expected to
replace them with spaces.

Flat corpus file
----------------
One sentence per line, ``language <TAB> text``.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Literal, Mapping, Sequence

from ._util import ordered_map, rng_for


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class ParallelUtterancePair:
    imdb_id: str
    line_index: int
    src_text: str
    tgt_text: str

    def __post_init__(self):
        if not self.src_text.strip() or not self.tgt_text.strip():
            raise ValueError(f"{self.imdb_id}:{self.line_index}: empty text")
        if self.line_index < 0:
            raise ValueError("line_index must be non-negative")

    def text(self, side: str) -> str:
        return self.src_text if side == "src" else self.tgt_text


@dataclass(frozen=True)
class ParallelDialog:
    imdb_id: str
    pairs: tuple[ParallelUtterancePair, ...]

    def __post_init__(self):
        idx = [p.line_index for p in self.pairs]
        if any(b != a + 1 for a, b in zip(idx, idx[1:])):
            raise ValueError(f"{self.imdb_id}: dialog lines must be consecutive")
        if any(p.imdb_id != self.imdb_id for p in self.pairs):
            raise ValueError("all pairs of a dialog must share the imdb id")

    def __len__(self):
        return len(self.pairs)

    @property
    def start(self) -> int:
        return self.pairs[0].line_index

    @property
    def end(self) -> int:
        return self.pairs[-1].line_index


def parse_parallel_pairs(lines: Iterable[str]) -> list[ParallelUtterancePair]:
    """Parse normalized records; output grouped by movie, sorted by line index."""
    by_movie: dict[str, list[ParallelUtterancePair]] = {}
    seen: set[tuple[str, int]] = set()
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise IngestError(f"line {lineno}: expected 4 tab-separated fields, got {len(parts)}")
        imdb_id, idx, src, tgt = parts
        try:
            pair = ParallelUtterancePair(imdb_id, int(idx), src, tgt)
        except ValueError as e:
            raise IngestError(f"line {lineno}: {e}") from None
        key = (imdb_id, pair.line_index)
        if key in seen:
            raise IngestError(f"line {lineno}: duplicate record for imdb_id={imdb_id} line_index={pair.line_index}")
        seen.add(key)
        by_movie.setdefault(imdb_id, []).append(pair)
    out = []
    for pairs in by_movie.values():
        out.extend(sorted(pairs, key=lambda p: p.line_index))
    return out


def load_parallel_pairs(data: bytes | str) -> list[ParallelUtterancePair]:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return parse_parallel_pairs(data.splitlines())


def read_parallel_pairs(path) -> list[ParallelUtterancePair]:
    with open(path, encoding="utf-8") as f:
        return parse_parallel_pairs(f)


def write_parallel_pairs(path, pairs: Iterable[ParallelUtterancePair]):
    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(f"{p.imdb_id}\t{p.line_index}\t{p.src_text}\t{p.tgt_text}\n")


def group_by_movie(pairs: Iterable[ParallelUtterancePair]) -> dict[str, list[ParallelUtterancePair]]:
    movies: dict[str, list[ParallelUtterancePair]] = {}
    for p in pairs:
        movies.setdefault(p.imdb_id, []).append(p)
    return {k: sorted(v, key=lambda p: p.line_index) for k, v in movies.items()}


@dataclass
class SegmentReport:
    movies: int = 0
    dialogs: int = 0
    skipped_movies: int = 0
    dropped_pairs: int = 0
    length_histogram: Counter = field(default_factory=Counter)


def _consecutive_runs(pairs: list[ParallelUtterancePair]) -> list[list[ParallelUtterancePair]]:
    runs: list[list[ParallelUtterancePair]] = []
    for p in pairs:
        if runs and p.line_index == runs[-1][-1].line_index + 1:
            runs[-1].append(p)
        else:
            runs.append([p])
    return runs


def _segment_movie(imdb_id: str, pairs: list[ParallelUtterancePair], min_len: int, max_len: int,
                   seed) -> tuple[list[ParallelDialog], int]:
    rng = rng_for(seed, "segment", imdb_id)
    dialogs, dropped = [], 0
    for run in _consecutive_runs(pairs):
        pos = 0
        while True:
            remaining = len(run) - pos
            if remaining < min_len:
                dropped += remaining
                break
            if remaining <= max_len:
                length = remaining
            else:
                # keep the leftover either empty or long enough for another window
                hi = min(max_len, remaining - min_len)
                length = int(rng.integers(min_len, hi + 1)) if hi >= min_len else max_len
            dialogs.append(ParallelDialog(imdb_id, tuple(run[pos: pos + length])))
            pos += length
    return dialogs, dropped


def segment_dialogs(pairs: Sequence[ParallelUtterancePair], min_len: int = 2, max_len: int = 15,
                    seed=0, workers: int = 1) -> tuple[list[ParallelDialog], SegmentReport]:
    """Cut each movie into non-overlapping windows of consecutive lines.

    A run of consecutive lines no longer than ``max_len`` becomes one dialog;
    longer runs are cut at seeded random lengths in ``[min_len, max_len]``.
    Gaps in ``line_index`` always end a window.
    """
    if not 2 <= min_len <= max_len:
        raise ValueError("need 2 <= min_len <= max_len")
    movies = group_by_movie(pairs)
    results = ordered_map(lambda item: _segment_movie(item[0], item[1], min_len, max_len, seed),
                          list(movies.items()), workers=workers)
    report = SegmentReport(movies=len(movies))
    dialogs: list[ParallelDialog] = []
    for ds, dropped in results:
        if not ds:
            report.skipped_movies += 1
        report.dropped_pairs += dropped
        dialogs.extend(ds)
    report.dialogs = len(dialogs)
    report.length_histogram = Counter(len(d) for d in dialogs)
    return dialogs, report


# ---------------------------------------------------------------------------
# flat corpora

CorpusSpec = Literal["mono_cc", "bi_cc", "multi_cc"]


@dataclass(frozen=True)
class FlatCorpus:
    spec: str
    languages: tuple[str, ...]
    sentences: tuple[tuple[str, str], ...]

    def counts(self) -> dict[str, int]:
        return dict(Counter(lang for lang, _ in self.sentences))

    def texts(self) -> list[str]:
        return [t for _, t in self.sentences]


def sample_flat_corpus(per_language_pools: Mapping[str, Sequence[str]], spec: str, sample_size: int,
                       seed=0, source: str = "en", target: str | None = None) -> FlatCorpus:
    """Uniformly sample ``sample_size`` sentences per language without replacement.

    ``mono_cc`` uses the target language only, ``bi_cc`` the source and the
    target, ``multi_cc`` every language that has a pool.
    """
    if spec == "mono_cc":
        if target is None:
            raise ValueError("mono_cc needs a target language")
        languages = (target,)
    elif spec == "bi_cc":
        if target is None:
            raise ValueError("bi_cc needs a target language")
        languages = (source, target)
    elif spec == "multi_cc":
        languages = tuple(per_language_pools)
    else:
        raise ValueError(f"unknown corpus spec {spec!r}")
    sentences = []
    for lang in languages:
        if lang not in per_language_pools:
            raise IngestError(f"no sentence pool for language {lang!r}")
        pool = per_language_pools[lang]
        if len(pool) < sample_size:
            raise IngestError(f"pool for {lang!r} has {len(pool)} sentences, {sample_size - len(pool)} short of {sample_size}")
        rng = rng_for(seed, "flat", lang)
        idx = rng.choice(len(pool), size=sample_size, replace=False)
        sentences.extend((lang, pool[i]) for i in idx)
    return FlatCorpus(spec, languages, tuple(sentences))


def write_flat_corpus(path, corpus: FlatCorpus):
    with open(path, "w", encoding="utf-8") as f:
        for lang, text in corpus.sentences:
            f.write(f"{lang}\t{text}\n")


def read_flat_corpus(path, spec: str = "multi_cc") -> FlatCorpus:
    sentences = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            lang, sep, text = line.partition("\t")
            if not sep or not text.strip():
                raise IngestError(f"line {lineno}: expected 'language<TAB>text'")
            sentences.append((lang, text))
    languages = tuple(dict.fromkeys(lang for lang, _ in sentences))
    return FlatCorpus(spec, languages, tuple(sentences))
