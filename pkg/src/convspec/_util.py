"""Small helpers shared across modules: text normalization, rounding, seeding."""
from __future__ import annotations

import hashlib
import math
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")

# values that carry no surface form in an utterance
SENTINEL_VALUES = frozenset({"none", "dontcare", "not mentioned", ""})


def nfkc(text: str) -> str:
    return unicodedata.normalize("NFKC", text)


def normalize_text(text: str) -> str:
    """NFKC, trim, collapse inner whitespace, case-fold.

    Case folding is a no-op for scripts without case (Hanzi, Arabic), so it is
    applied unconditionally.
    """
    text = nfkc(text)
    text = " ".join(text.split())
    return text.casefold()


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def derive_seed(*parts) -> int:
    """Deterministic 64-bit seed from arbitrary printable parts.

    Used to give every movie / dialog / context its own RNG stream, so work can
    be mapped in any order (or concurrently) and still give identical output.
    """
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def ordered_map(fn: Callable[[T], R], items: Sequence[T] | Iterable[T], workers: int = 1) -> list[R]:
    """Map ``fn`` over ``items`` preserving input order, optionally on a thread pool."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
