"""Slow, obviously-correct reference implementations used by the tests."""
import unicodedata
from fractions import Fraction


def norm(v):
    return " ".join(unicodedata.normalize("NFKC", v).split()).casefold()


def brute_jga(pred, gold, keys=()):
    correct = total = 0
    for did in gold:
        for p, g in zip(pred[did], gold[did]):
            total += 1
            ok = True
            for k in set(p) | set(g) | set(keys):
                if norm(p.get(k, "none")) != norm(g.get(k, "none")):
                    ok = False
            correct += ok
    return correct, total


def brute_recall(rankings, k):
    hits = 0
    for order, true_id in rankings:
        for rank, c in enumerate(order):
            if c == true_id:
                hits += rank < k
    return hits


def brute_kappa(a, b):
    labels = sorted(set(a) | set(b), key=str)
    n = len(a)
    table = {(x, y): 0 for x in labels for y in labels}
    for x, y in zip(a, b):
        table[(x, y)] += 1
    p_o = Fraction(sum(table[(x, x)] for x in labels), n)
    p_e = Fraction(0)
    for x in labels:
        row = sum(table[(x, y)] for y in labels)
        col = sum(table[(y, x)] for y in labels)
        p_e += Fraction(row, n) * Fraction(col, n)
    if p_e == 1:
        return 1.0 if p_o == 1 else float("nan")
    return float((p_o - p_e) / (1 - p_e))


# -- randomized small fixtures ---------------------------------------------

KEYS = ["hotel-area", "hotel-stars", "train-day"]
VALUES = ["north", "North ", "south", "3", "none", "dontcare", "ｍｏｎｄａｙ", "monday"]


def jga_fixture(rng):
    pred, gold = {}, {}
    for d in range(int(rng.integers(1, 4))):
        n = int(rng.integers(1, 4))
        gold[f"d{d}"] = [{k: VALUES[int(rng.integers(len(VALUES)))] for k in KEYS if rng.random() < 0.6}
                         for _ in range(n)]
        pred[f"d{d}"] = [{k: VALUES[int(rng.integers(len(VALUES)))] for k in KEYS if rng.random() < 0.6}
                         for _ in range(n)]
    return pred, gold


def rr_fixture(rng):
    n = int(rng.integers(1, 8))
    rankings = []
    for _ in range(int(rng.integers(1, 6))):
        order = [f"c{j}" for j in rng.permutation(n)]
        rankings.append((order, f"c{int(rng.integers(n))}"))
    return rankings, int(rng.integers(1, n + 1))


def kappa_fixture(rng):
    n = int(rng.integers(1, 30))
    labels = [0, 1] if rng.random() < 0.7 else ["a", "b", "c"]
    a = [labels[int(rng.integers(len(labels)))] for _ in range(n)]
    b = [x if rng.random() < 0.7 else labels[int(rng.integers(len(labels)))] for x in a]
    return a, b
