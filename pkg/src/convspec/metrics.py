"""Evaluation and quality-control measures: JGA, R_N@k, Cohen's kappa, QC sampling.

Prediction files
----------------
DST: JSON ``{dialog_id: [{"domain-slot": value, ...}, ...]}``, one cumulative
state per user turn, in turn order.

RR: JSON ``{context_id: [candidate_id, ...]}`` ordered best first; the gold
file maps ``context_id`` to the true candidate id.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Hashable, Mapping, Sequence

from ._util import normalize_text, rng_for, round_half_up
from .dialog import NONE, DialogState, Ontology, QcJudgment, SlotKey, split_key


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# joint goal accuracy

class NormalizationRules:
    """Value normalization: NFKC, trim, case-fold, then an optional synonym table.

    Synonyms map variant -> canonical form and are applied identically to
    predictions and gold (e.g. two spellings of the same weekday).
    """

    def __init__(self, synonyms: Mapping[str, str] | None = None):
        self.synonyms = {normalize_text(k): normalize_text(v) for k, v in (synonyms or {}).items()}

    def __call__(self, value: str) -> str:
        v = normalize_text(value)
        return self.synonyms.get(v, v)


def _state_dict(state) -> dict[SlotKey, str]:
    if isinstance(state, DialogState):
        return state.as_dict()
    return {(split_key(k) if isinstance(k, str) else tuple(k)): v for k, v in state.items()}


@dataclass
class JgaReport:
    correct_turns: int
    total_turns: int
    accuracy: float
    per_dialog: dict[str, list[int]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"metric": "jga", **asdict(self)}

    @classmethod
    def from_json(cls, obj) -> "JgaReport":
        obj = {k: v for k, v in obj.items() if k != "metric"}
        return cls(**obj)


def turn_correct(pred, gold, norm: NormalizationRules, keys=()) -> bool:
    p, g = _state_dict(pred), _state_dict(gold)
    for key in set(p) | set(g) | set(keys):
        if norm(p.get(key, NONE)) != norm(g.get(key, NONE)):
            return False
    return True


def joint_goal_accuracy(predictions: Mapping[str, Sequence], gold: Mapping[str, Sequence],
                        norm: NormalizationRules | None = None,
                        ontology: Ontology | None = None) -> JgaReport:
    """Fraction of turns whose full predicted state matches gold on every key.

    Keys absent from either side count as ``none``.
    """
    norm = norm or NormalizationRules()
    keys = ontology.keys() if ontology is not None else ()
    correct = total = 0
    per_dialog = {}
    for dialog_id, gold_turns in gold.items():
        if dialog_id not in predictions:
            raise MetricError(f"no predictions for dialog {dialog_id!r}")
        pred_turns = predictions[dialog_id]
        if len(pred_turns) != len(gold_turns):
            raise MetricError(f"dialog {dialog_id!r}: {len(pred_turns)} predicted turns, {len(gold_turns)} gold turns")
        c = sum(turn_correct(p, g, norm, keys) for p, g in zip(pred_turns, gold_turns))
        per_dialog[dialog_id] = [c, len(gold_turns)]
        correct += c
        total += len(gold_turns)
    return JgaReport(correct, total, correct / total if total else 0.0, per_dialog)


def load_dst_predictions(path) -> dict[str, list[dict]]:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# response retrieval

@dataclass(frozen=True)
class CandidateSet:
    context_id: Hashable
    candidates: tuple[str, ...]
    true_index: int


def sample_rr_candidates(contexts: Sequence[tuple[Hashable, str]], response_pool: Sequence[str],
                         n: int = 100, seed=0) -> list[CandidateSet]:
    """One true response plus ``n - 1`` distinct distractors per context.

    Distractors are drawn uniformly without replacement from the distinct
    texts of the pool, never equal to the true response text. The true
    response is placed at a random position.
    """
    if n < 1:
        raise ValueError("n must be positive")
    unique = list(dict.fromkeys(response_pool))
    where = {t: i for i, t in enumerate(unique)}
    out = []
    for context_id, true_text in contexts:
        skip = where.get(true_text)
        available = len(unique) - (skip is not None)
        if available < n - 1:
            raise MetricError(f"response pool has {available} usable distractors, need {n - 1}")
        rng = rng_for(seed, "rr", context_id)
        picks = rng.choice(available, size=n - 1, replace=False)
        if skip is not None:
            picks = picks + (picks >= skip)
        distractors = [unique[int(i)] for i in picks]
        pos = int(rng.integers(0, n))
        cands = distractors[:pos] + [true_text] + distractors[pos:]
        out.append(CandidateSet(context_id, tuple(cands), pos))
    return out


@dataclass
class RrReport:
    n: int | None
    k: int
    hits: int
    total_contexts: int
    recall: float
    seed: int | None = None

    def to_json(self) -> dict:
        return {"metric": f"R{self.n}@{self.k}" if self.n else f"R@{self.k}", **asdict(self)}

    @classmethod
    def from_json(cls, obj) -> "RrReport":
        return cls(**{k: v for k, v in obj.items() if k != "metric"})


def recall_at_k(rankings: Sequence[tuple[Sequence[Hashable], Hashable]], k: int = 1, seed=None) -> RrReport:
    """``rankings`` holds ``(ordered candidate ids, true id)`` per context."""
    if k < 1:
        raise ValueError("k must be positive")
    hits = 0
    sizes = set()
    for i, (order, true_id) in enumerate(rankings):
        order = list(order)
        if order.count(true_id) != 1:
            raise MetricError(f"ranking {i}: true response must appear exactly once")
        sizes.add(len(order))
        if order.index(true_id) < k:
            hits += 1
    total = len(rankings)
    n = sizes.pop() if len(sizes) == 1 else None
    return RrReport(n, k, hits, total, hits / total if total else 0.0, seed)


# ---------------------------------------------------------------------------
# inter-annotator agreement

@dataclass
class KappaReport:
    observed: float
    expected: float
    kappa: float
    n_items: int
    counts: list[list] = field(default_factory=list)  # [label_a, label_b, count]
    degenerate: bool = False

    def to_json(self) -> dict:
        return {"metric": "cohen_kappa", **asdict(self)}

    @classmethod
    def from_json(cls, obj) -> "KappaReport":
        return cls(**{k: v for k, v in obj.items() if k != "metric"})


def cohen_kappa(judgments_a: Sequence, judgments_b: Sequence) -> KappaReport:
    """Cohen's kappa for two annotators over the same items.

    When chance agreement is 1 (both annotators used one and the same label
    throughout) kappa is defined as 1 and the report is flagged
    ``degenerate``.
    """
    if len(judgments_a) != len(judgments_b):
        raise MetricError("annotators judged different numbers of items")
    n = len(judgments_a)
    if n == 0:
        raise MetricError("no items")
    table = Counter(zip(judgments_a, judgments_b))
    ma, mb = Counter(judgments_a), Counter(judgments_b)
    agree = sum(c for (x, y), c in table.items() if x == y)
    chance = sum(ma[label] * mb[label] for label in ma)
    p_o, p_e = agree / n, chance / (n * n)
    counts = [[x, y, c] for (x, y), c in sorted(table.items(), key=lambda kv: (str(kv[0][0]), str(kv[0][1])))]
    if chance == n * n:
        return KappaReport(p_o, p_e, 1.0 if agree == n else float("nan"), n, counts, degenerate=True)
    # integer numerator and denominator, so the result is rounded once
    return KappaReport(p_o, p_e, (n * agree - chance) / (n * n - chance), n, counts)


def qc_kappa(judgments_a: Sequence[QcJudgment], judgments_b: Sequence[QcJudgment]) -> dict[str, KappaReport]:
    """Kappa per quality question and on their conjunction, items matched by (dialog, turn)."""
    a = {(j.dialog_id, j.turn_id): j for j in judgments_a}
    b = {(j.dialog_id, j.turn_id): j for j in judgments_b}
    if set(a) != set(b):
        raise MetricError(f"annotators judged different items ({len(set(a) ^ set(b))} unmatched)")
    items = sorted(a)
    return {
        "utterance_acceptable": cohen_kappa([a[i].utterance_acceptable for i in items],
                                            [b[i].utterance_acceptable for i in items]),
        "slot_values_match": cohen_kappa([a[i].slot_values_match for i in items],
                                         [b[i].slot_values_match for i in items]),
        "both": cohen_kappa([a[i].utterance_acceptable & a[i].slot_values_match for i in items],
                            [b[i].utterance_acceptable & b[i].slot_values_match for i in items]),
    }


def qc_sample(corpus: Mapping[str, Sequence[str]] | Sequence[str], fraction: float = 0.10,
              per_split_quota: int | None = None, seed=0) -> list[str]:
    """Uniform sample of dialog ids per split, without replacement.

    ``corpus`` maps split name to its dialog ids (a bare list is one split).
    The quota defaults to ``round(fraction * split size)``.
    """
    splits = {"all": list(corpus)} if not isinstance(corpus, Mapping) else corpus
    out = []
    for name, ids in splits.items():
        ids = list(ids)
        quota = per_split_quota if per_split_quota is not None else round_half_up(fraction * len(ids))
        if quota > len(ids):
            raise MetricError(f"split {name!r}: quota {quota} exceeds {len(ids)} dialogs")
        if quota == 0:
            continue
        picks = rng_for(seed, "qc", name).choice(len(ids), size=quota, replace=False)
        out.extend(ids[int(i)] for i in picks)
    return out
