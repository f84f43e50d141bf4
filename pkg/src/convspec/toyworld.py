"""Synthetic two-language world for desk-scale transfer experiments.

An English-like source language and a target language ("xx") written in
Cyrillic pseudo-words, related by a word-for-word lexicon. The module emits

* parallel subtitle-style movies whose consecutive lines share a topic word
  (so the next line is predictable from the previous one), and
* restaurant-search task dialogs with (domain, slot, value) annotations,
  rendered in either language.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._util import rng_for
from .dialog import Dialog, DialogState, Ontology, Utterance
from .subtitles import ParallelUtterancePair

FOODS = ("italian", "chinese", "indian", "french", "thai", "greek")
AREAS = ("north", "south", "east", "west", "centre")
PRICES = ("cheap", "moderate", "expensive")
NAMES = ("golden", "royal", "lotus", "garden", "orchid", "bedouin")
NOUNS = ("movie", "house", "friend", "night")
FUNCTION = (
    "i", "want", "food", "in", "the", "a", "place", "ok", "what", "area", "price", "any", "do", "you",
    "like", "and", "or", "is", "near", "we", "have", "with", "see", "there", "how", "about", "try",
    "?", ".",
)

_CONSONANTS = "бвгдзклмнпрстфхж"
_VOWELS = "аеиоуя"


@dataclass
class ToyWorld:
    lexicon: dict[str, str]

    @classmethod
    def build(cls, seed=0) -> "ToyWorld":
        rng = rng_for("toy-lexicon", seed)
        words = list(dict.fromkeys(FOODS + AREAS + PRICES + NAMES + NOUNS + FUNCTION))
        used: set[str] = set()
        lexicon = {}
        for w in words:
            if w in ("?", "."):
                lexicon[w] = w
                continue
            n_syl = 1 if len(w) <= 2 else 2 + (len(w) > 6)
            while True:
                cand = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
                               for _ in range(n_syl))
                if cand not in used:
                    break
            used.add(cand)
            lexicon[w] = cand
        return cls(lexicon)

    def translate(self, text: str) -> str:
        return " ".join(self.lexicon[w] for w in text.split())

    def ontology(self, lang: str = "en") -> Ontology:
        t = (lambda v: v) if lang == "en" else (lambda v: self.lexicon[v])
        return Ontology({
            ("restaurant", "food"): [t(v) for v in FOODS],
            ("restaurant", "area"): [t(v) for v in AREAS],
            ("restaurant", "price"): [t(v) for v in PRICES],
        })

    def value_map(self) -> dict[str, str]:
        """English value -> target value for every ontology value."""
        return {v: self.lexicon[v] for v in FOODS + AREAS + PRICES}

    # -- subtitles --------------------------------------------------------

    _LINE_TEMPLATES = (
        "i like the {a} and the {b}",
        "do you want {a} or {b} ?",
        "the {a} is near the {b} .",
        "we have {a} with {b}",
        "how about the {a} and {b} ?",
        "i see {a} and {b} there",
        "ok {a} . what about {b} ?",
        "try the {a} place in the {b}",
        "any {a} food with {b} ?",
        "what area is the {a} ? near {b}",
        "i want a {a} price and {b}",
    )

    def subtitle_pairs(self, n_dialogs: int = 2000, scenes_per_movie: int = 5, seed=0) -> list[ParallelUtterancePair]:
        """Parallel movie lines; consecutive lines of a scene share one topic word.

        Every line of a scene also opens by addressing the same name or noun.
        Scenes of one movie are separated by a gap in ``line_index`` so that
        windowing never crosses scene boundaries.
        """
        topics = FOODS + AREAS + PRICES + NAMES + NOUNS
        pairs = []
        n_movies = max(2, -(-n_dialogs // scenes_per_movie))
        made = 0
        for m in range(n_movies):
            rng = rng_for("toy-subtitles", seed, m)
            imdb_id = f"tt{1000000 + m:07d}"
            line = 0
            for _ in range(scenes_per_movie):
                if made >= n_dialogs:
                    break
                length = int(rng.integers(4, 11))
                anchors = NAMES + NOUNS
                anchor = anchors[int(rng.integers(len(anchors)))]
                rest = [t for t in topics if t != anchor]
                chain = [rest[int(i)] for i in rng.choice(len(rest), size=length + 1, replace=False)]
                for i in range(length):
                    tpl = self._LINE_TEMPLATES[int(rng.integers(len(self._LINE_TEMPLATES)))]
                    en = f"{anchor} . " + tpl.format(a=chain[i], b=chain[i + 1])
                    pairs.append(ParallelUtterancePair(imdb_id, line, en, self.translate(en)))
                    line += 1
                line += 1
                made += 1
        return pairs

    def flat_pool(self, lang: str, n: int, seed=0) -> list[str]:
        rng = rng_for("toy-flat", seed, lang)
        topics = FOODS + AREAS + PRICES + NAMES + NOUNS
        out = []
        for _ in range(n):
            tpl = self._LINE_TEMPLATES[int(rng.integers(len(self._LINE_TEMPLATES)))]
            a, b = (topics[int(i)] for i in rng.choice(len(topics), size=2, replace=False))
            en = tpl.format(a=a, b=b)
            out.append(en if lang == "en" else self.translate(en))
        return out

    # -- task dialogs ----------------------------------------------------

    def _render_dialog(self, rng: np.random.Generator):
        goal = {
            "food": FOODS[int(rng.integers(len(FOODS)))],
            "area": AREAS[int(rng.integers(len(AREAS)))],
            "price": PRICES[int(rng.integers(len(PRICES)))],
        }
        if rng.random() < 0.2:
            goal["price"] = "dontcare"
        # the system always asks for the first missing slot, and the user answers it
        slots = ["food", "area", "price"]
        n_turns = int(rng.integers(2, 4))
        first = int(rng.integers(1, 3)) if n_turns == 2 else 1
        opening = sorted(rng.choice(3, size=first, replace=False).tolist())
        groups = [[slots[i] for i in opening]]
        rest = [s for s in slots if s not in groups[0]]
        while rest:
            take = len(rest) if len(groups) + 1 == n_turns else 1
            groups.append(rest[:take])
            rest = rest[take:]

        def user_text(slots):
            parts = []
            for s in slots:
                v = goal[s]
                if s == "food":
                    parts.append(f"i want {v} food")
                elif s == "area":
                    parts.append(f"in the {v}")
                elif v == "dontcare":
                    parts.append("any price")
                else:
                    parts.append(f"a {v} place")
            return " and ".join(parts)

        turns, states = [], []
        told: list[str] = []
        for gi, slots in enumerate(groups):
            turns.append(("user", user_text(slots)))
            states.append({("restaurant", s): goal[s] for s in slots})
            told += slots
            mentioned = " ".join(goal[s] for s in ("food", "area", "price") if s in told and goal[s] != "dontcare")
            if gi + 1 < len(groups):
                ask = f"what {groups[gi + 1][0]} ?"
                turns.append(("system", f"ok {mentioned} . {ask}"))
            else:
                name = NAMES[int(rng.integers(len(NAMES)))]
                turns.append(("system", f"try {name} . {mentioned} food"))
        return turns, states

    def task_dialogs(self, n: int, lang: str = "en", seed=0, prefix: str = "D") -> list[Dialog]:
        out = []
        for i in range(n):
            rng = rng_for("toy-dialog", seed, prefix, i)
            turns, states = self._render_dialog(rng)
            tr = (lambda s: s) if lang == "en" else self.translate
            tv = (lambda v: v) if lang == "en" else (lambda v: self.lexicon.get(v, v))
            utts = tuple(Utterance(sp, tr(text), k) for k, (sp, text) in enumerate(turns))
            st = tuple(DialogState.from_mapping({k: tv(v) for k, v in s.items()}) for s in states)
            out.append(Dialog(f"{prefix}{i:05d}", ("restaurant",), utts, st))
        return out


def write_workspace(root, world: ToyWorld | None = None, *, n_subtitle_dialogs=2000, n_source_train=300,
                    n_source_dev=60, n_target_dev=1000, n_target_test=200, vocab_size=200, seed=0) -> dict:
    """Write the toy inputs under ``root`` and return a manifest ``data`` section."""
    from pathlib import Path

    from .dialog import serialize_dialog_corpus
    from .subtitles import write_parallel_pairs
    from .tokenizer import build_vocab

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    world = world or ToyWorld.build(seed)
    pairs = world.subtitle_pairs(n_subtitle_dialogs, seed=seed)
    write_parallel_pairs(root / "os.tsv", pairs)
    corpora = {
        "source_train": world.task_dialogs(n_source_train, "en", seed, "EN-TR"),
        "source_dev": world.task_dialogs(n_source_dev, "en", seed, "EN-DV"),
        "target_dev": world.task_dialogs(n_target_dev, "xx", seed, "XX-DV"),
        "target_test": world.task_dialogs(n_target_test, "xx", seed, "XX-TE"),
    }
    for role, dialogs in corpora.items():
        (root / f"{role}.json").write_bytes(serialize_dialog_corpus(dialogs))
    world.ontology("en").save(root / "ontology.json")
    world.ontology("xx").save(root / "target_ontology.json")
    # equal amounts of task text per language so merges do not favour one side
    texts = [p.src_text for p in pairs] + [p.tgt_text for p in pairs]
    for dialogs in (corpora["source_train"], corpora["target_dev"][:n_source_train]):
        texts += [u.text for d in dialogs for u in d.turns]
    build_vocab(texts, vocab_size).save(root / "vocab.txt")
    roles = ["vocab", "ontology", "target_ontology", "os", *corpora]
    files = {"vocab": "vocab.txt", "os": "os.tsv", "ontology": "ontology.json",
             "target_ontology": "target_ontology.json"}
    return {r: {"path": files.get(r, f"{r}.json")} for r in roles}


# settings under which the desk-scale encoder learns the toy tasks in minutes
TOY_ENCODER = {"d": 32, "h": 64, "max_len": 128}
TOY_TRAIN = {
    "specialization_lr": 5e-3, "downstream_lr": 1e-3, "max_epochs_specialization": 6,
    "max_epochs_zero_shot": 20, "max_epochs_few_shot": 40, "patience_rs": 3,
}
TOY_GENERATION = {"tlm": {"k_min": 2, "k_max": 3}, "tlm_per_dialog": 3}
TOY_EVAL = {"rr_negatives": 3, "dev_contexts": 60, "dev_candidates": 20}


def toy_manifest(data: dict, task: str, schedule=(), mode: str = "few_shot", fraction: float = 0.01,
                 seed: int = 0, **overrides) -> dict:
    """Raw manifest for a workspace written by :func:`write_workspace`.

    Keyword overrides replace top-level sections (``train_config``,
    ``encoder``, ...) wholesale.
    """
    raw = {
        "schema_version": 1,
        "name": f"{task}-{'+'.join(schedule) or 'none'}-{mode}",
        "languages": {"source": "en", "target": "xx"},
        "mode": mode, "task": task, "schedule": list(schedule),
        "data": {k: dict(v) for k, v in data.items()},
        "encoder": dict(TOY_ENCODER), "train_config": dict(TOY_TRAIN),
        "generation": {k: (dict(v) if isinstance(v, dict) else v) for k, v in TOY_GENERATION.items()},
        "eval": dict(TOY_EVAL), "seed": seed,
    }
    if mode == "few_shot":
        raw["split"] = {"fraction": fraction, "seed": seed}
    raw.update(overrides)
    return raw
