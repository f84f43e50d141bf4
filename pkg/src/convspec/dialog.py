"""Dialog, ontology and annotation-record types plus their file formats.

Two corpus encodings are understood:

``multi2woz``
    The normalized layout used throughout this package. One JSON object mapping
    dialog id to ``{"services": [...], "turns": [{"speaker", "text", "state"}]}``.
    ``state`` is present on user turns only and holds the *turn-level*
    annotation as ``{"domain-slot": value}``. See ``schemas/corpus.schema.json``.

``multiwoz_v21``
    The raw MultiWOZ 2.1 ``data.json`` layout (``log`` list with cumulative
    ``metadata`` on system turns). Turn-level annotations are recovered by
    diffing consecutive belief states.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Literal, Mapping, Sequence

from ._util import SENTINEL_VALUES, nfkc, normalize_text

Speaker = Literal["user", "system"]
SlotKey = tuple[str, str]

NONE = "none"
DONTCARE = "dontcare"
RESERVED_VALUES = (NONE, DONTCARE)


class CorpusParseError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class CorpusValidationError(ValueError):
    def __init__(self, dialog_id: str, rule: str, detail: str = "", turn_id: int | None = None):
        self.dialog_id = dialog_id
        self.rule = rule
        self.turn_id = turn_id
        where = f"dialog {dialog_id!r}"
        if turn_id is not None:
            where += f", turn {turn_id}"
        msg = f"{where}: {rule}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


def split_key(flat: str) -> SlotKey:
    """'attraction-name' -> ('attraction', 'name')."""
    domain, sep, slot = flat.partition("-")
    if not sep or not domain or not slot:
        raise ValueError(f"slot key must look like 'domain-slot', got {flat!r}")
    return domain, slot


def join_key(key: SlotKey) -> str:
    return f"{key[0]}-{key[1]}"


@dataclass(frozen=True)
class Utterance:
    speaker: Speaker
    text: str
    turn_id: int

    def __post_init__(self):
        if self.speaker not in ("user", "system"):
            raise ValueError(f"unknown speaker {self.speaker!r}")
        if not self.text.strip():
            raise ValueError(f"turn {self.turn_id}: empty utterance text")
        if self.turn_id < 0:
            raise ValueError("turn_id must be non-negative")


@dataclass(frozen=True, order=True)
class SlotAssignment:
    domain: str
    slot: str
    value: str

    @property
    def key(self) -> SlotKey:
        return (self.domain, self.slot)

    def __post_init__(self):
        if not self.domain or not self.slot:
            raise ValueError("domain and slot must be non-empty")
        if not self.value.strip():
            raise ValueError(f"{self.domain}-{self.slot}: empty value")


@dataclass(frozen=True)
class DialogState:
    """A set of slot assignments with at most one value per (domain, slot)."""

    assignments: tuple[SlotAssignment, ...] = ()

    def __post_init__(self):
        items = tuple(sorted(self.assignments))
        keys = [a.key for a in items]
        if len(set(keys)) != len(keys):
            dup = next(k for k in keys if keys.count(k) > 1)
            raise ValueError(f"duplicate assignment for {join_key(dup)}")
        object.__setattr__(self, "assignments", items)

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "DialogState":
        """Accepts ``{(domain, slot): value}`` or ``{"domain-slot": value}``."""
        out = []
        for k, v in mapping.items():
            d, s = split_key(k) if isinstance(k, str) else k
            out.append(SlotAssignment(d, s, v))
        return cls(tuple(out))

    def as_dict(self) -> dict[SlotKey, str]:
        return {a.key: a.value for a in self.assignments}

    def flat(self) -> dict[str, str]:
        return {join_key(a.key): a.value for a in self.assignments}

    def get(self, key: SlotKey, default: str = NONE) -> str:
        for a in self.assignments:
            if a.key == key:
                return a.value
        return default

    def keys(self) -> list[SlotKey]:
        return [a.key for a in self.assignments]

    def __len__(self):
        return len(self.assignments)


class Ontology:
    """Finite catalog of (domain, slot) keys and their candidate values.

    The reserved values ``none`` and ``dontcare`` are always present, placed
    first so that index 0 of every value list is ``none``.
    """

    def __init__(self, values: Mapping[SlotKey, Sequence[str]]):
        table: dict[SlotKey, tuple[str, ...]] = {}
        for key, vals in values.items():
            vals = [v for v in vals if v not in RESERVED_VALUES]
            if not vals:
                raise ValueError(f"{join_key(key)}: empty value list")
            if len(set(vals)) != len(vals):
                raise ValueError(f"{join_key(key)}: duplicate values")
            table[tuple(key)] = RESERVED_VALUES + tuple(vals)
        self._values = table

    @classmethod
    def from_json(cls, data: Mapping[str, Sequence[str]]) -> "Ontology":
        return cls({split_key(k): v for k, v in data.items()})

    @classmethod
    def load(cls, path) -> "Ontology":
        with open(path, encoding="utf-8") as f:
            return cls.from_json(json.load(f))

    def to_json(self) -> dict[str, list[str]]:
        return {join_key(k): [v for v in vals if v not in RESERVED_VALUES] for k, vals in self._values.items()}

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f, ensure_ascii=False, indent=1)

    def keys(self) -> list[SlotKey]:
        return list(self._values)

    def values(self, key: SlotKey) -> tuple[str, ...]:
        return self._values[key]

    def index(self, key: SlotKey, value: str) -> int:
        return self._values[key].index(value)

    def __contains__(self, key) -> bool:
        return key in self._values

    def __len__(self):
        return len(self._values)

    def __eq__(self, other):
        return isinstance(other, Ontology) and self._values == other._values


@dataclass(frozen=True)
class Dialog:
    dialog_id: str
    services: tuple[str, ...]
    turns: tuple[Utterance, ...]
    # turn-level annotation for each user turn, in order
    states: tuple[DialogState, ...]

    @property
    def user_turns(self) -> list[Utterance]:
        return [t for t in self.turns if t.speaker == "user"]

    def validate(self, ontology: Ontology | None = None) -> None:
        """Raise CorpusValidationError on the first broken invariant."""
        for i, t in enumerate(self.turns):
            if t.turn_id != i:
                raise CorpusValidationError(self.dialog_id, "turn ids must be consecutive from 0", turn_id=t.turn_id)
            expected = "user" if i % 2 == 0 else "system"
            if t.speaker != expected:
                raise CorpusValidationError(
                    self.dialog_id, "speakers must alternate starting with user",
                    f"expected {expected}, got {t.speaker}", turn_id=t.turn_id)
        n_user = len(self.user_turns)
        if len(self.states) != n_user:
            raise CorpusValidationError(
                self.dialog_id, "one state per user turn", f"{len(self.states)} states for {n_user} user turns")
        for state, turn in zip(self.states, self.user_turns):
            for a in state.assignments:
                if a.domain not in self.services:
                    raise CorpusValidationError(
                        self.dialog_id, "slot domain must be listed in services",
                        join_key(a.key), turn_id=turn.turn_id)
                if ontology is not None and a.key not in ontology:
                    raise CorpusValidationError(
                        self.dialog_id, "slot key not in ontology", join_key(a.key), turn_id=turn.turn_id)


def cumulative_states(d: Dialog, ontology: Ontology | None = None) -> list[DialogState]:
    """Replay turn-level annotations into one cumulative state per user turn.

    Later assignments overwrite earlier ones for the same key. With an
    ontology, every key not mentioned so far is filled with ``none``.
    """
    current: dict[SlotKey, str] = {}
    if ontology is not None:
        current = {k: NONE for k in ontology.keys()}
    out = []
    for turn_state in d.states:
        for a in turn_state.assignments:
            current[a.key] = a.value
        out.append(DialogState.from_mapping(current))
    return out


# ---------------------------------------------------------------------------
# corpus files

def _decode(data: bytes | str) -> str:
    if isinstance(data, str):
        return data
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise CorpusParseError(f"invalid UTF-8: {e.reason}", offset=e.start) from None


def _load_json(data: bytes | str):
    text = _decode(data)
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        offset = len(text[: e.pos].encode("utf-8"))
        raise CorpusParseError(f"malformed JSON: {e.msg}", offset=offset) from None


def _dialog_from_normalized(dialog_id: str, body) -> Dialog:
    if not isinstance(body, dict) or "turns" not in body:
        raise CorpusValidationError(dialog_id, "dialog must be an object with 'turns'")
    services = body.get("services", [])
    if isinstance(services, str):
        services = [s.strip() for s in services.split(",") if s.strip()]
    turns, states = [], []
    for i, raw in enumerate(body["turns"]):
        try:
            u = Utterance(raw["speaker"], raw["text"], int(raw.get("turn_id", i)))
        except (KeyError, TypeError) as e:
            raise CorpusValidationError(dialog_id, "turn missing field", str(e), turn_id=i) from None
        except ValueError as e:
            raise CorpusValidationError(dialog_id, "invalid turn", str(e), turn_id=i) from None
        turns.append(u)
        state = raw.get("state")
        if u.speaker == "user":
            try:
                states.append(DialogState.from_mapping(state or {}))
            except ValueError as e:
                raise CorpusValidationError(dialog_id, "invalid state", str(e), turn_id=i) from None
        elif state:
            raise CorpusValidationError(dialog_id, "state annotations belong to user turns", turn_id=i)
    return Dialog(dialog_id, tuple(services), tuple(turns), tuple(states))


def _belief_from_metadata(metadata) -> dict[SlotKey, str]:
    belief = {}
    for domain, parts in (metadata or {}).items():
        for slot, value in parts.get("semi", {}).items():
            if isinstance(value, str) and value.strip() and value not in ("not mentioned",):
                belief[(domain, slot)] = value
        for slot, value in parts.get("book", {}).items():
            if slot == "booked":
                continue
            if isinstance(value, str) and value.strip() and value not in ("not mentioned",):
                belief[(domain, f"book {slot}")] = value
    return belief


def _dialog_from_multiwoz(dialog_id: str, body) -> Dialog:
    if dialog_id.endswith(".json"):
        dialog_id = dialog_id[: -len(".json")]
    if not isinstance(body, dict) or "log" not in body:
        raise CorpusValidationError(dialog_id, "dialog must be an object with 'log'")
    log = body["log"]
    turns = []
    for i, raw in enumerate(log):
        try:
            turns.append(Utterance("user" if i % 2 == 0 else "system", raw["text"], i))
        except (KeyError, TypeError) as e:
            raise CorpusValidationError(dialog_id, "turn missing field", str(e), turn_id=i) from None
        except ValueError as e:
            raise CorpusValidationError(dialog_id, "invalid turn", str(e), turn_id=i) from None
    states, prev = [], {}
    for i in range(0, len(log), 2):
        if i + 1 < len(log):
            belief = _belief_from_metadata(log[i + 1].get("metadata"))
        else:
            belief = prev
        delta = {k: v for k, v in belief.items() if prev.get(k) != v}
        delta.update({k: NONE for k in prev if k not in belief})
        states.append(DialogState.from_mapping(delta))
        prev = belief
    goal = body.get("goal", {})
    services = [d for d, g in goal.items() if d not in ("topic", "message") and g]
    for s in states:
        for a in s.assignments:
            if a.domain not in services:
                services.append(a.domain)
    return Dialog(dialog_id, tuple(services), tuple(turns), tuple(states))


def parse_dialog_corpus(data: bytes | str, format: str = "multi2woz",
                        ontology: Ontology | None = None) -> list[Dialog]:
    """Parse a whole corpus document; dialog order follows the file."""
    doc = _load_json(data)
    if not isinstance(doc, dict):
        raise CorpusParseError("corpus must be a JSON object keyed by dialog id", offset=0)
    if format == "multi2woz":
        build = _dialog_from_normalized
    elif format == "multiwoz_v21":
        build = _dialog_from_multiwoz
    else:
        raise ValueError(f"unknown corpus format {format!r}")
    dialogs = []
    for dialog_id, body in doc.items():
        d = build(dialog_id, body)
        d.validate(ontology)
        dialogs.append(d)
    return dialogs


def load_dialog_corpus(path, format: str = "multi2woz", ontology: Ontology | None = None) -> list[Dialog]:
    with open(path, "rb") as f:
        return parse_dialog_corpus(f.read(), format, ontology)


def dialog_to_json(d: Dialog) -> dict:
    turns = []
    states = iter(d.states)
    for t in d.turns:
        rec = {"speaker": t.speaker, "text": t.text}
        if t.speaker == "user":
            rec["state"] = dict(sorted(next(states).flat().items()))
        turns.append(rec)
    return {"services": list(d.services), "turns": turns}


def serialize_dialog_corpus(dialogs: Iterable[Dialog]) -> bytes:
    """Canonical ``multi2woz`` bytes: dialog order kept, inner order fixed."""
    doc = {d.dialog_id: dialog_to_json(d) for d in dialogs}
    return (json.dumps(doc, ensure_ascii=False, indent=1) + "\n").encode("utf-8")


# ---------------------------------------------------------------------------
# translation / quality-control records

TRANSLATION_FIELDS = (
    "dialogID", "turnID", "services", "utterance", "slotValues", "transUtterance",
    "transSlotValues", "fixTransUtterance", "fixTransSlotValues", "changedUtterance",
    "changedSlotValues",
)


def _services(value) -> tuple[str, ...]:
    if isinstance(value, str):
        return tuple(s.strip() for s in value.split(",") if s.strip())
    return tuple(value)


def _flag(value, name: str) -> int:
    v = int(value)
    if v not in (0, 1):
        raise ValueError(f"{name} must be 0 or 1, got {value!r}")
    return v


@dataclass(frozen=True)
class TranslationRecord:
    dialog_id: str
    turn_id: int
    services: tuple[str, ...]
    utterance: str
    slot_values: dict[str, str]
    trans_utterance: str
    trans_slot_values: dict[str, str]
    fix_trans_utterance: str
    fix_trans_slot_values: dict[str, str]
    changed_utterance: int
    changed_slot_values: int

    @classmethod
    def from_json(cls, obj: Mapping) -> "TranslationRecord":
        missing = [k for k in TRANSLATION_FIELDS if k not in obj and not (k == "slotValues" and "SlotValues" in obj)]
        if missing:
            raise KeyError(f"translation record missing fields: {', '.join(missing)}")
        return cls(
            dialog_id=str(obj["dialogID"]),
            turn_id=int(obj["turnID"]),
            services=_services(obj["services"]),
            utterance=obj["utterance"],
            slot_values=dict(obj["slotValues"] if "slotValues" in obj else obj["SlotValues"]),
            trans_utterance=obj["transUtterance"],
            trans_slot_values=dict(obj["transSlotValues"]),
            fix_trans_utterance=obj["fixTransUtterance"],
            fix_trans_slot_values=dict(obj["fixTransSlotValues"]),
            changed_utterance=_flag(obj["changedUtterance"], "changedUtterance"),
            changed_slot_values=_flag(obj["changedSlotValues"], "changedSlotValues"),
        )

    def to_json(self) -> dict:
        return {
            "dialogID": self.dialog_id,
            "turnID": self.turn_id,
            "services": list(self.services),
            "utterance": self.utterance,
            "slotValues": dict(self.slot_values),
            "transUtterance": self.trans_utterance,
            "transSlotValues": dict(self.trans_slot_values),
            "fixTransUtterance": self.fix_trans_utterance,
            "fixTransSlotValues": dict(self.fix_trans_slot_values),
            "changedUtterance": self.changed_utterance,
            "changedSlotValues": self.changed_slot_values,
        }


@dataclass(frozen=True)
class QcJudgment:
    dialog_id: str
    turn_id: int
    utterance_acceptable: int
    slot_values_match: int
    note: str | None = None

    @classmethod
    def from_json(cls, obj: Mapping) -> "QcJudgment":
        note = obj.get("NOTE")
        return cls(
            dialog_id=str(obj["dialogID"]),
            turn_id=int(obj["turnID"]),
            utterance_acceptable=_flag(obj["UtteranceAcceptable"], "UtteranceAcceptable"),
            slot_values_match=_flag(obj["SlotValuesMatchAcceptable"], "SlotValuesMatchAcceptable"),
            note=note if note else None,
        )

    def to_json(self) -> dict:
        return {
            "dialogID": self.dialog_id,
            "turnID": self.turn_id,
            "UtteranceAcceptable": self.utterance_acceptable,
            "SlotValuesMatchAcceptable": self.slot_values_match,
            "NOTE": self.note or "",
        }


def load_translation_records(path) -> list[TranslationRecord]:
    with open(path, "rb") as f:
        doc = _load_json(f.read())
    return [TranslationRecord.from_json(o) for o in doc]


def load_qc_judgments(path) -> list[QcJudgment]:
    with open(path, "rb") as f:
        doc = _load_json(f.read())
    return [QcJudgment.from_json(o) for o in doc]


def save_records(path, records: Sequence[TranslationRecord | QcJudgment]):
    with open(path, "w", encoding="utf-8") as f:
        json.dump([r.to_json() for r in records], f, ensure_ascii=False, indent=1)
        f.write("\n")


@dataclass(frozen=True)
class SlotAlignment:
    key: str
    value: str
    aligned: bool


@dataclass(frozen=True)
class ValidationReport:
    dialog_id: str
    turn_id: int
    alignments: tuple[SlotAlignment, ...]
    findings: tuple[str, ...] = field(default=())

    @property
    def missing(self) -> list[str]:
        return [a.value for a in self.alignments if not a.aligned]

    @property
    def ok(self) -> bool:
        return not self.findings and all(a.aligned for a in self.alignments)

    def __iter__(self) -> Iterator[SlotAlignment]:
        return iter(self.alignments)


def validate_translation_record(rec: TranslationRecord) -> ValidationReport:
    """Check slot-value/utterance alignment and changed-flag consistency.

    A fixed slot value is aligned when its normalized form occurs inside the
    normalized fixed utterance. Sentinel values are skipped.
    """
    utt = normalize_text(rec.fix_trans_utterance)
    alignments = []
    for key in sorted(rec.fix_trans_slot_values):
        value = rec.fix_trans_slot_values[key]
        norm = normalize_text(value)
        if norm in SENTINEL_VALUES:
            continue
        alignments.append(SlotAlignment(key, value, norm in utt))

    findings = []
    utt_changed = int(nfkc(rec.fix_trans_utterance) != nfkc(rec.trans_utterance))
    if utt_changed != rec.changed_utterance:
        findings.append(
            f"changedUtterance={rec.changed_utterance} but fixed utterance "
            f"{'differs from' if utt_changed else 'equals'} the automatic translation")
    fixed = {k: nfkc(v) for k, v in rec.fix_trans_slot_values.items()}
    auto = {k: nfkc(v) for k, v in rec.trans_slot_values.items()}
    sv_changed = int(fixed != auto)
    if sv_changed != rec.changed_slot_values:
        findings.append(
            f"changedSlotValues={rec.changed_slot_values} but fixed slot values "
            f"{'differ from' if sv_changed else 'equal'} the automatic translation")
    return ValidationReport(rec.dialog_id, rec.turn_id, tuple(alignments), tuple(findings))
