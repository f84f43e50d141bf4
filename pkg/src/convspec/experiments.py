"""Few-shot splits, zero-/few-shot transfer runs and report aggregation.

Manifest file (JSON, ``schema_version`` 1)::

    {
      "schema_version": 1,
      "name": "...", "model": "TLM+RS-X on OS",
      "mode": "zero_shot" | "few_shot",
      "task": "dst" | "rr",
      "languages": {"source": "en", "target": "xx"},
      "schedule": ["tlm@os", "rs_x@os"],           # objective@corpus, may be empty
      "data": {"<role>": {"path": "...", "sha256": "..."}, ...},
      "split": {"fraction": 0.01, "seed": 0, "nested": true},   # few_shot only
      "train_config": {...}, "encoder": {...}, "generation": {...}, "eval": {...},
      "reinit_head_few_shot": false,
      "seed": 0
    }

Data roles: ``vocab``, ``ontology``, ``target_ontology`` (value lists aligned
index-by-index with ``ontology``), ``source_train``, ``source_dev``,
``target_dev``, ``target_test`` (multi2woz corpora), ``os`` (normalized
parallel records) and ``mono_cc`` / ``bi_cc`` / ``multi_cc`` (flat corpora).
Relative paths resolve against the manifest's directory.

Objectives in the schedule: ``mlm@mono_cc|bi_cc|multi_cc``, ``tlm@os``,
``rs_mono@os``, ``rs_x@os``.

Run store: JSON lines of run records, appended under a file lock.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from statistics import fmean
from typing import Callable, Iterable, Sequence

from filelock import FileLock

from ._util import derive_seed, rng_for, round_half_up, sha256_file
from .dialog import Dialog, DialogState, Ontology, cumulative_states, load_dialog_corpus
from .encoder import (Checkpoint, EncoderConfig, ModelParams, Stage, TrainConfig, forward_dst,
                      load_checkpoint, rank_scores, rs_probabilities, save_checkpoint, train)
from .instances import (MaskingConfig, RsConfig, TlmConfig, TrainingInstance, gen_mlm_corpus, gen_rs,
                        gen_tlm_corpus)
from .metrics import JgaReport, RrReport, joint_goal_accuracy, recall_at_k, sample_rr_candidates
from .subtitles import ParallelDialog, read_flat_corpus, read_parallel_pairs, segment_dialogs
from .tokenizer import CLS, SEP, TokenSequence, Vocab, encode_pair

MANIFEST_SCHEMA = 1
SHOT_LADDER = (0.01, 0.05, 0.10, 0.50, 1.00)


class ManifestError(ValueError):
    pass


class StageFailure(RuntimeError):
    def __init__(self, stage: str, seed, cause: BaseException):
        self.stage = stage
        self.seed = seed
        super().__init__(f"stage {stage!r} failed (replay with seed {seed}): {cause}")


# ---------------------------------------------------------------------------
# few-shot splits

@dataclass(frozen=True)
class SplitSpec:
    fraction: float
    seed: int = 0
    nested: bool = True
    source: str = "target_dev"

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise ValueError("split fraction must be in (0, 1]")


def make_fewshot_split(dev_dialog_ids: Sequence[str], spec: SplitSpec) -> list[str]:
    """``round(p * n)`` dialog ids; nested splits are prefixes of one seeded permutation."""
    ids = list(dev_dialog_ids)
    if not ids:
        raise ValueError("empty development set")
    size = round_half_up(spec.fraction * len(ids))
    if size == 0:
        raise ValueError(f"fraction {spec.fraction} of {len(ids)} dialogs is an empty split")
    rng = rng_for(spec.seed, "fewshot") if spec.nested else rng_for(spec.seed, "fewshot", spec.fraction)
    perm = rng.permutation(len(ids))
    return [ids[int(i)] for i in perm[:size]]


# ---------------------------------------------------------------------------
# downstream task data

def history_sequence(utterances: Sequence[str], vocab: Vocab, max_len: int) -> TokenSequence:
    """Dialog history as one sequence, keeping the most recent tokens."""
    ids, starts = [], []
    for text in utterances:
        i, s = vocab.tokenize(text)
        ids += i
        starts += s
    keep = max_len - 2
    ids, starts = ids[-keep:] if keep else [], starts[-keep:] if keep else []
    full = (CLS, *ids, SEP)
    return TokenSequence(full, (0,) * len(full), (True, *starts, True))


def _user_histories(d: Dialog) -> list[list[str]]:
    out = []
    for i, t in enumerate(d.turns):
        if t.speaker == "user":
            out.append([u.text for u in d.turns[: i + 1]])
    return out


def to_source_values(state: DialogState, src: Ontology, tgt: Ontology | None) -> dict:
    """Map a state annotated with ``tgt`` values onto the aligned ``src`` value strings."""
    out = {}
    for key, value in state.as_dict().items():
        if tgt is None or key not in tgt:
            out[key] = value
            continue
        vals = tgt.values(key)
        out[key] = src.values(key)[vals.index(value)] if value in vals else value
    return out


def dst_items(dialogs: Sequence[Dialog], vocab: Vocab, ontology: Ontology, value_ontology: Ontology | None = None,
              max_len: int = 256) -> list[tuple[TokenSequence, dict]]:
    items = []
    for d in dialogs:
        for hist, state in zip(_user_histories(d), cumulative_states(d, ontology if value_ontology is None else value_ontology)):
            items.append((history_sequence(hist, vocab, max_len), to_source_values(state, ontology, value_ontology)))
    return items


def predict_states(params: ModelParams, dialogs: Sequence[Dialog], vocab: Vocab,
                   value_ontology: Ontology | None = None, max_len: int = 256) -> dict[str, list[dict]]:
    """Predicted cumulative state per user turn, in ``value_ontology`` strings when given."""
    src = params.ontology
    out = {}
    for d in dialogs:
        seqs = [history_sequence(h, vocab, max_len) for h in _user_histories(d)]
        _, preds = forward_dst(params, seqs)
        if value_ontology is not None:
            preds = [{k: value_ontology.values(k)[src.index(k, v)] for k, v in p.items()} for p in preds]
        out[d.dialog_id] = preds
    return out


def evaluate_dst(params: ModelParams, dialogs: Sequence[Dialog], vocab: Vocab,
                 value_ontology: Ontology | None = None, max_len: int = 256) -> JgaReport:
    onto = value_ontology or params.ontology
    gold = {d.dialog_id: cumulative_states(d, onto) for d in dialogs}
    preds = predict_states(params, dialogs, vocab, value_ontology, max_len)
    return joint_goal_accuracy(preds, gold, ontology=onto)


def rr_pairs(dialogs: Sequence[Dialog]) -> list[tuple[str, str, str]]:
    """``(context_id, context_text, system_response)`` for every user turn with a reply."""
    out = []
    for d in dialogs:
        for i, t in enumerate(d.turns[:-1]):
            if t.speaker == "user":
                ctx = " ".join(u.text for u in d.turns[: i + 1])
                out.append((f"{d.dialog_id}:{i}", ctx, d.turns[i + 1].text))
    return out


def rr_training_instances(dialogs: Sequence[Dialog], vocab: Vocab, negatives: int, seed,
                          per_side_max: int = 128) -> list[TrainingInstance]:
    """One positive and ``negatives`` random other-dialog responses per context."""
    pairs = rr_pairs(dialogs)
    pool = list(dict.fromkeys(r for _, _, r in pairs))
    out = []
    for cid, ctx, resp in pairs:
        rng = rng_for(seed, "rr-train", cid)
        out.append(TrainingInstance("rs", encode_pair(ctx, resp, vocab, per_side_max), (), True, {"context": cid}))
        picks = rng.choice(len(pool), size=min(negatives + 1, len(pool)), replace=False)
        negs = [pool[int(i)] for i in picks if pool[int(i)] != resp][:negatives]
        for neg in negs:
            out.append(TrainingInstance("rs", encode_pair(ctx, neg, vocab, per_side_max), (), False, {"context": cid}))
    return out


def evaluate_rr(params: ModelParams, dialogs: Sequence[Dialog], vocab: Vocab, n: int = 100, seed=0,
                per_side_max: int = 128, k: int = 1, max_contexts: int | None = None) -> RrReport:
    pairs = rr_pairs(dialogs)
    pool = [r for _, _, r in pairs]
    if max_contexts is not None:
        pairs = pairs[:max_contexts]
    n = min(n, len(set(pool)))
    sets = sample_rr_candidates([(cid, resp) for cid, _, resp in pairs], pool, n=n, seed=seed)
    ctx_of = {cid: ctx for cid, ctx, _ in pairs}
    seqs = [encode_pair(ctx_of[cs.context_id], c, vocab, per_side_max) for cs in sets for c in cs.candidates]
    probs = rs_probabilities(params, seqs)
    rankings = [(rank_scores(probs[j * n: (j + 1) * n]), cs.true_index) for j, cs in enumerate(sets)]
    return recall_at_k(rankings, k=k, seed=seed)


def subtitle_rr_pairs(dialogs: Sequence[ParallelDialog], mode: str = "mono", context_lines: int = 2,
                      reverse: bool = False) -> list[tuple[str, str, str]]:
    """Next-line retrieval items from parallel dialogs: one per dialog.

    The context is up to ``context_lines`` lines before the last line, which is
    the true response. ``mode`` picks the sides as in RS generation: ``mono``
    uses the target text throughout, ``cross`` a target-language context with
    a source-language response (swapped by ``reverse``).
    """
    ctx_side, resp_side = ("tgt", "tgt") if mode == "mono" else (("src", "tgt") if reverse else ("tgt", "src"))
    out = []
    for d in dialogs:
        if len(d) < 2:
            continue
        ctx = d.pairs[-1 - min(context_lines, len(d) - 1): -1]
        out.append((f"{d.imdb_id}:{d.start}", " ".join(p.text(ctx_side) for p in ctx), d.pairs[-1].text(resp_side)))
    return out


def evaluate_pairs_rr(params: ModelParams, pairs: Sequence[tuple[str, str, str]], vocab: Vocab, n: int = 100,
                      seed=0, per_side_max: int = 128, k: int = 1) -> RrReport:
    """R_n@k over ``(context_id, context, true response)`` items; the responses form the distractor pool."""
    pool = [r for _, _, r in pairs]
    sets = sample_rr_candidates([(cid, resp) for cid, _, resp in pairs], pool, n=n, seed=seed)
    ctx_of = {cid: ctx for cid, ctx, _ in pairs}
    seqs = [encode_pair(ctx_of[cs.context_id], c, vocab, per_side_max) for cs in sets for c in cs.candidates]
    probs = rs_probabilities(params, seqs)
    rankings = [(rank_scores(probs[j * n: (j + 1) * n]), cs.true_index) for j, cs in enumerate(sets)]
    return recall_at_k(rankings, k=k, seed=seed)


# ---------------------------------------------------------------------------
# manifests

@dataclass
class ExperimentManifest:
    raw: dict
    base_dir: Path = field(default_factory=Path.cwd)

    @property
    def mode(self) -> str:
        return self.raw["mode"]

    @property
    def task(self) -> str:
        return self.raw["task"]

    @property
    def schedule(self) -> list[str]:
        return list(self.raw.get("schedule", []))

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    @property
    def target(self) -> str:
        return self.raw.get("languages", {}).get("target", "")

    @property
    def model(self) -> str:
        return self.raw.get("model") or (" + ".join(self.schedule) if self.schedule else "unspecialized")

    @property
    def split(self) -> SplitSpec | None:
        s = self.raw.get("split")
        return SplitSpec(**s) if s else None

    def path(self, role: str) -> Path:
        entry = self.raw["data"][role]
        p = Path(entry["path"])
        return p if p.is_absolute() else self.base_dir / p

    def has(self, role: str) -> bool:
        return role in self.raw.get("data", {})

    def train_config(self) -> TrainConfig:
        cfg = dict(self.raw.get("train_config", {}))
        cfg.setdefault("seed", self.seed)
        return TrainConfig.from_json(cfg)


_VALID_OBJECTIVES = {"mlm@mono_cc", "mlm@bi_cc", "mlm@multi_cc", "tlm@os", "rs_mono@os", "rs_x@os"}


def validate_manifest(m: ExperimentManifest) -> None:
    raw = m.raw
    if raw.get("schema_version") != MANIFEST_SCHEMA:
        raise ManifestError(f"unsupported manifest schema {raw.get('schema_version')!r}")
    if raw.get("mode") not in ("zero_shot", "few_shot"):
        raise ManifestError("mode must be zero_shot or few_shot")
    if raw.get("task") not in ("dst", "rr"):
        raise ManifestError("task must be dst or rr")
    for obj in m.schedule:
        if obj not in _VALID_OBJECTIVES:
            raise ManifestError(f"unknown schedule entry {obj!r}")
        corpus = obj.split("@")[1]
        if not m.has(corpus):
            raise ManifestError(f"schedule entry {obj!r} needs data role {corpus!r}")
    if m.mode == "few_shot" and not raw.get("split"):
        raise ManifestError("few_shot manifests need a split")
    required = ["vocab", "ontology", "source_train", "source_dev", "target_test"]
    if m.mode == "few_shot":
        required.append("target_dev")
    for role in required:
        if not m.has(role):
            raise ManifestError(f"missing data role {role!r}")
    for role, entry in raw["data"].items():
        path = m.path(role)
        if not path.exists():
            raise ManifestError(f"{role}: file {path} does not exist")
        digest = sha256_file(path)
        if entry.get("sha256") != digest:
            raise ManifestError(f"{role}: digest mismatch for {path}")


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def manifest_digest(m: ExperimentManifest) -> str:
    """Content address: the manifest with freshly computed input digests."""
    raw = copy.deepcopy(m.raw)
    for role, entry in raw.get("data", {}).items():
        entry["sha256"] = sha256_file(m.path(role))
        entry["path"] = os.path.basename(entry["path"])
    return hashlib.sha256(_canonical(raw)).hexdigest()


def load_manifest(path) -> ExperimentManifest:
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    return ExperimentManifest(raw, path.parent)


def write_manifest(path, raw: dict) -> ExperimentManifest:
    """Fill in input digests and write the manifest."""
    path = Path(path)
    raw = copy.deepcopy(raw)
    raw.setdefault("schema_version", MANIFEST_SCHEMA)
    m = ExperimentManifest(raw, path.parent)
    for role, entry in raw.get("data", {}).items():
        entry["sha256"] = sha256_file(m.path(role))
    with open(path, "w", encoding="utf-8") as f:
        json.dump(raw, f, ensure_ascii=False, indent=1, sort_keys=True)
        f.write("\n")
    return m


# ---------------------------------------------------------------------------
# runs

@dataclass
class RunRecord:
    manifest_digest: str
    name: str
    model: str
    task: str
    mode: str
    language: str
    shots: float
    seed: int
    metric: str
    value: float
    report: dict
    stages: list[dict]
    wall_clock_s: float

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_json(cls, obj) -> "RunRecord":
        return cls(**obj)


def append_record(store, record: RunRecord):
    store = Path(store)
    with FileLock(str(store) + ".lock"):
        with open(store, "a", encoding="utf-8") as f:
            f.write(json.dumps(record.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


def read_records(store) -> list[RunRecord]:
    with open(store, encoding="utf-8") as f:
        return [RunRecord.from_json(json.loads(line)) for line in f if line.strip()]


def _gen(m: ExperimentManifest, name: str, cls):
    return cls(**m.raw.get("generation", {}).get(name, {}))


def _encoder_config(m: ExperimentManifest, vocab: Vocab) -> EncoderConfig:
    e = dict(m.raw.get("encoder", {}))
    return EncoderConfig(vocab_size=len(vocab), **e)


def _split_os(dialogs: list[ParallelDialog], seed, dev_fraction: float = 0.05):
    """Hold out whole movies for the specialization dev set."""
    movies = list(dict.fromkeys(d.imdb_id for d in dialogs))
    perm = rng_for(seed, "os-dev").permutation(len(movies))
    n_dev = max(2, round_half_up(dev_fraction * len(movies)))
    dev_movies = {movies[int(i)] for i in perm[:n_dev]}
    return [d for d in dialogs if d.imdb_id not in dev_movies], [d for d in dialogs if d.imdb_id in dev_movies]


def _specialization_stages(m: ExperimentManifest, vocab: Vocab, cfg: TrainConfig) -> list[Stage]:
    stages = []
    max_len = m.raw.get("encoder", {}).get("max_len", 256)
    mask = _gen(m, "masking", MaskingConfig)
    seg = m.raw.get("generation", {}).get("segment", {})
    os_train = os_dev = None
    if m.has("os"):
        pairs = read_parallel_pairs(m.path("os"))
        dialogs, _ = segment_dialogs(pairs, seg.get("min_len", 2), seg.get("max_len", 15), seed=m.seed)
        os_train, os_dev = _split_os(dialogs, m.seed)
    tlm_cfg = TlmConfig(**{"max_len": max_len, **m.raw.get("generation", {}).get("tlm", {})})
    per_dialog = m.raw.get("generation", {}).get("tlm_per_dialog", 1)
    for si, obj in enumerate(m.schedule):
        kind, corpus = obj.split("@")
        seed = derive_seed(m.seed, "spec", si, obj)
        if kind == "mlm":
            texts = read_flat_corpus(m.path(corpus)).texts()
            n_dev = max(1, len(texts) // 20)
            dev_texts, train_texts = texts[:n_dev], texts[n_dev:]

            def data(epoch, texts=train_texts, seed=seed):
                return gen_mlm_corpus(texts, vocab, mask, derive_seed(seed, epoch), max_len)

            dev = gen_mlm_corpus(dev_texts, vocab, mask, derive_seed(seed, "dev"), max_len)
            objective = "mlm"
        elif kind == "tlm":
            def data(epoch, seed=seed):
                return gen_tlm_corpus(os_train, vocab, tlm_cfg, mask, derive_seed(seed, epoch), per_dialog)

            dev = gen_tlm_corpus(os_dev, vocab, tlm_cfg, mask, derive_seed(seed, "dev"), per_dialog)
            objective = "tlm"
        else:
            rs_raw = dict(m.raw.get("generation", {}).get("rs", {}))
            rs_raw["mode"] = "mono" if kind == "rs_mono" else "cross"
            rs_raw.setdefault("per_side_max", max_len // 2)
            rs_cfg = RsConfig(**rs_raw)

            def data(epoch, seed=seed, rs_cfg=rs_cfg):
                return gen_rs(os_train, rs_cfg, derive_seed(seed, epoch), vocab)

            dev = gen_rs(os_dev, rs_cfg, derive_seed(seed, "dev"), vocab)
            objective = "rs"
        stages.append(Stage(objective, data, dev, name=obj, **cfg.stage_defaults(objective, "specialization")))
    return stages


def _spec_cache_key(m: ExperimentManifest, cfg: TrainConfig) -> str:
    roles = ["vocab"] + sorted({o.split("@")[1] for o in m.schedule})
    key = {
        "schedule": m.schedule,
        "inputs": {r: sha256_file(m.path(r)) for r in roles},
        "encoder": m.raw.get("encoder", {}),
        "generation": m.raw.get("generation", {}),
        "train": cfg.to_json(),
        "seed": m.seed,
    }
    return hashlib.sha256(_canonical(key)).hexdigest()[:24]


def specialize(m: ExperimentManifest, vocab: Vocab, cfg: TrainConfig, cache_dir=None,
               log: Callable[[str], None] | None = None) -> Checkpoint:
    """Initialize the encoder and run the manifest's specialization schedule."""
    params = ModelParams.init(_encoder_config(m, vocab), seed=derive_seed(m.seed, "init"))
    if not m.schedule:
        return Checkpoint(params, {"seed": m.seed, "stages": []})
    cache_path = None
    if cache_dir is not None:
        cache_path = Path(cache_dir) / f"spec-{_spec_cache_key(m, cfg)}.ckpt"
        if cache_path.exists():
            return load_checkpoint(cache_path)
    ckpt = train(params, _specialization_stages(m, vocab, cfg), cfg, log=log)
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        tmp = cache_path.with_suffix(".tmp")
        save_checkpoint(tmp, ckpt)
        os.replace(tmp, cache_path)
    return ckpt


def _task_stage(m: ExperimentManifest, cfg: TrainConfig, vocab: Vocab, onto: Ontology, train_dialogs, dev_dialogs,
                value_onto, phase: str, seed) -> Stage:
    ev = m.raw.get("eval", {})
    max_len = m.raw.get("encoder", {}).get("max_len", 256)
    per_side = max_len // 2
    defaults = cfg.stage_defaults(m.task, phase)
    if m.task == "dst":
        items = dst_items(train_dialogs, vocab, onto, value_onto, max_len)

        def dev(p):
            return evaluate_dst(p, dev_dialogs, vocab, value_onto, max_len).accuracy

        return Stage("dst", items, dev, name=f"dst-{phase}", **defaults)
    negatives = ev.get("rr_negatives", 3)

    def data(epoch):
        return rr_training_instances(train_dialogs, vocab, negatives, derive_seed(seed, epoch), per_side)

    def dev(p):
        return evaluate_rr(p, dev_dialogs, vocab, n=ev.get("dev_candidates", 100), seed=derive_seed(seed, "dev"),
                           per_side_max=per_side, max_contexts=ev.get("dev_contexts", 200)).recall

    return Stage("rs", data, dev, name=f"rr-{phase}", **defaults)


def run_experiment(manifest: ExperimentManifest | str | os.PathLike, store=None, cache_dir=None,
                   log: Callable[[str], None] | None = None) -> RunRecord:
    """Specialize, fine-tune on the source task, optionally few-shot on the target, evaluate."""
    m = manifest if isinstance(manifest, ExperimentManifest) else load_manifest(manifest)
    validate_manifest(m)
    started = time.perf_counter()
    digest = manifest_digest(m)
    cfg = m.train_config()
    stage = "load"
    try:
        vocab = Vocab.load(m.path("vocab"))
        onto = Ontology.load(m.path("ontology"))
        tgt_onto = Ontology.load(m.path("target_ontology")) if m.has("target_ontology") else None
        max_len = m.raw.get("encoder", {}).get("max_len", 256)
        src_train = load_dialog_corpus(m.path("source_train"))
        src_dev = load_dialog_corpus(m.path("source_dev"))
        tgt_test = load_dialog_corpus(m.path("target_test"))
        ev = m.raw.get("eval", {})
        if ev.get("max_test_dialogs"):
            tgt_test = tgt_test[: ev["max_test_dialogs"]]

        stage = "specialization"
        ckpt = specialize(m, vocab, cfg, cache_dir, log)
        params = ckpt.params
        history = list(ckpt.provenance.get("stages", []))
        if m.task == "dst":
            params = params.with_dst_heads(onto)

        stage = "source fine-tuning"
        src_stage = _task_stage(m, cfg, vocab, onto, src_train, src_dev, None, "zero_shot",
                                derive_seed(m.seed, "source"))
        ft = train(params, [src_stage], cfg, log=log)
        params = ft.params
        history += ft.provenance["stages"]

        shots = 0.0
        if m.mode == "few_shot":
            stage = "few-shot fine-tuning"
            split = m.split
            tgt_dev = load_dialog_corpus(m.path("target_dev"))
            chosen = set(make_fewshot_split([d.dialog_id for d in tgt_dev], split))
            fs_train = [d for d in tgt_dev if d.dialog_id in chosen]
            fs_dev = [d for d in tgt_dev if d.dialog_id not in chosen][: ev.get("few_shot_dev_dialogs", 100)]
            if not fs_dev:
                fs_dev = fs_train
            if m.raw.get("reinit_head_few_shot"):
                if m.task == "dst":
                    params = params.with_dst_heads(onto, keep_existing=False)
                else:
                    params = params.copy()
                    params.arrays["rs_w"][:] = 0.0
                    params.arrays["rs_b"][:] = 0.0
            fs_stage = _task_stage(m, cfg, vocab, onto, fs_train, fs_dev, tgt_onto, "few_shot",
                                   derive_seed(m.seed, "few-shot"))
            fs = train(params, [fs_stage], cfg, log=log)
            params = fs.params
            history += fs.provenance["stages"]
            shots = split.fraction

        stage = "evaluation"
        if m.task == "dst":
            report = evaluate_dst(params, tgt_test, vocab, tgt_onto, max_len)
            metric, value = "jga", report.accuracy
        else:
            report = evaluate_rr(params, tgt_test, vocab, n=ev.get("rr_candidates", 100),
                                 seed=ev.get("rr_seed", 0), per_side_max=max_len // 2)
            metric, value = f"R{report.n}@{report.k}", report.recall
    except Exception as e:
        raise StageFailure(stage, m.seed, e) from e

    record = RunRecord(
        manifest_digest=digest, name=m.raw.get("name", ""), model=m.model, task=m.task, mode=m.mode,
        language=m.target, shots=shots, seed=m.seed, metric=metric, value=value,
        report=report.to_json(), stages=history, wall_clock_s=time.perf_counter() - started)
    if store is not None:
        append_record(store, record)
    return record


# ---------------------------------------------------------------------------
# aggregation

@dataclass
class AggregateTable:
    rows: list[dict]
    series: dict[str, list[list[float]]]

    def to_tsv(self) -> str:
        cols = ["model", "language", "shot_pct", "metric", "value", "n"]
        lines = ["\t".join(cols)]
        for r in self.rows:
            lines.append("\t".join(str(r[c]) for c in cols))
        return "\n".join(lines) + "\n"

    def write(self, table_path, series_path):
        Path(table_path).write_text(self.to_tsv(), encoding="utf-8")
        Path(series_path).write_text(json.dumps(self.series, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _shot_pct(shots: float) -> float:
    return round(shots * 100, 6)


def aggregate_reports(records: Iterable[RunRecord], group_by: Sequence[str] = ("model", "shots")) -> AggregateTable:
    """Mean metric per group; fields not grouped on are averaged over.

    ``group_by`` draws from ``model``, ``language`` and ``shots``. Curve
    series are keyed by model (and language when grouped) and hold
    ``[shot_pct, mean]`` points sorted by shot level.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to aggregate")
    metrics = {r.metric for r in records}
    tasks = {r.task for r in records}
    if len(metrics) > 1 or len(tasks) > 1:
        raise ValueError(f"cannot aggregate mixed metrics {sorted(metrics)} / tasks {sorted(tasks)}")
    bad = set(group_by) - {"model", "language", "shots"}
    if bad:
        raise ValueError(f"unknown group_by fields {sorted(bad)}")
    groups: dict[tuple, list[float]] = {}
    for r in records:
        key = (r.model if "model" in group_by else "all",
               r.language if "language" in group_by else "avg",
               _shot_pct(r.shots) if "shots" in group_by else "all")
        groups.setdefault(key, []).append(r.value)
    metric = metrics.pop()
    rows = []
    series: dict[str, list[list[float]]] = {}
    for (model, lang, shot), vals in sorted(groups.items(), key=lambda kv: tuple(str(x) for x in kv[0])):
        mean = fmean(sorted(vals))
        rows.append({"model": model, "language": lang, "shot_pct": shot, "metric": metric, "value": mean,
                     "n": len(vals)})
        if shot != "all":
            name = model if lang == "avg" else f"{model} [{lang}]"
            series.setdefault(name, []).append([shot, mean])
    rows.sort(key=lambda r: (str(r["model"]), str(r["language"]),
                             r["shot_pct"] if isinstance(r["shot_pct"], float) else -1.0))
    for pts in series.values():
        pts.sort()
    return AggregateTable(rows, series)
