import json
import shutil
from importlib.resources import files

import jsonschema
import pytest
from hypothesis import given, strategies as st

from convspec.dialog import DialogState
from convspec.encoder import EncoderConfig, ModelParams
from convspec.experiments import (SHOT_LADDER, AggregateTable, ExperimentManifest, ManifestError, RunRecord,
                                  SplitSpec, StageFailure, aggregate_reports, dst_items, evaluate_rr,
                                  history_sequence, load_manifest, make_fewshot_split, manifest_digest,
                                  read_records, rr_pairs, rr_training_instances, run_experiment, specialize,
                                  subtitle_rr_pairs, to_source_values, validate_manifest, write_manifest)
from convspec.tokenizer import CLS, SEP, Vocab
from convspec.toyworld import ToyWorld, toy_manifest, write_workspace

TINY = {
    "encoder": {"d": 8, "h": 12, "max_len": 128},
    "train_config": {"specialization_lr": 5e-3, "downstream_lr": 3e-3, "max_epochs_specialization": 1,
                     "max_epochs_zero_shot": 2, "max_epochs_few_shot": 2, "patience_rs": 1, "patience_mlm": 1},
    "eval": {"rr_negatives": 1, "dev_contexts": 10, "dev_candidates": 5, "rr_candidates": 10,
             "few_shot_dev_dialogs": 5},
}


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    data = write_workspace(root, n_subtitle_dialogs=40, n_source_train=20, n_source_dev=6, n_target_dev=50,
                           n_target_test=8, vocab_size=120)
    return root, data


def manifest(ws, name, **kw):
    root, data = ws
    raw = toy_manifest(data, **{**TINY, **kw})
    return write_manifest(root / f"{name}.json", raw)


# -- splits ------------------------------------------------------------------

def test_split_sizes_ladder():
    ids = [f"d{i}" for i in range(1000)]
    assert [len(make_fewshot_split(ids, SplitSpec(p))) for p in SHOT_LADDER] == [10, 50, 100, 500, 1000]


@given(st.integers(min_value=1, max_value=300), st.integers(min_value=0, max_value=1000))
def test_nested_splits_are_prefixes(n, seed):
    ids = [f"d{i}" for i in range(n)]
    prev = []
    for p in SHOT_LADDER:
        size = int(p * n + 0.5)
        if size == 0:
            continue
        cur = make_fewshot_split(ids, SplitSpec(p, seed))
        assert cur[: len(prev)] == prev and len(set(cur)) == len(cur) == size
        prev = cur


def test_split_errors_and_independent():
    ids = [f"d{i}" for i in range(100)]
    with pytest.raises(ValueError):
        make_fewshot_split([], SplitSpec(0.5))
    with pytest.raises(ValueError):
        make_fewshot_split(ids[:10], SplitSpec(0.01))
    with pytest.raises(ValueError):
        SplitSpec(0.0)
    a = make_fewshot_split(ids, SplitSpec(0.1, 0, nested=False))
    b = make_fewshot_split(ids, SplitSpec(0.5, 0, nested=False))
    assert a != b[:10]
    assert make_fewshot_split(ids, SplitSpec(0.1, 3)) == make_fewshot_split(ids, SplitSpec(0.1, 3))


# -- task data -----------------------------------------------------------------

def test_history_keeps_most_recent_tokens(ws):
    vocab = Vocab.load(ws[0] / "vocab.txt")
    seq = history_sequence(["i want thai food", "ok thai . what area ?", "in the north"], vocab, 8)
    assert len(seq) == 8 and seq.ids[0] == CLS and seq.ids[-1] == SEP
    assert list(seq.ids[1:-1]) == vocab.tokenize("in the north")[0][-6:] or \
        list(seq.ids[-1 - len(vocab.tokenize("in the north")[0]):-1]) == vocab.tokenize("in the north")[0]


def test_target_values_map_to_source_strings():
    w = ToyWorld.build(0)
    src, tgt = w.ontology("en"), w.ontology("xx")
    state = DialogState.from_mapping({("restaurant", "food"): w.lexicon["thai"], ("restaurant", "area"): "dontcare"})
    assert to_source_values(state, src, tgt) == {("restaurant", "food"): "thai", ("restaurant", "area"): "dontcare"}


def test_dst_items_use_source_value_strings(ws):
    w = ToyWorld.build(0)
    vocab = Vocab.load(ws[0] / "vocab.txt")
    dialogs = w.task_dialogs(3, "xx", seed=0)
    items = dst_items(dialogs, vocab, w.ontology("en"), w.ontology("xx"), 64)
    gold_foods = {state[("restaurant", "food")] for _, state in items}
    assert gold_foods <= set(w.ontology("en").values(("restaurant", "food")))
    assert len(items) == sum(len(d.user_turns) for d in dialogs)


def test_rr_pairs_and_training_instances(ws):
    w = ToyWorld.build(0)
    vocab = Vocab.load(ws[0] / "vocab.txt")
    dialogs = w.task_dialogs(6, "en", seed=1)
    pairs = rr_pairs(dialogs)
    assert all(cid.startswith("D") for cid, _, _ in pairs)
    d0 = dialogs[0]
    assert pairs[0] == (f"{d0.dialog_id}:0", d0.turns[0].text, d0.turns[1].text)
    insts = rr_training_instances(dialogs, vocab, 2, seed=0)
    pos = [i for i in insts if i.rs_label]
    assert len(pos) == len(pairs) and len(insts) <= 3 * len(pairs)


def test_evaluate_rr_caps_candidates(ws):
    w = ToyWorld.build(0)
    vocab = Vocab.load(ws[0] / "vocab.txt")
    p = ModelParams.init(EncoderConfig(len(vocab), d=8, h=12, max_len=128), seed=0)
    rep = evaluate_rr(p, w.task_dialogs(4, "en", seed=2), vocab, n=100, per_side_max=64)
    assert rep.n <= 12 and rep.total_contexts == len(rr_pairs(w.task_dialogs(4, "en", seed=2)))


def test_subtitle_rr_pairs_sides():
    w = ToyWorld.build(0)
    from convspec.subtitles import segment_dialogs
    ds = segment_dialogs(w.subtitle_pairs(10), 2, 15)[0]
    mono = subtitle_rr_pairs(ds, "mono")
    cross = subtitle_rr_pairs(ds, "cross")
    assert mono[0][2] == ds[0].pairs[-1].tgt_text and cross[0][2] == ds[0].pairs[-1].src_text
    assert mono[0][1] == cross[0][1]


# -- manifests -----------------------------------------------------------------

def test_written_manifest_matches_schema(ws):
    m = manifest(ws, "schema", task="dst", schedule=["tlm@os"])
    schema = json.loads((files("convspec") / "schemas" / "manifest.schema.json").read_text(encoding="utf-8"))
    jsonschema.validate(json.loads((ws[0] / "schema.json").read_text(encoding="utf-8")), schema)
    validate_manifest(m)
    bad = dict(m.raw)
    bad.pop("split")
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(bad, schema)


@pytest.mark.parametrize("change,match", [
    ({"schema_version": 2}, "schema"),
    ({"mode": "one_shot"}, "mode"),
    ({"task": "nlu"}, "task"),
    ({"schedule": ["mlm@os"]}, "unknown schedule"),
    ({"schedule": ["mlm@mono_cc"]}, "mono_cc"),
])
def test_manifest_validation_errors(ws, change, match):
    m = manifest(ws, "valid", task="rr")
    raw = {**m.raw, **change}
    with pytest.raises(ManifestError, match=match):
        validate_manifest(ExperimentManifest(raw, m.base_dir))


def test_manifest_digest_mismatch_and_missing_split(ws):
    m = manifest(ws, "digest", task="rr")
    raw = json.loads(json.dumps(m.raw))
    raw["data"]["vocab"]["sha256"] = "0" * 64
    with pytest.raises(ManifestError, match="digest"):
        validate_manifest(ExperimentManifest(raw, m.base_dir))
    raw = json.loads(json.dumps(m.raw))
    raw.pop("split")
    with pytest.raises(ManifestError, match="split"):
        validate_manifest(ExperimentManifest(raw, m.base_dir))


def test_manifest_digest_is_location_independent(ws, tmp_path):
    m = manifest(ws, "moved", task="rr")
    d1 = manifest_digest(m)
    for f in ws[0].iterdir():
        if f.is_file():
            shutil.copy(f, tmp_path / f.name)
    assert manifest_digest(load_manifest(tmp_path / "moved.json")) == d1
    (tmp_path / "vocab.txt").write_text("changed\n", encoding="utf-8")
    assert manifest_digest(load_manifest(tmp_path / "moved.json")) != d1


# -- runs ------------------------------------------------------------------------

def test_zero_shot_run_record_and_store(ws, tmp_path):
    m = manifest(ws, "zs", task="dst", mode="zero_shot")
    store = tmp_path / "runs.jsonl"
    rec = run_experiment(m, store=store)
    assert rec.metric == "jga" and rec.shots == 0.0 and rec.model == "unspecialized"
    assert [s["name"] for s in rec.stages] == ["dst-zero_shot"]
    assert read_records(store) == [rec]
    again = run_experiment(m)
    assert again.value == rec.value and again.stages == rec.stages


def test_few_shot_run_with_specialization_and_cache(ws, tmp_path):
    m = manifest(ws, "fs", task="rr", schedule=["tlm@os", "rs_mono@os"], reinit_head_few_shot=True)
    rec = run_experiment(m, cache_dir=tmp_path)
    assert rec.metric == "R10@1" and rec.shots == 0.01
    assert [s["name"] for s in rec.stages] == ["tlm@os", "rs_mono@os", "rr-zero_shot", "rr-few_shot"]
    assert len(list(tmp_path.glob("spec-*.ckpt"))) == 1
    vocab = Vocab.load(ws[0] / "vocab.txt")
    cached = specialize(m, vocab, m.train_config(), cache_dir=tmp_path)
    fresh = specialize(m, vocab, m.train_config())
    assert cached.params.equals(fresh.params)


def test_stage_failure_names_stage(ws, tmp_path):
    root, data = ws
    for f in root.iterdir():
        if f.is_file():
            shutil.copy(f, tmp_path / f.name)
    (tmp_path / "source_dev.json").write_text("{not json", encoding="utf-8")
    raw = toy_manifest(data, **{**TINY, "task": "dst", "mode": "zero_shot"})
    m = write_manifest(tmp_path / "broken.json", raw)
    with pytest.raises(StageFailure) as e:
        run_experiment(m)
    assert e.value.stage == "load" and "seed 0" in str(e.value)


# -- aggregation -------------------------------------------------------------------

def record(model, lang, shots, value, metric="jga", task="dst"):
    return RunRecord("x", "n", model, task, "few_shot", lang, shots, 0, metric, value, {}, [], 0.0)


def test_aggregate_means_and_series(tmp_path):
    recs = [record("base", "de", 0.01, 0.1), record("base", "ru", 0.01, 0.3), record("base", "de", 0.05, 0.4),
            record("spec", "de", 0.01, 0.5)]
    table = aggregate_reports(recs)
    assert [(r["model"], r["shot_pct"], r["value"], r["n"]) for r in table.rows] == [
        ("base", 1.0, 0.2, 2), ("base", 5.0, 0.4, 1), ("spec", 1.0, 0.5, 1)]
    assert table.series == {"base": [[1.0, 0.2], [5.0, 0.4]], "spec": [[1.0, 0.5]]}
    by_lang = aggregate_reports(recs, ("model", "language", "shots"))
    assert "base [ru]" in by_lang.series
    table.write(tmp_path / "t.tsv", tmp_path / "s.json")
    assert (tmp_path / "t.tsv").read_text().splitlines()[0] == "model\tlanguage\tshot_pct\tmetric\tvalue\tn"


def test_aggregate_rejects_mixed_metrics():
    with pytest.raises(ValueError):
        aggregate_reports([record("a", "de", 0.01, 0.1), record("a", "de", 0.01, 0.1, "R100@1", "rr")])
    with pytest.raises(ValueError):
        aggregate_reports([])
    with pytest.raises(ValueError):
        aggregate_reports([record("a", "de", 0.01, 0.1)], ("task",))
