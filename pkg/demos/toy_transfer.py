"""
Few-shot transfer on the toy world
==================================

Write a toy workspace, then compare an unspecialized encoder with one
specialized on TLM and RS-Mono, both fine-tuned on English and then on
1% of the target-language dialogs. A small configuration keeps the run
to about a minute; ``tests/test_acceptance.py`` runs the full-size one.
"""
import sys
import tempfile
from pathlib import Path

from convspec.experiments import aggregate_reports, read_records, run_experiment, write_manifest
from convspec.toyworld import TOY_TRAIN, toy_manifest, write_workspace

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="convspec-"))
data = write_workspace(root, n_subtitle_dialogs=400, n_source_train=100, n_source_dev=30, n_target_dev=300,
                       n_target_test=60, vocab_size=200)
print("workspace", root)

small_train = {**TOY_TRAIN, "max_epochs_specialization": 3, "max_epochs_zero_shot": 8, "max_epochs_few_shot": 15}
store = root / "runs.jsonl"
for task in ("dst", "rr"):
    for schedule in ((), ("tlm@os", "rs_mono@os")):
        raw = toy_manifest(data, task, schedule, fraction=0.05, train_config=small_train,
                           encoder={"d": 16, "h": 32, "max_len": 128})
        m = write_manifest(root / f"{task}-{len(schedule)}.json", raw)
        rec = run_experiment(m, store=store, cache_dir=root / "cache")
        print(f"{task:3s} {rec.model:24s} {rec.metric:8s} {rec.value:.3f}")

# one table per task: rows are (model, shot percentage)
for task in ("dst", "rr"):
    table = aggregate_reports([r for r in read_records(store) if r.task == task])
    for row in table.rows:
        print(task, row)
