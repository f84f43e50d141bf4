"""Command-line entry point: ``convspec <subcommand> ...``.

Every subcommand accepts ``--seed`` and ``--config`` (a JSON object whose
keys supply defaults for that subcommand's options, dashes written as
underscores) and prints one JSON summary line on stdout.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import dialog, experiments, instances, metrics, subtitles, tokenizer
from .encoder import EncoderConfig, ModelParams, Stage, TrainConfig, load_checkpoint, save_checkpoint, train


def _emit(obj: dict) -> None:
    print(json.dumps(obj, ensure_ascii=False, sort_keys=True))


def _read_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, ensure_ascii=False, indent=1, sort_keys=True)
        f.write("\n")


# -- subcommands -----------------------------------------------------------

def cmd_ingest(a) -> dict:
    if a.kind == "subtitles":
        pairs = subtitles.read_parallel_pairs(a.input)
        dialogs, rep = subtitles.segment_dialogs(pairs, a.min_len, a.max_len, seed=a.seed, workers=a.workers)
        if a.out:
            with open(a.out, "w", encoding="utf-8") as f:
                for d in dialogs:
                    f.write(json.dumps({"imdb_id": d.imdb_id, "lines": [d.start, d.end]}) + "\n")
        return {"pairs": len(pairs), "movies": rep.movies, "dialogs": rep.dialogs,
                "dropped_pairs": rep.dropped_pairs, "skipped_movies": rep.skipped_movies}
    onto = dialog.Ontology.load(a.ontology) if a.ontology else None
    ds = dialog.load_dialog_corpus(a.input, format=a.format, ontology=onto)
    if a.out:
        Path(a.out).write_bytes(dialog.serialize_dialog_corpus(ds))
    return {"dialogs": len(ds), "turns": sum(len(d.turns) for d in ds)}


def _text_lines(paths):
    out = []
    for p in paths:
        with open(p, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                # flat-corpus lines carry a language column
                out.append(line.split("\t", 1)[-1])
    return [t for t in out if t.strip()]


def cmd_vocab(a) -> dict:
    v = tokenizer.build_vocab(_text_lines(a.corpus), a.size, min_size=a.min_size)
    v.save(a.out)
    return {"size": len(v), "out": a.out}


def cmd_gen(a) -> dict:
    vocab = tokenizer.Vocab.load(a.vocab)
    mask = instances.MaskingConfig()
    if a.objective == "mlm":
        texts = subtitles.read_flat_corpus(a.input).texts()
        out = instances.gen_mlm_corpus(texts, vocab, mask, a.seed, a.max_len, workers=a.workers)
    else:
        pairs = subtitles.read_parallel_pairs(a.input)
        dialogs, _ = subtitles.segment_dialogs(pairs, seed=a.seed, workers=a.workers)
        if a.objective == "tlm":
            out = instances.gen_tlm_corpus(dialogs, vocab, instances.TlmConfig(max_len=a.max_len), mask, a.seed,
                                           workers=a.workers)
        else:
            cfg = instances.RsConfig(mode="mono" if a.objective == "rs_mono" else "cross",
                                     per_side_max=a.max_len // 2)
            out = instances.gen_rs(dialogs, cfg, a.seed, vocab, workers=a.workers)
    instances.write_instances(a.out, out)
    summary = {"objective": a.objective, "instances": len(out), "out": a.out}
    if a.objective.startswith("rs"):
        summary["roles"] = instances.rs_balance(out)
    return summary


def cmd_train(a) -> dict:
    vocab = tokenizer.Vocab.load(a.vocab)
    if a.init:
        params = load_checkpoint(a.init).params
    else:
        params = ModelParams.init(EncoderConfig(len(vocab), d=a.d, h=a.h, max_len=a.max_len), seed=a.seed)
    cfg = TrainConfig(seed=a.seed, **({"specialization_lr": a.lr} if a.lr else {}))
    data = instances.read_instances(a.instances)
    objective = data[0].kind if data else "mlm"
    dev = instances.read_instances(a.dev) if a.dev else None
    defaults = cfg.stage_defaults(objective, "specialization")
    if a.max_epochs:
        defaults["max_epochs"] = a.max_epochs
        defaults["patience"] = min(defaults["patience"], a.max_epochs)
    ckpt = train(params, [Stage(objective, data, dev, name=objective, **defaults)], cfg)
    save_checkpoint(a.out, ckpt)
    st = ckpt.provenance["stages"][0]
    return {"objective": objective, "epochs_run": st["epochs_run"], "best_epoch": st["best_epoch"],
            "best_dev": st["best_dev"], "out": a.out}


def cmd_eval_dst(a) -> dict:
    preds = metrics.load_dst_predictions(a.predictions)
    onto = dialog.Ontology.load(a.ontology) if a.ontology else None
    gold = {d.dialog_id: dialog.cumulative_states(d, onto) for d in dialog.load_dialog_corpus(a.gold, ontology=onto)}
    synonyms = _read_json(a.synonyms) if a.synonyms else None
    rep = metrics.joint_goal_accuracy(preds, gold, metrics.NormalizationRules(synonyms), onto)
    out = {**rep.to_json(), "seed": a.seed}
    if a.out:
        _write_json(a.out, out)
    out.pop("per_dialog")
    return out


def cmd_eval_rr(a) -> dict:
    ranked = _read_json(a.rankings)
    gold = _read_json(a.gold)
    missing = set(gold) - set(ranked)
    if missing:
        raise metrics.MetricError(f"{len(missing)} contexts have no ranking")
    rep = metrics.recall_at_k([(ranked[c], gold[c]) for c in sorted(gold)], k=a.k, seed=a.seed)
    out = rep.to_json()
    if a.out:
        _write_json(a.out, out)
    return out


def cmd_kappa(a) -> dict:
    reps = metrics.qc_kappa(dialog.load_qc_judgments(a.a), dialog.load_qc_judgments(a.b))
    out = {name: rep.to_json() for name, rep in reps.items()}
    if a.out:
        _write_json(a.out, {**out, "seed": a.seed})
    return {name: {"kappa": r.kappa, "n_items": r.n_items, "degenerate": r.degenerate} for name, r in reps.items()}


def cmd_split(a) -> dict:
    ids = [d.dialog_id for d in dialog.load_dialog_corpus(a.dev)]
    spec = experiments.SplitSpec(a.fraction, a.seed, nested=not a.independent)
    chosen = experiments.make_fewshot_split(ids, spec)
    if a.out:
        _write_json(a.out, chosen)
    return {"fraction": a.fraction, "dev_dialogs": len(ids), "size": len(chosen), "out": a.out}


def cmd_run(a) -> dict:
    m = experiments.load_manifest(a.manifest)
    if a.seed is not None and a.override_seed:
        m.raw["seed"] = a.seed
    log = (lambda s: print(s, file=sys.stderr)) if a.verbose else None
    rec = experiments.run_experiment(m, store=a.store, cache_dir=a.cache_dir, log=log)
    return {"manifest_digest": rec.manifest_digest, "model": rec.model, "task": rec.task, "mode": rec.mode,
            "language": rec.language, "shots": rec.shots, "metric": rec.metric, "value": rec.value,
            "seed": rec.seed, "wall_clock_s": round(rec.wall_clock_s, 3)}


def cmd_report(a) -> dict:
    recs = experiments.read_records(a.store)
    if a.task:
        recs = [r for r in recs if r.task == a.task]
    table = experiments.aggregate_reports(recs, group_by=a.group_by.split(","))
    table.write(a.table, a.series)
    return {"records": len(recs), "rows": len(table.rows), "table": a.table, "series": a.series}


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="convspec")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.subcommands = {}

    def add(name, fn, help):
        p = sub.add_parser(name, help=help)
        parser.subcommands[name] = p
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="JSON file of option defaults")
        p.set_defaults(fn=fn)
        return p

    p = add("ingest", cmd_ingest, "segment parallel subtitles or canonicalize a dialog corpus")
    p.add_argument("--kind", choices=["subtitles", "corpus"], default="subtitles")
    p.add_argument("--input")
    p.add_argument("--out")
    p.add_argument("--format", choices=["multi2woz", "multiwoz_v21"], default="multi2woz")
    p.add_argument("--ontology")
    p.add_argument("--min-len", type=int, default=2)
    p.add_argument("--max-len", type=int, default=15)
    p.add_argument("--workers", type=int, default=1)

    p = add("vocab", cmd_vocab, "build a subword vocabulary")
    p.add_argument("--corpus", nargs="+")
    p.add_argument("--size", type=int, default=30000)
    p.add_argument("--min-size", type=int, default=tokenizer.NUM_SPECIALS + 1)
    p.add_argument("--out")

    p = add("gen", cmd_gen, "generate training instances")
    p.add_argument("--objective", choices=["mlm", "tlm", "rs_mono", "rs_x"])
    p.add_argument("--input")
    p.add_argument("--vocab")
    p.add_argument("--out")
    p.add_argument("--max-len", type=int, default=256)
    p.add_argument("--workers", type=int, default=1)

    p = add("train", cmd_train, "train the reference encoder on one instance file")
    p.add_argument("--instances")
    p.add_argument("--dev")
    p.add_argument("--vocab")
    p.add_argument("--init")
    p.add_argument("--out")
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--h", type=int, default=64)
    p.add_argument("--max-len", type=int, default=256)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-epochs", type=int)

    p = add("eval-dst", cmd_eval_dst, "joint goal accuracy of a prediction file")
    p.add_argument("--predictions")
    p.add_argument("--gold")
    p.add_argument("--ontology")
    p.add_argument("--synonyms")
    p.add_argument("--out")

    p = add("eval-rr", cmd_eval_rr, "recall@k of ranked candidate lists")
    p.add_argument("--rankings")
    p.add_argument("--gold")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--out")

    p = add("kappa", cmd_kappa, "Cohen's kappa between two QC annotators")
    p.add_argument("--a")
    p.add_argument("--b")
    p.add_argument("--out")

    p = add("split", cmd_split, "few-shot split of a development corpus")
    p.add_argument("--dev")
    p.add_argument("--fraction", type=float, default=0.01)
    p.add_argument("--independent", action="store_true", help="resample instead of nested prefixes")
    p.add_argument("--out")

    p = add("run", cmd_run, "run one experiment manifest")
    p.add_argument("--manifest")
    p.add_argument("--store")
    p.add_argument("--cache-dir")
    p.add_argument("--override-seed", action="store_true", help="use --seed instead of the manifest seed")
    p.add_argument("--verbose", action="store_true")

    p = add("report", cmd_report, "aggregate a run store into a table and curve series")
    p.add_argument("--store")
    p.add_argument("--task", choices=["dst", "rr"])
    p.add_argument("--group-by", default="model,shots")
    p.add_argument("--table", default="report.tsv")
    p.add_argument("--series", default="series.json")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        parser.subcommands[args.command].set_defaults(**_read_json(args.config))
        args = parser.parse_args(argv)
    try:
        summary = args.fn(args)
    except (ValueError, OSError, RuntimeError) as e:
        _emit({"command": args.command, "ok": False, "error": f"{type(e).__name__}: {e}"})
        return 1
    _emit({"command": args.command, "ok": True, **summary})
    return 0


if __name__ == "__main__":
    sys.exit(main())
