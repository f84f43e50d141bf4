"""One test per acceptance criterion; each prints a single PASS/FAIL line."""
import time
from collections import Counter

import numpy as np
import pytest
from scipy.stats import chisquare
from threadpoolctl import threadpool_limits

import oracles
from convspec._util import derive_seed, rng_for
from convspec.encoder import (EncoderConfig, ModelParams, Stage, TrainConfig, grad_check, save_checkpoint, train)
from convspec.experiments import (SHOT_LADDER, SplitSpec, _split_os, evaluate_pairs_rr, make_fewshot_split,
                                  run_experiment, specialize, subtitle_rr_pairs, write_manifest)
from convspec.instances import (MaskingConfig, RsConfig, TlmConfig, gen_mlm, gen_mlm_corpus, gen_rs, gen_tlm_corpus)
from convspec.metrics import (NormalizationRules, cohen_kappa, joint_goal_accuracy, qc_sample, recall_at_k,
                              sample_rr_candidates)
from convspec.subtitles import ParallelDialog, ParallelUtterancePair, read_parallel_pairs, sample_flat_corpus, \
    segment_dialogs
from convspec.tokenizer import CLS, NUM_SPECIALS, SEP, TokenSequence, Vocab, build_vocab, encode
from convspec.toyworld import ToyWorld, toy_manifest, write_workspace


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail
    return emit


def test_criterion_1_metric_oracles(report):
    t = time.perf_counter()
    rng = np.random.default_rng(20)
    mismatches = 0
    norm = NormalizationRules()
    for i in range(1000):
        pred, gold = oracles.jga_fixture(rng)
        keys = sorted({k for turns in (*pred.values(), *gold.values()) for s in turns for k in s})
        rep = joint_goal_accuracy(pred, gold, norm)
        mismatches += (rep.correct_turns, rep.total_turns) != oracles.brute_jga(pred, gold, keys)
        rankings, k = oracles.rr_fixture(rng)
        mismatches += recall_at_k(rankings, k).hits != oracles.brute_recall(rankings, k)
        a, b = oracles.kappa_fixture(rng)
        ours, ref = cohen_kappa(a, b).kappa, oracles.brute_kappa(a, b)
        mismatches += not (ours == ref or (np.isnan(ours) and np.isnan(ref)))
    dt = time.perf_counter() - t
    report(1, mismatches == 0 and dt < 10, f"3x1000 fixtures, {mismatches} mismatches, {dt:.2f}s")


def test_criterion_2_kappa_table(report):
    a = [1] * 50 + [0] * 50
    b = [1] * 45 + [0] * 5 + [1] * 5 + [0] * 45
    kappa = cohen_kappa(a, b).kappa
    report(2, abs(kappa - 0.8) <= 1e-12, f"kappa={kappa!r}")


def test_criterion_3_masking_statistics(report):
    t = time.perf_counter()
    rng = np.random.default_rng(3)
    cfg = MaskingConfig()
    masked = maskable = special_hits = 0
    for i in range(10_000):
        body = rng.integers(NUM_SPECIALS, 300, size=20).tolist()
        if i % 2:
            # pair layout: the inner separator must never be chosen
            ids, types = [CLS, *body[:10], SEP, *body[10:], SEP], [0] * 12 + [1] * 11
        else:
            ids, types = [CLS, *body, SEP], [0] * 22
        inst = gen_mlm(TokenSequence(tuple(ids), tuple(types)), cfg, i, 300)
        special_hits += sum(ids[p] < NUM_SPECIALS for p, _ in inst.mlm_labels)
        masked += len(inst.mlm_labels)
        maskable += 20
    frac = masked / maskable
    dt = time.perf_counter() - t
    report(3, abs(frac - 0.15) <= 0.005 and special_hits == 0 and dt < 30,
           f"masked fraction {frac:.4f}, special tokens masked {special_hits}, {dt:.2f}s")


def test_criterion_4_tlm_bounds(report):
    w = ToyWorld.build(0)
    en = w.flat_pool("en", 15 * 700, seed=4)
    pairs = [ParallelUtterancePair(f"tt{i // 15:07d}", i % 15, s, w.translate(s)) for i, s in enumerate(en)]
    dialogs = [ParallelDialog(pairs[j].imdb_id, tuple(pairs[j: j + 15])) for j in range(0, len(pairs), 15)]
    vocab = build_vocab([p.src_text for p in pairs[:3000]] + [p.tgt_text for p in pairs[:3000]], 200)
    insts = gen_tlm_corpus(dialogs, vocab, TlmConfig(max_len=1024), seed=4, per_dialog=15)[:10_000]
    by_line = {(p.imdb_id, p.line_index): p for p in pairs}
    bad = 0
    for inst in insts:
        pv = inst.provenance
        k = pv["k"]
        window = [by_line[(pv["imdb_id"], j)] for j in range(pv["span"][0], pv["span"][1] + 1)]
        ids = inst.original_ids()
        cut = ids.index(SEP)
        src = [i for p in window for i in vocab.tokenize(p.src_text)[0]]
        tgt = [i for p in window for i in vocab.tokenize(p.tgt_text)[0]]
        bad += not (2 <= k <= 15 and len(window) == k and ids[1:cut] == src and ids[cut + 1:-1] == tgt)
    counts = Counter(i.provenance["k"] for i in insts)
    p = chisquare([counts.get(k, 0) for k in range(2, 16)]).pvalue
    report(4, len(insts) == 10_000 and bad == 0 and p > 0.01,
           f"{len(insts)} instances, {bad} outside bounds or layout, chi2 p={p:.3f}")


def test_criterion_5_rs_negative_contracts(report):
    w = ToyWorld.build(0)
    pairs = w.subtitle_pairs(400, seed=5)
    vocab = build_vocab([p.src_text for p in pairs] + [p.tgt_text for p in pairs], 200)
    dialogs = segment_dialogs(pairs, 2, 15, seed=5)[0]
    violations = scanned = 0
    for mode in ("mono", "cross"):
        insts = gen_rs(dialogs, RsConfig(mode=mode, positives_per_dialog=2), 5, vocab)
        easy = Counter()
        for inst in insts:
            pv = inst.provenance
            scanned += 1
            if pv["role"] == "hard":
                violations += not (pv["response_imdb_id"] == pv["imdb_id"]
                                   and pv["response_line"] - pv["context_span"][1] >= 2)
            elif pv["role"] == "easy":
                easy[pv["group"]] += 1
                violations += pv["response_imdb_id"] == pv["imdb_id"]
        groups = {i.provenance["group"] for i in insts}
        violations += sum(easy[g] not in (1, 2, 3) for g in groups)
    report(5, violations == 0 and scanned > 0, f"{scanned} instances scanned, {violations} violations")


def _determinism_outputs(workers):
    w = ToyWorld.build(0)
    pairs = w.subtitle_pairs(40, seed=6)
    vocab = build_vocab([p.src_text for p in pairs] + [p.tgt_text for p in pairs], 150)
    dialogs, rep = segment_dialogs(pairs, 2, 15, seed=6, workers=workers)
    texts = [p.tgt_text for p in pairs]
    flat = sample_flat_corpus({"en": w.flat_pool("en", 80), "xx": w.flat_pool("xx", 80)}, "bi_cc", 50, seed=6,
                              target="xx")
    mlm = gen_mlm_corpus(texts, vocab, seed=6, workers=workers)
    tlm = gen_tlm_corpus(dialogs, vocab, TlmConfig(max_len=128), seed=6, workers=workers)
    rs = gen_rs(dialogs, RsConfig(per_side_max=32), 6, vocab, workers=workers)
    cands = sample_rr_candidates([(i, t) for i, t in enumerate(texts[:20])], texts, n=30, seed=6)
    split = make_fewshot_split([f"d{i}" for i in range(500)], SplitSpec(0.1, 6))
    qc = qc_sample({"dev": [f"d{i}" for i in range(50)], "test": [f"t{i}" for i in range(50)]}, seed=6)
    p0 = ModelParams.init(EncoderConfig(len(vocab), d=16, h=32, max_len=128), seed=6)
    ck = train(p0, [Stage("tlm", tlm, None, batch_size=8, lr=1e-3, max_epochs=1),
                    Stage("rs", rs, None, batch_size=16, lr=1e-3, max_epochs=1)], TrainConfig(seed=6))
    return {"segments": (dialogs, rep), "flat": flat, "mlm": mlm, "tlm": tlm, "rs": rs, "cands": cands,
            "split": split, "qc": qc, "init": p0, "train": ck}


def test_criterion_6_determinism(report, tmp_path):
    with threadpool_limits(limits=1):
        a = _determinism_outputs(1)
    b = _determinism_outputs(1)
    with threadpool_limits(limits=8):
        c = _determinism_outputs(8)
    differing = []
    for name in a:
        if name == "init":
            same = a[name].equals(b[name]) and a[name].equals(c[name])
        elif name == "train":
            blobs = []
            for i, run in enumerate((a, b, c)):
                save_checkpoint(tmp_path / f"{i}.ckpt", run[name])
                blobs.append((tmp_path / f"{i}.ckpt").read_bytes())
            same = blobs[0] == blobs[1] == blobs[2]
        else:
            same = a[name] == b[name] == c[name]
        if not same:
            differing.append(name)
    report(6, not differing, f"{len(a)} generators/trainers/samplers, differing: {differing or 'none'}")


def _grad_items(vocab, world):
    from convspec.dialog import Ontology
    onto = Ontology({("restaurant", "food"): ["thai", "greek", "indian"], ("restaurant", "area"): ["north", "east"]})
    pairs = world.subtitle_pairs(20, seed=7)
    dialogs = segment_dialogs(pairs, 2, 15, seed=7)[0]
    mlm = gen_mlm_corpus([p.tgt_text for p in pairs[:4]], vocab, seed=7)
    rs = gen_rs(dialogs, RsConfig(per_side_max=32), 7, vocab)[:4]
    dst = [(encode("i want thai food in the north", vocab), {("restaurant", "food"): "thai",
                                                            ("restaurant", "area"): "north"}),
           (encode("greek", vocab), {("restaurant", "food"): "greek", ("restaurant", "area"): "dontcare"})]
    return onto, mlm, rs, dst


def test_criterion_7_gradient_checks(report, vocab, world):
    t = time.perf_counter()
    onto, mlm, rs, dst = _grad_items(vocab, world)
    p = ModelParams.init(EncoderConfig(len(vocab), d=32, h=64, max_len=128), seed=7, ontology=onto)
    rng = np.random.default_rng(7)
    for k in p.names():
        # heads start at zero; perturb them so every path carries gradient
        if k.startswith("dst/") or k.startswith("rs_"):
            p.arrays[k][:] = rng.normal(0, 0.5, p.arrays[k].shape)
    errs = {obj: grad_check(p, items, obj, n_coords=120, seed=7) for obj, items in
            (("mlm", mlm), ("rs", rs), ("dst", dst))}
    dt = time.perf_counter() - t
    ok = all(e <= 1e-4 for e in errs.values()) and dt < 60
    report(7, ok, "max rel err " + ", ".join(f"{k}={v:.2e}" for k, v in errs.items()) + f", 120 coords each, {dt:.1f}s")


def test_criterion_8_desk_scale_learnability(report, tmp_path):
    t = time.perf_counter()
    data = write_workspace(tmp_path, seed=0)
    vocab = Vocab.load(tmp_path / "vocab.txt")
    schedule = ["tlm@os", "rs_mono@os"]
    scores = {}
    spec_manifest = None
    for task in ("dst", "rr"):
        for sched in ((), schedule):
            m = write_manifest(tmp_path / f"{task}-{len(sched)}.json", toy_manifest(data, task, sched))
            scores[task, bool(sched)] = run_experiment(m, cache_dir=tmp_path / "cache").value
            if sched:
                spec_manifest = m
    ckpt = specialize(spec_manifest, vocab, spec_manifest.train_config(), cache_dir=tmp_path / "cache")
    dialogs = segment_dialogs(read_parallel_pairs(tmp_path / "os.tsv"), 2, 15, seed=0)[0]
    held_out = subtitle_rr_pairs(_split_os(dialogs, 0)[1], "mono")
    heldout_rr = evaluate_pairs_rr(ckpt.params, held_out, vocab, n=100, seed=0, per_side_max=64).recall
    dt = time.perf_counter() - t
    dst_ok = scores["dst", True] > scores["dst", False]
    rr_ok = scores["rr", True] > scores["rr", False]
    ok = heldout_rr >= 0.30 and dst_ok and rr_ok and dt < 600
    report(8, ok, f"held-out R100@1={heldout_rr:.3f}; 1%-shot JGA spec {scores['dst', True]:.4f} vs base "
                  f"{scores['dst', False]:.4f}; 1%-shot R100@1 spec {scores['rr', True]:.4f} vs base "
                  f"{scores['rr', False]:.4f}; {dt:.0f}s")


def test_criterion_9_split_sizes(report):
    ids = [f"dev{i:04d}" for i in range(1000)]
    sizes = [len(make_fewshot_split(ids, SplitSpec(p, 0))) for p in SHOT_LADDER]
    report(9, sizes == [10, 50, 100, 500, 1000], f"sizes {sizes}")


def test_criterion_10_early_stopping(report, vocab):
    p = ModelParams.init(EncoderConfig(len(vocab), d=8, h=12, max_len=64), seed=10)
    items = gen_mlm_corpus(["i want thai food", "in the north", "any price"], vocab, seed=10)
    results, ok = [], True
    for patience in (3, 10):
        scores = iter(-np.arange(100.0))
        snapshots = []

        def dev(params):
            snapshots.append(params.copy())
            return float(next(scores))

        ck = train(p, [Stage("mlm", items, dev, batch_size=3, lr=1e-2, patience=patience, max_epochs=50)])
        st = ck.provenance["stages"][0]
        ok &= st["epochs_run"] == patience + 1 and st["best_epoch"] == 1 and ck.params.equals(snapshots[0])
        results.append(f"patience {patience}: {st['epochs_run']} epochs, best {st['best_epoch']}")
    report(10, ok, "; ".join(results))
