import numpy as np
import pytest

from convspec.dialog import Ontology
from convspec.encoder import (Batch, EncoderConfig, ModelParams, ShapeError, Stage, TrainConfig, TrainingDiverged,
                              forward_dst, forward_mlm, forward_rs, grad_check, load_checkpoint, make_batch,
                              rank_scores, save_checkpoint, score_candidates, train, Checkpoint)
from convspec.instances import MaskingConfig, RsConfig, gen_mlm_corpus, gen_rs, gen_tlm_corpus
from convspec.tokenizer import encode

ONTO = Ontology({("restaurant", "food"): ["thai", "greek"], ("restaurant", "area"): ["north"]})


@pytest.fixture(scope="module")
def small(vocab):
    return ModelParams.init(EncoderConfig(len(vocab), d=8, h=12, max_len=128), seed=1, ontology=ONTO)


@pytest.fixture(scope="module")
def mlm_items(os_pairs, vocab):
    return gen_mlm_corpus([p.tgt_text for p in os_pairs[:16]], vocab, seed=0)


@pytest.fixture(scope="module")
def rs_items(os_dialogs, vocab):
    return gen_rs(os_dialogs[:20], RsConfig(per_side_max=32), 0, vocab)


def dst_items(vocab):
    return [(encode("i want thai food", vocab), {("restaurant", "food"): "thai"}),
            (encode("in the north", vocab), {("restaurant", "area"): "north"}),
            (encode("greek", vocab), {("restaurant", "food"): "greek", ("restaurant", "area"): "dontcare"})]


def test_init_is_seeded(vocab):
    cfg = EncoderConfig(len(vocab), d=8, h=12, max_len=32)
    assert ModelParams.init(cfg, 3).equals(ModelParams.init(cfg, 3))
    assert not ModelParams.init(cfg, 3).equals(ModelParams.init(cfg, 4))


def test_shape_checks(small, vocab):
    arrays = dict(small.arrays)
    arrays["tok"] = arrays["tok"][:5]
    with pytest.raises(ShapeError):
        ModelParams(small.config, arrays, ONTO)
    long = encode(" ".join(["thai"] * 200), vocab, 256)
    with pytest.raises(ShapeError):
        forward_dst(small, long)


@pytest.mark.parametrize("tie", [False, True])
def test_grad_check_mlm(vocab, mlm_items, tie):
    p = ModelParams.init(EncoderConfig(len(vocab), d=8, h=12, max_len=128, tie_mlm=tie), seed=2)
    assert grad_check(p, mlm_items[:4], "mlm", n_coords=150, seed=0) <= 1e-4


def test_grad_check_rs(small, rs_items):
    p = small.copy()
    p.arrays["rs_w"][:] = np.random.default_rng(0).normal(0, 0.5, p.arrays["rs_w"].shape)
    assert grad_check(p, rs_items[:6], "rs", n_coords=150, seed=0) <= 1e-4


def random_heads(p):
    p = p.copy()
    rng = np.random.default_rng(1)
    for k in p.names():
        if k.startswith("dst/"):
            p.arrays[k][:] = rng.normal(0, 0.5, p.arrays[k].shape)
    return p


def test_grad_check_dst(small, vocab):
    assert grad_check(random_heads(small), dst_items(vocab), "dst", n_coords=150, seed=0) <= 1e-4


def test_grad_check_epsilon_bounds(small, vocab):
    with pytest.raises(ValueError):
        grad_check(small, dst_items(vocab), "dst", epsilon=1e-2)


def test_grad_check_catches_wrong_gradient(small, vocab):
    batch = make_batch(dst_items(vocab), 128, "dst", ONTO)
    from convspec.encoder import loss_and_grad

    def wrong(p):
        loss, g = loss_and_grad(p, "dst", batch)
        return loss, {k: v * 1.5 for k, v in g.items()}

    assert grad_check(random_heads(small), None, wrong, n_coords=40) > 0.1


def test_dst_hand_set_logits(small, vocab):
    p = small.copy()
    for k in p.names():
        if k.startswith("dst/"):
            p.arrays[k][:] = 0.0
    p.arrays["dst/restaurant-food/b"][:] = [0.0, 0.1, 0.3, 2.0]  # none, dontcare, thai, greek
    p.arrays["dst/restaurant-area/b"][:] = [0.5, 3.0, 0.0]
    dists, pred = forward_dst(p, encode("anything", vocab))
    assert pred == {("restaurant", "food"): "greek", ("restaurant", "area"): "dontcare"}
    assert np.isclose(dists[("restaurant", "food")].sum(), 1.0)
    with pytest.raises(KeyError):
        forward_dst(p, encode("x", vocab), Ontology({("hotel", "area"): ["x"]}))


def test_forward_rs_and_ranking(small, rs_items, vocab):
    prob, loss = forward_rs(small, rs_items[0])
    assert prob == 0.5 and np.isclose(loss, np.log(2))  # zero-initialised head
    assert rank_scores([0.2, 0.9, 0.2, 0.5]) == [1, 3, 0, 2]
    assert score_candidates(small, "a", ["b", "c", "d"], vocab) == [0, 1, 2]
    with pytest.raises(ValueError):
        score_candidates(small, "a", ["b"], vocab, n=100)


def test_forward_mlm_distributions(small, mlm_items):
    probs, loss = forward_mlm(small, mlm_items[:2])
    assert probs.shape[1] == small.config.vocab_size and np.allclose(probs.sum(1), 1.0)
    assert loss > 0


def test_memorizes_small_mlm_set(vocab, mlm_items):
    p = ModelParams.init(EncoderConfig(len(vocab), d=16, h=32, max_len=128), seed=0)
    ck = train(p, [Stage("mlm", mlm_items, None, batch_size=16, lr=1e-2, patience=200, max_epochs=200)])
    losses = ck.provenance["stages"][0]["train_loss"]
    assert min(losses) < 0.1 * losses[0]


def test_memorizes_small_rs_set(vocab, rs_items):
    p = ModelParams.init(EncoderConfig(len(vocab), d=16, h=32, max_len=128), seed=0)
    ck = train(p, [Stage("rs", rs_items[:64], None, batch_size=32, lr=1e-2, patience=200, max_epochs=200)])
    losses = ck.provenance["stages"][0]["train_loss"]
    assert min(losses) < 0.1 * losses[0]


@pytest.mark.parametrize("patience", [3, 10])
def test_early_stopping_on_worsening_dev(small, vocab, patience):
    scores = iter(-np.arange(100.0))
    calls = []

    def dev(p):
        calls.append(p.copy())
        return next(scores)

    stage = Stage("dst", dst_items(vocab), dev, batch_size=3, lr=1e-2, patience=patience, max_epochs=50)
    ck = train(small, [stage])
    st = ck.provenance["stages"][0]
    assert st["epochs_run"] == patience + 1 and st["best_epoch"] == 1
    assert ck.params.equals(calls[0])


def test_best_epoch_parameters_kept(small, vocab):
    curve = iter([0.1, 0.5, 0.3, 0.2, 0.1])
    seen = []

    def dev(p):
        seen.append(p.copy())
        return next(curve)

    ck = train(small, [Stage("dst", dst_items(vocab), dev, batch_size=3, lr=1e-2, patience=3, max_epochs=5)])
    assert ck.provenance["stages"][0]["best_epoch"] == 2 and ck.params.equals(seen[1])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_detected(small, vocab):
    p = small.copy()
    p.arrays["dst/restaurant-food/b"][0] = np.inf
    with pytest.raises(TrainingDiverged, match="stage 0"):
        train(p, [Stage("dst", dst_items(vocab), None, batch_size=3, max_epochs=1)])


def test_training_is_deterministic(vocab, os_dialogs):
    cfg = EncoderConfig(len(vocab), d=8, h=12, max_len=256)

    def run():
        data = lambda e: gen_tlm_corpus(os_dialogs[:10], vocab, seed=e)
        return train(ModelParams.init(cfg, 0), [Stage("tlm", data, None, batch_size=8, lr=1e-3, max_epochs=2)],
                     TrainConfig(seed=5))

    a, b = run(), run()
    assert a.params.equals(b.params) and a.provenance == b.provenance


def test_checkpoint_roundtrip(tmp_path, small):
    ck = Checkpoint(small, {"seed": 1, "stages": [{"name": "x"}]})
    save_checkpoint(tmp_path / "m.ckpt", ck)
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.params.equals(small) and back.provenance == ck.provenance
    assert (tmp_path / "m.ckpt").read_bytes()[:8] == b"CVSPCKPT"
    (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(downstream_lr=0)
    with pytest.raises(ValueError):
        TrainConfig(patience_rs=40)
    cfg = TrainConfig()
    assert cfg.stage_defaults("rs", "specialization")["patience"] == 10
    assert cfg.stage_defaults("mlm", "specialization")["patience"] == 3
    assert TrainConfig.from_json(cfg.to_json()) == cfg


def test_with_dst_heads_keeps_or_resets(small):
    p = small.copy()
    p.arrays["dst/restaurant-area/b"][:] = 1.0
    assert p.with_dst_heads(ONTO)["dst/restaurant-area/b"].sum() == 3.0
    assert p.with_dst_heads(ONTO, keep_existing=False)["dst/restaurant-area/b"].sum() == 0.0
