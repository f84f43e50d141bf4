"""Desk-scale reference encoder with MLM/TLM, RS and DST heads.

A single post-norm transformer block in float64 numpy with a hand-written
backward pass::

    x   = tok[ids] + pos[t] + seg[type]
    h1  = LN(x + Attn(x))                 single head, pad keys masked
    out = LN(h1 + W2 gelu(W1 h1 + b1) + b2)

Heads

* MLM: ``out @ mlm_w + mlm_b`` (optionally tied: ``out @ tok.T + mlm_b``)
* RS:  with ``c``/``r`` the mean of ``out`` over the non-pad context (type 0)
  and response (type 1) positions, ``logit = rs_w . [c*r, (c-r)**2] + rs_b``
* DST: mean of ``out`` over all non-pad positions, then one linear softmax
  classifier per (domain, slot) over its ontology values.

Checkpoint file layout (all integers little-endian)::

    b"CVSPCKPT"  u32 version  u64 header_len  header (UTF-8 JSON)
    float64 LE data, arrays concatenated row-major in header order
    u64 provenance_len  provenance (UTF-8 JSON)

The header holds the model config, the ontology, and ``[name, shape]`` for each
array.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, Union

import numpy as np

from ._util import rng_for
from .dialog import Ontology, join_key
from .instances import TrainingInstance
from .tokenizer import PAD, TokenSequence

CHECKPOINT_MAGIC = b"CVSPCKPT"
CHECKPOINT_VERSION = 1

_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d: int = 32
    h: int = 64
    max_len: int = 256
    tie_mlm: bool = False


def _dst_name(key, part: str) -> str:
    return f"dst/{join_key(key)}/{part}"


class ModelParams:
    """Named float64 arrays plus the config and (optional) DST ontology."""

    def __init__(self, config: EncoderConfig, arrays: dict[str, np.ndarray], ontology: Ontology | None = None):
        self.config = config
        self.arrays = arrays
        self.ontology = ontology
        self._check()

    def _check(self):
        c = self.config
        V, d, h, L = c.vocab_size, c.d, c.h, c.max_len
        expected = {
            "tok": (V, d), "pos": (L, d), "seg": (2, d),
            "att_q": (d, d), "att_k": (d, d), "att_v": (d, d), "att_o": (d, d),
            "ln1_g": (d,), "ln1_b": (d,),
            "ffn_w1": (d, h), "ffn_b1": (h,), "ffn_w2": (h, d), "ffn_b2": (d,),
            "ln2_g": (d,), "ln2_b": (d,),
            "mlm_b": (V,), "rs_w": (2 * d,), "rs_b": (1,),
        }
        if not c.tie_mlm:
            expected["mlm_w"] = (d, V)
        if self.ontology is not None:
            for key in self.ontology.keys():
                n = len(self.ontology.values(key))
                expected[_dst_name(key, "w")] = (d, n)
                expected[_dst_name(key, "b")] = (n,)
        for name, shape in expected.items():
            if name not in self.arrays:
                raise ShapeError(f"missing parameter {name}")
            if self.arrays[name].shape != shape:
                raise ShapeError(f"{name}: shape {self.arrays[name].shape}, expected {shape}")
        extra = set(self.arrays) - set(expected)
        if extra:
            raise ShapeError(f"unexpected parameters: {sorted(extra)}")

    @classmethod
    def init(cls, config: EncoderConfig, seed=0, ontology: Ontology | None = None) -> "ModelParams":
        rng = rng_for("init", seed)
        d, h, V, L = config.d, config.h, config.vocab_size, config.max_len

        def normal(shape, std):
            return rng.normal(0.0, std, size=shape)

        a = {
            "tok": normal((V, d), 0.1),
            "pos": normal((L, d), 0.1),
            "seg": normal((2, d), 0.1),
            "att_q": normal((d, d), 1 / math.sqrt(d)),
            "att_k": normal((d, d), 1 / math.sqrt(d)),
            "att_v": normal((d, d), 1 / math.sqrt(d)),
            "att_o": normal((d, d), 1 / math.sqrt(d)),
            "ln1_g": np.ones(d), "ln1_b": np.zeros(d),
            "ffn_w1": normal((d, h), 1 / math.sqrt(d)), "ffn_b1": np.zeros(h),
            "ffn_w2": normal((h, d), 1 / math.sqrt(h)), "ffn_b2": np.zeros(d),
            "ln2_g": np.ones(d), "ln2_b": np.zeros(d),
            "mlm_b": np.zeros(V),
            "rs_w": np.zeros(2 * d), "rs_b": np.zeros(1),
        }
        if not config.tie_mlm:
            a["mlm_w"] = normal((d, V), 1 / math.sqrt(d))
        params = cls(config, a, None)
        if ontology is not None:
            params = params.with_dst_heads(ontology)
        return params

    def with_dst_heads(self, ontology: Ontology, keep_existing: bool = True) -> "ModelParams":
        """Copy with zero-initialized DST heads for ``ontology`` (existing heads kept if shapes match)."""
        arrays = {k: v.copy() for k, v in self.arrays.items() if not k.startswith("dst/")}
        for key in ontology.keys():
            n = len(ontology.values(key))
            for part, shape in (("w", (self.config.d, n)), ("b", (n,))):
                name = _dst_name(key, part)
                old = self.arrays.get(name)
                if keep_existing and old is not None and old.shape == shape:
                    arrays[name] = old.copy()
                else:
                    arrays[name] = np.zeros(shape)
        return ModelParams(self.config, arrays, ontology)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()}, self.ontology)

    def names(self) -> list[str]:
        return sorted(self.arrays)

    def n_parameters(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.arrays.values())

    def __getitem__(self, name):
        return self.arrays[name]

    def equals(self, other: "ModelParams") -> bool:
        """Bit-for-bit equality of config and every array."""
        return (self.config == other.config and self.names() == other.names()
                and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)
                and self.ontology == other.ontology)


# ---------------------------------------------------------------------------
# batching

@dataclass
class Batch:
    ids: np.ndarray       # (B, T) int
    types: np.ndarray     # (B, T) int
    valid: np.ndarray     # (B, T) bool
    mlm_pos: np.ndarray | None = None    # (M, 2) [row, position]
    mlm_tgt: np.ndarray | None = None    # (M,)
    rs_y: np.ndarray | None = None       # (B,) float
    dst_y: np.ndarray | None = None      # (B, n_keys) int


def _pad(seqs: Sequence[TokenSequence], max_len: int):
    T = max(len(s) for s in seqs)
    if T > max_len:
        raise ShapeError(f"sequence of length {T} exceeds max_len {max_len}")
    B = len(seqs)
    ids = np.full((B, T), PAD, dtype=np.int64)
    types = np.zeros((B, T), dtype=np.int64)
    valid = np.zeros((B, T), dtype=bool)
    for b, s in enumerate(seqs):
        n = len(s)
        ids[b, :n] = s.ids
        types[b, :n] = s.type_ids
        valid[b, :n] = True
    return ids, types, valid


def make_batch(instances: Sequence, max_len: int, objective: str | None = None,
               ontology: Ontology | None = None) -> Batch:
    """Collate instances. For DST, items are ``(TokenSequence, {key: value})`` pairs."""
    if objective == "dst":
        seqs = [s for s, _ in instances]
        ids, types, valid = _pad(seqs, max_len)
        keys = ontology.keys()
        y = np.zeros((len(instances), len(keys)), dtype=np.int64)
        for b, (_, state) in enumerate(instances):
            for j, key in enumerate(keys):
                y[b, j] = ontology.index(key, state.get(key, "none"))
        return Batch(ids, types, valid, dst_y=y)
    seqs = [inst.tokens for inst in instances]
    ids, types, valid = _pad(seqs, max_len)
    batch = Batch(ids, types, valid)
    kinds = {inst.kind for inst in instances}
    if kinds <= {"mlm", "tlm"}:
        pos = [(b, p) for b, inst in enumerate(instances) for p, _ in inst.mlm_labels]
        tgt = [t for inst in instances for _, t in inst.mlm_labels]
        batch.mlm_pos = np.array(pos, dtype=np.int64).reshape(-1, 2)
        batch.mlm_tgt = np.array(tgt, dtype=np.int64)
    elif kinds == {"rs"}:
        batch.rs_y = np.array([1.0 if inst.rs_label else 0.0 for inst in instances])
    else:
        raise ShapeError(f"cannot batch instance kinds {sorted(kinds)} together")
    return batch


# ---------------------------------------------------------------------------
# encoder forward / backward

def _layer_norm(z, g, b, eps=1e-5):
    mu = z.mean(-1, keepdims=True)
    var = ((z - mu) ** 2).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (z - mu) * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_back(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0)
    db = dy.reshape(-1, xhat.shape[-1]).sum(0)
    dxhat = dy * g
    dz = inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dz, dg, db


def _gelu(u):
    u2 = u * u
    t = np.tanh(_GELU_C * u * (1.0 + 0.044715 * u2))
    return 0.5 * u * (1.0 + t), t


def _gelu_back(u, t):
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 0.134145 * u * u)


def _softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _encode(p: ModelParams, batch: Batch):
    a = p.arrays
    B, T = batch.ids.shape
    if T > p.config.max_len:
        raise ShapeError(f"sequence length {T} exceeds max_len {p.config.max_len}")
    if batch.ids.max(initial=0) >= p.config.vocab_size or batch.ids.min(initial=0) < 0:
        raise ShapeError("token id outside the vocabulary")
    d = p.config.d
    x = a["tok"][batch.ids] + a["pos"][:T][None] + a["seg"][batch.types]
    q, k, v = x @ a["att_q"], x @ a["att_k"], x @ a["att_v"]
    s = q @ k.transpose(0, 2, 1) / math.sqrt(d)
    s = np.where(batch.valid[:, None, :], s, -np.inf)
    att = _softmax(s)
    ctx = att @ v
    o = ctx @ a["att_o"]
    h1, ln1 = _layer_norm(x + o, a["ln1_g"], a["ln1_b"])
    u = h1 @ a["ffn_w1"] + a["ffn_b1"]
    gu, t = _gelu(u)
    f = gu @ a["ffn_w2"] + a["ffn_b2"]
    out, ln2 = _layer_norm(h1 + f, a["ln2_g"], a["ln2_b"])
    cache = dict(x=x, q=q, k=k, v=v, att=att, ctx=ctx, h1=h1, ln1=ln1, u=u, gu=gu, t=t, ln2=ln2)
    return out, cache


def _encode_back(p: ModelParams, batch: Batch, cache, dout, grads):
    a = p.arrays
    d = p.config.d
    B, T = batch.ids.shape

    def acc(name, g):
        grads[name] = grads.get(name, 0) + g

    def flat(x):
        return x.reshape(-1, x.shape[-1])

    dz2, dg, db = _layer_norm_back(dout, a["ln2_g"], cache["ln2"])
    acc("ln2_g", dg)
    acc("ln2_b", db)
    dh1 = dz2.copy()
    acc("ffn_w2", flat(cache["gu"]).T @ flat(dz2))
    acc("ffn_b2", flat(dz2).sum(0))
    du = (dz2 @ a["ffn_w2"].T) * _gelu_back(cache["u"], cache["t"])
    acc("ffn_w1", flat(cache["h1"]).T @ flat(du))
    acc("ffn_b1", flat(du).sum(0))
    dh1 += du @ a["ffn_w1"].T

    dz1, dg, db = _layer_norm_back(dh1, a["ln1_g"], cache["ln1"])
    acc("ln1_g", dg)
    acc("ln1_b", db)
    dx = dz1.copy()
    acc("att_o", flat(cache["ctx"]).T @ flat(dz1))
    dctx = dz1 @ a["att_o"].T
    att = cache["att"]
    datt = dctx @ cache["v"].transpose(0, 2, 1)
    dv = att.transpose(0, 2, 1) @ dctx
    ds = att * (datt - (datt * att).sum(-1, keepdims=True)) / math.sqrt(d)
    dq = ds @ cache["k"]
    dk = ds.transpose(0, 2, 1) @ cache["q"]
    x = cache["x"]
    acc("att_q", flat(x).T @ flat(dq))
    acc("att_k", flat(x).T @ flat(dk))
    acc("att_v", flat(x).T @ flat(dv))
    dx += dq @ a["att_q"].T + dk @ a["att_k"].T + dv @ a["att_v"].T

    dtok = np.zeros_like(a["tok"])
    np.add.at(dtok, batch.ids.reshape(-1), flat(dx))
    acc("tok", dtok)
    dpos = np.zeros_like(a["pos"])
    dpos[:T] = dx.sum(0)
    acc("pos", dpos)
    dseg = np.zeros_like(a["seg"])
    np.add.at(dseg, batch.types.reshape(-1), flat(dx))
    acc("seg", dseg)


def _masked_mean(out, mask):
    m = mask.astype(float)
    n = m.sum(1, keepdims=True)
    if (n == 0).any():
        raise ShapeError("pooling over an empty segment")
    return (out * m[:, :, None]).sum(1) / n, m / n


# ---------------------------------------------------------------------------
# objectives

def _mlm_weights(p: ModelParams):
    return p.arrays["tok"].T if p.config.tie_mlm else p.arrays["mlm_w"]


def _mlm(p: ModelParams, batch: Batch, need_grad: bool):
    if batch.mlm_pos is None or len(batch.mlm_pos) == 0:
        raise ShapeError("batch has no masked positions")
    out, cache = _encode(p, batch)
    rows, cols = batch.mlm_pos[:, 0], batch.mlm_pos[:, 1]
    hm = out[rows, cols]
    W = _mlm_weights(p)
    logits = hm @ W + p.arrays["mlm_b"]
    z = logits - logits.max(-1, keepdims=True)
    logz = np.log(np.exp(z).sum(-1))
    M = len(rows)
    logp_true = z[np.arange(M), batch.mlm_tgt] - logz
    loss = float(-logp_true.mean())
    probs = np.exp(z - logz[:, None])
    if not need_grad:
        return loss, probs, None
    dlogits = probs.copy()
    dlogits[np.arange(M), batch.mlm_tgt] -= 1.0
    dlogits /= M
    grads: dict[str, np.ndarray] = {"mlm_b": dlogits.sum(0)}
    dW = hm.T @ dlogits
    if p.config.tie_mlm:
        grads["tok"] = dW.T
    else:
        grads["mlm_w"] = dW
    dout = np.zeros_like(out)
    np.add.at(dout, (rows, cols), dlogits @ W.T)
    _encode_back(p, batch, cache, dout, grads)
    return loss, probs, grads


def _softplus(x):
    return np.logaddexp(0.0, x)


def _rs(p: ModelParams, batch: Batch, need_grad: bool):
    out, cache = _encode(p, batch)
    c, wc = _masked_mean(out, batch.valid & (batch.types == 0))
    r, wr = _masked_mean(out, batch.valid & (batch.types == 1))
    feats = np.concatenate([c * r, (c - r) ** 2], axis=1)
    logit = feats @ p.arrays["rs_w"] + p.arrays["rs_b"][0]
    prob = 1.0 / (1.0 + np.exp(-logit))
    y = batch.rs_y if batch.rs_y is not None else np.zeros(len(logit))
    per = np.where(y > 0.5, _softplus(-logit), _softplus(logit))
    loss = float(per.mean())
    if not need_grad:
        return loss, prob, None
    B = len(logit)
    dlogit = (prob - y) / B
    grads = {"rs_w": feats.T @ dlogit, "rs_b": np.array([dlogit.sum()])}
    d = p.config.d
    dfeat = dlogit[:, None] * p.arrays["rs_w"][None]
    dprod, dsq = dfeat[:, :d], dfeat[:, d:]
    dc = dprod * r + dsq * 2 * (c - r)
    dr = dprod * c - dsq * 2 * (c - r)
    dout = wc[:, :, None] * dc[:, None, :] + wr[:, :, None] * dr[:, None, :]
    _encode_back(p, batch, cache, dout, grads)
    return loss, prob, grads


def _dst(p: ModelParams, batch: Batch, need_grad: bool):
    if p.ontology is None:
        raise ShapeError("model has no DST heads")
    out, cache = _encode(p, batch)
    pooled, w = _masked_mean(out, batch.valid)
    B = len(pooled)
    dists = {}
    loss = 0.0
    grads: dict[str, np.ndarray] = {}
    dpooled = np.zeros_like(pooled)
    for j, key in enumerate(p.ontology.keys()):
        W, b = p.arrays[_dst_name(key, "w")], p.arrays[_dst_name(key, "b")]
        logits = pooled @ W + b
        z = logits - logits.max(-1, keepdims=True)
        logz = np.log(np.exp(z).sum(-1))
        probs = np.exp(z - logz[:, None])
        dists[key] = probs
        if batch.dst_y is not None:
            yj = batch.dst_y[:, j]
            loss += float(-(z[np.arange(B), yj] - logz).sum() / B)
            if need_grad:
                dl = probs.copy()
                dl[np.arange(B), yj] -= 1.0
                dl /= B
                grads[_dst_name(key, "w")] = pooled.T @ dl
                grads[_dst_name(key, "b")] = dl.sum(0)
                dpooled += dl @ W.T
    if not need_grad:
        return loss, dists, None
    dout = w[:, :, None] * dpooled[:, None, :]
    _encode_back(p, batch, cache, dout, grads)
    return loss, dists, grads


_OBJECTIVES = {"mlm": _mlm, "tlm": _mlm, "rs": _rs, "dst": _dst}


def loss_and_grad(p: ModelParams, objective: str, batch: Batch):
    """Mean batch loss and a gradient dict (zeros omitted)."""
    loss, _, grads = _OBJECTIVES[objective](p, batch, True)
    return loss, grads


def batch_loss(p: ModelParams, objective: str, batch: Batch) -> float:
    return _OBJECTIVES[objective](p, batch, False)[0]


# ---------------------------------------------------------------------------
# public forward passes

def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def forward_mlm(p: ModelParams, instance: TrainingInstance | Sequence[TrainingInstance]):
    """Distributions over the vocabulary at each masked position, and the mean NLL."""
    insts = _as_list(instance)
    if any(i.kind not in ("mlm", "tlm") for i in insts):
        raise ShapeError("forward_mlm needs mlm/tlm instances")
    batch = make_batch(insts, p.config.max_len)
    loss, probs, _ = _mlm(p, batch, False)
    return probs, loss


def forward_rs(p: ModelParams, instance: TrainingInstance | Sequence[TrainingInstance]):
    """Probability that the response follows the context, and the mean BCE loss."""
    insts = _as_list(instance)
    if any(i.kind != "rs" for i in insts):
        raise ShapeError("forward_rs needs rs instances")
    batch = make_batch(insts, p.config.max_len)
    loss, prob, _ = _rs(p, batch, False)
    if not isinstance(instance, (list, tuple)):
        return float(prob[0]), loss
    return prob, loss


def rs_probabilities(p: ModelParams, seqs: Sequence[TokenSequence], batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(seqs), batch_size):
        ids, types, valid = _pad(seqs[i: i + batch_size], p.config.max_len)
        _, prob, _ = _rs(p, Batch(ids, types, valid), False)
        out.append(prob)
    return np.concatenate(out)


def forward_dst(p: ModelParams, context_tokens: TokenSequence | Sequence[TokenSequence],
                ontology: Ontology | None = None):
    """Per-key value distributions and the argmax state.

    Returns ``(distributions, predicted)``; for a single sequence these are
    ``{key: probs}`` and ``{key: value}``, for a list they are lists.
    """
    if ontology is not None and p.ontology is not None:
        unknown = [k for k in ontology.keys() if k not in p.ontology]
        if unknown:
            raise KeyError(f"no DST head for {', '.join(join_key(k) for k in unknown)}")
    onto = p.ontology
    if onto is None:
        raise ShapeError("model has no DST heads")
    single = isinstance(context_tokens, TokenSequence)
    seqs = [context_tokens] if single else list(context_tokens)
    ids, types, valid = _pad(seqs, p.config.max_len)
    _, dists, _ = _dst(p, Batch(ids, types, valid), False)
    keys = ontology.keys() if ontology is not None else onto.keys()
    per_seq = [{k: dists[k][b] for k in keys} for b in range(len(seqs))]
    preds = [{k: onto.values(k)[int(np.argmax(dd[k]))] for k in keys} for dd in per_seq]
    if single:
        return per_seq[0], preds[0]
    return per_seq, preds


def score_candidates(p: ModelParams, context: str, candidates: Sequence[str], vocab,
                     per_side_max: int = 128, n: int | None = None) -> list[int]:
    """Candidate indices ordered by RS probability, highest first; ties keep index order."""
    from .tokenizer import encode_pair

    if n is not None and len(candidates) != n:
        raise ValueError(f"expected {n} candidates, got {len(candidates)}")
    seqs = [encode_pair(context, c, vocab, per_side_max) for c in candidates]
    prob = rs_probabilities(p, seqs)
    return rank_scores(prob)


def rank_scores(scores) -> list[int]:
    return np.argsort(-np.asarray(scores, dtype=float), kind="stable").tolist()


# ---------------------------------------------------------------------------
# optimizer and training

class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, p: ModelParams, grads: dict[str, np.ndarray]):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1 - b1 ** self.t
        corr2 = 1 - b2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.arrays[name] -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; defaults are the reference fine-tuning setup.

    ``pretrain_effective_batch`` (8) describes the original conversational
    pretraining of the base model and is not used by the desk-scale trainer.
    """

    specialization_lr_grid: tuple[float, ...] = (1e-4, 1e-5, 1e-6)
    specialization_lr: float = 1e-4
    downstream_lr: float = 5e-5
    batch_mlm: int = 16
    batch_rs: int = 32
    batch_dst: int = 6
    batch_rr: int = 24
    patience_mlm: int = 3
    patience_rs: int = 10
    patience_downstream: int = 10
    max_epochs_specialization: int = 30
    max_epochs_zero_shot: int = 300
    max_epochs_few_shot: int = 15
    pretrain_effective_batch: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        for name in ("specialization_lr", "downstream_lr", "batch_mlm", "batch_rs", "batch_dst", "batch_rr",
                     "patience_mlm", "patience_rs", "patience_downstream", "max_epochs_specialization",
                     "max_epochs_zero_shot", "max_epochs_few_shot"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patience_mlm > self.max_epochs_specialization or self.patience_rs > self.max_epochs_specialization:
            raise ValueError("patience exceeds max epochs")

    def stage_defaults(self, objective: str, phase: str = "specialization") -> dict:
        """Batch size, learning rate, patience and epoch cap for a stage.

        ``phase`` is ``specialization``, ``zero_shot`` (source-language task
        fine-tuning) or ``few_shot`` (target-language fine-tuning).
        """
        if phase == "specialization":
            batch = self.batch_rs if objective == "rs" else self.batch_mlm
            patience = self.patience_rs if objective == "rs" else self.patience_mlm
            return dict(batch_size=batch, lr=self.specialization_lr, patience=patience,
                        max_epochs=self.max_epochs_specialization)
        batch = self.batch_dst if objective == "dst" else self.batch_rr
        max_epochs = self.max_epochs_zero_shot if phase == "zero_shot" else self.max_epochs_few_shot
        return dict(batch_size=batch, lr=self.downstream_lr, patience=self.patience_downstream,
                    max_epochs=max_epochs)

    def to_json(self) -> dict:
        from dataclasses import asdict
        d = asdict(self)
        d["specialization_lr_grid"] = list(d["specialization_lr_grid"])
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        if "specialization_lr_grid" in obj:
            obj["specialization_lr_grid"] = tuple(obj["specialization_lr_grid"])
        return cls(**obj)


DataStream = Union[Sequence, Callable[[int], Sequence]]


@dataclass
class Stage:
    """One training stage: an objective, its data and how to score the dev set.

    ``data`` may be a callable taking the 1-based epoch, which is how dynamic
    masking is done (fresh masking seed per epoch). ``dev`` is either a
    callable ``params -> score`` (higher is better) or a list of dev items
    whose negated mean loss is the score.
    """

    objective: str
    data: DataStream
    dev: Callable[[ModelParams], float] | Sequence | None = None
    batch_size: int = 16
    lr: float = 1e-4
    patience: int = 3
    max_epochs: int = 30
    name: str = ""


@dataclass
class Checkpoint:
    params: ModelParams
    provenance: dict = field(default_factory=dict)


def _epoch_data(stage: Stage, epoch: int):
    data = stage.data(epoch) if callable(stage.data) else stage.data
    if len(data) == 0:
        raise ValueError(f"stage {stage.name or stage.objective}: empty training stream")
    return data


def _batches(p: ModelParams, stage: Stage, items, order):
    onto = p.ontology if stage.objective == "dst" else None
    for i in range(0, len(order), stage.batch_size):
        chunk = [items[j] for j in order[i: i + stage.batch_size]]
        yield make_batch(chunk, p.config.max_len, stage.objective, onto)


def evaluate_loss(p: ModelParams, objective: str, items, batch_size: int = 64) -> float:
    total, n = 0.0, 0
    order = np.arange(len(items))
    stage = Stage(objective, items, batch_size=batch_size)
    for batch in _batches(p, stage, items, order):
        w = len(batch.mlm_tgt) if objective in ("mlm", "tlm") else len(batch.ids)
        total += batch_loss(p, objective, batch) * w
        n += w
    return total / n


def train(params: ModelParams, schedule: Sequence[Stage], cfg: TrainConfig = TrainConfig(),
          log: Callable[[str], None] | None = None) -> Checkpoint:
    """Run stages in order with per-stage early stopping; keep best-dev parameters.

    Each stage starts a fresh Adam state. A stage stops once its dev score has
    not improved for ``patience`` consecutive epochs, and the parameters of
    the best epoch are carried into the next stage.
    """
    p = params.copy()
    history = []
    for si, stage in enumerate(schedule):
        opt = Adam(stage.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        best_score, best_epoch, best = -np.inf, 0, p.copy()
        bad = 0
        curve, losses = [], []
        epoch = 0
        for epoch in range(1, stage.max_epochs + 1):
            items = _epoch_data(stage, epoch)
            order = rng_for(cfg.seed, "shuffle", si, epoch).permutation(len(items))
            total, steps = 0.0, 0
            for step, batch in enumerate(_batches(p, stage, items, order)):
                loss, grads = loss_and_grad(p, stage.objective, batch)
                if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                    raise TrainingDiverged(
                        f"stage {si} ({stage.name or stage.objective}), epoch {epoch}, step {step}: "
                        f"non-finite loss/gradient (loss={loss})")
                opt.step(p, grads)
                total += loss
                steps += 1
            losses.append(total / max(steps, 1))
            if callable(stage.dev):
                score = float(stage.dev(p))
            elif stage.dev is not None:
                score = -evaluate_loss(p, stage.objective, stage.dev)
            else:
                score = -losses[-1]
            curve.append(score)
            if log:
                log(f"stage {si} {stage.name or stage.objective} epoch {epoch}: loss {losses[-1]:.4f} dev {score:.4f}")
            if score > best_score:
                best_score, best_epoch, best = score, epoch, p.copy()
                bad = 0
            else:
                bad += 1
                if bad >= stage.patience:
                    break
        p = best
        history.append({
            "name": stage.name or stage.objective,
            "objective": stage.objective,
            "epochs_run": epoch,
            "best_epoch": best_epoch,
            "best_dev": best_score,
            "dev_curve": curve,
            "train_loss": losses,
        })
    return Checkpoint(p, {"seed": cfg.seed, "stages": history})


# ---------------------------------------------------------------------------
# gradient check

def grad_check(params: ModelParams, instance, objective, epsilon: float = 1e-5, n_coords: int = 100,
               seed=0, names: Iterable[str] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``objective`` is an objective name (``mlm``, ``tlm``, ``rs``, ``dst``) or a
    callable ``params -> (loss, grads)``. ``instance`` is a Batch, a list of
    instances, or a single instance. Coordinates are drawn uniformly from the
    parameters that the objective touches. Relative error is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-6, 1e-3]")
    if callable(objective):
        fn = objective
    else:
        if isinstance(instance, Batch):
            batch = instance
        else:
            onto = params.ontology if objective == "dst" else None
            batch = make_batch(_as_list(instance) if not isinstance(instance, list) else instance,
                               params.config.max_len, objective, onto)

        def fn(p):
            return loss_and_grad(p, objective, batch)

    p = params.copy()
    _, grads = fn(p)
    pool = sorted(names) if names is not None else sorted(grads)
    sizes = np.array([p.arrays[n].size for n in pool])
    rng = rng_for("gradcheck", seed)
    picks = rng.choice(sizes.sum(), size=min(n_coords, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    for flat_idx in np.sort(picks):
        k = int(np.searchsorted(bounds, flat_idx, side="right"))
        name = pool[k]
        local = int(flat_idx - (bounds[k - 1] if k else 0))
        arr = p.arrays[name].reshape(-1)
        orig = arr[local]
        arr[local] = orig + epsilon
        lp = fn(p)[0]
        arr[local] = orig - epsilon
        lm = fn(p)[0]
        arr[local] = orig
        numeric = (lp - lm) / (2 * epsilon)
        g = grads.get(name)
        analytic = float(np.asarray(g).reshape(-1)[local]) if g is not None else 0.0
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint files

def _ontology_json(onto: Ontology | None):
    return None if onto is None else onto.to_json()


def save_checkpoint(path, ckpt: Checkpoint):
    p = ckpt.params
    names = p.names()
    header = {
        "config": {"vocab_size": p.config.vocab_size, "d": p.config.d, "h": p.config.h,
                   "max_len": p.config.max_len, "tie_mlm": p.config.tie_mlm},
        "ontology": _ontology_json(p.ontology),
        "arrays": [[n, list(p.arrays[n].shape)] for n in names],
    }
    hbytes = json.dumps(header, ensure_ascii=False).encode("utf-8")
    pbytes = json.dumps(ckpt.provenance, ensure_ascii=False, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)))
        f.write(hbytes)
        for n in names:
            f.write(np.ascontiguousarray(p.arrays[n], dtype="<f8").tobytes())
        f.write(struct.pack("<Q", len(pbytes)))
        f.write(pbytes)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 8 + struct.calcsize("<IQ")
    header = json.loads(data[off: off + hlen].decode("utf-8"))
    off += hlen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)
        arrays[name] = arr
        off += 8 * count
    (plen,) = struct.unpack_from("<Q", data, off)
    off += 8
    provenance = json.loads(data[off: off + plen].decode("utf-8"))
    onto = Ontology.from_json(header["ontology"]) if header["ontology"] is not None else None
    cfg = EncoderConfig(**header["config"])
    return Checkpoint(ModelParams(cfg, arrays, onto), provenance)
