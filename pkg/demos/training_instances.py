"""
From parallel subtitles to training instances
=============================================

Build the synthetic two-language world, cut its movies into dialog windows
and look at one instance of each specialization objective.
"""
from convspec.instances import RsConfig, TlmConfig, gen_mlm, gen_rs, gen_tlm, rs_balance
from convspec.instances import MaskingConfig
from convspec.subtitles import segment_dialogs
from convspec.tokenizer import build_vocab, decode, decode_pair, encode
from convspec.toyworld import ToyWorld

world = ToyWorld.build(seed=0)
print({w: world.lexicon[w] for w in ("i", "want", "thai", "food")})

pairs = world.subtitle_pairs(40, seed=0)
vocab = build_vocab([p.src_text for p in pairs] + [p.tgt_text for p in pairs], 200)
dialogs, rep = segment_dialogs(pairs, min_len=2, max_len=15, seed=0)
print(rep)

d = dialogs[0]
for p in d.pairs[:3]:
    print(p.line_index, p.src_text, "|", p.tgt_text)

# MLM: 15% of the non-special positions are chosen, most become [MASK]
seq = encode(d.pairs[0].tgt_text, vocab)
mlm = gen_mlm(seq, MaskingConfig(), seed=1, vocab=vocab)
print(decode(mlm.tokens, vocab), mlm.mlm_labels)

# TLM: K consecutive source lines then their translations, masked jointly
tlm = gen_tlm(d, TlmConfig(k_min=2, k_max=4), MaskingConfig(), seed=2, vocab=vocab)
print(tlm.provenance, len(tlm.tokens), "tokens")

# RS: the true next line, a later line of the same movie and lines from other movies
rs = gen_rs(dialogs, RsConfig(mode="mono", per_side_max=48), seed=3, vocab=vocab)
print(rs_balance(rs))
for inst in rs[:3]:
    ctx, resp = decode_pair(inst.tokens, vocab)
    print(inst.provenance["role"], inst.rs_label, "|", resp)
