"""
Scoring dialog systems: JGA, recall@k and kappa
===============================================

Small hand-made inputs for the three measures in ``convspec.metrics``.
"""
from convspec.metrics import NormalizationRules, cohen_kappa, joint_goal_accuracy, recall_at_k, sample_rr_candidates

# a dialog with three user turns; the tracker gets the second one wrong
gold = {"d1": [{"hotel-area": "north"},
               {"hotel-area": "north", "hotel-stars": "4"},
               {"hotel-area": "north", "hotel-stars": "4", "hotel-day": "monday"}]}
pred = {"d1": [{"hotel-area": "North "},
               {"hotel-area": "north"},
               {"hotel-area": "north", "hotel-stars": "4", "hotel-day": "mon"}]}
print(joint_goal_accuracy(pred, gold))

# synonyms are applied to both sides before comparing
rules = NormalizationRules({"mon": "monday"})
print(joint_goal_accuracy(pred, gold, rules).accuracy)

# response retrieval: one true response hidden among sampled distractors
pool = [f"line {i}" for i in range(50)]
sets = sample_rr_candidates([("c1", "line 7"), ("c2", "line 9")], pool, n=10, seed=0)
for cs in sets:
    print(cs.context_id, "true response at position", cs.true_index)

# a perfect ranker puts the true id first; a reversed one puts it last
perfect = [([cs.true_index] + [i for i in range(10) if i != cs.true_index], cs.true_index) for cs in sets]
print(recall_at_k(perfect, k=1).recall, recall_at_k([(o[::-1], t) for o, t in perfect], k=5).recall)

# two annotators agree on 90 of 100 items, each saying "yes" half the time
a = [1] * 50 + [0] * 50
b = [1] * 45 + [0] * 5 + [1] * 5 + [0] * 45
rep = cohen_kappa(a, b)
print(f"observed {rep.observed:.2f} expected {rep.expected:.2f} kappa {rep.kappa:.4f}")
