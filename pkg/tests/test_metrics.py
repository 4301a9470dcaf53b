import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dialrank.evaluation import (EvalReport, KnowledgeFact, RankedTurn, bleu_n,
                                 goal_accuracy, hits_at_k, knowledge_accuracy,
                                 knowledge_prf, make_turn, mrr, oracle_scorer,
                                 paired_ttest, rank_of, render_table)


def turn(scores, gt=0, cands=None):
    n = len(scores)
    cands = cands or [f"cand {i}" for i in range(n)]
    return RankedTurn(candidates=cands, scores=list(scores), gt_index=gt,
                      linked=[frozenset()] * n, goal_entities=[], facts=[])


# ---------------------------------------------------------------------------
# ranking metrics vs brute-force oracles


def brute_rank(scores, gt):
    """Stable sort oracle: order by (-score, index), find the gt position."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order.index(gt) + 1


def test_rank_of_ties_prefer_lower_index():
    assert rank_of([1.0, 1.0, 0.5], 0) == 1
    assert rank_of([1.0, 1.0, 0.5], 1) == 2


def test_hits_all_correct():
    turns = [turn([5, 1, 2], gt=0) for _ in range(4)]
    assert hits_at_k(turns, 1) == 1.0


def test_hits_k_covers_all():
    rng = np.random.default_rng(0)
    turns = [turn(rng.uniform(size=10), gt=int(rng.integers(10))) for _ in range(50)]
    assert hits_at_k(turns, 10) == 1.0


def test_hits_and_mrr_match_bruteforce_on_1000_random_turns():
    rng = np.random.default_rng(42)
    turns = []
    for _ in range(1000):
        n = int(rng.integers(2, 12))
        scores = rng.uniform(size=n)
        if rng.uniform() < 0.2:  # force ties sometimes
            scores[rng.integers(n)] = scores[rng.integers(n)]
        turns.append(turn(list(scores), gt=int(rng.integers(n))))
    ranks = [brute_rank(t.scores, t.gt_index) for t in turns]
    for k in (1, 2, 3, 5):
        assert hits_at_k(turns, k) == np.mean([r <= k for r in ranks])
    assert mrr(turns) == np.mean([1.0 / r for r in ranks])


def test_mrr_always_rank2():
    turns = [turn([2.0, 5.0], gt=0) for _ in range(3)]
    assert mrr(turns) == 0.5


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=10), st.floats(-3, 3))
def test_score_shift_invariance(scores, shift):
    gt = len(scores) // 2
    base = rank_of(scores, gt)
    shifted = rank_of([s + shift for s in scores], gt)
    assert base == shifted


@given(st.lists(st.floats(0, 1), min_size=2, max_size=8))
@settings(max_examples=60)
def test_hits_nondecreasing_in_k(scores):
    t = [turn(scores, gt=0)]
    vals = [hits_at_k(t, k) for k in range(1, len(scores) + 1)]
    assert vals == sorted(vals)
    assert vals[-1] == 1.0


# ---------------------------------------------------------------------------
# BLEU


def test_bleu_identity():
    assert bleu_n("the movie was great", "the movie was great", 1) == 1.0
    assert bleu_n("the movie was great", "the movie was great", 2) == 1.0


def test_bleu_no_overlap_and_empty():
    assert bleu_n("alpha beta", "gamma delta", 1) == 0.0
    assert bleu_n("", "gamma delta", 2) == 0.0


def test_bleu_hand_computed_pair():
    # candidate: "the cat the cat on mat" (6 tokens), reference: "the cat is on the mat"
    # 1-grams: the(2 clipped), cat(1), on(1), mat(1) -> clipped 2+1+1+1 = 5; p1 = 5/6
    # 2-grams: cand bigrams [the cat]x2, [cat the], [cat on], [on mat]
    #   clipped: "the cat" min(2,1)=1, others 0 -> p2 = 1/5
    # BP: c=6 == r=6 -> exp(1 - 6/6) = 1
    cand = "the cat the cat on mat"
    ref = "the cat is on the mat"
    assert bleu_n(cand, ref, 1) == pytest.approx(5 / 6, abs=1e-12)
    assert bleu_n(cand, ref, 2) == pytest.approx(math.sqrt((5 / 6) * (1 / 5)), abs=1e-12)


def test_bleu_brevity_penalty():
    # candidate 2 tokens, reference 4: p1 = 1, BP = exp(1 - 4/2) = e^-1
    assert bleu_n("the cat", "the cat on mat", 1) == pytest.approx(math.exp(-1), abs=1e-12)


# ---------------------------------------------------------------------------
# knowledge and goal metrics


def fact(obj, pred="p"):
    return KnowledgeFact("subject star", pred, obj)


def test_knowledge_prf_exact_object():
    t = make_turn(["paris"], [1.0], 0, [fact("paris")], ["star"])
    p, r, f = knowledge_prf([t])
    assert (p, r, f) == (1.0, 1.0, 1.0)


def test_knowledge_prf_disjoint():
    t = make_turn(["nothing here"], [1.0], 0, [fact("paris")], ["star"])
    assert knowledge_prf([t]) == (0.0, 0.0, 0.0)


def test_knowledge_prf_hand_counted():
    # selected "paris lights tonight": 1 of 3 tokens in objects -> P = 1/3
    # objects union {paris, laurel}: 1 of 2 covered -> R = 1/2; F = 2PR/(P+R) = 0.4
    t = make_turn(["paris lights tonight", "other"], [1.0, 0.0], 0,
                  [fact("paris"), fact("laurel")], ["star"])
    p, r, f = knowledge_prf([t])
    assert p == pytest.approx(1 / 3)
    assert r == pytest.approx(1 / 2)
    assert f == pytest.approx(0.4)


def test_knowledge_accuracy_intersection_rule():
    facts = [fact("paris"), fact("laurel")]
    # selected == gt
    t1 = make_turn(["won the laurel", "x"], [1.0, 0.0], 0, facts, ["star"])
    # selected links {paris}, gt links {laurel}
    t2 = make_turn(["from paris", "won the laurel"], [1.0, 0.0], 1, facts, ["star"])
    # both empty
    t3 = make_turn(["nothing", "nothing at all"], [1.0, 0.0], 1, facts, ["star"])
    assert knowledge_accuracy([t1]) == 1.0
    assert knowledge_accuracy([t2]) == 0.0
    assert knowledge_accuracy([t3]) == 1.0


def test_goal_accuracy_rules():
    facts = [fact("paris")]
    goals = ["bo peng", "rice cooker"]
    # gt mentions "bo peng", selected also mentions it
    t1 = make_turn(["i saw bo peng", "bo peng stars here"], [0.0, 1.0], 0, facts, goals)
    # gt mentions "bo peng", selected mentions the other entity only
    t2 = make_turn(["rice cooker time", "bo peng stars here"], [1.0, 0.0], 1, facts, goals)
    # gt mentions no entity: excluded from the denominator
    t3 = make_turn(["nothing", "still nothing"], [1.0, 0.0], 1, facts, goals)
    assert goal_accuracy([t1]) == 1.0
    assert goal_accuracy([t2]) == 0.0
    assert goal_accuracy([t1, t2]) == 0.5
    assert goal_accuracy([t3]) is None


def test_goal_accuracy_all_selected_equal_gt():
    facts = [fact("paris")]
    turns = [make_turn(["bo peng is great", "xyz"], [9.0, 0.1], 0, facts, ["bo peng"])
             for _ in range(5)]
    assert goal_accuracy(turns) == 1.0


# ---------------------------------------------------------------------------
# report assembly


def test_oracle_scorer_marks_truth():
    raw = {"response": "b"}
    assert oracle_scorer(raw, ["a", "b", "c"]) == [0.0, 1.0, 0.0]


def test_report_invariants_random_scores():
    rng = np.random.default_rng(3)
    turns = [turn(list(rng.uniform(size=10)), gt=int(rng.integers(10))) for _ in range(200)]
    h1, h3 = hits_at_k(turns, 1), hits_at_k(turns, 3)
    assert 0.0 <= h1 <= h3 <= 1.0
    m = mrr(turns)
    assert 0.0 < m <= 1.0


def test_render_table_has_rows_and_na():
    rep = EvalReport(hits1=0.5, hits3=0.7, mrr=0.6, bleu1=0.4, bleu2=0.3,
                     klg_precision=0.2, klg_recall=0.1, klg_f1=0.13,
                     klg_accuracy=0.5, goal_accuracy=None)
    text = render_table({"model": rep})
    assert "Hits@1" in text and "Goal Acc." in text
    assert "-" in text.splitlines()[-1]


def test_paired_ttest_direction():
    rng = np.random.default_rng(0)
    a = rng.normal(0.8, 0.05, size=40)
    b = a - 0.1 + rng.normal(0, 0.01, size=40)
    t, p = paired_ttest(a, b)
    assert t > 0
    assert p < 0.01
