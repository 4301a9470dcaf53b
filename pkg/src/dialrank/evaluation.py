"""Ranking and quality metrics for both test scenarios.

`ranked_10` ranks the ground truth inside the sample's own candidate pool;
`practical_49` rebuilds the pool from a lexical retriever over the training
responses, mirroring a reranker sitting behind an upstream search system.
Every metric breaks score ties by the lower candidate index, so reports
are reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import SchemaError, tokenize
from .linking import LinkConfig, label_triple


@dataclass
class KnowledgeFact:
    subject: str
    predicate: str
    object: str


@dataclass
class RankedTurn:
    candidates: list  # texts
    scores: list  # floats, parallel to candidates
    gt_index: int
    linked: list  # per-candidate frozenset of triple indices
    goal_entities: list
    facts: list  # KnowledgeFact list

    @property
    def selected(self):
        # np.argmax takes the first maximum: ties go to the lower index
        return int(np.argmax(np.asarray(self.scores)))


def rank_of(scores, gt_index):
    """1-based rank of the ground truth; ties resolve to the lower index."""
    s = np.asarray(scores, dtype=np.float64)
    gt = s[gt_index]
    better = int(np.sum(s > gt))
    tied_before = int(np.sum(s[:gt_index] == gt))
    return better + tied_before + 1


def hits_at_k(turns, k):
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return float(np.mean([1.0 if rank_of(t.scores, t.gt_index) <= k else 0.0 for t in turns]))


def mrr(turns):
    return float(np.mean([1.0 / rank_of(t.scores, t.gt_index) for t in turns]))


# ---------------------------------------------------------------------------
# BLEU


def _ngrams(tokens, n):
    counts = {}
    for i in range(len(tokens) - n + 1):
        g = tuple(tokens[i:i + n])
        counts[g] = counts.get(g, 0) + 1
    return counts


def bleu_n(candidate, reference, n):
    """Sentence BLEU-n: geometric mean of modified 1..n-gram precisions
    with the brevity penalty; 0 for an empty candidate."""
    if n not in (1, 2):
        raise ValueError(f"bleu_n supports n in {{1, 2}}, got {n}")
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand:
        return 0.0
    precisions = []
    for order in range(1, n + 1):
        cg = _ngrams(cand, order)
        total = sum(cg.values())
        if total == 0:
            return 0.0
        rg = _ngrams(ref, order)
        clipped = sum(min(c, rg.get(g, 0)) for g, c in cg.items())
        if clipped == 0:
            return 0.0
        precisions.append(clipped / total)
    geo = float(np.exp(np.mean(np.log(precisions))))
    bp = 1.0 if len(cand) > len(ref) else float(np.exp(1.0 - len(ref) / len(cand)))
    return min(bp, 1.0) * geo


# ---------------------------------------------------------------------------
# knowledge and goal metrics


def _top1(turn):
    return turn.selected


def _gt(turn):
    return turn.gt_index


def knowledge_prf(turns, select=_top1):
    """Token-level precision/recall/F1 of selected responses against the
    union of the turn's object tokens, macro-averaged."""
    ps, rs, fs = [], [], []
    for t in turns:
        resp = tokenize(t.candidates[select(t)])
        union = set()
        for fact in t.facts:
            union.update(tokenize(fact.object))
        if not resp or not union:
            ps.append(0.0), rs.append(0.0), fs.append(0.0)
            continue
        p = sum(1 for tok in resp if tok in union) / len(resp)
        r = len(union & set(resp)) / len(union)
        f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
        ps.append(p), rs.append(r), fs.append(f)
    return float(np.mean(ps)), float(np.mean(rs)), float(np.mean(fs))


def knowledge_accuracy(turns, select=_top1):
    """Fraction of turns whose selection links to the same knowledge as the
    ground truth: linked sets intersect, or both are empty."""
    good = 0
    for t in turns:
        sel, gt = t.linked[select(t)], t.linked[t.gt_index]
        if (sel & gt) or (not sel and not gt):
            good += 1
    return good / len(turns)


def _mentions(text, entities):
    toks = tokenize(text)
    found = set()
    for i, ent in enumerate(entities):
        ent_toks = tokenize(ent)
        if not ent_toks:
            continue
        n = len(ent_toks)
        if any(toks[j:j + n] == ent_toks for j in range(len(toks) - n + 1)):
            found.add(i)
    return found


def goal_accuracy(turns, select=_top1):
    """Over turns whose ground truth mentions a goal entity: fraction where
    the selection mentions one of the same entities.  None when no turn
    qualifies (not-applicable, distinct from 0)."""
    hits, total = 0, 0
    for t in turns:
        gt_ents = _mentions(t.candidates[t.gt_index], t.goal_entities)
        if not gt_ents:
            continue
        total += 1
        if _mentions(t.candidates[select(t)], t.goal_entities) & gt_ents:
            hits += 1
    return None if total == 0 else hits / total


def bleu_report(turns, select=_top1):
    b1 = float(np.mean([bleu_n(t.candidates[select(t)], t.candidates[t.gt_index], 1)
                        for t in turns]))
    b2 = float(np.mean([bleu_n(t.candidates[select(t)], t.candidates[t.gt_index], 2)
                        for t in turns]))
    return b1, b2


def oracle_scorer(raw, candidates):
    """Reference scorer: 1 for the ground truth, 0 elsewhere."""
    return [1.0 if c == raw["response"] else 0.0 for c in candidates]


def random_scorer(seed):
    rng = np.random.default_rng(seed)

    def scorer(raw, candidates):
        return list(rng.uniform(size=len(candidates)))

    return scorer


def paired_ttest(xs, ys):
    """Two-sided paired t-test over per-turn metric values."""
    from scipy import stats

    res = stats.ttest_rel(xs, ys)
    return float(res.statistic), float(res.pvalue)


# ---------------------------------------------------------------------------
# turn assembly and the full report


def make_turn(candidate_texts, scores, gt_index, facts, goal_entities, link_cfg=None):
    cfg = link_cfg or LinkConfig()
    linked = []
    for text in candidate_texts:
        used = set()
        for j, fact in enumerate(facts):
            if label_triple(fact, text, cfg) == 1:
                used.add(j)
        linked.append(frozenset(used))
    return RankedTurn(candidates=list(candidate_texts), scores=list(scores),
                      gt_index=gt_index, linked=linked, goal_entities=list(goal_entities),
                      facts=list(facts))


def turns_from_candidates(scorer, samples, link_cfg=None):
    """ranked_10 turns: score each sample's own candidates field."""
    turns = []
    for s in samples:
        raw = s.raw if hasattr(s, "raw") else s
        if "candidates" not in raw:
            raise SchemaError("sample is missing the 'candidates' field required by ranked_10")
        cands = raw["candidates"]
        matches = [i for i, c in enumerate(cands) if c == raw["response"]]
        if len(matches) != 1:
            raise SchemaError("candidates must contain the ground-truth response exactly once")
        scores = scorer(raw, cands)
        facts = [KnowledgeFact(*t) for t in raw["knowledge"]]
        turns.append(make_turn(cands, scores, matches[0], facts, raw["goal"], link_cfg))
    return turns


def turns_from_retriever(scorer, samples, index, n_distractors=49, seed=0, link_cfg=None):
    """practical turns: ground truth mixed with retrieved + padded distractors."""
    from .bm25 import retrieve

    rng = np.random.default_rng(seed)
    turns = []
    for s in samples:
        raw = s.raw if hasattr(s, "raw") else s
        covered = _mentions(" ".join(raw["context"]), raw["goal"])
        uncovered = [e for i, e in enumerate(raw["goal"]) if i not in covered]
        query = raw["context"][-1] + " " + " ".join(uncovered)
        distractors = retrieve(index, query, n_distractors, exclude=raw["response"],
                               seed=int(rng.integers(2 ** 31)))
        pool = [raw["response"]] + list(distractors)
        order = rng.permutation(len(pool))
        cands = [pool[i] for i in order]
        gt_index = int(np.nonzero(order == 0)[0][0])
        scores = scorer(raw, cands)
        facts = [KnowledgeFact(*t) for t in raw["knowledge"]]
        turns.append(make_turn(cands, scores, gt_index, facts, raw["goal"], link_cfg))
    return turns


@dataclass
class EvalReport:
    hits1: float | None = None
    hits3: float | None = None
    mrr: float | None = None
    bleu1: float | None = None
    bleu2: float | None = None
    klg_precision: float | None = None
    klg_recall: float | None = None
    klg_f1: float | None = None
    klg_accuracy: float | None = None
    goal_accuracy: float | None = None

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items()}


def report_from_turns(turns, select=_top1, ranking=True):
    rep = EvalReport()
    if ranking:
        rep.hits1 = hits_at_k(turns, 1)
        rep.hits3 = hits_at_k(turns, 3)
        rep.mrr = mrr(turns)
    rep.bleu1, rep.bleu2 = bleu_report(turns, select)
    rep.klg_precision, rep.klg_recall, rep.klg_f1 = knowledge_prf(turns, select)
    rep.klg_accuracy = knowledge_accuracy(turns, select)
    rep.goal_accuracy = goal_accuracy(turns, select)
    return rep


def evaluate(scorer, samples, scenario, index=None, seed=0, link_cfg=None):
    """Full report for one scenario plus the ground-truth ceiling column."""
    positives = [s for s in samples if (s.raw if hasattr(s, "raw") else s)["label"] == 1]
    if scenario == "ranked_10":
        turns = turns_from_candidates(scorer, positives, link_cfg)
    elif scenario == "practical_49":
        if index is None:
            raise ValueError("practical_49 needs a retriever index")
        turns = turns_from_retriever(scorer, positives, index, seed=seed, link_cfg=link_cfg)
    else:
        raise ValueError(f"unknown scenario {scenario!r}")
    model_rep = report_from_turns(turns)
    ceiling = report_from_turns(turns, select=_gt, ranking=False)
    return {"scenario": scenario, "turns": len(turns),
            "model": model_rep, "ground_truth": ceiling}


_ROWS = (
    ("Hits@1", "hits1", 100.0),
    ("Hits@3", "hits3", 100.0),
    ("MRR", "mrr", 100.0),
    ("BLEU1", "bleu1", 1.0),
    ("BLEU2", "bleu2", 1.0),
    ("KLG. P", "klg_precision", 100.0),
    ("KLG. R", "klg_recall", 100.0),
    ("KLG. F1", "klg_f1", 100.0),
    ("KLG. Acc.", "klg_accuracy", 100.0),
    ("Goal Acc.", "goal_accuracy", 100.0),
)


def render_table(columns):
    """Aligned text table; `columns` maps column name -> EvalReport."""
    names = list(columns.keys())
    width = max(len(r[0]) for r in _ROWS)
    cw = max(8, *(len(n) for n in names))
    lines = [" " * width + "  " + "  ".join(n.rjust(cw) for n in names)]
    for label, attr, scale in _ROWS:
        cells = []
        for n in names:
            v = getattr(columns[n], attr)
            if v is None:
                cells.append("-".rjust(cw))
            elif scale == 1.0:
                cells.append(f"{v:.2f}".rjust(cw))
            else:
                cells.append(f"{v * scale:.2f}".rjust(cw))
        lines.append(label.ljust(width) + "  " + "  ".join(cells))
    return "\n".join(lines)
