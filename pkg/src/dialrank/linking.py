"""Weak supervision for knowledge usage: link triple objects to responses.

A triple is marked used (label 1) when its object entity appears in the
ground-truth response.  Short objects must occur as a contiguous token
subsequence; long descriptive objects (comments, review snippets) count as
used when strictly more than `descriptive_threshold` of their tokens are
covered by the response's bag of tokens.  Subject entities are ignored:
they are shared by every triple of the same node and carry no signal about
which fact a response used.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .data import group_turns, tokenize


class LinkError(ValueError):
    """Entity linking preconditions failed."""


@dataclass
class LinkConfig:
    descriptive_threshold: float = 0.7
    descriptive_min_tokens: int = 8

    def __post_init__(self):
        if not 0.0 < self.descriptive_threshold <= 1.0:
            raise LinkError(f"descriptive_threshold must be in (0, 1], got {self.descriptive_threshold}")


def _contains_subsequence(haystack, needle):
    n = len(needle)
    return any(haystack[i:i + n] == needle for i in range(len(haystack) - n + 1))


def label_triple(triple, response_text, cfg=None):
    """1 if the triple's object entity is judged used by the response, else 0."""
    cfg = cfg or LinkConfig()
    obj_tokens = tokenize(triple.object)
    if not obj_tokens:
        raise LinkError(f"triple ({triple.subject!r}, {triple.predicate!r}) has an empty object")
    resp_tokens = tokenize(response_text)
    if len(obj_tokens) < cfg.descriptive_min_tokens:
        return 1 if _contains_subsequence(resp_tokens, obj_tokens) else 0
    bag = set(resp_tokens)
    coverage = sum(1 for t in obj_tokens if t in bag) / len(obj_tokens)
    return 1 if coverage > cfg.descriptive_threshold else 0


def label_sample(sample, cfg=None):
    """Write weak labels into a positive sample's triples; returns the labels."""
    if sample.label != 1:
        raise LinkError("weak labels are defined against ground-truth responses; sample has label 0")
    cfg = cfg or LinkConfig()
    labels = [label_triple(t, sample.raw["response"], cfg) for t in sample.knowledge]
    for triple, y in zip(sample.knowledge, labels):
        triple.weak_label = y
    sample.raw["weak_labels"] = labels
    return labels


def label_corpus(samples, cfg=None):
    """Label every positive; negatives copy the labels of their turn's positive."""
    cfg = cfg or LinkConfig()
    for turn in group_turns(samples):
        positives = [s for s in turn if s.label == 1]
        if not positives:
            raise LinkError("turn has negatives but no source positive to copy labels from")
        labels = label_sample(positives[0], cfg)
        for s in turn:
            if s is positives[0]:
                continue
            for triple, y in zip(s.knowledge, labels):
                triple.weak_label = y
            s.raw["weak_labels"] = list(labels)
    return samples


# ---------------------------------------------------------------------------
# agreement with human annotation


def fleiss_kappa(rows):
    """Fleiss kappa over items x raters with categorical {0,1} votes."""
    if not rows:
        raise LinkError("fleiss_kappa needs at least one item")
    n_raters = len(rows[0])
    if n_raters < 2:
        raise LinkError("fleiss_kappa needs at least two raters")
    counts = []
    for row in rows:
        if len(row) != n_raters:
            raise LinkError("all items must have the same number of raters")
        ones = sum(row)
        counts.append((n_raters - ones, ones))
    n_items = len(counts)
    p_cat = [sum(c[j] for c in counts) / (n_items * n_raters) for j in (0, 1)]
    p_bar = sum(
        sum(c[j] * (c[j] - 1) for j in (0, 1)) / (n_raters * (n_raters - 1))
        for c in counts
    ) / n_items
    p_e = sum(p ** 2 for p in p_cat)
    if p_e >= 1.0:
        return 1.0  # unanimous single category: perfect agreement by convention
    return (p_bar - p_e) / (1.0 - p_e)


def agreement(weak, human):
    """Raw agreement of weak labels vs the human majority, plus Fleiss kappa.

    `human` holds one vote list per item (typically 3 annotators).
    """
    if len(weak) != len(human):
        raise LinkError(f"label lists disagree in length: {len(weak)} vs {len(human)}")
    agree = 0
    for w, votes in zip(weak, human):
        majority = 1 if sum(votes) * 2 > len(votes) else 0
        if w == majority:
            agree += 1
    return {
        "percent_agree": 100.0 * agree / len(weak),
        "fleiss_kappa": fleiss_kappa(human),
    }


def read_annotations(path):
    """JSONL of {"sample_id", "triple_index", "labels": [0/1 x raters]}."""
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LinkError(f"malformed annotation at line {lineno}: {exc.msg}") from exc
            for key in ("sample_id", "triple_index", "labels"):
                if key not in entry:
                    raise LinkError(f"annotation missing field {key!r} at line {lineno}")
            items.append(entry)
    return items
