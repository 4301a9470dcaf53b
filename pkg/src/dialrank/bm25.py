"""BM25 retrieval over the training response pool.

Stands in for an external search system: builds the 49-distractor pool of
the practical evaluation scenario and supplies live candidates to the chat
service.  Scoring uses the non-negative idf variant
ln((N - df + 0.5) / (df + 0.5) + 1) with k1=1.2, b=0.75.
"""

from __future__ import annotations

import json
import math
import random
import struct
from dataclasses import dataclass, field

from .data import tokenize

K1 = 1.2
B = 0.75


class IndexError_(ValueError):
    """Index construction or persistence failed."""


@dataclass
class InvertedIndex:
    docs: list  # original texts, deduplicated keeping first occurrence
    doc_lens: list
    avg_len: float
    postings: dict = field(default_factory=dict)  # token -> [(doc_id, tf)] sorted by doc id


def build_index(responses):
    """Tokenize, deduplicate and index a response pool."""
    seen = set()
    docs = []
    for text in responses:
        if text not in seen:
            seen.add(text)
            docs.append(text)
    if not docs:
        raise IndexError_("cannot index an empty response pool")
    postings = {}
    lens = []
    for doc_id, text in enumerate(docs):
        toks = tokenize(text)
        lens.append(len(toks))
        counts = {}
        for t in toks:
            counts[t] = counts.get(t, 0) + 1
        for t, tf in counts.items():
            postings.setdefault(t, []).append((doc_id, tf))
    avg = sum(lens) / len(lens)
    return InvertedIndex(docs=docs, doc_lens=lens, avg_len=avg, postings=postings)


def _idf(index, token):
    df = len(index.postings.get(token, ()))
    n = len(index.docs)
    return math.log((n - df + 0.5) / (df + 0.5) + 1.0)


def score_all(index, query):
    """BM25 score of the query against every indexed document."""
    scores = [0.0] * len(index.docs)
    for token in tokenize(query):
        posting = index.postings.get(token)
        if not posting:
            continue
        idf = _idf(index, token)
        for doc_id, tf in posting:
            dl = index.doc_lens[doc_id]
            denom = tf + K1 * (1.0 - B + B * dl / index.avg_len)
            scores[doc_id] += idf * tf * (K1 + 1.0) / denom
    return scores


def retrieve(index, query, n, exclude=None, seed=0):
    """Top-n texts by BM25, excluding the ground truth; short results are
    padded with seeded random non-excluded documents."""
    if n < 1:
        raise ValueError(f"retrieve needs n >= 1, got {n}")
    scores = score_all(index, query)
    ranked = sorted(
        (i for i in range(len(index.docs))
         if scores[i] > 0.0 and index.docs[i] != exclude),
        key=lambda i: (-scores[i], i),
    )
    chosen = ranked[:n]
    if len(chosen) < n:
        taken = set(chosen)
        pool = [i for i in range(len(index.docs))
                if i not in taken and index.docs[i] != exclude]
        rng = random.Random(seed)
        rng.shuffle(pool)
        chosen.extend(pool[:n - len(chosen)])
    return [index.docs[i] for i in chosen]


# ---------------------------------------------------------------------------
# persistence: JSON manifest line + packed little-endian postings


def save_index(index, path):
    tokens = sorted(index.postings.keys())
    manifest = {
        "version": 1,
        "k1": K1,
        "b": B,
        "docs": index.docs,
        "doc_lens": index.doc_lens,
        "avg_len": index.avg_len,
        "tokens": tokens,
        "counts": [len(index.postings[t]) for t in tokens],
    }
    import os

    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(manifest, ensure_ascii=False).encode("utf-8"))
        fh.write(b"\n")
        for t in tokens:
            for doc_id, tf in index.postings[t]:
                fh.write(struct.pack("<II", doc_id, tf))
    os.replace(tmp, path)


def load_index(path):
    with open(path, "rb") as fh:
        manifest = json.loads(fh.readline().decode("utf-8"))
        if manifest.get("version") != 1:
            raise IndexError_(f"unsupported index version {manifest.get('version')}")
        postings = {}
        for t, count in zip(manifest["tokens"], manifest["counts"]):
            entries = []
            for _ in range(count):
                doc_id, tf = struct.unpack("<II", fh.read(8))
                entries.append((doc_id, tf))
            postings[t] = entries
    return InvertedIndex(docs=manifest["docs"], doc_lens=manifest["doc_lens"],
                         avg_len=manifest["avg_len"], postings=postings)
