"""Corpus handling: tokenization, JSONL ingestion, vocabulary, sampling, batching.

One JSONL line is one sample:

    {"context": [str, ...], "goal": [str, ...], "knowledge": [[s, p, o], ...],
     "response": str, "label": 0|1, "candidates": [str, ...]?,
     "weak_labels": [0|1, ...]?}

`candidates` appears on test samples (the full ranked pool, containing the
ground-truth response exactly once); `weak_labels` is written by the
labeling pipeline, one entry per knowledge triple.
"""

from __future__ import annotations

import json
import re
import unicodedata
from dataclasses import dataclass, field

import numpy as np

PAD_ID = 0
UNK_ID = 1
SEP_ID = 2

_RESERVED = ("<pad>", "<unk>", "<sep>")

# CJK codepoint ranges tokenized one character at a time
_CJK_RANGES = ((0x3400, 0x4DBF), (0x4E00, 0x9FFF), (0xF900, 0xFAFF), (0x20000, 0x2A6DF))
_CJK_CLASS = "".join(f"{chr(lo)}-{chr(hi)}" for lo, hi in _CJK_RANGES)
_TOKEN_RE = re.compile(rf"[{_CJK_CLASS}]|[^\W_{_CJK_CLASS}]+", re.UNICODE)


class SchemaError(ValueError):
    """A JSONL line does not match the sample schema."""


class CorpusError(ValueError):
    """A corpus-level precondition failed."""


def is_cjk(ch):
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _CJK_RANGES)


def tokenize(text):
    """Lowercased tokens: letter/digit runs, single CJK characters; punctuation dropped."""
    return _TOKEN_RE.findall(text.lower())


def tokenize_reference(text):
    """Character-class walk over the string; the regex-free oracle for tokenize."""
    tokens, run = [], []
    for ch in text.lower():
        if is_cjk(ch):
            if run:
                tokens.append("".join(run))
                run = []
            tokens.append(ch)
        elif ch != "_" and unicodedata.category(ch)[0] in ("L", "N"):
            run.append(ch)
        else:
            if run:
                tokens.append("".join(run))
                run = []
    if run:
        tokens.append("".join(run))
    return tokens


class Vocabulary:
    """token -> id map with reserved ids 0=PAD, 1=UNK, 2=SEP."""

    def __init__(self, tokens=()):
        self.id_to_token = list(_RESERVED)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        for t in tokens:
            self.add(t)

    def add(self, token):
        if token not in self.token_to_id:
            self.token_to_id[token] = len(self.id_to_token)
            self.id_to_token.append(token)
        return self.token_to_id[token]

    def encode(self, tokens):
        return [self.token_to_id.get(t, UNK_ID) for t in tokens]

    def __len__(self):
        return len(self.id_to_token)

    def content_hash(self):
        import hashlib

        return hashlib.sha256("\n".join(self.id_to_token).encode("utf-8")).hexdigest()

    def to_list(self):
        return self.id_to_token[len(_RESERVED):]

    @classmethod
    def from_list(cls, tokens):
        return cls(tokens)


def build_vocab(raw_samples):
    """Vocabulary over every text field, in first-occurrence order."""
    vocab = Vocabulary()
    for raw in raw_samples:
        for utt in raw["context"]:
            for t in tokenize(utt):
                vocab.add(t)
        for ent in raw["goal"]:
            for t in tokenize(ent):
                vocab.add(t)
        for s, p, o in raw["knowledge"]:
            for part in (s, p, o):
                for t in tokenize(part):
                    vocab.add(t)
        for t in tokenize(raw["response"]):
            vocab.add(t)
    return vocab


# ---------------------------------------------------------------------------
# domain types


@dataclass
class KnowledgeTriple:
    subject: str
    predicate: str
    object: str
    token_seq: list = field(default_factory=list)  # S <sep> P <sep> O
    weak_label: int | None = None

    def spo(self):
        return (self.subject, self.predicate, self.object)


@dataclass
class Goal:
    entities: list
    token_seq: list = field(default_factory=list)
    token_entity: list = field(default_factory=list)  # entity index per token


@dataclass
class DialogueSample:
    context: list  # list of token-id lists
    goal: Goal
    knowledge: list  # list of KnowledgeTriple
    response: list  # token-id list
    label: int
    raw: dict  # original strings, kept for linking and metrics


def _triple_tokens(vocab, s, p, o):
    ids = vocab.encode(tokenize(s))
    ids += [SEP_ID] + vocab.encode(tokenize(p))
    ids += [SEP_ID] + vocab.encode(tokenize(o))
    return ids


def _goal_from_raw(vocab, entities):
    token_seq, token_entity = [], []
    for i, ent in enumerate(entities):
        ids = vocab.encode(tokenize(ent))
        token_seq.extend(ids)
        token_entity.extend([i] * len(ids))
    return Goal(entities=list(entities), token_seq=token_seq, token_entity=token_entity)


def bind_sample(raw, vocab):
    """Tokenize and id-map one raw sample dict."""
    goal = _goal_from_raw(vocab, raw["goal"])
    knowledge = []
    weak = raw.get("weak_labels")
    for j, (s, p, o) in enumerate(raw["knowledge"]):
        triple = KnowledgeTriple(s, p, o, token_seq=_triple_tokens(vocab, s, p, o))
        if weak is not None:
            triple.weak_label = int(weak[j])
        knowledge.append(triple)
    return DialogueSample(
        context=[vocab.encode(tokenize(u)) for u in raw["context"]],
        goal=goal,
        knowledge=knowledge,
        response=vocab.encode(tokenize(raw["response"])),
        label=int(raw["label"]),
        raw=raw,
    )


_REQUIRED = ("context", "goal", "knowledge", "response", "label")


def validate_raw(raw, lineno=None):
    where = "" if lineno is None else f" at line {lineno}"
    for key in _REQUIRED:
        if key not in raw:
            raise SchemaError(f"missing field {key!r}{where}")
    if not isinstance(raw["context"], list) or not raw["context"]:
        raise SchemaError(f"field 'context' must be a non-empty list{where}")
    if not isinstance(raw["goal"], list) or not raw["goal"]:
        raise SchemaError(f"field 'goal' must be a non-empty list{where}")
    if not isinstance(raw["knowledge"], list) or not raw["knowledge"]:
        raise SchemaError(f"field 'knowledge' must be a non-empty list{where}")
    for entry in raw["knowledge"]:
        if not (isinstance(entry, list) and len(entry) == 3):
            raise SchemaError(f"knowledge entries must be [s, p, o] triples{where}")
    if raw["label"] not in (0, 1):
        raise SchemaError(f"field 'label' must be 0 or 1{where}")
    wl = raw.get("weak_labels")
    if wl is not None and len(wl) != len(raw["knowledge"]):
        raise SchemaError(f"'weak_labels' length does not match 'knowledge'{where}")


def read_raw_jsonl(path):
    raws = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"malformed JSON at line {lineno}: {exc.msg}") from exc
            validate_raw(raw, lineno)
            raws.append(raw)
    return raws


def load_jsonl(path, vocab):
    """Parse, validate and vocabulary-map a JSONL corpus file."""
    return [bind_sample(raw, vocab) for raw in read_raw_jsonl(path)]


_FIELD_ORDER = ("context", "goal", "knowledge", "response", "label", "candidates", "weak_labels")


def sample_to_json(raw):
    ordered = {k: raw[k] for k in _FIELD_ORDER if k in raw}
    for k in raw:
        if k not in ordered:
            ordered[k] = raw[k]
    return json.dumps(ordered, ensure_ascii=False)


def save_jsonl(samples, path):
    """Write samples (DialogueSample or raw dicts) back to canonical JSONL."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            raw = s.raw if isinstance(s, DialogueSample) else s
            fh.write(sample_to_json(raw) + "\n")


# ---------------------------------------------------------------------------
# negative sampling


def negative_sample(positives, pool, ratio, seed, vocab):
    """For each positive, emit `ratio` label-0 copies with the response swapped
    for distinct pool draws (never the true response); seeded and reproducible.
    Returns positives interleaved with their negatives."""
    import random

    if ratio < 1:
        raise CorpusError(f"negative sampling ratio must be >= 1, got {ratio}")
    if len(pool) <= ratio:
        raise CorpusError(f"response pool of {len(pool)} is too small for ratio {ratio}")
    rng = random.Random(seed)
    out = []
    for pos in positives:
        candidates = [r for r in pool if r != pos.raw["response"]]
        if len(candidates) < ratio:
            raise CorpusError("response pool too small after excluding the true response")
        draws = rng.sample(candidates, ratio)
        out.append(pos)
        for resp in draws:
            raw = {k: v for k, v in pos.raw.items() if k != "candidates"}
            raw["response"] = resp
            raw["label"] = 0
            out.append(DialogueSample(
                context=pos.context,
                goal=pos.goal,
                knowledge=[KnowledgeTriple(*t.spo(), token_seq=t.token_seq,
                                           weak_label=t.weak_label) for t in pos.knowledge],
                response=vocab.encode(tokenize(resp)),
                label=0,
                raw=raw,
            ))
    return out


# ---------------------------------------------------------------------------
# batching


@dataclass
class BatchLimits:
    max_utterances: int = 4
    max_tokens: int = 12
    max_triples: int = 8


@dataclass
class Batch:
    context_ids: np.ndarray  # (B, L, T) int64
    context_mask: np.ndarray  # (B, L, T) float64
    goal_ids: np.ndarray  # (B, G)
    goal_mask: np.ndarray  # (B, G)
    knowledge_ids: np.ndarray  # (B, M, T)
    knowledge_mask: np.ndarray  # (B, M, T)
    knowledge_present: np.ndarray  # (B, M)
    response_ids: np.ndarray  # (B, T)
    response_mask: np.ndarray  # (B, T)
    labels: np.ndarray  # (B,)
    weak_labels: np.ndarray  # (B, M), -1 where absent

    def __len__(self):
        return self.context_ids.shape[0]


def _pad_ids(ids, width):
    ids = ids[:width]
    row = np.zeros(width, dtype=np.int64)
    mask = np.zeros(width, dtype=np.float64)
    row[:len(ids)] = ids
    mask[:len(ids)] = 1.0
    return row, mask


def make_batch(samples, limits):
    """Truncate-then-pad: keep the last `max_utterances` utterances and the
    first `max_tokens` tokens; masks mark exactly the real positions."""
    if limits.max_utterances < 1 or limits.max_tokens < 1 or limits.max_triples < 1:
        raise CorpusError("batch limits must be positive")
    b = len(samples)
    lmax, tmax, mmax = limits.max_utterances, limits.max_tokens, limits.max_triples
    gmax = max(max((len(s.goal.token_seq) for s in samples), default=1), 1)

    ctx_ids = np.zeros((b, lmax, tmax), dtype=np.int64)
    ctx_mask = np.zeros((b, lmax, tmax))
    goal_ids = np.zeros((b, gmax), dtype=np.int64)
    goal_mask = np.zeros((b, gmax))
    k_ids = np.zeros((b, mmax, tmax), dtype=np.int64)
    k_mask = np.zeros((b, mmax, tmax))
    k_present = np.zeros((b, mmax))
    r_ids = np.zeros((b, tmax), dtype=np.int64)
    r_mask = np.zeros((b, tmax))
    labels = np.zeros(b)
    weak = np.full((b, mmax), -1.0)

    for i, s in enumerate(samples):
        for li, utt in enumerate(s.context[-lmax:]):
            ctx_ids[i, li], ctx_mask[i, li] = _pad_ids(utt, tmax)
        goal_ids[i], goal_mask[i] = _pad_ids(s.goal.token_seq, gmax)
        for mi, triple in enumerate(s.knowledge[:mmax]):
            k_ids[i, mi], k_mask[i, mi] = _pad_ids(triple.token_seq, tmax)
            k_present[i, mi] = 1.0
            if triple.weak_label is not None:
                weak[i, mi] = float(triple.weak_label)
        r_ids[i], r_mask[i] = _pad_ids(s.response, tmax)
        labels[i] = s.label

    return Batch(ctx_ids, ctx_mask, goal_ids, goal_mask, k_ids, k_mask,
                 k_present, r_ids, r_mask, labels, weak)


def load_pretrained_embeddings(path, vocab, dim):
    """Read "token v1..vd" rows; returns {token_id: vector} for known tokens.

    Rows for out-of-vocabulary tokens are skipped; in-vocabulary tokens
    without a row keep their random initialization.
    """
    import numpy as np

    vectors = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            token, values = parts[0], parts[1:]
            if len(values) != dim:
                raise CorpusError(f"embedding row at line {lineno} has {len(values)} values, expected {dim}")
            tid = vocab.token_to_id.get(token)
            if tid is not None:
                vectors[tid] = np.array([float(v) for v in values])
    return vectors


def turn_key(sample):
    """Hashable key identifying the shared (context, goal, knowledge) of a turn."""
    return (
        tuple(tuple(u) for u in sample.context),
        tuple(sample.goal.token_seq),
        tuple(tuple(t.token_seq) for t in sample.knowledge),
    )


def group_turns(samples):
    """Group per-candidate samples into turns, preserving first-seen order."""
    groups = {}
    order = []
    for s in samples:
        key = turn_key(s)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(s)
    return [groups[k] for k in order]
