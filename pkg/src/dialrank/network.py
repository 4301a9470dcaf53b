"""Joint goal-tracking / knowledge-prediction / response-selection network.

A turn shares one encoding of its context, goal and knowledge across all
candidate responses:

* goal tracking scales each goal-token embedding by how little the context
  already covers it (v' = 1 - ReLU(max cosine match));
* knowledge prediction scores each triple from its sentence-level cosine
  against the tracked goal and the last few utterances, and the resulting
  probability rescales the triple's embeddings;
* three matching heads score a candidate against the context (two-channel
  cosine matching matrices -> CNN -> aggregation LSTM -> MLP), the
  rescaled knowledge (matrices -> CNN -> attention-weighted sum -> MLP)
  and the tracked goal (last LSTM states -> MLP).

The final score is the plain average of the enabled head scores; sigmoid
is applied only inside the selection loss.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .data import Vocabulary, group_turns, make_batch


class ModelError(ValueError):
    """Model-level precondition failed."""


@dataclass
class AblationFlags:
    disable_kp_loss: bool = False
    disable_goal_tracking: bool = False
    disable_knowledge_head: bool = False
    disable_goal_head: bool = False


@dataclass
class Hyperparams:
    vocab_size: int = 0
    embed_dim: int = 24
    lstm_hidden: int = 24
    kp_window: int = 3
    lambda_kp: float = 0.3
    mlp_hidden: int = 24
    seq_len: int = 12
    cnn_filters: int = 6
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        if isinstance(self.ablation, dict):
            self.ablation = AblationFlags(**self.ablation)
        if self.kp_window < 1 or self.lambda_kp < 0 or self.embed_dim < 1 or self.lstm_hidden < 1:
            raise ModelError("invalid hyperparameters")

    @property
    def cnn_features(self):
        side = -(-(self.seq_len - 2) // 2)
        return self.cnn_filters * side * side


@dataclass
class TurnScores:
    s_cr: float
    s_kr: float
    s_gr: float
    y_hat: float
    kp_scores: list
    goal_coverage: list  # v' per goal token


def _fit(ids, mask, width):
    """Clamp/pad token arrays along the last axis to the model's width."""
    cur = ids.shape[-1]
    if cur == width:
        return ids, mask
    if cur > width:
        return ids[..., :width], mask[..., :width]
    pad = [(0, 0)] * (ids.ndim - 1) + [(0, width - cur)]
    return np.pad(ids, pad), np.pad(mask, pad)


class Model:
    """Parameter bundle plus the forward pass, shared by training and serving."""

    def __init__(self, hyper, vocab, seed=0):
        if hyper.vocab_size == 0:
            hyper.vocab_size = len(vocab)
        if hyper.vocab_size != len(vocab):
            raise ModelError(f"hyperparams expect vocab of {hyper.vocab_size}, got {len(vocab)}")
        self.hyper = hyper
        self.vocab = vocab
        self.params = {}
        self._init_params(seed)

    # -- parameters ---------------------------------------------------------

    def _add(self, name, shape, rng):
        self.params[name] = ag.tensor(rng.uniform(-0.1, 0.1, size=shape), requires_grad=True)

    def _add_lstm(self, name, d_in, rng):
        h = self.hyper.lstm_hidden
        self._add(f"{name}_wx", (d_in, 4 * h), rng)
        self._add(f"{name}_wh", (h, 4 * h), rng)
        self._add(f"{name}_b", (4 * h,), rng)
        self.params[f"{name}_b"].data[h:2 * h] = 1.0  # forget gate opens by default

    def _add_mlp(self, name, d_in, rng):
        hid = self.hyper.mlp_hidden
        self._add(f"{name}_w1", (d_in, hid), rng)
        self._add(f"{name}_b1", (hid,), rng)
        self._add(f"{name}_w2", (hid, 1), rng)
        self._add(f"{name}_b2", (1,), rng)

    def _init_params(self, seed):
        hp = self.hyper
        rng = np.random.default_rng(seed)
        self._add("embedding", (hp.vocab_size, hp.embed_dim), rng)
        self.params["embedding"].data[0] = 0.0  # PAD row
        for name in ("utt", "resp", "know", "goal"):
            self._add_lstm(name, hp.embed_dim, rng)
        self._add_lstm("agg", hp.cnn_features, rng)
        for name in ("cnn_ctx", "cnn_know"):
            self._add(f"{name}_w", (hp.cnn_filters, 2, 3, 3), rng)
            self._add(f"{name}_b", (hp.cnn_filters,), rng)
        self._add("kp_w", (hp.kp_window + 1, 1), rng)
        self._add("kp_b", (1,), rng)
        self._add_mlp("cr", hp.lstm_hidden, rng)
        self._add_mlp("att", hp.cnn_features, rng)
        self._add_mlp("kr", hp.cnn_features, rng)
        self._add_mlp("gr", 2 * hp.lstm_hidden, rng)

    def param_list(self):
        return list(self.params.values())

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()

    # -- building blocks ----------------------------------------------------

    def embed(self, ids, mask):
        """Embedding rows for a token-id array; masked rows are exactly zero."""
        return ag.rows_lookup(self.params["embedding"], ids, mask)

    def _lstm(self, name, x):
        return ag.lstm_batch(x, self.params[f"{name}_wx"], self.params[f"{name}_wh"],
                             self.params[f"{name}_b"])

    def _mlp(self, name, mat):
        """Two-layer scorer over row vectors: (n, k) -> (n,)."""
        hidden = ag.relu(ag.add_bias(ag.matmul(mat, self.params[f"{name}_w1"]),
                                     self.params[f"{name}_b1"]))
        out = ag.add_bias(ag.matmul(hidden, self.params[f"{name}_w2"]), self.params[f"{name}_b2"])
        return ag.reshape(out, (mat.data.shape[0],))

    def track_goal(self, goal_emb, ctx_emb):
        """Coverage-complement vector v' and the rescaled goal embeddings."""
        n_goal = goal_emb.data.shape[0]
        if n_goal == 0:
            raise ModelError("track_goal on an empty goal")
        if self.hyper.ablation.disable_goal_tracking or ctx_emb is None:
            v_prime = ag.tensor(np.ones(n_goal))
            return v_prime, goal_emb
        flat = ag.reshape(ctx_emb, (-1, ctx_emb.data.shape[-1]))
        match = ag.cosine_matrix(goal_emb, flat)
        covered = ag.relu(ag.pool(match, 1, "max"))
        v_prime = ag.sub_from_one(covered)
        return v_prime, ag.scale_rows(goal_emb, v_prime)

    def predict_knowledge(self, goal_scaled, goal_mask, ctx_emb, ctx_mask, k_emb, k_mask):
        """Per-triple usage probabilities and the rescaled triple embeddings."""
        if k_emb.data.shape[0] == 0:
            raise ModelError("predict_knowledge with no knowledge triples")
        m = self.hyper.kp_window
        d = self.hyper.embed_dim
        goal_bar = ag.masked_mean_rows(goal_scaled, goal_mask)
        rows = [goal_bar]
        if ctx_emb is None:
            n_utts = 0
        else:
            utt_bar = ag.masked_mean_rows(ctx_emb, ctx_mask)
            n_utts = utt_bar.data.shape[0]
        for i in range(m):
            idx = n_utts - m + i
            if idx < 0:
                rows.append(ag.tensor(np.zeros(d)))  # missing utterance: zero sentence vector
            else:
                rows.append(ag.take_row(utt_bar, idx))
        ref = ag.stack(rows, axis=0)
        k_bar = ag.masked_mean_rows(k_emb, k_mask)
        scores = ag.cosine_matrix(k_bar, ref)
        logits = ag.add_bias(ag.matmul(scores, self.params["kp_w"]), self.params["kp_b"])
        kp_scores = ag.sigmoid(ag.reshape(logits, (logits.data.shape[0],)))
        return kp_scores, ag.scale_rows(k_emb, kp_scores)

    def _pair_features(self, left_emb, left_states, r_emb, r_states, cnn, gates=None):
        """Two-channel matching matrices (word + LSTM cosines) through the CNN.

        left_* hold n sequences shared by every candidate, r_* hold c
        candidate sequences; output features are (c*n, F) with pair (cand,
        seq) at row cand*n + seq.  `gates`, when given, rescales each left
        sequence's word-channel matrix: cosine is scale-invariant, so this
        is how the knowledge-usage probabilities reach the matching matrix
        (values stay inside [-1, 1]).
        """
        n = left_emb.data.shape[0]
        c = r_emb.data.shape[0]
        ch1 = ag.cosine_matrix(ag.tile0(left_emb, c), ag.repeat0(r_emb, n))
        if gates is not None:
            ch1 = ag.scale_rows(ch1, ag.tile0(gates, c))
        ch2 = ag.cosine_matrix(ag.tile0(left_states, c), ag.repeat0(r_states, n))
        stacked = ag.stack([ch1, ch2], axis=1)
        return ag.conv2d_block(stacked, self.params[f"{cnn}_w"], self.params[f"{cnn}_b"])

    def match_context(self, ctx_emb, ctx_states, r_emb, r_states):
        """Context-response scores s_cr for every candidate: (c,)."""
        n_utts = ctx_emb.data.shape[0]
        n_cands = r_emb.data.shape[0]
        feats = self._pair_features(ctx_emb, ctx_states, r_emb, r_states, "cnn_ctx")
        per_turn = ag.reshape(feats, (n_cands, n_utts, feats.data.shape[1]))
        agg = self._lstm("agg", per_turn)
        last = ag.gather_rows(agg, np.full(n_cands, n_utts - 1))
        return self._mlp("cr", last)

    def match_knowledge(self, k_scaled, k_states, r_emb, r_states, kp_scores=None):
        """Knowledge-response scores s_kr via attention over triple features."""
        n_triples = k_scaled.data.shape[0]
        n_cands = r_emb.data.shape[0]
        feats = self._pair_features(k_scaled, k_states, r_emb, r_states, "cnn_know",
                                    gates=kp_scores)
        n_feat = feats.data.shape[1]
        att_hidden = ag.relu(ag.add_bias(ag.matmul(feats, self.params["att_w1"]),
                                         self.params["att_b1"]))
        alphas = ag.relu(ag.reshape(
            ag.add_bias(ag.matmul(att_hidden, self.params["att_w2"]), self.params["att_b2"]),
            (n_cands, n_triples)))
        weights = ag.softmax_rows(alphas)
        h2 = ag.bmm(ag.reshape(weights, (n_cands, 1, n_triples)),
                    ag.reshape(feats, (n_cands, n_triples, n_feat)))
        return self._mlp("kr", ag.reshape(h2, (n_cands, n_feat)))

    def match_goal(self, goal_last, r_last):
        """Goal-response scores s_gr from the concatenated final LSTM states."""
        n_cands = r_last.data.shape[0]
        tiled = ag.tile0(ag.reshape(goal_last, (1, goal_last.data.shape[0])), n_cands)
        return self._mlp("gr", ag.concat([tiled, r_last], axis=1))

    # -- turn-level forward ---------------------------------------------------

    def _encode_turn(self, ctx_ids, ctx_mask, goal_ids, goal_mask, k_ids, k_mask, k_present):
        hp = self.hyper
        ctx_ids, ctx_mask = _fit(ctx_ids, ctx_mask, hp.seq_len)
        k_ids, k_mask = _fit(k_ids, k_mask, hp.seq_len)

        real_utts = ctx_mask.sum(axis=1) > 0
        ctx_ids, ctx_mask = ctx_ids[real_utts], ctx_mask[real_utts]
        have_ctx = ctx_ids.shape[0] > 0
        real_triples = k_present > 0
        k_ids, k_mask = k_ids[real_triples], k_mask[real_triples]
        if k_ids.shape[0] == 0:
            raise ModelError("turn has no knowledge triples")
        live_goal = goal_mask > 0
        goal_ids, goal_mask = goal_ids[live_goal], goal_mask[live_goal]
        if goal_ids.shape[0] == 0:
            raise ModelError("turn has an empty goal")

        ctx_emb = self.embed(ctx_ids, ctx_mask) if have_ctx else None
        ctx_states = ag.mask_rows(self._lstm("utt", ctx_emb), ctx_mask) if have_ctx else None
        goal_emb = self.embed(goal_ids, goal_mask)
        v_prime, goal_scaled = self.track_goal(goal_emb, ctx_emb)
        k_emb = self.embed(k_ids, k_mask)
        kp_scores, k_scaled = self.predict_knowledge(goal_scaled, goal_mask, ctx_emb, ctx_mask,
                                                     k_emb, k_mask)
        k_states = ag.mask_rows(self._lstm("know", k_scaled), k_mask)
        goal_states3 = self._lstm("goal", ag.reshape(goal_scaled, (1,) + goal_scaled.data.shape))
        goal_states = ag.reshape(goal_states3, goal_states3.data.shape[1:])
        goal_last = ag.take_row(goal_states, goal_states.data.shape[0] - 1)
        return {
            "ctx_emb": ctx_emb, "ctx_mask": ctx_mask, "ctx_states": ctx_states,
            "v_prime": v_prime, "goal_scaled": goal_scaled, "goal_last": goal_last,
            "kp_scores": kp_scores, "k_scaled": k_scaled, "k_states": k_states,
            "k_index": np.nonzero(real_triples)[0],
        }

    def _score_candidates(self, enc, r_ids, r_mask):
        """Score all candidates of one turn at once; r_ids is (c, T)."""
        hp = self.hyper
        r_ids, r_mask = _fit(r_ids, r_mask, hp.seq_len)
        n_cands = r_ids.shape[0]
        r_emb = self.embed(r_ids, r_mask)
        r_states = ag.mask_rows(self._lstm("resp", r_emb), r_mask)
        last_idx = np.maximum(r_mask.sum(axis=1).astype(int) - 1, 0)
        r_last = ag.gather_rows(r_states, last_idx)

        heads = []
        flags = hp.ablation
        zero = ag.tensor(np.zeros(n_cands))
        if enc["ctx_emb"] is not None:
            s_cr = self.match_context(enc["ctx_emb"], enc["ctx_states"], r_emb, r_states)
        else:
            s_cr = zero
        heads.append(s_cr)
        if not flags.disable_knowledge_head:
            s_kr = self.match_knowledge(enc["k_scaled"], enc["k_states"], r_emb, r_states,
                                        kp_scores=enc["kp_scores"])
            heads.append(s_kr)
        else:
            s_kr = zero
        if not flags.disable_goal_head:
            s_gr = self.match_goal(enc["goal_last"], r_last)
            heads.append(s_gr)
        else:
            s_gr = zero

        total = heads[0]
        for h in heads[1:]:
            total = ag.add(total, h)
        y_hat = ag.mul(total, 1.0 / len(heads))
        return y_hat, s_cr, s_kr, s_gr

    def _iter_turns(self, batch):
        """Group batch rows sharing (context, goal, knowledge); yields row indices."""
        groups, order = {}, []
        for i in range(len(batch)):
            key = (batch.context_ids[i].tobytes(), batch.context_mask[i].tobytes(),
                   batch.goal_ids[i].tobytes(), batch.knowledge_ids[i].tobytes(),
                   batch.knowledge_present[i].tobytes())
            if key not in groups:
                groups[key] = []
                order.append(key)
            groups[key].append(i)
        return [groups[k] for k in order]

    def forward(self, batch):
        """Score every row; returns (y_logits (B,), per-turn kp info, row TurnScores)."""
        scores_rows = [None] * len(batch)
        turn_infos = []
        turn_ys = []
        concat_rows = []
        for rows in self._iter_turns(batch):
            i0 = rows[0]
            enc = self._encode_turn(batch.context_ids[i0], batch.context_mask[i0],
                                    batch.goal_ids[i0], batch.goal_mask[i0],
                                    batch.knowledge_ids[i0], batch.knowledge_mask[i0],
                                    batch.knowledge_present[i0])
            weak = batch.weak_labels[i0][enc["k_index"]]
            turn_infos.append({"kp_scores": enc["kp_scores"], "weak": weak, "rows": rows})
            kp_list = [float(x) for x in enc["kp_scores"].data]
            coverage = [float(x) for x in enc["v_prime"].data]
            y_hat, s_cr, s_kr, s_gr = self._score_candidates(
                enc, batch.response_ids[rows], batch.response_mask[rows])
            turn_ys.append(y_hat)
            concat_rows.extend(rows)
            for local, i in enumerate(rows):
                scores_rows[i] = TurnScores(
                    s_cr=float(s_cr.data[local]), s_kr=float(s_kr.data[local]),
                    s_gr=float(s_gr.data[local]), y_hat=float(y_hat.data[local]),
                    kp_scores=kp_list, goal_coverage=coverage)
        stacked = turn_ys[0] if len(turn_ys) == 1 else ag.concat(turn_ys, axis=0)
        inverse = np.empty(len(batch), dtype=np.int64)
        inverse[np.asarray(concat_rows)] = np.arange(len(batch))
        y_logits = ag.permute0(stacked, inverse)
        return y_logits, turn_infos, scores_rows

    def score(self, batch):
        """Inference: TurnScores per batch row (candidate)."""
        _, _, scores = self.forward(batch)
        return scores

    def score_samples(self, samples, limits=None):
        limits = limits or default_limits(self.hyper)
        return self.score(make_batch(samples, limits))


def default_limits(hyper):
    from .data import BatchLimits

    return BatchLimits(max_utterances=4, max_tokens=hyper.seq_len, max_triples=8)


def scorer_from_model(model, limits=None):
    """Adapter for the evaluation suite: (raw turn, candidate texts) -> scores."""
    from .data import bind_sample

    limits = limits or default_limits(model.hyper)

    def scorer(raw, candidates):
        rows = []
        for cand in candidates:
            row = {k: v for k, v in raw.items() if k not in ("candidates", "planted")}
            row["response"] = cand
            row["label"] = 0
            rows.append(bind_sample(row, model.vocab))
        batch = make_batch(rows, limits)
        return [s.y_hat for s in model.score(batch)]

    return scorer


# ---------------------------------------------------------------------------
# losses (selection + knowledge prediction)


def rs_loss(y_logits, labels):
    """Mean binary cross-entropy of sigmoid(y) against the 0/1 labels."""
    labels = np.asarray(labels, dtype=np.float64)
    if np.any((labels != 0.0) & (labels != 1.0)):
        raise ModelError("selection labels must be 0 or 1")
    return ag.bce_with_logits(y_logits, labels)


def kp_loss(kp_scores, weak_labels, mask=None):
    """Mean BCE of the knowledge-usage probabilities against the weak labels."""
    return ag.bce_probs(kp_scores, np.asarray(weak_labels, dtype=np.float64), mask)


def batch_kp_loss(turn_infos):
    """KP loss over every labeled real triple of the batch's turns."""
    scores = ag.concat([t["kp_scores"] for t in turn_infos], axis=0)
    weak = np.concatenate([t["weak"] for t in turn_infos])
    if np.any(weak < 0):
        raise ModelError("knowledge-prediction loss requires weak labels on every turn")
    return kp_loss(scores, weak)


# ---------------------------------------------------------------------------
# checkpoint serialization


CHECKPOINT_VERSION = 1


def save_checkpoint(path, model):
    """JSON header + raw little-endian float64 blocks, written atomically."""
    names = list(model.params.keys())
    manifest, offset = [], 0
    for name in names:
        arr = model.params[name].data
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset,
                         "nbytes": arr.size * 8})
        offset += arr.size * 8
    header = {
        "version": CHECKPOINT_VERSION,
        "hyperparams": asdict(model.hyper),
        "vocab": model.vocab.to_list(),
        "vocab_hash": model.vocab.content_hash(),
        "tensors": manifest,
    }
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, ensure_ascii=False).encode("utf-8"))
        fh.write(b"\n")
        for name in names:
            fh.write(model.params[name].data.astype("<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header["version"] != CHECKPOINT_VERSION:
            raise ModelError(f"unsupported checkpoint version {header['version']}")
        blob = fh.read()
    vocab = Vocabulary.from_list(header["vocab"])
    if vocab.content_hash() != header["vocab_hash"]:
        raise ModelError("checkpoint vocabulary hash mismatch")
    hyper = Hyperparams(**header["hyperparams"])
    model = Model(hyper, vocab, seed=0)
    for entry in header["tensors"]:
        arr = np.frombuffer(blob, dtype="<f8", count=int(np.prod(entry["shape"])) if entry["shape"] else 1,
                            offset=entry["offset"]).reshape(entry["shape"])
        model.params[entry["name"]].data = arr.astype(np.float64).copy()
    return model
