"""Finite-difference verification of every differentiable op and the full
joint loss on a desk-sized model instance.

Central differences with h=1e-5 in float64; anything above a relative
error of 1e-4 is a bug, not noise.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .data import BatchLimits, bind_sample, build_vocab, make_batch
from .linking import label_corpus
from .network import Hyperparams, Model, batch_kp_loss, rs_loss
from .synthetic import SynthSpec, generate_synthetic_corpus

TOLERANCE = 1e-4


def _op_cases(seed):
    rng = np.random.default_rng(seed)
    cases = {}

    a = ag.tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = ag.tensor(rng.normal(size=(4, 2)), requires_grad=True)
    c = ag.tensor(rng.normal(size=(3, 2)), requires_grad=True)
    cases["matmul_add_relu"] = ([a, b, c],
                                lambda: ag.asum(ag.relu(ag.add(ag.matmul(a, b), c))))

    u = ag.tensor(rng.normal(size=5), requires_grad=True)
    v = ag.tensor(rng.normal(size=5), requires_grad=True)
    cases["mul_sigmoid_tanh_subone"] = (
        [u, v], lambda: ag.asum(ag.mul(ag.sigmoid(u), ag.sub_from_one(ag.tanh(v)))))

    p = ag.tensor(rng.normal(size=6), requires_grad=True)
    q = ag.tensor(rng.normal(size=6), requires_grad=True)
    cases["cosine"] = ([p, q], lambda: ag.cosine(p, q))

    cm_a = ag.tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    cm_b = ag.tensor(rng.normal(size=(5, 4)), requires_grad=True)
    cm_w = ag.tensor(rng.normal(size=(2, 3, 5)))
    cases["cosine_matrix"] = ([cm_a, cm_b],
                              lambda: ag.asum(ag.mul(ag.cosine_matrix(cm_a, cm_b), cm_w)))

    sv = ag.tensor(rng.normal(size=6), requires_grad=True)
    sw = ag.tensor(rng.normal(size=6))
    cases["softmax"] = ([sv], lambda: ag.asum(ag.mul(ag.softmax(sv), sw)))

    sm = ag.tensor(rng.normal(size=(3, 4)), requires_grad=True)
    smw = ag.tensor(rng.normal(size=(3, 4)))
    cases["softmax_rows"] = ([sm], lambda: ag.asum(ag.mul(ag.softmax_rows(sm), smw)))

    pt = ag.tensor(rng.normal(size=(4, 5)), requires_grad=True)
    pw = ag.tensor(rng.normal(size=4))
    cases["pool"] = ([pt], lambda: ag.add(
        ag.asum(ag.mul(ag.pool(pt, 1, "max"), pw)), ag.asum(ag.pool(pt, 0, "mean"))))

    cx = ag.tensor(rng.normal(size=(2, 2, 7, 6)), requires_grad=True)
    cw = ag.tensor(rng.normal(size=(3, 2, 3, 3)) * 0.5, requires_grad=True)
    cb = ag.tensor(rng.normal(size=3) * 0.1, requires_grad=True)
    cmix = ag.tensor(rng.normal(size=(2, 3 * 3 * 2)))
    cases["conv2d_block"] = ([cx, cw, cb],
                             lambda: ag.asum(ag.mul(ag.conv2d_block(cx, cw, cb), cmix)))

    lx = ag.tensor(rng.normal(size=(2, 4, 3)), requires_grad=True)
    lwx = ag.tensor(rng.normal(size=(3, 8)) * 0.5, requires_grad=True)
    lwh = ag.tensor(rng.normal(size=(2, 8)) * 0.5, requires_grad=True)
    lb = ag.tensor(rng.normal(size=8) * 0.1, requires_grad=True)
    lmix = ag.tensor(rng.normal(size=(2, 4, 2)))
    cases["lstm"] = ([lx, lwx, lwh, lb],
                     lambda: ag.asum(ag.mul(ag.lstm_batch(lx, lwx, lwh, lb), lmix)))

    tbl = ag.tensor(rng.normal(size=(7, 4)), requires_grad=True)
    ids = np.array([[1, 2, 2], [5, 0, 6]])
    msk = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 1.0]])
    logits = ag.tensor(rng.normal(size=4), requires_grad=True)
    targ = np.array([1.0, 0.0, 1.0, 0.0])

    def losses():
        emb = ag.rows_lookup(tbl, ids, msk)
        probs = ag.sigmoid(ag.pool(ag.reshape(emb, (6, 4)), 1, "mean"))
        return ag.add(ag.bce_probs(probs, np.array([1, 0, 0, 1, 0, 1.0])),
                      ag.bce_with_logits(logits, targ))

    cases["lookup_and_losses"] = ([tbl, logits], losses)

    gx = ag.tensor(rng.normal(size=(3, 4, 5)), requires_grad=True)
    gs = ag.tensor(rng.uniform(0.2, 0.9, size=3), requires_grad=True)
    gmask = (rng.uniform(size=(3, 4)) > 0.3).astype(float)
    gmask[:, 0] = 1.0

    def rows():
        scaled = ag.mask_rows(ag.scale_rows(gx, gs), gmask)
        mean = ag.masked_mean_rows(scaled, gmask)
        gathered = ag.gather_rows(scaled, np.array([1, 0, 3]))
        tiled = ag.tile0(ag.repeat0(mean, 2), 2)
        return ag.add(ag.asum(ag.mul(mean, mean)), ag.add(ag.asum(gathered), ag.asum(tiled)))

    cases["row_ops"] = ([gx, gs], rows)

    ba = ag.tensor(rng.normal(size=(2, 2, 3)), requires_grad=True)
    bb = ag.tensor(rng.normal(size=(2, 3, 2)), requires_grad=True)
    cases["bmm_permute"] = ([ba, bb], lambda: ag.asum(
        ag.permute0(ag.reshape(ag.bmm(ba, bb), (8,)), np.array([3, 1, 0, 2, 7, 5, 4, 6]))))

    return cases


def tiny_model_case(seed):
    """A 2-turn joint loss over a miniature corpus and model."""
    corpus = generate_synthetic_corpus(SynthSpec(n_dialogues=6, n_movies=2, n_stars=2,
                                                 neg_ratio=2, train_frac=1.0, valid_frac=0.0),
                                       seed=seed)
    vocab = build_vocab(corpus["train"])
    samples = [bind_sample(r, vocab) for r in corpus["train"]]
    label_corpus(samples)
    hyper = Hyperparams(embed_dim=5, lstm_hidden=4, seq_len=8, cnn_filters=2, mlp_hidden=4)
    model = Model(hyper, vocab, seed=seed)
    # keep the FD sweep affordable: trim the embedding table to the used rows
    limits = BatchLimits(max_utterances=3, max_tokens=hyper.seq_len, max_triples=6)
    rows = samples[:10]
    batch = make_batch(rows, limits)

    def fn():
        y, infos, _ = model.forward(batch)
        return ag.add(ag.mul(batch_kp_loss(infos), hyper.lambda_kp), rs_loss(y, batch.labels))

    return model, fn


def run_suite(seed=7, include_model=True):
    """Max relative FD error per op family plus the end-to-end joint loss."""
    results = {}
    for name, (params, fn) in _op_cases(seed).items():
        results[name] = ag.grad_check(fn, params)
    if include_model:
        model, fn = tiny_model_case(seed)
        results["joint_loss_end_to_end"] = ag.grad_check(fn, model.param_list())
    return results
