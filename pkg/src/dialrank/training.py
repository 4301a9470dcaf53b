"""Joint training loop: seeded shuffling, Adam, validation-driven selection.

All candidates of one turn stay in the same batch so validation can rank
them directly; the knowledge-prediction loss is computed once per turn
(it does not depend on the candidate) and mixed into the total as
lambda * L_kp + L_rs.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .data import BatchLimits, group_turns, make_batch
from .evaluation import rank_of
from .network import (AblationFlags, Hyperparams, Model, batch_kp_loss, rs_loss,
                      save_checkpoint)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_turns: int = 8
    lr: float = 3e-3
    lambda_kp: float = 0.3
    seed: int = 42
    patience: int = 6
    grad_clip: float = 5.0
    checkpoint_dir: str = "."
    disable_kp_loss: bool = False
    disable_goal_tracking: bool = False
    disable_knowledge_head: bool = False
    disable_goal_head: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_turns < 1 or self.lambda_kp < 0:
            raise TrainingError("epochs and batch size must be >= 1 and lambda >= 0")

    def ablation(self):
        return AblationFlags(
            disable_kp_loss=self.disable_kp_loss,
            disable_goal_tracking=self.disable_goal_tracking,
            disable_knowledge_head=self.disable_knowledge_head,
            disable_goal_head=self.disable_goal_head,
        )


@dataclass
class TrainResult:
    checkpoint_path: str
    log_path: str
    best_mrr: float
    best_epoch: int
    epochs_run: int
    history: list = field(default_factory=list)


def joint_loss(batch, model, lam):
    """lambda * L_kp + L_rs as one differentiable scalar."""
    y_logits, turn_infos, _ = model.forward(batch)
    l_rs = rs_loss(y_logits, batch.labels)
    if lam == 0:
        return l_rs
    if np.any(batch.weak_labels[batch.knowledge_present > 0] < 0):
        raise TrainingError("joint loss with lambda > 0 requires weak labels on the batch")
    l_kp = batch_kp_loss(turn_infos)
    return ag.add(ag.mul(l_kp, lam), l_rs)


def _first_nonfinite(tape, params):
    for name, p in params.items():
        if not np.all(np.isfinite(p.data)):
            return f"parameter {name}"
    for node in tape.nodes:
        if not np.all(np.isfinite(node.out.data)):
            return f"op {node.op}"
    return "loss"


def validate(model, valid_turns, limits):
    """Mean reciprocal rank and Hits@1 over grouped validation turns."""
    ranks = []
    for turn in valid_turns:
        batch = make_batch(turn, limits)
        scores = [s.y_hat for s in model.score(batch)]
        gt = next(i for i, s in enumerate(turn) if s.label == 1)
        ranks.append(rank_of(scores, gt))
    mrr = float(np.mean([1.0 / r for r in ranks]))
    hits1 = float(np.mean([1.0 if r == 1 else 0.0 for r in ranks]))
    return mrr, hits1


def train(config, train_samples, valid_samples, vocab, hyper=None, pretrained=None):
    """Run the epoch loop; returns the best checkpoint and the metrics log.

    `pretrained` optionally maps token ids to embedding vectors which
    overwrite the random initialization before the first step.
    """
    hyper = hyper or Hyperparams()
    hyper.ablation = config.ablation()
    hyper.lambda_kp = config.lambda_kp
    model = Model(hyper, vocab, seed=config.seed)
    if pretrained:
        for tid, vec in pretrained.items():
            model.params["embedding"].data[tid] = vec
    limits = BatchLimits(max_utterances=4, max_tokens=hyper.seq_len, max_triples=8)

    params = model.param_list()
    names = list(model.params.keys())
    state = ag.AdamState(params)

    turns = group_turns(train_samples)
    valid_turns = group_turns(valid_samples)
    use_kp = config.lambda_kp > 0 and not config.disable_kp_loss

    os.makedirs(config.checkpoint_dir, exist_ok=True)
    ckpt_path = os.path.join(config.checkpoint_dir, "model.ckpt")
    log_path = os.path.join(config.checkpoint_dir, "metrics.jsonl")

    best_mrr, best_epoch, bad_epochs = -1.0, -1, 0
    history = []
    epochs_run = 0
    t0 = time.monotonic()

    with open(log_path, "w", encoding="utf-8") as log:
        for epoch in range(1, config.epochs + 1):
            epochs_run = epoch
            order = np.random.default_rng([config.seed, epoch]).permutation(len(turns))
            sum_loss = sum_rs = sum_kp = 0.0
            n_batches = 0
            for start in range(0, len(order), config.batch_turns):
                chunk = [turns[i] for i in order[start:start + config.batch_turns]]
                samples = [s for t in chunk for s in t]
                batch = make_batch(samples, limits)
                model.zero_grads()
                with ag.Tape() as tape:
                    y_logits, turn_infos, _ = model.forward(batch)
                    l_rs = rs_loss(y_logits, batch.labels)
                    l_kp = batch_kp_loss(turn_infos) if use_kp else None
                    loss = ag.add(ag.mul(l_kp, config.lambda_kp), l_rs) if use_kp else l_rs
                    if not np.isfinite(loss.item()):
                        raise TrainingError(
                            "non-finite loss; first offending tensor: "
                            + _first_nonfinite(tape, model.params))
                    tape.backward(loss)
                grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
                ag.clip_grad_norm(grads, config.grad_clip)
                ag.adam_step(params, grads, state, lr=config.lr)
                sum_loss += loss.item()
                sum_rs += l_rs.item()
                if l_kp is not None:
                    sum_kp += l_kp.item()
                n_batches += 1

            mrr, hits1 = validate(model, valid_turns, limits)
            entry = {"epoch": epoch, "loss": sum_loss / n_batches, "loss_rs": sum_rs / n_batches}
            if use_kp:
                entry["loss_kp"] = sum_kp / n_batches
            entry.update({"valid_mrr": mrr, "valid_hits1": hits1,
                          "seconds": round(time.monotonic() - t0, 3)})
            history.append(entry)
            log.write(json.dumps(entry) + "\n")
            log.flush()

            if mrr > best_mrr:
                best_mrr, best_epoch, bad_epochs = mrr, epoch, 0
                save_checkpoint(ckpt_path, model)
            else:
                bad_epochs += 1
                if bad_epochs >= config.patience:
                    break

    return TrainResult(checkpoint_path=ckpt_path, log_path=log_path, best_mrr=best_mrr,
                       best_epoch=best_epoch, epochs_run=epochs_run, history=history)
