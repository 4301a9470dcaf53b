"""Command-line entry point covering the full pipeline.

Subcommands: synth, label, train, eval, index, gradcheck, serve.
Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
Every subcommand honors --seed and writes its artifacts plus a
manifest.json under --out.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


from .bm25 import build_index, load_index, save_index
from .data import (CorpusError, SchemaError, bind_sample, build_vocab,
                   load_pretrained_embeddings, read_raw_jsonl, sample_to_json)
from .evaluation import evaluate, render_table
from .gradcheck import TOLERANCE, run_suite
from .linking import LinkConfig, LinkError, agreement, label_corpus, read_annotations
from .network import Hyperparams, load_checkpoint, scorer_from_model
from .synthetic import SynthSpec, generate_synthetic_corpus
from .training import TrainConfig, TrainingError, train


def _write_manifest(out_dir, command, seed, artifacts):
    manifest = {"command": command, "seed": seed, "artifacts": sorted(artifacts)}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_jsonl(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(sample_to_json(row) + "\n")


def _load_config_file(path):
    with open(path, "rb") as fh:
        if path.endswith(".toml"):
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib
            return tomllib.load(fh)
        return json.load(fh)


# ---------------------------------------------------------------------------
# subcommand handlers


def cmd_synth(args):
    os.makedirs(args.out, exist_ok=True)
    spec = SynthSpec(n_dialogues=args.dialogues, n_movies=args.movies, n_stars=args.stars,
                     candidates_per_turn=args.candidates, n_confusable=args.confusables,
                     neg_ratio=args.neg_ratio)
    corpus = generate_synthetic_corpus(spec, seed=args.seed)
    artifacts = []
    for split, rows in corpus.items():
        path = os.path.join(args.out, f"{split}.jsonl")
        _write_jsonl(rows, path)
        artifacts.append(f"{split}.jsonl")
    _write_manifest(args.out, "synth", args.seed, artifacts)
    print(f"wrote {', '.join(artifacts)} to {args.out}")
    return 0


def cmd_label(args):
    os.makedirs(args.out, exist_ok=True)
    raws = read_raw_jsonl(args.data)
    vocab = build_vocab(raws)
    samples = [bind_sample(r, vocab) for r in raws]
    cfg = LinkConfig(descriptive_threshold=args.threshold,
                     descriptive_min_tokens=args.min_tokens)
    label_corpus(samples, cfg)
    out_path = os.path.join(args.out, "labeled.jsonl")
    _write_jsonl([s.raw for s in samples], out_path)
    artifacts = ["labeled.jsonl"]
    if args.human:
        items = read_annotations(args.human)
        by_key = {(s.raw.get("sample_id", i)): s for i, s in enumerate(samples)}
        weak, votes = [], []
        for item in items:
            sample = by_key.get(item["sample_id"])
            if sample is None:
                raise LinkError(f"annotation refers to unknown sample_id {item['sample_id']!r}")
            weak.append(sample.knowledge[item["triple_index"]].weak_label)
            votes.append(item["labels"])
        stats = agreement(weak, votes)
        print(f"agreement with human majority: {stats['percent_agree']:.2f}%  "
              f"fleiss kappa: {stats['fleiss_kappa']:.3f}")
        with open(os.path.join(args.out, "agreement.json"), "w", encoding="utf-8") as fh:
            json.dump(stats, fh, indent=2)
            fh.write("\n")
        artifacts.append("agreement.json")
    _write_manifest(args.out, "label", args.seed, artifacts)
    return 0


def cmd_train(args):
    os.makedirs(args.out, exist_ok=True)
    train_raws = read_raw_jsonl(args.train)
    valid_raws = read_raw_jsonl(args.valid)
    vocab_raws = list(train_raws) + list(valid_raws)
    for extra in args.vocab_extra or ():
        vocab_raws.extend(read_raw_jsonl(extra))
    vocab = build_vocab(vocab_raws)
    train_samples = [bind_sample(r, vocab) for r in train_raws]
    valid_samples = [bind_sample(r, vocab) for r in valid_raws]
    if not all("weak_labels" in r for r in train_raws if r["label"] == 1):
        label_corpus(train_samples)

    hyper = Hyperparams(embed_dim=args.embed_dim, lstm_hidden=args.lstm_hidden,
                        kp_window=args.kp_window, lambda_kp=args.lambda_kp,
                        mlp_hidden=args.mlp_hidden, seq_len=args.seq_len,
                        cnn_filters=args.cnn_filters)
    cfg = TrainConfig(epochs=args.epochs, batch_turns=args.batch_turns, lr=args.lr,
                      lambda_kp=args.lambda_kp, seed=args.seed, patience=args.patience,
                      grad_clip=args.grad_clip, checkpoint_dir=args.out,
                      disable_kp_loss=args.disable_kp_loss,
                      disable_goal_tracking=args.disable_goal_tracking,
                      disable_knowledge_head=args.disable_knowledge_head,
                      disable_goal_head=args.disable_goal_head)
    embeddings = None
    if args.embeddings:
        embeddings = load_pretrained_embeddings(args.embeddings, vocab, hyper.embed_dim)
    result = train(cfg, train_samples, valid_samples, vocab, hyper=hyper,
                   pretrained=embeddings)
    print(f"best validation MRR {result.best_mrr:.4f} at epoch {result.best_epoch} "
          f"({result.epochs_run} epochs run)")
    _write_manifest(args.out, "train", args.seed, ["model.ckpt", "metrics.jsonl"])
    return 0


def cmd_eval(args):
    os.makedirs(args.out, exist_ok=True)
    model = load_checkpoint(args.checkpoint)
    raws = read_raw_jsonl(args.data)
    samples = [bind_sample(r, model.vocab) for r in raws]
    scenario = {"ranked10": "ranked_10", "practical49": "practical_49"}[args.scenario]
    index = None
    if scenario == "practical_49":
        if not args.index:
            raise CorpusError("--index is required for the practical49 scenario")
        index = load_index(args.index)
    report = evaluate(scorer_from_model(model), samples, scenario, index=index,
                      seed=args.seed)
    payload = {
        "scenario": report["scenario"],
        "turns": report["turns"],
        "model": report["model"].to_dict(),
        "ground_truth": report["ground_truth"].to_dict(),
    }
    with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    table = render_table({"GT": report["ground_truth"], "model": report["model"]})
    with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    print(table)
    _write_manifest(args.out, "eval", args.seed, ["report.json", "report.txt"])
    return 0


def cmd_index(args):
    os.makedirs(args.out, exist_ok=True)
    raws = read_raw_jsonl(args.data)
    responses = [r["response"] for r in raws if r["label"] == 1]
    index = build_index(responses)
    path = os.path.join(args.out, "pool.idx")
    save_index(index, path)
    print(f"indexed {len(index.docs)} unique responses")
    _write_manifest(args.out, "index", args.seed, ["pool.idx"])
    return 0


def cmd_gradcheck(args):
    results = run_suite(seed=args.seed)
    worst = max(results.values())
    for name, err in sorted(results.items()):
        print(f"{name:28s} {err:.3e}")
    print(f"max relative error {worst:.3e} (tolerance {TOLERANCE:.0e})")
    return 0 if worst < TOLERANCE else 2


def cmd_serve(args):
    import uvicorn

    from .server import create_app, load_pool_index

    ckpt = args.checkpoint or os.environ.get("KPN_CHECKPOINT")
    pool = args.pool or os.environ.get("KPN_POOL")
    if not ckpt or not pool:
        raise CorpusError("serve needs --checkpoint and --pool (or KPN_CHECKPOINT/KPN_POOL)")
    addr = args.addr or os.environ.get("KPN_ADDR", "127.0.0.1:8080")
    host, _, port = addr.partition(":")
    app = create_app(model=load_checkpoint(ckpt), index=load_pool_index(pool),
                     ui_origin=os.environ.get("KPN_UI_ORIGIN", "*"),
                     session_dir=os.environ.get("KPN_SESSION_DIR"))
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port or 8080), log_level="warning")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(prog="dialrank",
                                     description="goal-driven retrieval dialogue pipeline")
    parser.add_argument("--config", help="JSON or TOML file of flag defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=7)
        p.add_argument("--out", default="out", help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--dialogues", type=int, default=SynthSpec.n_dialogues)
    p.add_argument("--movies", type=int, default=SynthSpec.n_movies)
    p.add_argument("--stars", type=int, default=SynthSpec.n_stars)
    p.add_argument("--candidates", type=int, default=SynthSpec.candidates_per_turn)
    p.add_argument("--confusables", type=int, default=SynthSpec.n_confusable)
    p.add_argument("--neg-ratio", type=int, default=SynthSpec.neg_ratio)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("label", help="generate weak knowledge-usage labels")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--human", help="JSONL human annotation file for agreement stats")
    p.add_argument("--threshold", type=float, default=0.7)
    p.add_argument("--min-tokens", type=int, default=8)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--vocab-extra", nargs="*",
                   help="extra JSONL files whose tokens join the vocabulary "
                        "(stands in for a pretrained embedding table's coverage)")
    p.add_argument("--embeddings", help="pretrained embedding text file: token v1..vd")
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--batch-turns", type=int, default=TrainConfig.batch_turns)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--lambda-kp", type=float, default=TrainConfig.lambda_kp)
    p.add_argument("--patience", type=int, default=TrainConfig.patience)
    p.add_argument("--grad-clip", type=float, default=TrainConfig.grad_clip)
    p.add_argument("--embed-dim", type=int, default=Hyperparams.embed_dim)
    p.add_argument("--lstm-hidden", type=int, default=Hyperparams.lstm_hidden)
    p.add_argument("--kp-window", type=int, default=Hyperparams.kp_window)
    p.add_argument("--mlp-hidden", type=int, default=Hyperparams.mlp_hidden)
    p.add_argument("--seq-len", type=int, default=Hyperparams.seq_len)
    p.add_argument("--cnn-filters", type=int, default=Hyperparams.cnn_filters)
    for flag in ("disable-kp-loss", "disable-goal-tracking",
                 "disable-knowledge-head", "disable-goal-head"):
        p.add_argument(f"--{flag}", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scenario", choices=("ranked10", "practical49"), default="ranked10")
    p.add_argument("--index", help="BM25 index file (practical49)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("index", help="build the BM25 response index")
    common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("serve", help="run the chat HTTP service")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--checkpoint")
    p.add_argument("--pool")
    p.add_argument("--addr")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if "--config" in argv:
            at = argv.index("--config")
            defaults = _load_config_file(argv[at + 1])
            subparsers = parser._subparsers._group_actions[0].choices
            sub = next((a for a in argv if a in subparsers), None)
            if sub is not None:
                valid = {a.dest for a in subparsers[sub]._actions}
                unknown = set(defaults) - valid
                if unknown:
                    raise CorpusError(f"config file sets unknown option(s): {sorted(unknown)}")
                subparsers[sub].set_defaults(**defaults)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    except (CorpusError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (SchemaError, CorpusError, LinkError, TrainingError, FileNotFoundError,
            KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
