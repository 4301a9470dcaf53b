from dialrank.data import build_vocab, bind_sample, tokenize, validate_raw
from dialrank.linking import label_corpus, label_triple
from dialrank.synthetic import SynthSpec, generate_synthetic_corpus


def gen(**kw):
    spec = SynthSpec(**{"n_dialogues": 50, "n_movies": 6, "n_stars": 6, **kw})
    return spec, generate_synthetic_corpus(spec, seed=13)


def test_all_rows_validate():
    _, corpus = gen()
    for split, rows in corpus.items():
        for raw in rows:
            validate_raw(raw)


def test_split_sizes_and_candidate_counts():
    spec, corpus = gen()
    n_train = int(50 * spec.train_frac)
    positives = [r for r in corpus["train"] if r["label"] == 1]
    assert len(positives) == n_train
    # each train turn: positive + confusables + random negatives
    per_turn = 1 + spec.n_confusable + spec.neg_ratio
    assert len(corpus["train"]) == n_train * per_turn
    for row in corpus["test"]:
        assert len(row["candidates"]) == spec.candidates_per_turn
        assert row["candidates"].count(row["response"]) == 1
        assert len(set(row["candidates"])) == spec.candidates_per_turn


def test_positive_mentions_exactly_one_goal_entity():
    _, corpus = gen()
    for split in ("train", "valid", "test"):
        for raw in corpus[split]:
            if raw["label"] != 1:
                continue
            toks = tokenize(raw["response"])
            mentioned = []
            for ent in raw["goal"]:
                et = tokenize(ent)
                if any(toks[i:i + len(et)] == et for i in range(len(toks))):
                    mentioned.append(ent)
            assert len(mentioned) == 1, raw["response"]


def test_weak_labels_match_planted_indicator():
    _, corpus = gen()
    vocab = build_vocab(corpus["train"] + corpus["valid"] + corpus["test"])
    for split in ("train", "valid", "test"):
        positives = [bind_sample(r, vocab) for r in corpus[split] if r["label"] == 1]
        for pos in positives:
            got = [label_triple(t, pos.raw["response"]) for t in pos.knowledge]
            assert got == pos.raw["planted"]
            assert sum(got) >= 1


def test_confusables_share_star_but_wrong_knowledge():
    _, corpus = gen()
    vocab = build_vocab(corpus["train"])
    by_turn = {}
    for raw in corpus["train"]:
        by_turn.setdefault(tuple(raw["context"]), []).append(raw)
    checked = 0
    for rows in by_turn.values():
        pos = next(r for r in rows if r["label"] == 1)
        star = pos["goal"][1]
        confusables = rows[1:3]  # generator emits them right after the positive
        for conf in confusables:
            if conf["label"] != 0 or star not in conf["response"]:
                continue
            sample = bind_sample(conf, vocab)
            linked = {j for j, t in enumerate(sample.knowledge)
                      if label_triple(t, conf["response"]) == 1}
            planted = {j for j, y in enumerate(pos["planted"]) if y == 1}
            assert linked and not (linked & planted)
            checked += 1
    assert checked >= 10


def test_generation_is_deterministic():
    spec = SynthSpec(n_dialogues=30, n_movies=4, n_stars=4)
    a = generate_synthetic_corpus(spec, seed=21)
    b = generate_synthetic_corpus(spec, seed=21)
    assert a == b


def test_weak_label_pipeline_marks_positive_triples():
    _, corpus = gen()
    vocab = build_vocab(corpus["train"])
    samples = [bind_sample(r, vocab) for r in corpus["train"]]
    label_corpus(samples)
    for s in samples:
        if s.label == 1:
            assert sum(t.weak_label for t in s.knowledge) >= 1
