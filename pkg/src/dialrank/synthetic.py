"""Seeded synthetic corpus of goal-driven movie chats.

Each dialogue follows the same contract:

* the goal is [movie, star]; the context mentions the movie (covering it)
  and ends with an utterance hinting at one predicate of the star;
* the knowledge list holds facts about both goal entities, with objects
  unique to the dialogue;
* the correct response names the star (the uncovered goal entity) plus the
  object of exactly one knowledge triple, so the response is uniquely
  determined by goal tracking plus knowledge prediction;
* distractor candidates either swap the star (wrong goal entity) or keep
  the star and quote the object of a different triple (wrong knowledge) —
  the latter are indistinguishable by context overlap alone.

Training rows are the positive, its wrong-knowledge distractors as extra
negatives, and randomly drawn pool responses at the standard 1:9 ratio.
Test rows carry a shuffled 10-candidate pool in the "candidates" field.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"

_STAR_PREDICATES = ("birthplace", "masterpiece", "award", "comment")
_GENRES = ("action", "romance", "thriller", "comedy", "fantasy")

_OPENERS = (
    "i watched {movie} yesterday and i loved it",
    "{movie} was on tv last night , what a film",
    "my friends keep talking about {movie} these days",
)
_FILLERS = (
    "that sounds interesting",
    "really ? tell me more",
    "i see , go on",
)
_CUES = (
    "the {pred} ?",
    "tell me the {pred}",
    "and the {pred} ?",
)
_RESPONSES = (
    "well {star} comes to mind , {obj}",
    "you should hear about {star} , {obj}",
    "speaking of {star} , {obj}",
)


@dataclass
class SynthSpec:
    n_dialogues: int = 900
    n_movies: int = 20
    n_stars: int = 20
    candidates_per_turn: int = 10
    n_confusable: int = 2
    neg_ratio: int = 9
    train_frac: float = 0.8
    valid_frac: float = 0.1


class _Words:
    """Unique pseudo-word factory so vocabulary pools never collide."""

    def __init__(self, rng):
        self.rng = rng
        self.used = set()

    def word(self, syllables=3):
        while True:
            w = "".join(self.rng.choice(_CONSONANTS) + self.rng.choice(_VOWELS)
                        for _ in range(syllables))
            if w not in self.used:
                self.used.add(w)
                return w


class _Pools:
    """Shared object-word pools.  Every object word recurs across dialogues
    (so its embedding gets trained) but objects stay distinct inside one
    dialogue, keeping the planted usage labels one-hot."""

    def __init__(self, words, rng):
        self.rng = rng
        self.cities = [words.word(3) for _ in range(40)]
        self.titles = [words.word(3) for _ in range(60)]
        self.awards = [words.word(3) for _ in range(40)]
        self.comment_words = [words.word(3) for _ in range(120)]
        self.ratings = [words.word(3) for _ in range(30)]

    def object_for(self, pred):
        if pred == "birthplace":
            return self.rng.choice(self.cities)
        if pred == "masterpiece":
            return " ".join(self.rng.sample(self.titles, 2))
        if pred == "award":
            return self.rng.choice(self.awards)
        if pred == "comment":
            return " ".join(self.rng.sample(self.comment_words, 10))
        if pred == "rating":
            return self.rng.choice(self.ratings)
        raise ValueError(pred)


def _build_dialogue(rng, pools, movie, star):
    # pools are disjoint, so objects are automatically distinct in-dialogue
    star_facts = [[star, p, pools.object_for(p)] for p in _STAR_PREDICATES]
    movie_facts = [
        [movie, "genre", rng.choice(_GENRES)],
        [movie, "rating", pools.object_for("rating")],
    ]
    knowledge = star_facts + movie_facts
    rng.shuffle(knowledge)

    target = rng.randrange(len(star_facts))
    pred = _STAR_PREDICATES[target]
    target_index = next(i for i, t in enumerate(knowledge) if t[1] == pred)

    context = [rng.choice(_OPENERS).format(movie=movie)]
    if rng.random() < 0.5:
        context.append(rng.choice(_FILLERS))
    context.append(rng.choice(_CUES).format(pred=pred))

    def render(obj_text, template):
        return template.format(star=star, obj=obj_text)

    template = rng.choice(_RESPONSES)
    obj = knowledge[target_index][2]
    if pred == "comment":
        quoted = obj.split()
        rng.shuffle(quoted)
        obj_text = " ".join(quoted[:8])
    else:
        obj_text = obj
    response = render(obj_text, template)

    planted = [1 if i == target_index else 0 for i in range(len(knowledge))]

    # wrong-knowledge distractors: same star, object of a dead triple
    dead = [i for i, t in enumerate(knowledge) if t[0] == star and i != target_index]
    confusables = []
    for i in dead:
        alt_obj = knowledge[i][2]
        if knowledge[i][1] == "comment":
            alt_tokens = alt_obj.split()
            rng.shuffle(alt_tokens)
            alt_obj = " ".join(alt_tokens[:8])
        confusables.append(render(alt_obj, rng.choice(_RESPONSES)))

    return {
        "context": context,
        "goal": [movie, star],
        "knowledge": knowledge,
        "response": response,
        "label": 1,
        "planted": planted,
        "confusables": confusables,
    }


def generate_synthetic_corpus(spec, seed):
    """Build train/valid/test raw-sample lists per the module contract."""
    rng = random.Random(seed)
    words = _Words(rng)
    movies = [words.word(3) for _ in range(spec.n_movies)]
    stars = [f"{words.word(2)} {words.word(2)}" for _ in range(spec.n_stars)]
    pools = _Pools(words, rng)

    dialogues = []
    for _ in range(spec.n_dialogues):
        movie = rng.choice(movies)
        star = rng.choice(stars)
        dialogues.append(_build_dialogue(rng, pools, movie, star))

    n_train = int(spec.n_dialogues * spec.train_frac)
    n_valid = int(spec.n_dialogues * spec.valid_frac)
    train_d = dialogues[:n_train]
    valid_d = dialogues[n_train:n_train + n_valid]
    test_d = dialogues[n_train + n_valid:]
    all_responses = [d["response"] for d in dialogues]

    def strip(d, extra=()):
        keep = {"context", "goal", "knowledge", "response", "label", *extra}
        return {k: d[k] for k in d if k in keep}

    def negatives(d, count, forbidden):
        out, seen = [], set(forbidden)
        while len(out) < count:
            r = rng.choice(all_responses)
            if r in seen:
                continue
            seen.add(r)
            row = strip(d)
            row["response"] = r
            row["label"] = 0
            out.append(row)
        return out

    train_rows = []
    for d in train_d:
        pos = strip(d, extra=("planted",))
        train_rows.append(pos)
        used = [d["response"], *d["confusables"]]
        for conf in d["confusables"][:spec.n_confusable]:
            row = strip(d)
            row["response"] = conf
            row["label"] = 0
            train_rows.append(row)
        train_rows.extend(negatives(d, spec.neg_ratio, used))

    valid_rows = []
    for d in valid_d:
        valid_rows.append(strip(d, extra=("planted",)))
        valid_rows.extend(negatives(d, spec.neg_ratio, [d["response"]]))

    test_rows = []
    for d in test_d:
        row = strip(d, extra=("planted",))
        pool = [d["response"]] + d["confusables"][:spec.n_confusable]
        fill = negatives(d, spec.candidates_per_turn - len(pool), pool)
        pool = pool + [r["response"] for r in fill]
        rng.shuffle(pool)
        row["candidates"] = pool
        test_rows.append(row)

    return {"train": train_rows, "valid": valid_rows, "test": test_rows}
