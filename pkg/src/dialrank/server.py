"""HTTP chat service: goal-driven sessions scored by a trained checkpoint.

Model parameters are loaded once and shared read-only; each session owns a
lock so concurrent sessions proceed independently while one session's
turns stay ordered.  Candidates come from the BM25 pool at every turn and
the best-scoring response is returned together with the knowledge
prediction and goal coverage diagnostics the UI renders.

Environment: KPN_CHECKPOINT (model file), KPN_POOL (.idx or .jsonl
response pool), KPN_ADDR (host:port), KPN_UI_ORIGIN (CORS origin,
default *), KPN_SESSION_DIR (optional transcript dump directory).
"""

from __future__ import annotations

import json
import os
import threading
import uuid
from contextlib import asynccontextmanager
from dataclasses import dataclass, field

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel

from .bm25 import build_index, load_index, retrieve
from .data import bind_sample, make_batch, read_raw_jsonl
from .network import default_limits, load_checkpoint

CANDIDATES_PER_TURN = 50


class SessionCreate(BaseModel):
    goal: list[str]
    knowledge: list[list[str]]


class MessageIn(BaseModel):
    text: str


@dataclass
class Session:
    id: str
    goal: list
    knowledge: list
    transcript: list = field(default_factory=list)  # (speaker, text)
    turns: list = field(default_factory=list)  # per-turn diagnostics
    coverage: dict = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def snapshot(self):
        return {
            "session_id": self.id,
            "goal": self.goal,
            "knowledge": self.knowledge,
            "transcript": [{"speaker": s, "text": t} for s, t in self.transcript],
            "turns": self.turns,
            "coverage": self.coverage,
        }


def _entity_coverage(goal_entities, token_entity, v_prime):
    """Covered fraction per entity: 1 - mean of its tokens' v'."""
    out = {}
    for i, ent in enumerate(goal_entities):
        vals = [1.0 - v_prime[t] for t in range(len(token_entity)) if token_entity[t] == i]
        out[ent] = float(sum(vals) / len(vals)) if vals else 0.0
    return out


def create_app(model=None, index=None, ui_origin="*", session_dir=None):
    sessions = {}
    store_lock = threading.Lock()

    @asynccontextmanager
    async def lifespan(app):
        yield
        if session_dir:
            os.makedirs(session_dir, exist_ok=True)
            for sess in sessions.values():
                path = os.path.join(session_dir, f"session-{sess.id}.jsonl")
                with open(path, "w", encoding="utf-8") as fh:
                    fh.write(json.dumps(sess.snapshot(), ensure_ascii=False) + "\n")

    app = FastAPI(title="dialrank chat service", lifespan=lifespan)
    app.add_middleware(
        CORSMiddleware,
        allow_origins=[ui_origin] if ui_origin != "*" else ["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    def need_model():
        if model is None or index is None:
            raise HTTPException(status_code=503, detail="model or candidate pool not loaded")

    def get_session(sid):
        sess = sessions.get(sid)
        if sess is None:
            raise HTTPException(status_code=404, detail=f"unknown session {sid!r}")
        return sess

    @app.post("/v1/sessions")
    def create_session(body: SessionCreate):
        if not body.goal or any(not g.strip() for g in body.goal):
            raise HTTPException(status_code=400, detail="goal must list non-empty entities")
        if not body.knowledge or any(len(t) != 3 for t in body.knowledge):
            raise HTTPException(status_code=400, detail="knowledge must list [s, p, o] triples")
        sess = Session(id=uuid.uuid4().hex, goal=list(body.goal),
                       knowledge=[list(t) for t in body.knowledge],
                       coverage={g: 0.0 for g in body.goal})
        with store_lock:
            sessions[sess.id] = sess
        return {"session_id": sess.id, "coverage": sess.coverage}

    @app.post("/v1/sessions/{sid}/messages")
    def post_message(sid: str, body: MessageIn):
        need_model()
        sess = get_session(sid)
        with sess.lock:
            sess.transcript.append(("user", body.text))
            uncovered = [g for g in sess.goal if sess.coverage.get(g, 0.0) < 0.5]
            query = body.text + " " + " ".join(uncovered)
            candidates = retrieve(index, query, CANDIDATES_PER_TURN, exclude=None,
                                  seed=len(sess.transcript))
            raw = {
                "context": [t for _, t in sess.transcript],
                "goal": sess.goal,
                "knowledge": sess.knowledge,
                "response": "",
                "label": 0,
            }
            rows = []
            for cand in candidates:
                row = dict(raw)
                row["response"] = cand
                rows.append(bind_sample(row, model.vocab))
            scores = model.score(make_batch(rows, default_limits(model.hyper)))
            best = max(range(len(scores)), key=lambda i: (scores[i].y_hat, -i))
            ts = scores[best]
            token_entity = rows[0].goal.token_entity
            coverage = _entity_coverage(sess.goal, token_entity, ts.goal_coverage)
            response = candidates[best]
            sess.transcript.append(("bot", response))
            sess.coverage = coverage
            diag = {
                "response": response,
                "kp_scores": ts.kp_scores,
                "coverage": coverage,
                "head_scores": {"s_cr": ts.s_cr, "s_kr": ts.s_kr,
                                "s_gr": ts.s_gr, "y_hat": ts.y_hat},
                "candidates_considered": len(candidates),
            }
            sess.turns.append(diag)
            return diag

    @app.get("/v1/sessions/{sid}")
    def get_state(sid: str):
        return get_session(sid).snapshot()

    return app


def load_pool_index(path):
    """A prebuilt .idx file, or a JSONL corpus whose positive responses
    become the candidate pool."""
    if path.endswith(".jsonl"):
        raws = read_raw_jsonl(path)
        return build_index([r["response"] for r in raws if r["label"] == 1])
    return load_index(path)


def app_from_env():
    ckpt = os.environ.get("KPN_CHECKPOINT")
    pool = os.environ.get("KPN_POOL")
    model = load_checkpoint(ckpt) if ckpt else None
    index = load_pool_index(pool) if pool else None
    return create_app(model=model, index=index,
                      ui_origin=os.environ.get("KPN_UI_ORIGIN", "*"),
                      session_dir=os.environ.get("KPN_SESSION_DIR"))
