"""Score generation backends, reply parsing/repair and final re-ranking."""
from __future__ import annotations

import json
import logging
import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import httpx
import numpy as np

from ._validation import check_positive_int, digest_bytes
from .exceptions import (
    BackendUnreachable,
    GenerationTimeout,
    IncompleteScores,
    NoJsonFound,
    NotAnObject,
    RepairExhausted,
)

logger = logging.getLogger(__name__)

BACKEND_KINDS = ("remote", "mock_identity", "mock_similarity")
API_KEY_ENV = "RAGFORGET_API_KEY"
SCORE_MIN, SCORE_MAX = 1.0, 100.0


@dataclass(frozen=True)
class GenBackendConfig:
    kind: str = "mock_similarity"
    endpoint_url: str | None = None
    model_name: str = "llama3.1-8b"
    timeout: float = 60.0
    max_retries: int = 2
    temperature: float = 0.0
    request_parallelism: int = 4

    def __post_init__(self):
        kind = self.kind.replace("-", "_")
        if kind not in BACKEND_KINDS:
            raise ValueError(f"backend kind must be one of {BACKEND_KINDS}, got {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if kind == "remote" and not self.endpoint_url:
            raise ValueError("remote backend requires endpoint_url")
        check_positive_int(self.max_retries, "max_retries", allow_zero=True)
        check_positive_int(self.request_parallelism, "request_parallelism")

    @property
    def chat_url(self):
        url = self.endpoint_url.rstrip("/")
        if url.endswith("/chat/completions"):
            return url
        if url.endswith("/v1"):
            return url + "/chat/completions"
        return url + "/v1/chat/completions"


@dataclass(frozen=True)
class ScoreMap:
    scores: dict
    coverage: str = "complete"
    raw_response_digest: str = ""
    missing: frozenset = field(default_factory=frozenset)
    dropped: int = 0

    def __getitem__(self, item_id):
        return self.scores[item_id]


def rescale(values):
    """Affine map onto [1, 100]; a constant input maps to 100."""
    arr = np.asarray(values, dtype=np.float64)
    if len(arr) == 0:
        return arr
    lo, hi = arr.min(), arr.max()
    if not hi > lo:
        return np.full(len(arr), SCORE_MAX)
    return SCORE_MIN + (SCORE_MAX - SCORE_MIN) * (arr - lo) / (hi - lo)


def fallback_scores(candidates):
    """Backbone scores rescaled to the prompt's 1-100 scale."""
    return dict(zip(candidates.items, rescale(candidates.backbone_scores).tolist()))


def similarity_scores(candidates, history_items, model):
    """Mean dot product of each candidate with the kept history items, rescaled."""
    hist = [i for i in history_items if model.has_item(i)]
    if not hist:
        return {i: SCORE_MAX for i in candidates.items}
    known = [model.has_item(i) for i in candidates.items]
    cand_vecs = np.zeros((len(candidates.items), model.dim))
    rows = [i for i, ok in zip(candidates.items, known) if ok]
    if rows:
        cand_vecs[np.asarray(known)] = model.item_vectors(rows)
    raw = (cand_vecs @ model.item_vectors(hist).T).mean(axis=1)
    return dict(zip(candidates.items, rescale(raw).tolist()))


def _first_json_object(raw):
    """The first balanced ``{...}`` substring, honouring JSON string quoting."""
    start = raw.find("{")
    while start >= 0:
        depth, in_str, esc = 0, False, False
        for pos in range(start, len(raw)):
            ch = raw[pos]
            if in_str:
                if esc:
                    esc = False
                elif ch == "\\":
                    esc = True
                elif ch == '"':
                    in_str = False
            elif ch == '"':
                in_str = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    return raw[start:pos + 1]
        start = raw.find("{", start + 1)
    return None


_TRAILING_COMMA = re.compile(r",\s*([}\]])")


def parse_score_json(raw, candidate_ids):
    """Extract an id -> score object from a model reply.

    Ids may be strings or integers. Ids outside the candidate set are dropped and
    counted; scores are clamped to [1, 100]; non-numeric scores count as missing.
    """
    candidate_ids = [int(i) for i in candidate_ids]
    block = _first_json_object(raw)
    if block is None:
        try:
            value = json.loads(raw)
        except (json.JSONDecodeError, TypeError):
            raise NoJsonFound("reply contains no JSON object") from None
        raise NotAnObject(f"reply is JSON {type(value).__name__}, not an object")
    try:
        obj = json.loads(block)
    except json.JSONDecodeError:
        try:
            obj = json.loads(_TRAILING_COMMA.sub(r"\1", block))
        except json.JSONDecodeError:
            raise NoJsonFound("first {...} block is not valid JSON") from None
    if not isinstance(obj, dict):
        raise NotAnObject("JSON block is not an object")
    wanted = set(candidate_ids)
    scores, dropped = {}, 0
    for key, value in obj.items():
        try:
            item = int(str(key).strip())
        except ValueError:
            dropped += 1
            continue
        if item not in wanted:
            dropped += 1
            continue
        try:
            val = float(value)
        except (TypeError, ValueError):
            continue
        if not math.isfinite(val):
            continue
        scores[item] = min(SCORE_MAX, max(SCORE_MIN, val))
    if dropped:
        logger.warning("dropped %d unknown ids from reply", dropped)
    missing = frozenset(wanted - scores.keys())
    ordered = {i: scores[i] for i in candidate_ids if i in scores}
    return ScoreMap(ordered, "complete" if not missing else "incomplete",
                    digest_bytes(raw.encode("utf-8")), missing, dropped)


def repair(scores, candidates):
    """Fill missing candidates with their backbone fallback score."""
    if not scores.missing and set(scores.scores) == set(candidates.items):
        return scores
    fb = fallback_scores(candidates)
    filled = {i: scores.scores.get(i, fb[i]) for i in candidates.items}
    return ScoreMap(filled, "repaired", scores.raw_response_digest, scores.missing, scores.dropped)


def _request_body(prompt, cfg):
    return {
        "model": cfg.model_name,
        "temperature": cfg.temperature,
        "messages": [{"role": "user", "content": prompt.text}],
    }


def _remote_scores(prompt, candidates, cfg, client=None):
    headers = {"Content-Type": "application/json"}
    key = os.environ.get(API_KEY_ENV)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    body = _request_body(prompt, cfg)
    own = client is None
    client = client or httpx.Client(timeout=cfg.timeout)
    best, answered, timed_out = None, False, False
    try:
        for attempt in range(cfg.max_retries + 1):
            try:
                resp = client.post(cfg.chat_url, json=body, headers=headers, timeout=cfg.timeout)
                resp.raise_for_status()
                content = resp.json()["choices"][0]["message"]["content"]
            except httpx.TimeoutException:
                timed_out = True
                logger.warning("attempt %d: request timed out", attempt + 1)
                continue
            except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as exc:
                logger.warning("attempt %d: %s", attempt + 1, exc)
                continue
            answered = True
            try:
                parsed = parse_score_json(content or "", candidates.items)
            except (NoJsonFound, NotAnObject) as exc:
                logger.warning("attempt %d: unusable reply (%s)", attempt + 1, exc)
                if best is None:
                    best = ScoreMap({}, "incomplete", digest_bytes((content or "").encode()),
                                    frozenset(candidates.items))
                continue
            if parsed.coverage == "complete":
                return parsed
            if best is None or len(parsed.scores) > len(best.scores):
                best = parsed
    finally:
        if own:
            client.close()
    if not answered:
        if timed_out:
            raise GenerationTimeout(f"{cfg.chat_url} timed out after {cfg.max_retries + 1} attempts")
        raise BackendUnreachable(f"{cfg.chat_url} unreachable after {cfg.max_retries + 1} attempts")
    return best


def generate_scores(prompt, cfg, candidates, history_items=(), model=None, client=None):
    """Score every candidate of ``prompt`` with the configured backend.

    Remote replies that stay incomplete after ``max_retries`` re-requests are
    repaired with backbone fallback scores. Mock backends never see anything but
    the candidates and the kept history.
    """
    if cfg.kind == "mock_identity":
        scores = fallback_scores(candidates)
    elif cfg.kind == "mock_similarity":
        if model is None:
            raise ValueError("mock_similarity needs the backbone model")
        scores = similarity_scores(candidates, history_items, model)
    else:
        result = _remote_scores(prompt, candidates, cfg, client)
        result = repair(result, candidates)
        if set(result.scores) != set(candidates.items):
            raise RepairExhausted("could not fill scores for every candidate")
        return result
    raw = json.dumps({str(k): v for k, v in scores.items()}, separators=(",", ":"))
    return ScoreMap(scores, "complete", digest_bytes(raw.encode()))


def generate_many(jobs, cfg, model=None):
    """Run ``generate_scores`` for ``(prompt, candidates, history_items)`` triples.

    Remote requests are bounded by ``request_parallelism``; results keep input order.
    """
    def one(job):
        prompt, candidates, history_items = job
        return generate_scores(prompt, cfg, candidates, history_items, model)

    if cfg.kind != "remote" or cfg.request_parallelism == 1:
        return [one(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=cfg.request_parallelism) as pool:
        return list(pool.map(one, jobs))


def rerank(candidates, scores):
    """Candidates by descending score; equal scores keep backbone order."""
    table = scores.scores if isinstance(scores, ScoreMap) else scores
    missing = [i for i in candidates.items if i not in table]
    if missing:
        raise IncompleteScores(f"no score for candidates {missing[:5]}")
    order = sorted(range(len(candidates.items)), key=lambda p: (-table[candidates.items[p]], p))
    return [candidates.items[p] for p in order]
