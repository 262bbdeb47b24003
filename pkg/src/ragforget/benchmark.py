"""Perf-matrix measurement and unlearning latency (retrain vs. retrieval filtering)."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import sub_seed
from .backbone import BackboneConfig, BackboneModel, top_k_candidates, train_backbone
from .corpus import user_history
from .exceptions import MissingCheckpoint
from .evaluation import hit_ratio_at_k
from .generator import GenBackendConfig, generate_scores, rerank
from .pipeline import CRAGRU
from .promptgen import AuxContext, build_prompt
from .retrieval import PerfMatrix, resolve_requests, sample_by_retention

logger = logging.getLogger(__name__)

DEFAULT_GRID = tuple(range(0, 101, 10))


def perf_cell_seed(seed, user_id):
    return sub_seed(seed, f"perf:{user_id}")


def _perf_hit(user, cands, history, categories, retention, targets, k_eval, seed, backend, model, aux):
    kept = sample_by_retention(history, categories, retention, seed=perf_cell_seed(seed, user))
    prompt = build_prompt(cands, kept.kept, aux) if backend.kind == "remote" else None
    scores = generate_scores(prompt, backend, cands, kept.items, model)
    return hit_ratio_at_k(rerank(cands, scores), targets, k_eval)


def build_perf_matrix(val, categories, backbone, grid=DEFAULT_GRID, seed=0, *, history,
                      exclude=None, k_eval=10, n_candidates=50, backend=None, metadata=None,
                      n_jobs=1):
    """Measure ``M[c][p]``: mean HR@``k_eval`` on ``val`` when category ``c`` keeps ``p``%.

    Every other category keeps all of its interactions. ``history`` is the
    corpus the retained interactions are drawn from (normally the train split);
    candidates exclude the user's history items and anything in ``exclude``.
    Users whose history lacks ``c`` are unaffected by that row and reuse their
    unfiltered hit.
    """
    grid = tuple(int(p) for p in grid)
    if not grid or 100 not in grid:
        raise ValueError("perf-matrix grid must be non-empty and include 100")
    backend = backend or GenBackendConfig(kind="mock_similarity")
    aux = AuxContext.from_metadata(metadata)
    users = []
    for u in sorted(val.user_index):
        if not backbone.has_user(u):
            continue
        hist = user_history(history, u)
        skip = {x.item_id for x in hist}
        if exclude is not None:
            skip |= set(exclude.get(u, ()))
        cands = top_k_candidates(backbone, u, n_candidates, skip)
        labels = set()
        for x in hist:
            labels |= categories.categories_of(x.item_id)
        users.append((u, cands, hist, labels, set(val.items_of(u))))
    if not users:
        raise ValueError("no validation user is known to the backbone")

    base = {u: _perf_hit(u, c, h, categories, {}, t, k_eval, seed, backend, backbone, aux)
            for u, c, h, _, t in users}

    def cell(args):
        cat, pct = args
        total = 0.0
        for u, c, h, labels, t in users:
            if cat in labels and pct != 100:
                total += _perf_hit(u, c, h, categories, {cat: pct}, t, k_eval, seed, backend, backbone, aux)
            else:
                total += base[u]
        return total / len(users)

    cats = tuple(categories.all_categories)
    cells = [(c, p) for c in cats for p in grid]
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            flat = list(pool.map(cell, cells))
    else:
        flat = [cell(x) for x in cells]
    values = np.asarray(flat, dtype=np.float64).reshape(len(cats), len(grid))
    return PerfMatrix(grid, cats, values)


@dataclass(frozen=True)
class TimingReport:
    method: str
    wall_seconds: float
    requests_served: int
    backbone_retrained: bool
    outputs_digest: str = ""

    def to_json(self):
        return {"method": self.method, "wall_seconds": self.wall_seconds,
                "requests_served": self.requests_served,
                "backbone_retrained": self.backbone_retrained,
                "outputs_digest": self.outputs_digest}


def _file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def time_unlearning(requests, mode, *, checkpoint, train, corpus, backbone_config=None,
                    metadata=None, strategy="attention", k=100, n_candidates=50,
                    backend=None, perf_matrix=None, exclude=None, seed=0):
    """Wall-clock cost of serving ``requests`` by retraining or by filtering.

    ``retrain`` fits a fresh backbone of the checkpoint's kind on ``train`` minus
    the forgotten pairs. ``cragru`` loads the frozen checkpoint and produces new
    rankings for the affected users only; the checkpoint must be byte-identical
    afterwards. Data loading is excluded from both timings.

    Returns ``(TimingReport, outputs)`` where ``outputs`` maps user -> ranking
    (cragru) or is the retrained model (retrain).
    """
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise MissingCheckpoint(str(checkpoint))
    frozen = BackboneModel.load(checkpoint)
    if mode == "retrain":
        config = backbone_config or BackboneConfig(seed=frozen.seed, embedding_dim=frozen.dim)
        pairs = resolve_requests(requests, corpus)
        t0 = time.perf_counter()
        remaining = train.without_pairs(pairs)
        model = train_backbone(frozen.kind, remaining, config)
        wall = time.perf_counter() - t0
        return TimingReport("retrain", wall, len(requests), True, model.checksum()), model
    if mode != "cragru":
        raise ValueError(f"mode must be 'retrain' or 'cragru', got {mode!r}")
    before = _file_digest(checkpoint)
    pipe = CRAGRU(frozen, strategy=strategy, k=k, n_candidates=n_candidates,
                  backend=backend or "mock_similarity", seed=seed)
    pipe.fit(corpus, metadata=metadata, perf_matrix=perf_matrix, exclude=exclude)
    t0 = time.perf_counter()
    affected = pipe.unlearn(requests)
    outputs = {u: pipe.recommend(u).ranking for u in affected if frozen.has_user(u)}
    wall = time.perf_counter() - t0
    if _file_digest(checkpoint) != before or not pipe.backbone_unchanged():
        raise AssertionError("backbone changed during retrieval-stage unlearning")
    digest = hashlib.sha256(json.dumps(outputs, sort_keys=True).encode()).hexdigest()
    return TimingReport("cragru", wall, len(requests), False, digest), outputs
