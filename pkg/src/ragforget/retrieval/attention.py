"""Multi-head attention weights of history interactions with respect to candidates.

Queries, keys and values are fixed head-slices of the frozen backbone item
embeddings, so no parameters are learned and the backbone is never touched.
The output projection ``W_O`` is a seeded random orthogonal matrix unless the
caller supplies one (e.g. a trained projection).

The scalar relevance of history item ``j`` to candidate ``c`` comes from the
linear decomposition of the multi-head output into per-item contributions::

    MultiHead(c, D_u) = sum_j concat_h(a_h[c, j] * V_h[j]) @ W_O

and ``score(j, c)`` is the contribution's dot product with the candidate's
embedding truncated to ``d_model`` dimensions. ``alpha[c]`` is the softmax of
``score(., c)`` over the history.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .._validation import check_positive_int
from ..exceptions import EmptyCandidates, EmptyHistory, UnknownItem
from .filtering import FilteredHistory, _as_filtered


@dataclass(frozen=True)
class AttentionConfig:
    num_heads: int = 4
    key_dim: int = 16
    value_dim: int = 16
    model_dim: int = 64
    projection_seed: int = 0

    def __post_init__(self):
        for name in ("num_heads", "key_dim", "value_dim", "model_dim"):
            check_positive_int(getattr(self, name), name)

    def check_against(self, embedding_dim):
        if self.num_heads * self.key_dim > embedding_dim:
            raise ValueError(f"num_heads*key_dim={self.num_heads * self.key_dim} exceeds "
                             f"embedding_dim={embedding_dim}")
        if self.num_heads * self.value_dim > embedding_dim:
            raise ValueError(f"num_heads*value_dim={self.num_heads * self.value_dim} exceeds "
                             f"embedding_dim={embedding_dim}")
        if self.model_dim > embedding_dim:
            raise ValueError(f"model_dim={self.model_dim} exceeds embedding_dim={embedding_dim}")

    @classmethod
    def for_dim(cls, embedding_dim, num_heads=4, projection_seed=0):
        """Largest even head split of a backbone of width ``embedding_dim``."""
        width = max(1, embedding_dim // num_heads)
        return cls(num_heads, width, width, embedding_dim, projection_seed)


def output_projection(cfg):
    """Seeded ``(H*d_v, d_model)`` matrix with orthonormal columns (or rows)."""
    rows, cols = cfg.num_heads * cfg.value_dim, cfg.model_dim
    rng = np.random.default_rng(cfg.projection_seed)
    g = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(g)
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    return q if rows >= cols else q.T


def _softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def attention_matrix(candidate_vecs, history_vecs, cfg, projection=None):
    """Weights ``alpha[c, j]`` for embedding rows of candidates and history items."""
    cand = np.atleast_2d(np.asarray(candidate_vecs, dtype=np.float64))
    hist = np.atleast_2d(np.asarray(history_vecs, dtype=np.float64))
    if hist.shape[0] == 0:
        raise EmptyHistory("attention needs at least one history item")
    cfg.check_against(hist.shape[1])
    w_o = output_projection(cfg) if projection is None else np.asarray(projection, dtype=np.float64)
    dk, dv = cfg.key_dim, cfg.value_dim
    target = cand[:, : cfg.model_dim]
    scores = np.zeros((cand.shape[0], hist.shape[0]))
    for h in range(cfg.num_heads):
        q = cand[:, h * dk:(h + 1) * dk]
        k = hist[:, h * dk:(h + 1) * dk]
        v = hist[:, h * dv:(h + 1) * dv]
        a = _softmax(q @ k.T / np.sqrt(dk))
        z = v @ w_o[h * dv:(h + 1) * dv]  # per-item value projected to d_model
        scores += a * (target @ z.T)
    return _softmax(scores)


def attention_weights(candidate, history, model, cfg=None, projection=None):
    """Attention weight of each kept interaction for one candidate item."""
    history = _as_filtered(history)
    if len(history) == 0:
        raise EmptyHistory("attention needs at least one history item")
    if not model.has_item(candidate):
        raise UnknownItem(candidate)
    cfg = cfg or AttentionConfig.for_dim(model.dim)
    hist = _history_vectors(history, model)
    return attention_matrix(model.item_vectors([candidate]), hist, cfg, projection)[0]


def _history_vectors(history, model):
    missing = [i for i in history.items if not model.has_item(i)]
    if missing:
        raise UnknownItem(missing[0])
    return model.item_vectors(history.items)


def attention_filter(history, candidates, model, cfg=None, k=100, projection=None):
    """Keep the interactions the candidates attend to most.

    Each candidate contributes its own top-``k`` interactions; the union is cut
    back to ``min(k, n)`` by each interaction's largest weight over candidates,
    then its mean weight, then item id.
    """
    k = check_positive_int(k, "k")
    history = _as_filtered(history)
    n = len(history)
    if n == 0:
        raise EmptyHistory("attention filter needs a non-empty history")
    cand_ids = [c for c in (candidates.items if hasattr(candidates, "items") else candidates)
                if model.has_item(c)]
    if not cand_ids:
        raise EmptyCandidates("attention filter needs at least one known candidate")
    if k >= n:
        return FilteredHistory(history.user_id, history.kept, "attention", k)
    cfg = cfg or AttentionConfig.for_dim(model.dim)
    # Items the backbone never saw carry no embedding; they get zero weight.
    known = [p for p, i in enumerate(history.items) if model.has_item(i)]
    alpha = np.zeros((len(cand_ids), n))
    if known:
        hist = model.item_vectors([history.items[p] for p in known])
        alpha[:, known] = attention_matrix(model.item_vectors(cand_ids), hist, cfg, projection)
    items = np.asarray(history.items)
    union = set()
    for row in alpha:
        order = np.lexsort((items, -row))
        union.update(order[:k].tolist())
    best = alpha.max(axis=0)
    mean = alpha.mean(axis=0)
    chosen = sorted(union, key=lambda p: (-best[p], -mean[p], items[p], p))[:k]
    return FilteredHistory(history.user_id, tuple(history.kept[p] for p in sorted(chosen)),
                           "attention", k)
