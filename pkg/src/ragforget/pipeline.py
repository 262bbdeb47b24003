"""End-to-end retrieval-stage unlearning recommender."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from sklearn.base import BaseEstimator, clone
from sklearn.utils.validation import check_is_fitted

from ._validation import as_dataset, check_positive_int
from .backbone import BackboneModel, CandidateList, top_k_candidates
from .corpus import CategoryMap, Dataset, user_history
from .exceptions import LeakageDetected
from .generator import GenBackendConfig, generate_scores, rerank
from .promptgen import AuxContext, build_prompt, scan_leakage
from .retrieval import FilteredHistory, ForgetRequest, filter_unlearn, make_filter

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RecommendationTrace:
    user_id: int
    candidates: CandidateList
    history: FilteredHistory
    prompt: object
    scores: object
    ranking: list


def _resolve_backbone(backbone, X):
    if isinstance(backbone, BackboneModel):
        return backbone
    if backbone is None:
        raise ValueError("CRAGRU needs a backbone (BackboneModel or BPR/LightGCN estimator)")
    if hasattr(backbone, "model_"):
        return backbone.model_
    return clone(backbone).fit(X).model_


class CRAGRU(BaseEstimator):
    """Recommender that forgets by filtering what the generator is shown.

    The backbone proposes ``n_candidates`` items per user and is never modified.
    Unlearning only updates the active forget set; every later recommendation
    removes those interactions from the retrieved history before the chosen
    strategy picks up to ``k`` of the rest for the prompt.

    Parameters
    ----------
    backbone : BackboneModel or estimator
        A frozen model, a fitted ``BPR``/``LightGCN`` or an unfitted one (fitted
        on ``X`` in :meth:`fit`).
    strategy : {"none", "preference", "diversity", "attention", "unlearn_only"}
    k : int
        Interactions retained in the prompt.
    n_candidates : int
        Backbone candidate list length.
    backend : str or GenBackendConfig
        ``"mock_identity"``, ``"mock_similarity"`` or a full remote config.
    """

    def __init__(self, backbone=None, strategy="attention", k=100, n_candidates=50,
                 backend="mock_similarity", num_heads=4, seed=0):
        self.backbone = backbone
        self.strategy = strategy
        self.k = k
        self.n_candidates = n_candidates
        self.backend = backend
        self.num_heads = num_heads
        self.seed = seed

    def fit(self, X, y=None, *, metadata=None, perf_matrix=None, exclude=None, profiles=None):
        """Index the retrieval corpus ``X`` (all interactions, forgotten ones included).

        ``exclude`` maps user -> items kept out of the candidate list (defaults
        to the user's items in ``X``). ``profiles`` maps user -> profile text.
        """
        check_positive_int(self.k, "k")
        check_positive_int(self.n_candidates, "n_candidates")
        self.corpus_ = as_dataset(X)
        self.model_ = _resolve_backbone(self.backbone, self.corpus_)
        self.categories_ = metadata.categories if metadata is not None else CategoryMap({}, ())
        self.aux_ = AuxContext.from_metadata(metadata)
        self.backend_ = (self.backend if isinstance(self.backend, GenBackendConfig)
                         else GenBackendConfig(kind=self.backend))
        if self.strategy == "diversity" and perf_matrix is None:
            raise ValueError("the diversity strategy needs a perf matrix")
        self.filter_ = make_filter(self.strategy, self.k, self.seed, self.num_heads)
        self.filter_.fit(self.categories_, self.model_, perf_matrix)
        if isinstance(exclude, Dataset):
            self.exclude_ = {u: exclude.items_of(u) for u in exclude.user_index}
        else:
            self.exclude_ = dict(exclude) if exclude is not None else None
        self.profiles_ = dict(profiles or {})
        self.forget_ = frozenset()
        self._forget_items = {}
        self._candidate_cache = {}
        self.model_checksum_ = self.model_.checksum()
        return self

    def unlearn(self, requests):
        """Activate forget requests; returns the affected user ids.

        Accepts :class:`ForgetRequest` objects or raw ``(user, item)`` pairs.
        """
        check_is_fitted(self, "corpus_")
        pairs = set()
        for req in requests:
            if isinstance(req, ForgetRequest):
                pairs |= req.resolve(self.corpus_.items_of(req.user_id))
            else:
                u, i = req
                pairs.add((int(u), int(i)))
        self.forget_ = self.forget_ | frozenset(pairs)
        for u, i in pairs:
            self._forget_items.setdefault(u, set()).add(i)
        affected = sorted({u for u, _ in pairs} | {r.user_id for r in requests
                                                    if isinstance(r, ForgetRequest)})
        return affected

    def forgotten_items(self, user_id):
        return frozenset(self._forget_items.get(int(user_id), ()))

    def candidates(self, user_id):
        user_id = int(user_id)
        cached = self._candidate_cache.get(user_id)
        if cached is None:
            if self.exclude_ is None:
                exclude = self.corpus_.items_of(user_id)
            else:
                exclude = self.exclude_.get(user_id, frozenset())
            cached = top_k_candidates(self.model_, user_id, self.n_candidates, exclude)
            self._candidate_cache[user_id] = cached
        return cached

    def recommend(self, user_id, prompt_dir=None):
        """Run retrieve, filter, prompt, generate and re-rank for one user."""
        check_is_fitted(self, "corpus_")
        user_id = int(user_id)
        cands = self.candidates(user_id)
        history = user_history(self.corpus_, user_id)
        user_forget = {(user_id, i) for i in self._forget_items.get(user_id, ())}
        filtered = filter_unlearn(history, user_forget, user_id)
        kept = self.filter_.transform(filtered, cands)
        aux = self.aux_
        profile = self.profiles_.get(user_id)
        if profile:
            aux = aux.with_profile(profile)
        prompt = build_prompt(cands, kept.kept, aux)
        leaked = scan_leakage(prompt, self.forgotten_items(user_id), aux)
        if leaked:
            raise LeakageDetected(f"user {user_id}: forgotten items {leaked} reached the prompt")
        scores = generate_scores(prompt, self.backend_, cands, kept.items, self.model_)
        ranking = rerank(cands, scores)
        if prompt_dir is not None:
            prompt.dump(prompt_dir)
        return RecommendationTrace(user_id, cands, kept, prompt, scores, ranking)

    def predict(self, users, n_jobs=1):
        """Ranked candidate lists for every user the backbone knows."""
        check_is_fitted(self, "corpus_")
        users = [int(u) for u in users if self.model_.has_user(u)]
        if n_jobs > 1 and self.backend_.kind == "remote":
            with ThreadPoolExecutor(max_workers=n_jobs) as pool:
                traces = list(pool.map(self.recommend, users))
        else:
            traces = [self.recommend(u) for u in users]
        return {t.user_id: t.ranking for t in traces}

    def backbone_unchanged(self):
        return self.model_.checksum() == self.model_checksum_
