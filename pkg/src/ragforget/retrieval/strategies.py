"""Retrieval strategies as scikit-learn style estimators.

Every filter follows the same contract: ``fit`` receives the shared, read-only
context (category map, backbone, perf matrix) and ``transform`` maps one
forget-free :class:`FilteredHistory` to the subset placed in the prompt.
"""
from __future__ import annotations

from functools import reduce
from math import gcd

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .._validation import check_positive_int, sub_seed
from ..exceptions import EmptyHistory
from .attention import AttentionConfig, attention_filter
from .filtering import (
    FilteredHistory,
    _as_filtered,
    _category_members,
    preference_filter,
    random_filter,
    retention_budget,
    sample_by_retention,
)
from .knapsack import solve_knapsack


def diversity_filter(history, categories, m, k_prime, seed=0):
    """Sample per-category retention percentages chosen by the knapsack solver.

    The knapsack runs over the categories present in both the history and the
    perf matrix; categories missing from the matrix are retained in full.
    """
    history = _as_filtered(history)
    if len(history) == 0:
        raise EmptyHistory("diversity filter needs a non-empty history")
    present = _category_members(history.kept, categories)
    sub = m.restrict(present)
    result = solve_knapsack(sub, k_prime)
    out = sample_by_retention(history, categories, result.allocation, seed=seed)
    return FilteredHistory(out.user_id, out.kept, "diversity", k_prime)


def _user_seed(seed, user_id):
    return sub_seed(seed, f"user:{user_id}")


class HistoryFilter(BaseEstimator):
    """Base class; subclasses implement ``_select``."""

    strategy = "unlearn_only"

    def fit(self, categories=None, model=None, perf_matrix=None):
        self.categories_ = categories
        self.model_ = model
        self.perf_matrix_ = perf_matrix
        return self

    def transform(self, history, candidates=None):
        check_is_fitted(self, "categories_")
        history = _as_filtered(history)
        if len(history) == 0:
            return FilteredHistory(history.user_id, (), self.strategy, getattr(self, "k", None))
        return self._select(history, candidates)

    def _select(self, history, candidates):
        return history


class NoFilter(HistoryFilter):
    """Keep the whole forget-free history."""

    def __init__(self, k=None):
        self.k = k


class RandomRetention(HistoryFilter):
    """Uniform truncation to ``k`` interactions (the ``none`` strategy)."""

    strategy = "none"

    def __init__(self, k=100, seed=0):
        self.k = k
        self.seed = seed

    def _select(self, history, candidates):
        return random_filter(history, self.k, _user_seed(self.seed, history.user_id))


class PreferenceFilter(HistoryFilter):
    """Category-proportional sampling of ``k`` interactions."""

    strategy = "preference"

    def __init__(self, k=100, seed=0):
        self.k = k
        self.seed = seed

    def _select(self, history, candidates):
        return preference_filter(history, self.categories_, self.k,
                                 _user_seed(self.seed, history.user_id))


class DiversityFilter(HistoryFilter):
    """Knapsack-optimal per-category retention.

    ``k`` is translated into a total retention percentage per user via
    :func:`retention_budget` unless ``k_prime`` is fixed explicitly.
    """

    strategy = "diversity"

    def __init__(self, k=100, k_prime=None, seed=0):
        self.k = k
        self.k_prime = k_prime
        self.seed = seed

    def _select(self, history, candidates):
        if self.perf_matrix_ is None:
            raise ValueError("DiversityFilter needs a perf matrix; pass perf_matrix to fit()")
        m = self.perf_matrix_
        k_prime = self.k_prime
        if k_prime is None:
            present = _category_members(history.kept, self.categories_)
            n_cat = len([c for c in m.categories if c in present])
            step = _grid_step(m.grid)
            k_prime = retention_budget(history, self.categories_, self.k, step, n_cat)
        return diversity_filter(history, self.categories_, m, k_prime,
                                _user_seed(self.seed, history.user_id))


class AttentionFilter(HistoryFilter):
    """Keep the interactions most attended to by the candidate items."""

    strategy = "attention"

    def __init__(self, k=100, num_heads=4, projection_seed=0):
        self.k = k
        self.num_heads = num_heads
        self.projection_seed = projection_seed

    def _select(self, history, candidates):
        if self.model_ is None:
            raise ValueError("AttentionFilter needs the backbone; pass model to fit()")
        cfg = AttentionConfig.for_dim(self.model_.dim, self.num_heads, self.projection_seed)
        return attention_filter(history, candidates, self.model_, cfg, self.k)


def _grid_step(grid):
    return reduce(gcd, (int(p) for p in grid)) or 1


def make_filter(strategy, k=100, seed=0, num_heads=4):
    """Filter estimator for a strategy name."""
    check_positive_int(k, "k")
    if strategy in ("unlearn_only", "all"):
        return NoFilter()
    if strategy == "none":
        return RandomRetention(k=k, seed=seed)
    if strategy == "preference":
        return PreferenceFilter(k=k, seed=seed)
    if strategy == "diversity":
        return DiversityFilter(k=k, seed=seed)
    if strategy == "attention":
        return AttentionFilter(k=k, num_heads=num_heads, projection_seed=seed)
    raise ValueError(f"unknown strategy {strategy!r}")
