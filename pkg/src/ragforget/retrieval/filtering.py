"""Forget filtering and category-aware sampling of a user's interaction history."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .._validation import check_positive_int
from ..exceptions import EmptyHistory

STRATEGIES = ("unlearn_only", "none", "preference", "diversity", "attention")


@dataclass(frozen=True)
class FilteredHistory:
    user_id: int
    kept: tuple
    strategy: str = "unlearn_only"
    retained_budget: int | None = None

    def __len__(self):
        return len(self.kept)

    def __iter__(self):
        return iter(self.kept)

    @property
    def items(self):
        return tuple(x.item_id for x in self.kept)

    def pairs(self):
        return {(x.user_id, x.item_id) for x in self.kept}

    def _with(self, kept, strategy, budget):
        return FilteredHistory(self.user_id, tuple(kept), strategy, budget)


@dataclass(frozen=True)
class QuotaAllocation:
    per_category: dict
    total: int


def _as_filtered(history):
    if isinstance(history, FilteredHistory):
        return history
    history = tuple(history)
    user = history[0].user_id if history else None
    return FilteredHistory(user, history)


def filter_unlearn(history, forget, user_id=None):
    """Drop every interaction whose (user, item) pair is in ``forget``.

    This is the only step that removes forgotten data; every strategy runs on
    its output.
    """
    history = tuple(history.kept if isinstance(history, FilteredHistory) else history)
    if user_id is None:
        user_id = history[0].user_id if history else None
    kept = tuple(x for x in history if (x.user_id, x.item_id) not in forget) if forget else history
    return FilteredHistory(user_id, kept, "unlearn_only", None)


def _category_members(kept, categories):
    members = {}
    for pos, x in enumerate(kept):
        for c in categories.categories_of(x.item_id):
            members.setdefault(c, []).append(pos)
    return members


def allocate_quotas(history, categories, k):
    """Split a budget of ``k`` interactions across categories.

    Each interaction spreads a unit weight evenly over its labels. Quotas are the
    floors of ``share * min(k, n)``; the leftover units go one at a time to the
    categories with the largest fractional parts (ties by label), skipping any
    category whose quota already equals its population.
    """
    k = check_positive_int(k, "k")
    kept = _as_filtered(history).kept
    n = len(kept)
    if n == 0:
        raise EmptyHistory("cannot allocate quotas for an empty history")
    budget = min(k, n)
    weight, pop = {}, {}
    for x in kept:
        labels = categories.categories_of(x.item_id)
        share = Fraction(1, len(labels))
        for c in labels:
            weight[c] = weight.get(c, 0) + share
            pop[c] = pop.get(c, 0) + 1
    quota, frac = {}, {}
    for c, w in weight.items():
        exact = w * budget / n
        quota[c] = min(math.floor(exact), pop[c])
        frac[c] = exact - math.floor(exact)
    residual = budget - sum(quota.values())
    order = sorted(weight, key=lambda c: (-frac[c], c))
    while residual > 0:
        progressed = False
        for c in order:
            if residual == 0:
                break
            if quota[c] < pop[c]:
                quota[c] += 1
                residual -= 1
                progressed = True
        if not progressed:  # unreachable: populations cover the history
            raise RuntimeError("quota residual cannot be placed")
    return QuotaAllocation({c: quota[c] for c in sorted(quota)}, budget)


def _draw(rng, pool, count, drawn):
    """Sample ``count`` positions from ``pool`` not already drawn."""
    free = [p for p in pool if p not in drawn]
    take = min(count, len(free))
    if take <= 0:
        return 0
    picks = rng.choice(len(free), size=take, replace=False)
    drawn.update(free[i] for i in picks)
    return take


def preference_filter(history, categories, k, seed=0):
    """Sample each category in proportion to the user's own category mix.

    A multi-label interaction can satisfy only one category's quota. If a
    category runs dry because its items were taken elsewhere, the shortfall is
    topped up uniformly from whatever is left, so ``len(kept) == min(k, n)``.
    """
    history = _as_filtered(history)
    alloc = allocate_quotas(history, categories, k)
    kept = history.kept
    members = _category_members(kept, categories)
    rng = np.random.default_rng(seed)
    drawn = set()
    for c, q in alloc.per_category.items():
        if q:
            _draw(rng, members[c], q, drawn)
    short = alloc.total - len(drawn)
    if short > 0:
        _draw(rng, range(len(kept)), short, drawn)
    return history._with((kept[p] for p in sorted(drawn)), "preference", k)


def random_filter(history, k, seed=0):
    """Uniform ``min(k, n)`` truncation; the no-strategy baseline."""
    k = check_positive_int(k, "k")
    history = _as_filtered(history)
    n = len(history)
    if n <= k:
        return history._with(history.kept, "none", k)
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(n, size=k, replace=False))
    return history._with((history.kept[p] for p in picks), "none", k)


def sample_by_retention(history, categories, retention, seed=0, strategy="diversity"):
    """Keep ``ceil(pct/100 * |D_uc|)`` interactions of every category.

    ``retention`` maps category -> percentage; categories it does not mention
    are retained in full.
    """
    history = _as_filtered(history)
    kept = history.kept
    members = _category_members(kept, categories)
    rng = np.random.default_rng(seed)
    drawn = set()
    for c in sorted(members):
        pct = retention.get(c, 100)
        size = len(members[c])
        quota = -(-int(pct) * size // 100)
        _draw(rng, members[c], quota, drawn)
    return history._with((kept[p] for p in sorted(drawn)), strategy, None)


def retention_budget(history, categories, k, step=10, n_categories=None):
    """Total retention percentage matching a budget of ``k`` interactions.

    With ``n_c`` categories in play each may retain up to 100%, so keeping the
    fraction ``min(1, k/n)`` of the history corresponds to
    ``min(1, k/n) * 100 * n_c`` percentage points, floored to the grid step.
    """
    history = _as_filtered(history)
    n = len(history)
    if n == 0:
        raise EmptyHistory("empty history")
    if n_categories is None:
        n_categories = len(_category_members(history.kept, categories))
    frac = Fraction(min(k, n), n)
    total = math.floor(frac * 100 * n_categories)
    return total - total % step
