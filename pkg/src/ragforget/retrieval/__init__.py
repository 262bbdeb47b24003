"""Retrieval stage: forget filtering plus the preference, diversity and attention strategies."""
from .attention import AttentionConfig, attention_filter, attention_matrix, attention_weights, output_projection
from .filtering import (
    STRATEGIES,
    FilteredHistory,
    QuotaAllocation,
    allocate_quotas,
    filter_unlearn,
    preference_filter,
    random_filter,
    retention_budget,
    sample_by_retention,
)
from .knapsack import KnapsackResult, PerfMatrix, solve_knapsack
from .requests import ForgetRequest, dump_requests, load_requests, parse_requests, resolve_requests
from .strategies import (
    AttentionFilter,
    DiversityFilter,
    HistoryFilter,
    NoFilter,
    PreferenceFilter,
    RandomRetention,
    diversity_filter,
    make_filter,
)

__all__ = [
    "STRATEGIES", "AttentionConfig", "AttentionFilter", "DiversityFilter", "FilteredHistory",
    "ForgetRequest", "HistoryFilter", "KnapsackResult", "NoFilter", "PerfMatrix",
    "PreferenceFilter", "QuotaAllocation", "RandomRetention", "allocate_quotas",
    "attention_filter", "attention_matrix", "attention_weights", "diversity_filter",
    "dump_requests", "filter_unlearn", "load_requests", "make_filter", "output_projection",
    "parse_requests", "preference_filter", "random_filter", "resolve_requests",
    "retention_budget", "sample_by_retention", "solve_knapsack",
]
