"""Recommendation unlearning at the retrieval stage of an LLM re-ranker."""
from .backbone import BPR, BackboneConfig, BackboneModel, LightGCN, top_k_candidates, train_backbone
from .corpus import (
    CategoryMap,
    Dataset,
    Interaction,
    SplitBundle,
    load_interactions,
    load_item_metadata,
    make_splits,
)
from .evaluation import MetricsReport, evaluate_users, hit_ratio_at_k, ndcg_at_k
from .generator import GenBackendConfig, generate_scores, rerank
from .pipeline import CRAGRU
from .promptgen import AuxContext, build_prompt, scan_leakage
from .retrieval import (
    AttentionFilter,
    DiversityFilter,
    ForgetRequest,
    NoFilter,
    PerfMatrix,
    PreferenceFilter,
    RandomRetention,
    solve_knapsack,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionFilter", "AuxContext", "BPR", "BackboneConfig", "BackboneModel", "CRAGRU",
    "CategoryMap", "Dataset", "DiversityFilter", "ForgetRequest", "GenBackendConfig",
    "Interaction", "LightGCN", "MetricsReport", "NoFilter", "PerfMatrix", "PreferenceFilter",
    "RandomRetention", "SplitBundle", "build_prompt", "evaluate_users", "generate_scores",
    "hit_ratio_at_k", "load_interactions", "load_item_metadata", "make_splits", "ndcg_at_k",
    "rerank", "scan_leakage", "solve_knapsack", "top_k_candidates", "train_backbone",
]
