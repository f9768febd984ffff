"""Subset selection for in-context exemplar retrieval with conditional DPPs."""

__version__ = "0.1.0"

from .config import RunConfig, apply_overrides, load_config
from .corpus import Corpus, EmbeddingMatrix, ExampleRecord, attach_embeddings, dedup, load_corpus
from .kernel import (
    ConditionalKernel,
    SubsetIndex,
    build_base_kernel,
    condition_kernel,
    dpp_prob_normalized,
    logdet_subset,
    normalize_rows,
    relevance_scores,
    set_score,
)
from .inference import (
    GreedyResult,
    KdppSampler,
    brute_force_map,
    greedy_map_fast,
    greedy_map_naive,
    kdpp_sample,
    order_exemplars,
)
from .retrieval import Bm25Index, CandidatePool, bm25_topk, dense_topk, random_pool, tokenize
from .scoring import (
    MockScorer,
    MockWorld,
    RemoteScorer,
    ScoreCache,
    ScoreRequest,
    SyntheticWorld,
    make_world,
    mock_score,
    remote_score,
    request_hash,
    score_many,
    world_from_corpus,
)
from .training import (
    ProjectionModel,
    TrainingInstance,
    TrainResult,
    construct_training_data,
    init_model,
    load_model,
    load_training_instances,
    mrr,
    pairwise_margin_loss,
    ranks_from_scores,
    save_model,
    save_training_instances,
    train,
)

__all__ = [
    "Bm25Index",
    "CandidatePool",
    "ConditionalKernel",
    "Corpus",
    "EmbeddingMatrix",
    "ExampleRecord",
    "GreedyResult",
    "KdppSampler",
    "MockScorer",
    "MockWorld",
    "ProjectionModel",
    "RemoteScorer",
    "RunConfig",
    "ScoreCache",
    "ScoreRequest",
    "SubsetIndex",
    "SyntheticWorld",
    "TrainResult",
    "TrainingInstance",
    "apply_overrides",
    "attach_embeddings",
    "bm25_topk",
    "brute_force_map",
    "build_base_kernel",
    "condition_kernel",
    "construct_training_data",
    "dedup",
    "dense_topk",
    "dpp_prob_normalized",
    "greedy_map_fast",
    "greedy_map_naive",
    "init_model",
    "kdpp_sample",
    "load_config",
    "load_corpus",
    "load_model",
    "load_training_instances",
    "logdet_subset",
    "make_world",
    "mock_score",
    "mrr",
    "normalize_rows",
    "order_exemplars",
    "pairwise_margin_loss",
    "random_pool",
    "ranks_from_scores",
    "relevance_scores",
    "remote_score",
    "request_hash",
    "save_model",
    "save_training_instances",
    "score_many",
    "set_score",
    "tokenize",
    "train",
    "world_from_corpus",
]
