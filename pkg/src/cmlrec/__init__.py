"""Metric-learning recommenders over implicit feedback.

Users and items live in one embedding space; preference is the squared
Euclidean distance between the (optionally relation-translated) user point
and the item point. Five scoring heads share the training and evaluation
machinery: cml, lrml, adacml, hlr, and hlr++.
"""
from .datasets import (
    DataError,
    EmptyDatasetError,
    InteractionDataset,
    ParseError,
    RawInteractions,
    SplitDataset,
    dataset_stats,
    interaction_density,
    item_history,
    k_core_filter,
    load_interactions,
    load_split_dir,
    save_split_dir,
    split_dataset,
    user_history,
)
from .evaluation import (
    EvalReport,
    EvaluationError,
    evaluate,
    map_at_k,
    median_popularity,
    mrr_at_k,
    ndcg_at_k,
    precision_recall_at_k,
    rank_items,
    report_csv,
    report_table,
)
from .models import (
    ModelKind,
    NonFiniteScoreError,
    RelationContext,
    ScoreBreakdown,
    TripletBatch,
    backward,
    batch_distances,
    candidate_distances,
    item_item_relation,
    item_relation,
    joint_embedding,
    key_attention,
    relation_vector,
    score,
    triplet_margin_loss,
    user_relation,
)
from .parameters import (
    AdamState,
    CheckpointError,
    NonFiniteGradientError,
    ParameterStore,
    SparseGradients,
    adam_step,
    checkpoint_bytes,
    init_parameters,
    load_checkpoint,
    project_unit_ball,
    save_checkpoint,
)
from .synthetic import planted_clusters, planted_split
from .training import (
    GridCell,
    GridSearchResult,
    Hyperparams,
    TrainReport,
    Triplet,
    grid_cells,
    grid_search,
    sample_triplets,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "CheckpointError",
    "DataError",
    "EmptyDatasetError",
    "EvalReport",
    "EvaluationError",
    "GridCell",
    "GridSearchResult",
    "Hyperparams",
    "InteractionDataset",
    "ModelKind",
    "NonFiniteGradientError",
    "NonFiniteScoreError",
    "ParameterStore",
    "ParseError",
    "RawInteractions",
    "RelationContext",
    "ScoreBreakdown",
    "SparseGradients",
    "SplitDataset",
    "TrainReport",
    "Triplet",
    "TripletBatch",
    "adam_step",
    "backward",
    "batch_distances",
    "candidate_distances",
    "checkpoint_bytes",
    "dataset_stats",
    "evaluate",
    "grid_cells",
    "grid_search",
    "init_parameters",
    "interaction_density",
    "item_history",
    "item_item_relation",
    "item_relation",
    "joint_embedding",
    "k_core_filter",
    "key_attention",
    "load_checkpoint",
    "load_interactions",
    "load_split_dir",
    "map_at_k",
    "median_popularity",
    "mrr_at_k",
    "ndcg_at_k",
    "planted_clusters",
    "planted_split",
    "precision_recall_at_k",
    "project_unit_ball",
    "rank_items",
    "relation_vector",
    "report_csv",
    "report_table",
    "sample_triplets",
    "save_checkpoint",
    "save_split_dir",
    "score",
    "split_dataset",
    "train",
    "triplet_margin_loss",
    "user_history",
    "user_relation",
]
