"""Confidence-weighted proxy-anchor metric learning for noisy labels.

Library layout:

* numerics: seeded RNG, similarity and stability primitives
* losses: the four losses with analytic gradients and proxy-set logic
* model: dense layers, confidence/embedding models, Adam, checkpoints
* data: synthetic noisy datasets, CSV round-trip, class-disjoint splits
* evaluation: Recall@K and classification metrics
* pipeline: two-phase training, ablation, grid, and comparison drivers
* figures: matplotlib renderings of report JSON
* cli: the ``smoothproxy`` command
"""

__version__ = "0.1.0"

from .data import (
    DataFormatError,
    FeatureDataset,
    GeneratorSpec,
    SplitSpec,
    export_csv,
    generate_clean_samples,
    generate_synthetic,
    import_csv,
    split,
)
from .evaluation import (
    RecallReport,
    classification_accuracy,
    recall_at_k,
)
from .losses import (
    BatchLossResult,
    LossHyperparams,
    MultiSimilarityParams,
    ProxyBank,
    ProxyPartition,
    build_partition,
    multisimilarity_loss,
    noise_filter_mask,
    proxy_anchor_loss,
    proxy_nca_loss,
    smooth_proxy_anchor_loss,
    smoothing_weight,
)
from .model import (
    Adam,
    Backbone,
    ConfidenceModel,
    EmbeddingModel,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import SeededRng, cosine_similarity, l2_normalize, sigmoid
from .pipeline import (
    ExperimentConfig,
    RunReport,
    TrainingError,
    evaluate_embeddings,
    prepare_data,
    run_comparison,
    run_experiment,
    run_grid,
    run_noise_ablation,
    seeds_for,
    train_phase1,
    train_phase2,
)

__all__ = [
    "__version__",
    "SeededRng",
    "cosine_similarity",
    "l2_normalize",
    "sigmoid",
    "BatchLossResult",
    "LossHyperparams",
    "MultiSimilarityParams",
    "ProxyBank",
    "ProxyPartition",
    "build_partition",
    "multisimilarity_loss",
    "noise_filter_mask",
    "proxy_anchor_loss",
    "proxy_nca_loss",
    "smooth_proxy_anchor_loss",
    "smoothing_weight",
    "Adam",
    "Backbone",
    "ConfidenceModel",
    "EmbeddingModel",
    "load_checkpoint",
    "save_checkpoint",
    "DataFormatError",
    "FeatureDataset",
    "GeneratorSpec",
    "SplitSpec",
    "export_csv",
    "generate_clean_samples",
    "generate_synthetic",
    "import_csv",
    "split",
    "RecallReport",
    "classification_accuracy",
    "recall_at_k",
    "ExperimentConfig",
    "RunReport",
    "TrainingError",
    "evaluate_embeddings",
    "prepare_data",
    "run_comparison",
    "run_experiment",
    "run_grid",
    "run_noise_ablation",
    "seeds_for",
    "train_phase1",
    "train_phase2",
]
