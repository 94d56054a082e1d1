"""Two-phase training orchestration, ablations, grids, and comparisons.

One seed drives three documented streams: the dataset draw uses seed, model
initialization uses seed + 1, and batch shuffling uses seed + 2 (each with
named child streams below that). A run is therefore exactly reproducible
from the config echo in its report, and any stream can be varied alone.

Phase 1 fits the confidence classifier on noisy labels. Phase 2 freezes it
and trains the embedding layer plus proxies with the configured loss; the
smooth loss consumes the frozen confidences (precomputed once, since the
frozen module maps each sample to a constant row), while the baseline
losses take the noisy labels directly and never call the confidence model.
"""

from __future__ import annotations

import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from typing import Optional, Sequence

import numpy as np

from .data import (
    FeatureDataset,
    GeneratorSpec,
    SplitSpec,
    epoch_batches,
    generate_clean_samples,
    generate_synthetic,
    import_csv,
    split,
    subset_by_classes,
)
from .evaluation import DEFAULT_RECALL_KS, RecallReport, classification_accuracy, recall_at_k
from .losses import (
    LOSS_NAMES,
    LossHyperparams,
    MultiSimilarityParams,
    ProxyBank,
    multisimilarity_loss,
    noise_filter_mask,
    proxy_anchor_loss,
    proxy_nca_loss,
    smooth_proxy_anchor_loss,
)
from .model import (
    Adam,
    Backbone,
    ConfidenceModel,
    EmbeddingModel,
    bce_loss_and_grad,
    one_hot,
    parameters_equal,
    snapshot_parameters,
)
from .numerics import SeededRng

__all__ = [
    "TrainingError",
    "ExperimentConfig",
    "PreparedData",
    "RunReport",
    "SCHEMA_VERSION",
    "prepare_data",
    "train_phase1",
    "confidence_noise_statistics",
    "train_phase2",
    "evaluate_embeddings",
    "run_experiment",
    "run_noise_ablation",
    "run_grid",
    "run_comparison",
    "seeds_for",
]

SCHEMA_VERSION = 1

_SEED_SPACING = 1000
_SEED_MODULUS = 2 ** 64

_CONFIG_ALIASES = {
    "lambda": "lam",
    "ms_lambda": "ms_lam",
    "lambda_c": "noise_filter",
}


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or a violated runtime contract)."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat description of one experiment; every field has a default.

    An empty dict is a valid config and runs the default desk-scale
    experiment. dataset_path switches the data source from the synthetic
    generator to a CSV file; the generator fields are ignored then.
    """

    # data source
    dataset_path: Optional[str] = None
    class_count: int = 20
    per_class: int = 200
    raw_dim: int = 32
    cluster_std: float = 0.35
    noise_rate: float = 0.2
    flip_mode: str = "uniform"
    noisy_classes: Optional[tuple] = None
    center_rank: Optional[int] = None
    # split
    train_classes: Optional[tuple] = None
    eval_classes: Optional[tuple] = None
    max_per_class_train: Optional[int] = None
    max_per_class_eval: Optional[int] = None
    # model dims
    feature_dim: int = 32
    embed_dim: int = 16
    hidden_dim: Optional[int] = None
    # loss
    loss: str = "smooth_proxy_anchor"
    alpha: float = 32.0
    delta: float = 0.1
    beta: float = 100.0
    lam: float = 0.1
    nca_scale: float = 1.0
    ms_alpha: float = 2.0
    ms_beta: float = 50.0
    ms_lam: float = 1.0
    ms_epsilon: float = 0.1
    # optimizer and budget
    lr_dense: float = 1e-4
    lr_proxies: float = 1e-2
    weight_decay: float = 1e-4
    # desk-scale budget calibrated for the pinned learning rates: phase-1
    # validation accuracy peaks near 1500 epochs (longer runs memorize the
    # label noise), and the loss comparison is stable by 200 phase-2 epochs
    epochs_phase1: int = 1500
    epochs_phase2: int = 200
    batch_size: int = 64
    # reproducibility and evaluation
    seed: int = 0
    noise_filter: Optional[float] = None
    clean_val_per_class: int = 50
    eval_ks: tuple = DEFAULT_RECALL_KS

    def __post_init__(self):
        if self.loss not in LOSS_NAMES:
            raise ValueError(
                f"unknown loss {self.loss!r}; valid: {', '.join(LOSS_NAMES)}"
            )
        for name in ("lr_dense", "lr_proxies", "nca_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        for name in ("epochs_phase1", "epochs_phase2", "batch_size",
                     "clean_val_per_class", "feature_dim", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden_dim is not None and self.hidden_dim < 1:
            raise ValueError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if not 0 <= self.seed < _SEED_MODULUS - 2:
            raise ValueError(f"seed outside [0, 2**64 - 2): {self.seed}")
        if self.noise_filter is not None and not 0.0 <= self.noise_filter <= 1.0:
            raise ValueError(
                f"noise_filter must be in [0, 1], got {self.noise_filter}"
            )
        ks = tuple(int(k) for k in self.eval_ks)
        if not ks or any(k < 1 for k in ks):
            raise ValueError(f"eval_ks must be positive, got {self.eval_ks}")
        object.__setattr__(self, "eval_ks", ks)
        for name in ("noisy_classes", "train_classes", "eval_classes"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, tuple(int(c) for c in value))
        # instantiating the parameter sets runs their own validation
        self.loss_hyperparams()
        self.ms_params()

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ValueError(f"config must be an object, got {type(raw).__name__}")
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            name = _CONFIG_ALIASES.get(key, key)
            if name not in known:
                raise ValueError(f"unknown config key {key!r}")
            if name in kwargs:
                raise ValueError(f"config key {name!r} given twice via aliases")
            kwargs[name] = value
        return cls(**kwargs)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    def loss_hyperparams(self) -> LossHyperparams:
        return LossHyperparams(alpha=self.alpha, delta=self.delta,
                               beta=self.beta, lam=self.lam)

    def ms_params(self) -> MultiSimilarityParams:
        return MultiSimilarityParams(alpha=self.ms_alpha, beta=self.ms_beta,
                                     lam=self.ms_lam, epsilon=self.ms_epsilon)

    def generator_spec(self) -> GeneratorSpec:
        noisy = self.noisy_classes
        if noisy is None:
            # noise stays inside the training classes so the unseen-class
            # evaluation split keeps clean labels
            noisy = self.resolved_train_classes(self.class_count)
        return GeneratorSpec(class_count=self.class_count,
                             per_class=self.per_class, raw_dim=self.raw_dim,
                             cluster_std=self.cluster_std,
                             noise_rate=self.noise_rate,
                             flip_mode=self.flip_mode, noisy_classes=noisy,
                             center_rank=self.center_rank)

    def resolved_train_classes(self, class_count: int) -> tuple:
        if self.train_classes is not None:
            return self.train_classes
        return tuple(range(class_count // 2))

    def resolved_eval_classes(self, class_count: int) -> tuple:
        if self.eval_classes is not None:
            return self.eval_classes
        return tuple(range(class_count // 2, class_count))

    def data_rng(self) -> SeededRng:
        return SeededRng(self.seed)

    def init_rng(self) -> SeededRng:
        return SeededRng(self.seed + 1)

    def shuffle_rng(self) -> SeededRng:
        return SeededRng(self.seed + 2)


@dataclass
class PreparedData:
    """Everything downstream of the data source, ready for both phases."""

    dataset: FeatureDataset
    train: FeatureDataset
    eval: FeatureDataset
    clean_val: FeatureDataset
    backbone: Backbone
    train_class_ids: tuple
    val_overlaps_train: bool


def prepare_data(config: ExperimentConfig) -> PreparedData:
    """Load or generate the dataset, split it, and build the backbone.

    The clean validation slice for phase 1 comes from a fresh sample stream
    on synthetic data (truly held out). For CSV datasets there is no second
    draw, so a seeded per-class slice of the train split doubles as the
    validation set and the report flags the overlap.
    """
    data_rng = config.data_rng()
    if config.dataset_path is not None:
        dataset = import_csv(config.dataset_path)
    else:
        dataset = generate_synthetic(data_rng, config.generator_spec())
    class_count = dataset.class_count
    train_ids = config.resolved_train_classes(class_count)
    eval_ids = config.resolved_eval_classes(class_count)
    split_spec = SplitSpec(train_ids, eval_ids,
                           max_per_class_train=config.max_per_class_train,
                           max_per_class_eval=config.max_per_class_eval)
    parts = split(dataset, split_spec, data_rng)

    if config.dataset_path is None:
        clean = generate_clean_samples(data_rng, config.generator_spec(),
                                       per_class=config.clean_val_per_class)
        clean_val = subset_by_classes(clean, train_ids, by="true")
        overlaps = False
    else:
        clean_val = _validation_slice(parts.train, train_ids,
                                      config.clean_val_per_class, data_rng)
        overlaps = True

    backbone = Backbone.create(config.init_rng().child("backbone"),
                               dataset.feature_dim, config.feature_dim)
    return PreparedData(dataset=dataset, train=parts.train, eval=parts.eval,
                        clean_val=clean_val, backbone=backbone,
                        train_class_ids=tuple(sorted(train_ids)),
                        val_overlaps_train=overlaps)


def _validation_slice(train: FeatureDataset, train_ids, per_class: int,
                      data_rng: SeededRng) -> FeatureDataset:
    """Seeded per-class rows from the train split, preferring clean rows."""
    known = train.metadata.get("true_labels_known", True)
    clean_rows = train.noisy_labels == train.true_labels if known else None
    picked = []
    for c in train_ids:
        idx = np.flatnonzero(train.noisy_labels == c)
        if clean_rows is not None:
            preferred = idx[clean_rows[idx]]
            if preferred.size:
                idx = preferred
        if idx.size > per_class:
            order = data_rng.child("cleanval", int(c)).generator.permutation(idx.size)
            idx = np.sort(idx[order[:per_class]])
        picked.append(idx)
    rows = np.concatenate(picked) if picked else np.array([], dtype=np.int64)
    return train.select(rows, {"split": "validation"})


def _column_map(class_ids: Sequence[int]) -> dict:
    return {int(c): j for j, c in enumerate(class_ids)}


def _columns_for(labels, column_map: dict, what: str) -> np.ndarray:
    out = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels):
        try:
            out[i] = column_map[int(lab)]
        except KeyError:
            raise ValueError(f"{what} label {int(lab)} is not a training class") from None
    return out


def _check_finite_loss(loss: float, phase: str, epoch: int, batch: int) -> None:
    if not np.isfinite(loss):
        raise TrainingError(
            f"{phase} aborted: loss became {loss} at epoch {epoch}, batch {batch}"
        )


def train_phase1(config: ExperimentConfig, train_data: FeatureDataset,
                 validation: Optional[FeatureDataset] = None,
                 backbone: Optional[Backbone] = None):
    """Fit the confidence classifier on noisy labels with BCE and Adam.

    Returns (model, report). The report carries the per-epoch loss curve
    and, when a validation set is given, top-1 accuracy on it scored
    against its own labels.
    """
    if train_data.sample_count == 0:
        raise ValueError("phase 1 needs a nonempty train set")
    init_rng = config.init_rng()
    if backbone is None:
        backbone = Backbone.create(init_rng.child("backbone"),
                                   train_data.feature_dim, config.feature_dim)
    train_ids = tuple(sorted(config.resolved_train_classes(train_data.class_count)))
    column_map = _column_map(train_ids)
    columns = _columns_for(train_data.noisy_labels, column_map, "train")
    targets = one_hot(columns, len(train_ids))

    model = ConfidenceModel.create(init_rng.child("confidence"),
                                   config.feature_dim, len(train_ids),
                                   hidden_dim=config.hidden_dim)
    optimizer = Adam(config.lr_dense, weight_decay=config.weight_decay)
    shuffle = config.shuffle_rng().child("phase1")

    started = time.perf_counter()
    curve = []
    n = train_data.sample_count
    for epoch in range(config.epochs_phase1):
        total = 0.0
        for b, idx in enumerate(epoch_batches(n, config.batch_size, shuffle, epoch)):
            feats = backbone.transform(train_data.features[idx])
            conf = model.forward(feats)
            loss, grad_logits = bce_loss_and_grad(conf, targets[idx])
            _check_finite_loss(loss, "phase 1", epoch, b)
            grads = model.backward_from_logits(grad_logits)
            optimizer.step(model.parameters(), grads)
            total += loss * len(idx)
        curve.append(total / n)

    accuracy = None
    if validation is not None and validation.sample_count > 0:
        conf = model.forward(backbone.transform(validation.features))
        val_columns = _columns_for(validation.noisy_labels, column_map, "validation")
        accuracy = classification_accuracy(conf, val_columns)
    report = {
        "loss_curve": curve,
        "epochs": config.epochs_phase1,
        "final_accuracy": accuracy,
        "validation_size": 0 if validation is None else validation.sample_count,
        "wall_time_s": time.perf_counter() - started,
    }
    return model, report


def confidence_noise_statistics(model: ConfidenceModel, backbone: Backbone,
                                train_data: FeatureDataset,
                                train_ids: Sequence[int]) -> dict:
    """Diagnostic contrast of confidence on flipped vs clean samples.

    Reads true labels, so it lives outside every training path: the mean
    confidence a flipped sample gets on its (wrong) noisy label should sit
    below the mean confidence a clean sample gets on its true label.
    """
    column_map = _column_map(tuple(sorted(int(c) for c in train_ids)))
    conf = model.forward(backbone.transform(train_data.features))
    noisy_cols = _columns_for(train_data.noisy_labels, column_map, "train")
    flipped = np.asarray(train_data.noisy_labels != train_data.true_labels)
    rows = np.arange(train_data.sample_count)
    at_noisy = conf[rows, noisy_cols]
    out = {
        "flipped_count": int(np.sum(flipped)),
        "clean_count": int(np.sum(~flipped)),
        "mean_confidence_flipped_noisy_label": None,
        "mean_confidence_clean_true_label": None,
    }
    if out["flipped_count"]:
        out["mean_confidence_flipped_noisy_label"] = float(np.mean(at_noisy[flipped]))
    if out["clean_count"]:
        # for clean samples the noisy label is the true label
        out["mean_confidence_clean_true_label"] = float(np.mean(at_noisy[~flipped]))
    return out


def _batch_loss(config: ExperimentConfig, embeddings, bank: ProxyBank,
                labels, confidences):
    hp = config.loss_hyperparams()
    if config.loss == "smooth_proxy_anchor":
        return smooth_proxy_anchor_loss(embeddings, bank, confidences, hp)
    if config.loss == "proxy_anchor":
        return proxy_anchor_loss(embeddings, bank, labels, hp)
    if config.loss == "proxy_nca":
        return proxy_nca_loss(embeddings, bank, labels, scale=config.nca_scale)
    return multisimilarity_loss(embeddings, labels, config.ms_params())


def train_phase2(config: ExperimentConfig, train_data: FeatureDataset,
                 frozen: Optional[ConfidenceModel],
                 backbone: Optional[Backbone] = None):
    """Train the embedding layer and proxies against the configured loss.

    The confidence model stays frozen: the smooth loss reads its outputs
    (precomputed once over the train set), baselines never call it. Any
    parameter drift in the frozen module is a hard failure. Returns
    (embedding model, proxy bank, report).
    """
    init_rng = config.init_rng()
    if backbone is None:
        backbone = Backbone.create(init_rng.child("backbone"),
                                   train_data.feature_dim, config.feature_dim)
    train_ids = tuple(sorted(config.resolved_train_classes(train_data.class_count)))
    needs_confidence = config.loss == "smooth_proxy_anchor"

    frozen_snapshot = None
    calls_before = 0
    confidences = None
    if frozen is not None:
        frozen_snapshot = snapshot_parameters(frozen.parameters())
        calls_before = frozen.forward_calls
    if needs_confidence:
        if frozen is None:
            raise ValueError("smooth_proxy_anchor needs the frozen confidence model")
        if frozen.class_count != len(train_ids):
            raise ValueError(
                f"frozen model scores {frozen.class_count} classes, "
                f"train split has {len(train_ids)}"
            )
        if train_data.sample_count:
            confidences = frozen.forward(backbone.transform(train_data.features))

    column_map = _column_map(train_ids)
    labels_cols = _columns_for(train_data.noisy_labels, column_map, "train")
    model = EmbeddingModel.create(init_rng.child("embedding"),
                                  config.feature_dim, config.embed_dim)
    # proxies are indexed by column to mirror the confidence matrix layout
    bank = ProxyBank.initialize(init_rng.child("proxies"),
                                range(len(train_ids)), config.embed_dim)
    proxy_init = bank.proxies.copy()
    opt_dense = Adam(config.lr_dense, weight_decay=config.weight_decay)
    # no weight decay on proxies: they are class anchors, not dense weights
    opt_proxies = Adam(config.lr_proxies, weight_decay=0.0)
    shuffle = config.shuffle_rng().child("phase2")

    started = time.perf_counter()
    curve = []
    n = train_data.sample_count
    uses_proxies = False
    for epoch in range(config.epochs_phase2):
        total = 0.0
        for b, idx in enumerate(epoch_batches(n, config.batch_size, shuffle, epoch)):
            feats = backbone.transform(train_data.features[idx])
            embeddings = model.forward(feats)
            batch_conf = None if confidences is None else confidences[idx]
            result = _batch_loss(config, embeddings, bank, labels_cols[idx],
                                 batch_conf)
            _check_finite_loss(result.loss, "phase 2", epoch, b)
            _, grads = model.backward(result.grad_embeddings)
            opt_dense.step(model.parameters(), grads)
            if result.grad_proxies is not None:
                uses_proxies = True
                opt_proxies.step({"proxies": bank.proxies},
                                 {"proxies": result.grad_proxies})
            total += result.loss * len(idx)
        curve.append(total / n if n else 0.0)

    confidence_reads = 0
    if frozen is not None:
        if not parameters_equal(frozen_snapshot, frozen.parameters()):
            raise TrainingError(
                "frozen confidence module changed during phase 2"
            )
        confidence_reads = frozen.forward_calls - calls_before
        if not needs_confidence and confidence_reads != 0:
            raise TrainingError(
                f"baseline loss {config.loss} read the confidence model "
                f"{confidence_reads} times"
            )
    displacement = np.linalg.norm(bank.proxies - proxy_init, axis=1)
    report = {
        "loss_curve": curve,
        "epochs": config.epochs_phase2,
        "train_size": n,
        "confidence_reads": confidence_reads,
        "uses_proxies": uses_proxies,
        "proxy_displacement": [float(d) for d in displacement],
        "wall_time_s": time.perf_counter() - started,
    }
    return model, bank, report


def evaluate_embeddings(config: ExperimentConfig, model: EmbeddingModel,
                        backbone: Backbone, eval_data: FeatureDataset) -> RecallReport:
    """Recall@K on the evaluation split, scored against its true labels."""
    embeddings = model.forward(backbone.transform(eval_data.features))
    return recall_at_k(embeddings, eval_data.true_labels, ks=config.eval_ks)


@dataclass
class RunReport:
    """One full experiment: both phases, final retrieval metrics, echo."""

    config: dict
    seed: int
    loss: str
    phase1: Optional[dict]
    phase2: dict
    recall: dict
    confidence_stats: Optional[dict]
    noise_filter: Optional[dict]
    wall_time_s: float

    def to_dict(self) -> dict:
        return {
            "kind": "run",
            "schema_version": SCHEMA_VERSION,
            "config": self.config,
            "seed": self.seed,
            "loss": self.loss,
            "phase1": self.phase1,
            "phase2": self.phase2,
            "recall": self.recall,
            "confidence_stats": self.confidence_stats,
            "noise_filter": self.noise_filter,
            "wall_time_s": self.wall_time_s,
        }


def _apply_noise_filter(config: ExperimentConfig, train: FeatureDataset,
                        model: ConfidenceModel, backbone: Backbone,
                        train_ids) -> tuple:
    """Drop train samples whose own-label confidence falls below lambda_c."""
    column_map = _column_map(tuple(sorted(train_ids)))
    columns = _columns_for(train.noisy_labels, column_map, "train")
    conf = model.forward(backbone.transform(train.features))
    keep = noise_filter_mask(conf, columns, config.noise_filter)
    kept_idx = np.flatnonzero(keep)
    filtered = train.select(kept_idx, {"noise_filtered": True})
    emptied = [int(c) for c in sorted(column_map)
               if not np.any(filtered.noisy_labels == c)]
    if emptied:
        warnings.warn(
            f"noise filter emptied classes {emptied}; their proxies remain "
            "as negatives"
        )
    info = {
        "lambda_c": float(config.noise_filter),
        "kept": int(kept_idx.size),
        "removed": int(train.sample_count - kept_idx.size),
        "emptied_classes": emptied,
    }
    return filtered, info


def _finish_run(config: ExperimentConfig, prepared: PreparedData,
                phase1_model: ConfidenceModel, phase1_report: dict) -> RunReport:
    """Phase 2 plus evaluation, given phase-1 outputs (shared or fresh)."""
    started = time.perf_counter()
    train = prepared.train
    filter_info = None
    if config.noise_filter is not None:
        train, filter_info = _apply_noise_filter(
            config, train, phase1_model, prepared.backbone,
            prepared.train_class_ids)
    model, bank, phase2_report = train_phase2(config, train, phase1_model,
                                              prepared.backbone)
    recall = evaluate_embeddings(config, model, prepared.backbone, prepared.eval)
    stats = confidence_noise_statistics(phase1_model, prepared.backbone,
                                        prepared.train, prepared.train_class_ids)
    wall = phase1_report["wall_time_s"] + (time.perf_counter() - started)
    return RunReport(config=config.to_dict(), seed=config.seed,
                     loss=config.loss, phase1=phase1_report,
                     phase2=phase2_report, recall=recall.to_dict(),
                     confidence_stats=stats, noise_filter=filter_info,
                     wall_time_s=wall)


def run_experiment(config: ExperimentConfig) -> RunReport:
    """One seed, both phases, final Recall@K; reproducible from the echo."""
    prepared = prepare_data(config)
    phase1_model, phase1_report = train_phase1(config, prepared.train,
                                               prepared.clean_val,
                                               prepared.backbone)
    if prepared.val_overlaps_train:
        phase1_report["validation_overlaps_train"] = True
    return _finish_run(config, prepared, phase1_model, phase1_report)


def seeds_for(base_seed: int, count: int) -> list:
    """Well-spaced seeds for multi-seed aggregates: base + 1000 * i."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    return [(base_seed + _SEED_SPACING * i) % (_SEED_MODULUS - 2)
            for i in range(count)]


def _mean_recall_at(reports: Sequence[dict], k: int = 1) -> float:
    return float(np.mean([r["recall"]["recall_at"][str(k)] for r in reports]))


def run_noise_ablation(config: ExperimentConfig, seeds: int = 1) -> dict:
    """Paired full vs confidence-filtered runs over one or more seeds.

    Both runs of a pair share the seed, dataset, and phase-1 model; the
    filtered run drops train samples scoring below lambda_c (default 0.1)
    before phase 2.
    """
    lambda_c = config.noise_filter if config.noise_filter is not None else 0.1
    pairs = []
    for seed in seeds_for(config.seed, seeds):
        base = replace(config, seed=seed, noise_filter=None)
        prepared = prepare_data(base)
        phase1_model, phase1_report = train_phase1(base, prepared.train,
                                                   prepared.clean_val,
                                                   prepared.backbone)
        full = _finish_run(base, prepared, phase1_model, dict(phase1_report))
        filtered = _finish_run(replace(base, noise_filter=lambda_c), prepared,
                               phase1_model, dict(phase1_report))
        pairs.append({"seed": seed, "full": full.to_dict(),
                      "filtered": filtered.to_dict()})
    return {
        "kind": "ablation",
        "schema_version": SCHEMA_VERSION,
        "loss": config.loss,
        "lambda_c": float(lambda_c),
        "seeds": seeds_for(config.seed, seeds),
        "pairs": pairs,
        "mean_recall1_full": _mean_recall_at([p["full"] for p in pairs]),
        "mean_recall1_filtered": _mean_recall_at([p["filtered"] for p in pairs]),
    }


def _grid_cell(task: tuple) -> dict:
    """Worker entry for parallel grid cells; recomputes phase 1."""
    config_dict, lam, beta, seed = task
    cell = {"lam": lam, "beta": beta, "seed": seed}
    try:
        config = replace(ExperimentConfig.from_dict(config_dict),
                         lam=lam, beta=beta, seed=seed)
        cell["report"] = run_experiment(config).to_dict()
    except (ValueError, TrainingError) as exc:
        cell["error"] = str(exc)
    return cell


def run_grid(config: ExperimentConfig, lambdas: Sequence[float],
             betas: Sequence[float], seeds: int = 1, jobs: int = 1) -> dict:
    """Cross product over the smoothing threshold and sharpness.

    Sequential cells share the per-seed dataset and phase-1 model (neither
    depends on lambda or beta); parallel cells recompute them, which is
    bit-identical by seed discipline. A failing cell is recorded with its
    error and the grid continues.
    """
    lambdas = [float(v) for v in lambdas]
    betas = [float(v) for v in betas]
    if not lambdas or not betas:
        raise ValueError("lambdas and betas must be nonempty")
    cells = []
    if jobs > 1:
        tasks = [(config.to_dict(), lam, beta, seed)
                 for seed in seeds_for(config.seed, seeds)
                 for lam in lambdas for beta in betas]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_grid_cell, tasks))
    else:
        for seed in seeds_for(config.seed, seeds):
            base = replace(config, seed=seed)
            prepared = prepare_data(base)
            phase1_model, phase1_report = train_phase1(base, prepared.train,
                                                       prepared.clean_val,
                                                       prepared.backbone)
            for lam in lambdas:
                for beta in betas:
                    cell = {"lam": lam, "beta": beta, "seed": seed}
                    try:
                        cell_config = replace(base, lam=lam, beta=beta)
                        report = _finish_run(cell_config, prepared, phase1_model,
                                             dict(phase1_report))
                        cell["report"] = report.to_dict()
                    except (ValueError, TrainingError) as exc:
                        cell["error"] = str(exc)
                    cells.append(cell)
    table = []
    for lam in lambdas:
        row = []
        for beta in betas:
            values = [c["report"]["recall"]["recall_at"]["1"] for c in cells
                      if c["lam"] == lam and c["beta"] == beta and "report" in c]
            row.append(float(np.mean(values)) if values else None)
        table.append(row)
    return {
        "kind": "grid",
        "schema_version": SCHEMA_VERSION,
        "lambdas": lambdas,
        "betas": betas,
        "seeds": seeds_for(config.seed, seeds),
        "cells": cells,
        "recall1_table": table,
    }


def _comparison_cell(config_dict: dict) -> dict:
    """Worker entry for parallel comparison cells; recomputes phase 1."""
    report = run_experiment(ExperimentConfig.from_dict(config_dict))
    return report.to_dict()


def run_comparison(config: ExperimentConfig, losses: Sequence[str],
                   seeds: int = 1, jobs: int = 1) -> dict:
    """The configured losses on identical data, seeds, and budget.

    Sequential execution shares the per-seed dataset and phase-1 model
    across losses; with jobs > 1 each (loss, seed) cell recomputes them in
    a worker process, which is bit-identical by seed discipline.
    """
    losses = list(losses)
    if not losses:
        raise ValueError("losses must be nonempty")
    for name in losses:
        if name not in LOSS_NAMES:
            raise ValueError(
                f"unknown loss {name!r}; valid: {', '.join(LOSS_NAMES)}"
            )
    seed_list = seeds_for(config.seed, seeds)
    runs = {name: [] for name in losses}
    if jobs > 1:
        cell_configs = [(name, replace(config, loss=name, seed=seed))
                        for name in losses for seed in seed_list]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = pool.map(_comparison_cell,
                               [c.to_dict() for _, c in cell_configs])
            for (name, _), report in zip(cell_configs, results):
                runs[name].append(report)
    else:
        for seed in seed_list:
            base = replace(config, seed=seed)
            prepared = prepare_data(base)
            phase1_model, phase1_report = train_phase1(base, prepared.train,
                                                       prepared.clean_val,
                                                       prepared.backbone)
            for name in losses:
                report = _finish_run(replace(base, loss=name), prepared,
                                     phase1_model, dict(phase1_report))
                runs[name].append(report.to_dict())
    return {
        "kind": "comparison",
        "schema_version": SCHEMA_VERSION,
        "losses": losses,
        "seeds": seed_list,
        "runs": runs,
        "mean_recall1": {name: _mean_recall_at(runs[name]) for name in losses},
    }
