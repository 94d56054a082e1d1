"""Synthetic noisy datasets, CSV round-trip, and the class-disjoint split.

The generator draws class centers uniformly on the unit sphere and clusters
Gaussian samples around them. A controlled fraction of samples per eligible
class has its training label reassigned (the true label is kept for
diagnostics, never for training). By default only the first half of the
classes is eligible for flips, matching the default split where the second
half is held out as clean unseen-class evaluation data.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .numerics import SeededRng, as_matrix, l2_normalize_rows

__all__ = [
    "DataFormatError",
    "GeneratorSpec",
    "SplitSpec",
    "SplitResult",
    "FeatureDataset",
    "class_centers",
    "generate_synthetic",
    "generate_clean_samples",
    "subset_by_classes",
    "split",
    "export_csv",
    "import_csv",
    "epoch_batches",
    "batch_iter",
]


class DataFormatError(ValueError):
    """Malformed dataset file; carries the 1-based offending line if known."""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class GeneratorSpec:
    """Shape of a synthetic dataset draw.

    noisy_classes lists the classes eligible for label flips; None means the
    first half of the classes (the default training half). Flip targets are
    drawn from the same eligible set so flipped samples stay inside it.

    center_rank bounds the dimension of the subspace holding every class
    center (default raw_dim // 4). All classes, training and held-out alike,
    share that subspace, so structure learned on training classes transfers
    to unseen ones; with full-rank centers the two class sets would span
    nearly orthogonal directions and no linear map could help both.
    """

    class_count: int = 20
    per_class: int = 200
    raw_dim: int = 32
    cluster_std: float = 0.35
    noise_rate: float = 0.2
    flip_mode: str = "uniform"
    noisy_classes: Optional[tuple] = None
    center_rank: Optional[int] = None

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError(f"class_count must be >= 2, got {self.class_count}")
        if self.per_class < 1:
            raise ValueError(f"per_class must be >= 1, got {self.per_class}")
        if self.raw_dim < 2:
            raise ValueError(f"raw_dim must be >= 2, got {self.raw_dim}")
        if self.cluster_std < 0:
            raise ValueError(f"cluster_std must be >= 0, got {self.cluster_std}")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ValueError(f"noise_rate must be in [0, 1), got {self.noise_rate}")
        if self.flip_mode not in ("uniform", "neighbor"):
            raise ValueError(
                f"flip_mode must be 'uniform' or 'neighbor', got {self.flip_mode!r}"
            )
        if self.noisy_classes is not None:
            ids = tuple(int(c) for c in self.noisy_classes)
            if len(set(ids)) != len(ids):
                raise ValueError("noisy_classes must be unique")
            if any(c < 0 or c >= self.class_count for c in ids):
                raise ValueError("noisy_classes outside [0, class_count)")
            object.__setattr__(self, "noisy_classes", ids)
        if self.center_rank is not None:
            rank = int(self.center_rank)
            if not 2 <= rank <= self.raw_dim:
                raise ValueError(
                    f"center_rank must be in [2, raw_dim={self.raw_dim}], got {rank}"
                )
            object.__setattr__(self, "center_rank", rank)

    def resolved_noisy_classes(self) -> tuple:
        if self.noisy_classes is not None:
            return self.noisy_classes
        return tuple(range(self.class_count // 2))

    def resolved_center_rank(self) -> int:
        if self.center_rank is not None:
            return self.center_rank
        return min(self.raw_dim, max(2, self.raw_dim // 4))

    def to_dict(self) -> dict:
        return {
            "class_count": self.class_count,
            "per_class": self.per_class,
            "raw_dim": self.raw_dim,
            "cluster_std": self.cluster_std,
            "noise_rate": self.noise_rate,
            "flip_mode": self.flip_mode,
            "noisy_classes": list(self.resolved_noisy_classes()),
            "center_rank": self.resolved_center_rank(),
        }


class FeatureDataset:
    """Labeled feature vectors with a noisy training label per sample.

    true_labels exist for diagnostics and evaluation only; training code
    paths receive features and noisy_labels and never touch them. Every
    true_labels access bumps true_label_reads so tests can assert that
    isolation. Arrays are frozen after construction.
    """

    def __init__(self, features, noisy_labels, true_labels, class_count: int,
                 metadata: Optional[dict] = None):
        feats = np.array(as_matrix(features, "features"), copy=True)
        noisy = np.array(np.asarray(noisy_labels).ravel(), dtype=np.int64, copy=True)
        true = np.array(np.asarray(true_labels).ravel(), dtype=np.int64, copy=True)
        class_count = int(class_count)
        if noisy.shape[0] != feats.shape[0] or true.shape[0] != feats.shape[0]:
            raise ValueError("label count does not match sample count")
        for name, lab in (("noisy_labels", noisy), ("true_labels", true)):
            if lab.size and (lab.min() < 0 or lab.max() >= class_count):
                raise ValueError(f"{name} outside [0, {class_count})")
        feats.setflags(write=False)
        noisy.setflags(write=False)
        true.setflags(write=False)
        self.features = feats
        self.noisy_labels = noisy
        self._true_labels = true
        self.class_count = class_count
        self.metadata = dict(metadata or {})
        self.true_label_reads = 0

    @property
    def true_labels(self) -> np.ndarray:
        self.true_label_reads += 1
        return self._true_labels

    @property
    def sample_count(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def select(self, indices, extra_metadata: Optional[dict] = None) -> "FeatureDataset":
        """Subset by sample indices; class_count and metadata carry over."""
        idx = np.asarray(indices, dtype=np.int64).ravel()
        meta = dict(self.metadata)
        if extra_metadata:
            meta.update(extra_metadata)
        return FeatureDataset(self.features[idx], self.noisy_labels[idx],
                              self.true_labels[idx], self.class_count, meta)

    def realized_noise_rate(self) -> float:
        if self.sample_count == 0:
            return 0.0
        return float(np.mean(self.noisy_labels != self.true_labels))


def class_centers(rng: SeededRng, spec: GeneratorSpec) -> np.ndarray:
    """Per-class unit centers on the sphere of a shared low-rank subspace."""
    rank = spec.resolved_center_rank()
    basis_raw = rng.child("subspace").generator.standard_normal(
        (spec.raw_dim, rank))
    q, r = np.linalg.qr(basis_raw)
    # fix the QR sign convention so the basis is fully seed-determined
    q = q * np.where(np.diag(r) >= 0.0, 1.0, -1.0)[None, :]
    low = rng.child("centers").generator.standard_normal(
        (spec.class_count, rank))
    return l2_normalize_rows(low, "centers") @ q.T


def _draw_samples(rng: SeededRng, spec: GeneratorSpec, centers, per_class: int,
                  stream: int):
    gen = rng.child("samples", int(stream)).generator
    jitter = gen.standard_normal(
        (spec.class_count, per_class, spec.raw_dim)) * spec.cluster_std
    feats = (centers[:, None, :] + jitter).reshape(-1, spec.raw_dim)
    labels = np.repeat(np.arange(spec.class_count, dtype=np.int64), per_class)
    return feats, labels


def generate_synthetic(rng: SeededRng, spec: GeneratorSpec) -> FeatureDataset:
    """Clustered samples with an exact count of label flips per class.

    Flip count per eligible class is floor(noise_rate * per_class); targets
    are other eligible classes (uniform pick, or the nearest other eligible
    center in neighbor mode). Deterministic in the passed rng.
    """
    centers = class_centers(rng, spec)
    feats, true = _draw_samples(rng, spec, centers, spec.per_class, stream=0)
    noisy = true.copy()
    flipped = 0
    if spec.noise_rate > 0.0:
        eligible = spec.resolved_noisy_classes()
        if len(eligible) < 2:
            raise ValueError(
                "label flips need at least 2 eligible classes, got "
                f"{len(eligible)}"
            )
        per_flip = int(spec.noise_rate * spec.per_class)
        for c in eligible:
            fgen = rng.child("flips", int(c)).generator
            rows = c * spec.per_class + fgen.permutation(spec.per_class)[:per_flip]
            if spec.flip_mode == "uniform":
                pool = np.array([e for e in eligible if e != c], dtype=np.int64)
                targets = pool[fgen.integers(0, pool.size, size=per_flip)]
            else:
                others = [e for e in eligible if e != c]
                dists = np.linalg.norm(centers[others] - centers[c], axis=1)
                targets = np.full(per_flip, others[int(np.argmin(dists))],
                                  dtype=np.int64)
            noisy[rows] = targets
            flipped += per_flip
    metadata = {
        "kind": "synthetic",
        "seed": rng.seed,
        "generator": spec.to_dict(),
        "flipped_count": int(flipped),
        "true_labels_known": True,
    }
    return FeatureDataset(feats, noisy, true, spec.class_count, metadata)


def generate_clean_samples(rng: SeededRng, spec: GeneratorSpec, per_class: int,
                           stream: int = 1) -> FeatureDataset:
    """Fresh clean-labeled samples around the same class centers.

    Uses an independent sample stream of the same dataset rng, so it shares
    centers with generate_synthetic(rng, spec) but none of its draws. Used
    for held-out validation of the confidence module.
    """
    if stream == 0:
        raise ValueError("stream 0 belongs to the training draw")
    centers = class_centers(rng, spec)
    feats, labels = _draw_samples(rng, spec, centers, int(per_class), stream)
    metadata = {
        "kind": "synthetic_clean",
        "seed": rng.seed,
        "generator": spec.to_dict(),
        "flipped_count": 0,
        "true_labels_known": True,
    }
    return FeatureDataset(feats, labels, labels, spec.class_count, metadata)


def subset_by_classes(dataset: FeatureDataset, classes: Sequence[int],
                      by: str = "noisy") -> FeatureDataset:
    """Samples whose noisy (or true) label is in the given class set."""
    if by not in ("noisy", "true"):
        raise ValueError(f"by must be 'noisy' or 'true', got {by!r}")
    wanted = set(int(c) for c in classes)
    labels = dataset.noisy_labels if by == "noisy" else dataset.true_labels
    idx = np.flatnonzero(np.isin(labels, list(wanted)))
    return dataset.select(idx)


@dataclass(frozen=True)
class SplitSpec:
    """Class-disjoint train/eval split with optional per-class caps."""

    train_classes: tuple
    eval_classes: tuple
    max_per_class_train: Optional[int] = None
    max_per_class_eval: Optional[int] = None

    def __post_init__(self):
        train = tuple(int(c) for c in self.train_classes)
        ev = tuple(int(c) for c in self.eval_classes)
        if not train or not ev:
            raise ValueError("train and eval class sets must be nonempty")
        if set(train) & set(ev):
            raise ValueError(
                f"train/eval classes overlap: {sorted(set(train) & set(ev))}"
            )
        if len(set(train)) != len(train) or len(set(ev)) != len(ev):
            raise ValueError("class sets must not repeat ids")
        object.__setattr__(self, "train_classes", train)
        object.__setattr__(self, "eval_classes", ev)
        for name in ("max_per_class_train", "max_per_class_eval"):
            cap = getattr(self, name)
            if cap is not None and cap < 1:
                raise ValueError(f"{name} must be >= 1 or None")

    @classmethod
    def default_for(cls, class_count: int,
                    max_per_class_train: Optional[int] = None,
                    max_per_class_eval: Optional[int] = None) -> "SplitSpec":
        """First half of the classes trains, second half evaluates."""
        half = class_count // 2
        return cls(tuple(range(half)), tuple(range(half, class_count)),
                   max_per_class_train, max_per_class_eval)


@dataclass
class SplitResult:
    train: FeatureDataset
    eval: FeatureDataset


def _capped_class_indices(labels, classes, cap, rng: SeededRng, tag: str):
    picked = []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        if cap is not None and idx.size > cap:
            choice = rng.child(tag, int(c)).generator.permutation(idx.size)[:cap]
            idx = np.sort(idx[choice])
        picked.append(idx)
    return np.concatenate(picked) if picked else np.array([], dtype=np.int64)


def split(dataset: FeatureDataset, spec: SplitSpec, rng: SeededRng) -> SplitResult:
    """Partition by noisy label into class-disjoint train and eval sets.

    Membership follows the training signal (noisy labels). Per-class caps
    keep a seeded random subset in ascending index order.
    """
    for c in spec.train_classes + spec.eval_classes:
        if c < 0 or c >= dataset.class_count:
            raise ValueError(f"split class {c} outside dataset classes")
    train_idx = _capped_class_indices(dataset.noisy_labels, spec.train_classes,
                                      spec.max_per_class_train, rng, "cap_train")
    eval_idx = _capped_class_indices(dataset.noisy_labels, spec.eval_classes,
                                     spec.max_per_class_eval, rng, "cap_eval")
    train = dataset.select(train_idx, {"split": "train",
                                       "split_classes": list(spec.train_classes)})
    ev = dataset.select(eval_idx, {"split": "eval",
                                   "split_classes": list(spec.eval_classes)})
    return SplitResult(train=train, eval=ev)


def _sha256_of(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def export_csv(dataset: FeatureDataset, path) -> None:
    """Write `label,true_label,f0..f{D-1}` rows plus a JSON metadata sidecar.

    Floats carry 17 significant digits, which round-trips float64 exactly.
    The sidecar (<path>.meta.json) records provenance and a content hash.
    """
    dim = dataset.feature_dim
    header = ["label", "true_label"] + [f"f{i}" for i in range(dim)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(dataset.sample_count):
            cells = [str(int(dataset.noisy_labels[i])),
                     str(int(dataset.true_labels[i]))]
            cells.extend(f"{v:.17g}" for v in dataset.features[i])
            fh.write(",".join(cells) + "\n")
    sidecar = {
        "kind": "dataset_meta",
        "schema_version": 1,
        "sample_count": dataset.sample_count,
        "feature_dim": dim,
        "class_count": dataset.class_count,
        "sha256": _sha256_of(path),
        "metadata": dataset.metadata,
    }
    with open(f"{path}.meta.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def import_csv(path) -> FeatureDataset:
    """Read a dataset written by export_csv (or hand-built to its format).

    A missing true_label column degrades gracefully: true labels default to
    the noisy labels and the metadata flags it. A sidecar hash mismatch is
    reported as a warning, not an error, so edited fixtures stay loadable.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("empty file", line=1) from None
        header = [h.strip() for h in header]
        if not header or header[0] != "label":
            raise DataFormatError("header must start with 'label'", line=1)
        has_true = len(header) > 1 and header[1] == "true_label"
        feature_names = header[2:] if has_true else header[1:]
        if not feature_names:
            raise DataFormatError("no feature columns", line=1)
        for i, name in enumerate(feature_names):
            if name != f"f{i}":
                raise DataFormatError(
                    f"feature column {i} named {name!r}, expected 'f{i}'", line=1)
        width = len(header)
        noisy, true, rows = [], [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DataFormatError(
                    f"expected {width} columns, got {len(row)}", line=line_no)
            try:
                noisy.append(int(row[0]))
                true.append(int(row[1]) if has_true else int(row[0]))
                rows.append([float(v) for v in row[2 if has_true else 1:]])
            except ValueError as exc:
                raise DataFormatError(f"non-numeric cell ({exc})",
                                      line=line_no) from None
    if not rows:
        raise DataFormatError("no data rows", line=2)
    metadata = {}
    class_count = None
    sidecar_path = f"{path}.meta.json"
    if os.path.exists(sidecar_path):
        with open(sidecar_path, "r", encoding="utf-8") as fh:
            sidecar = json.load(fh)
        metadata = dict(sidecar.get("metadata", {}))
        class_count = sidecar.get("class_count")
        recorded = sidecar.get("sha256")
        if recorded and recorded != _sha256_of(path):
            warnings.warn(f"{path}: content hash differs from sidecar")
            metadata["hash_mismatch"] = True
    if class_count is None:
        class_count = int(max(max(noisy), max(true))) + 1
    if not has_true:
        metadata["true_labels_known"] = False
        warnings.warn(f"{path}: no true_label column; defaulting to labels")
    else:
        metadata.setdefault("true_labels_known", True)
    return FeatureDataset(np.array(rows), noisy, true, class_count, metadata)


def epoch_batches(sample_count: int, batch_size: int, rng: SeededRng,
                  epoch: int) -> list:
    """Seeded uniform shuffle of one epoch, cut into consecutive batches.

    The final short batch is kept. Each epoch derives its own child stream,
    so different epochs get different permutations from one rng.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    perm = rng.child("epoch", int(epoch)).generator.permutation(int(sample_count))
    return [perm[i:i + batch_size] for i in range(0, len(perm), batch_size)]


def batch_iter(dataset, batch_size: int, rng: SeededRng, epochs: int = 1):
    """Stream of index batches over one or more epochs."""
    n = dataset.sample_count if isinstance(dataset, FeatureDataset) else int(dataset)
    for epoch in range(int(epochs)):
        yield from epoch_batches(n, batch_size, rng, epoch)
