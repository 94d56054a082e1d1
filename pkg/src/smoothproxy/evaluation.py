"""Retrieval and classification metrics.

Recall@K follows the standard protocol: every sample queries all the others
(self excluded), candidates are ranked by cosine similarity, and a query
succeeds if any of its top K carries the same label. Ranking is exact and
deterministic; similarity ties are broken by sample index.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .numerics import as_matrix, cosine_similarity_matrix

__all__ = [
    "DEFAULT_RECALL_KS",
    "RecallReport",
    "recall_at_k",
    "classification_accuracy",
    "topk_confidences",
]

DEFAULT_RECALL_KS = (1, 2, 4, 8, 16)


@dataclass
class RecallReport:
    """Recall@K values keyed by K, with the query/candidate set sizes.

    gallery_count is the per-query candidate count (samples minus self).
    singleton_labels lists labels that can never be retrieved because only
    one sample carries them; their queries count as failures.
    """

    recall_at: dict
    query_count: int
    gallery_count: int
    singleton_labels: tuple = field(default_factory=tuple)

    def __post_init__(self):
        last = 0.0
        for k in sorted(self.recall_at):
            value = self.recall_at[k]
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"recall@{k} = {value} outside [0, 1]")
            if value < last:
                raise ValueError("recall values must be nondecreasing in K")
            last = value

    def to_dict(self) -> dict:
        return {
            "recall_at": {str(k): float(v) for k, v in sorted(self.recall_at.items())},
            "query_count": self.query_count,
            "gallery_count": self.gallery_count,
            "singleton_labels": list(self.singleton_labels),
        }


def recall_at_k(embeddings, labels, ks=DEFAULT_RECALL_KS) -> RecallReport:
    """Exact self-excluded Recall@K over one embedded sample set.

    Every K must be below the sample count. Labels carried by a single
    sample are reported in a warning; those queries are kept in the
    denominator and always fail.
    """
    emb = as_matrix(embeddings, "embeddings")
    labs = np.asarray(labels, dtype=np.int64).ravel()
    n = emb.shape[0]
    if labs.shape[0] != n:
        raise ValueError("labels length does not match embeddings")
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    ks = [int(k) for k in ks]
    if not ks:
        raise ValueError("ks must be nonempty")
    for k in ks:
        if k < 1 or k >= n:
            raise ValueError(f"K={k} outside [1, {n - 1}]")

    uniques, counts = np.unique(labs, return_counts=True)
    singletons = tuple(int(u) for u in uniques[counts == 1])
    if singletons:
        warnings.warn(
            f"labels with a single sample can never be retrieved: {list(singletons)}"
        )

    sims = cosine_similarity_matrix(emb, emb)
    np.fill_diagonal(sims, -np.inf)
    # stable sort on the negated scores: ties fall back to sample index
    order = np.argsort(-sims, axis=1, kind="stable")
    hit = labs[order] == labs[:, None]
    any_hit_by_rank = np.cumsum(hit, axis=1) > 0
    recall = {k: float(np.mean(any_hit_by_rank[:, k - 1])) for k in ks}
    return RecallReport(recall_at=recall, query_count=n, gallery_count=n - 1,
                        singleton_labels=singletons)


def classification_accuracy(confidences, labels) -> float:
    """Top-1 accuracy of per-class confidence rows; ties pick the lowest class."""
    conf = as_matrix(confidences, "confidences")
    labs = np.asarray(labels, dtype=np.int64).ravel()
    if labs.shape[0] != conf.shape[0]:
        raise ValueError("labels length does not match confidences")
    if labs.size == 0:
        raise ValueError("need at least one sample")
    if labs.min() < 0 or labs.max() >= conf.shape[1]:
        raise ValueError(f"labels outside [0, {conf.shape[1]})")
    predictions = np.argmax(conf, axis=1)
    return float(np.mean(predictions == labs))


def topk_confidences(confidences, k: int) -> list:
    """Per-sample top-k (class, confidence) pairs, descending, ties by class."""
    conf = as_matrix(confidences, "confidences")
    k = int(k)
    if k < 1 or k > conf.shape[1]:
        raise ValueError(f"k={k} outside [1, {conf.shape[1]}]")
    order = np.argsort(-conf, axis=1, kind="stable")[:, :k]
    out = []
    for i in range(conf.shape[0]):
        out.append([(int(c), float(conf[i, c])) for c in order[i]])
    return out
