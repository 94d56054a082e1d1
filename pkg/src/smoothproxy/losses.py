"""Loss functions with forward values and analytic gradients.

Four losses share one result type:

* smooth_proxy_anchor_loss: proxy-anchor shape, but the batch is split into
  per-proxy positive/negative sets by thresholded class confidences, and each
  pair's contribution is scaled by a sigmoid smoothing weight.
* proxy_anchor_loss: the label-partitioned special case (all weights 1).
* proxy_nca_loss: softmax over non-target proxies, kept as a baseline.
* multisimilarity_loss: pair-based baseline with the standard mining rule.

Gradients are exact derivatives of the forward value. Smoothing weights are
treated as constants (the confidence module that produces them is frozen),
so they scale gradient terms but are never differentiated through.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .numerics import as_matrix, cosine_similarity_matrix, sigmoid

__all__ = [
    "LossHyperparams",
    "MultiSimilarityParams",
    "ProxyBank",
    "ProxyPartition",
    "BatchLossResult",
    "smoothing_weight",
    "build_partition",
    "smooth_proxy_anchor_loss",
    "proxy_anchor_loss",
    "proxy_nca_loss",
    "multisimilarity_loss",
    "noise_filter_mask",
    "LOSS_NAMES",
]

LOSS_NAMES = (
    "smooth_proxy_anchor",
    "proxy_anchor",
    "proxy_nca",
    "multisimilarity",
)

# Embedding rows must arrive unit-norm. The check is looser than the 1e-9
# the models produce so that finite-difference probes (h ~ 1e-6) still pass;
# cosine similarity renormalizes internally, so leniency costs no accuracy.
_UNIT_NORM_TOL = 1e-4

# exp() overflows past ~709; keep headroom for batch-sized sums.
_MAX_EXPONENT = 690.0


@dataclass(frozen=True)
class LossHyperparams:
    """Scaling alpha, margin delta, smoothing sharpness beta, threshold lam."""

    alpha: float = 32.0
    delta: float = 0.1
    beta: float = 100.0
    lam: float = 0.1

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if not 0 < self.lam < 1:
            raise ValueError(f"lam must be in (0, 1), got {self.lam}")
        if self.delta < 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        # cosine range is [-1, 1], so |exponent| <= alpha * (1 + delta)
        if self.alpha * (1.0 + self.delta) > _MAX_EXPONENT:
            raise ValueError(
                "alpha * (1 + delta) exceeds the safe exponent range "
                f"({_MAX_EXPONENT}); loss terms would overflow"
            )


@dataclass(frozen=True)
class MultiSimilarityParams:
    """Hyperparameters of the pair-based baseline (alpha, beta, lam, epsilon)."""

    alpha: float = 2.0
    beta: float = 50.0
    lam: float = 1.0
    epsilon: float = 0.1

    def __post_init__(self):
        if not self.alpha > 0 or not self.beta > 0:
            raise ValueError("alpha and beta must be > 0")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")


class ProxyBank:
    """One learnable proxy vector per training class.

    Rows of ``proxies`` follow ``class_ids`` order. The matrix is a live
    parameter: the optimizer mutates it in place between batches.
    """

    def __init__(self, proxies, class_ids: Sequence[int]):
        mat = np.array(as_matrix(proxies, "proxies"), copy=True)
        ids = tuple(int(c) for c in class_ids)
        if len(ids) != mat.shape[0]:
            raise ValueError(
                f"{len(ids)} class ids for {mat.shape[0]} proxy rows"
            )
        if len(set(ids)) != len(ids):
            raise ValueError("class ids must be unique")
        norms = np.linalg.norm(mat, axis=1)
        zero = np.flatnonzero(norms == 0.0)
        if zero.size:
            raise ValueError(f"proxy row {int(zero[0])} has zero norm")
        self.proxies = mat
        self.class_ids = ids
        self._column = {cid: j for j, cid in enumerate(ids)}

    @classmethod
    def initialize(cls, rng, class_ids: Sequence[int], embed_dim: int) -> "ProxyBank":
        """Draw unit-normalized normal rows, one per class."""
        ids = tuple(int(c) for c in class_ids)
        raw = rng.generator.standard_normal((len(ids), int(embed_dim)))
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
        return cls(raw / norms, ids)

    @property
    def count(self) -> int:
        return self.proxies.shape[0]

    @property
    def dim(self) -> int:
        return self.proxies.shape[1]

    def column_of(self, class_id: int) -> int:
        try:
            return self._column[int(class_id)]
        except KeyError:
            raise ValueError(f"label {class_id} has no proxy") from None

    def columns_for(self, labels) -> np.ndarray:
        return np.array([self.column_of(l) for l in np.asarray(labels).ravel()],
                        dtype=np.int64)


class ProxyPartition:
    """Per-proxy split of the batch into positive and negative index sets.

    Stored as a boolean mask of shape (batch, proxy_count): True means the
    sample sits in that proxy's positive set. Every sample is in exactly one
    of the two sets per proxy by construction, and may be positive for any
    number of proxies (including none).
    """

    def __init__(self, positive_mask):
        mask = np.asarray(positive_mask)
        if mask.ndim != 2 or mask.dtype != np.bool_:
            raise ValueError("positive_mask must be a 2-d boolean array")
        self.positive_mask = mask

    @property
    def batch_size(self) -> int:
        return self.positive_mask.shape[0]

    @property
    def proxy_count(self) -> int:
        return self.positive_mask.shape[1]

    def positive_indices(self, proxy_col: int) -> np.ndarray:
        return np.flatnonzero(self.positive_mask[:, proxy_col])

    def negative_indices(self, proxy_col: int) -> np.ndarray:
        return np.flatnonzero(~self.positive_mask[:, proxy_col])

    @property
    def active_positive_proxies(self) -> tuple:
        """Columns whose positive set is nonempty."""
        return tuple(int(j) for j in np.flatnonzero(self.positive_mask.any(axis=0)))


@dataclass
class BatchLossResult:
    """Scalar loss plus gradients and bookkeeping for one batch.

    grad_similarities holds d loss / d s(x, p) (or d s(x_i, x_k) for the
    pair-based loss) so tests and diagnostics can check the similarity-level
    gradient without re-deriving it. Pair-based losses have no proxies, so
    grad_proxies and partition are None there.
    """

    loss: float
    grad_embeddings: np.ndarray
    grad_proxies: Optional[np.ndarray]
    partition: Optional[ProxyPartition]
    similarities: np.ndarray
    grad_similarities: np.ndarray


def smoothing_weight(c, hp: LossHyperparams):
    """Weight sigmoid(beta * (c - lam)) for a confidence c in [0, 1].

    Vectorized: scalars give floats, arrays give arrays. A confidence equal
    to the threshold gets exactly 0.5.
    """
    arr = np.asarray(c, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("confidence must be finite")
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError("confidence outside [0, 1]")
    return sigmoid(hp.beta * (arr - hp.lam))


def _checked_confidences(confidences, batch: int, proxy_count: int) -> np.ndarray:
    conf = as_matrix(confidences, "confidences")
    if conf.shape != (batch, proxy_count):
        raise ValueError(
            f"confidences shape {conf.shape} does not match "
            f"(batch, proxies) = ({batch}, {proxy_count})"
        )
    if np.any(conf < 0.0) or np.any(conf > 1.0):
        raise ValueError("confidence entry outside [0, 1]")
    return conf


def _checked_embeddings(embeddings) -> np.ndarray:
    emb = as_matrix(embeddings, "embeddings")
    if emb.shape[0] == 0:
        raise ValueError("empty batch")
    norms = np.linalg.norm(emb, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > _UNIT_NORM_TOL)
    if bad.size:
        raise ValueError(
            f"embedding row {int(bad[0])} is not unit-norm "
            f"(norm {norms[bad[0]]:.6g})"
        )
    return emb


def build_partition(confidences, hp: LossHyperparams) -> ProxyPartition:
    """Positive set of proxy p: samples with confidence for p >= lam.

    A sample below threshold for every proxy lands in every negative set,
    which is legal: it is pushed away from all proxies.
    """
    conf = as_matrix(confidences, "confidences")
    if np.any(conf < 0.0) or np.any(conf > 1.0):
        raise ValueError("confidence entry outside [0, 1]")
    return ProxyPartition(conf >= hp.lam)


def _label_mask(labels, bank: ProxyBank, batch: int) -> np.ndarray:
    cols = bank.columns_for(labels)
    if cols.shape[0] != batch:
        raise ValueError(f"{cols.shape[0]} labels for batch of {batch}")
    mask = np.zeros((batch, bank.count), dtype=bool)
    mask[np.arange(batch), cols] = True
    return mask


def _proxy_anchor_terms(sims, pos_mask, pos_weights, hp: LossHyperparams):
    """Forward value and d loss / d s for the proxy-anchor family.

    pos_weights is the per-pair positive weight w; negatives use 1 - w.
    Reduction runs in fixed column order so results are bit-deterministic.
    """
    batch, proxy_count = sims.shape
    grad_s = np.zeros_like(sims)
    active = np.flatnonzero(pos_mask.any(axis=0))
    loss = 0.0
    if active.size:
        inv_active = 1.0 / active.size
        for j in active:
            rows = np.flatnonzero(pos_mask[:, j])
            w = pos_weights[rows, j]
            h = np.exp(-hp.alpha * (sims[rows, j] - hp.delta))
            total = float(np.sum(w * h))
            loss += inv_active * np.log1p(total)
            grad_s[rows, j] += inv_active * w * (-hp.alpha) * h / (1.0 + total)
    inv_all = 1.0 / proxy_count
    for j in range(proxy_count):
        rows = np.flatnonzero(~pos_mask[:, j])
        if rows.size == 0:
            continue
        wn = 1.0 - pos_weights[rows, j]
        h = np.exp(hp.alpha * (sims[rows, j] + hp.delta))
        total = float(np.sum(wn * h))
        loss += inv_all * np.log1p(total)
        grad_s[rows, j] += inv_all * wn * hp.alpha * h / (1.0 + total)
    return float(loss), grad_s


def _chain_to_inputs(grad_s, x, p, sims):
    """Chain d loss / d s back to raw x and p through cosine similarity.

    Uses d s/d x = (p_hat - s * x_hat) / ||x|| and symmetrically for p, so
    unnormalized proxies are handled exactly.
    """
    xnorm = np.linalg.norm(x, axis=1)
    pnorm = np.linalg.norm(p, axis=1)
    xh = x / xnorm[:, None]
    ph = p / pnorm[:, None]
    gx = (grad_s @ ph - np.sum(grad_s * sims, axis=1)[:, None] * xh) / xnorm[:, None]
    gp = (grad_s.T @ xh - np.sum(grad_s * sims, axis=0)[:, None] * ph) / pnorm[:, None]
    return gx, gp


def smooth_proxy_anchor_loss(
    embeddings,
    proxies: ProxyBank,
    confidences,
    hp: Optional[LossHyperparams] = None,
) -> BatchLossResult:
    """Confidence-partitioned, confidence-weighted proxy-anchor loss.

    The batch is split per proxy by thresholding confidences at lam (labels
    are not consulted at all). Each positive pair is weighted by
    w = sigmoid(beta * (c - lam)); each negative pair by 1 - w. Weights are
    constants: gradients flow through similarities only.
    """
    hp = hp if hp is not None else LossHyperparams()
    emb = _checked_embeddings(embeddings)
    conf = _checked_confidences(confidences, emb.shape[0], proxies.count)
    sims = cosine_similarity_matrix(emb, proxies.proxies)
    weights = smoothing_weight(conf, hp)
    partition = ProxyPartition(conf >= hp.lam)
    loss, grad_s = _proxy_anchor_terms(sims, partition.positive_mask, weights, hp)
    gx, gp = _chain_to_inputs(grad_s, emb, proxies.proxies, sims)
    return BatchLossResult(loss, gx, gp, partition, sims, grad_s)


def proxy_anchor_loss(
    embeddings,
    proxies: ProxyBank,
    labels,
    hp: Optional[LossHyperparams] = None,
) -> BatchLossResult:
    """Label-partitioned proxy-anchor loss (every pair at full weight)."""
    hp = hp if hp is not None else LossHyperparams()
    emb = _checked_embeddings(embeddings)
    mask = _label_mask(labels, proxies, emb.shape[0])
    sims = cosine_similarity_matrix(emb, proxies.proxies)
    # pair weight 1 on the labeled class, 0 elsewhere: positives contribute
    # at full weight and so do negatives (which use 1 - w)
    weights = mask.astype(np.float64)
    loss, grad_s = _proxy_anchor_terms(sims, mask, weights, hp)
    gx, gp = _chain_to_inputs(grad_s, emb, proxies.proxies, sims)
    return BatchLossResult(loss, gx, gp, ProxyPartition(mask), sims, grad_s)


def proxy_nca_loss(
    embeddings,
    proxies: ProxyBank,
    labels,
    scale: float = 1.0,
) -> BatchLossResult:
    """Softmax baseline: -log(exp(scale*s_target) / sum over other proxies).

    Needs at least two proxies (the denominator excludes the target). On
    unit vectors the value is bounded below by -2 * scale.
    """
    if proxies.count < 2:
        raise ValueError("proxy_nca_loss needs at least 2 proxies")
    scale = float(scale)
    if not np.isfinite(scale) or scale <= 0:
        raise ValueError(f"scale must be positive and finite, got {scale}")
    emb = _checked_embeddings(embeddings)
    batch = emb.shape[0]
    cols = proxies.columns_for(labels)
    if cols.shape[0] != batch:
        raise ValueError(f"{cols.shape[0]} labels for batch of {batch}")
    sims = cosine_similarity_matrix(emb, proxies.proxies)
    t = scale * sims
    rows = np.arange(batch)
    masked = t.copy()
    masked[rows, cols] = -np.inf  # denominator excludes the target proxy
    m = np.max(masked, axis=1)
    shifted = np.exp(masked - m[:, None])
    denom = np.sum(shifted, axis=1)
    loss = float(np.mean(-t[rows, cols] + m + np.log(denom)))
    grad_s = scale * shifted / denom[:, None] / batch
    grad_s[rows, cols] = -scale / batch
    gx, gp = _chain_to_inputs(grad_s, emb, proxies.proxies, sims)
    mask = np.zeros((batch, proxies.count), dtype=bool)
    mask[rows, cols] = True
    return BatchLossResult(loss, gx, gp, ProxyPartition(mask), sims, grad_s)


def multisimilarity_loss(
    embeddings,
    labels,
    params: Optional[MultiSimilarityParams] = None,
) -> BatchLossResult:
    """Pair-based baseline with hardness mining, no proxies involved.

    Per anchor i: negatives survive mining if their similarity exceeds the
    weakest positive minus epsilon; positives survive if below the hardest
    negative plus epsilon. Anchors with no positive pair contribute nothing;
    anchors with no negative pair keep all their positives. Mining is a
    constant selection: gradients flow only through surviving pairs. The
    mean runs over all anchors, mined-empty or not.
    """
    params = params if params is not None else MultiSimilarityParams()
    emb = _checked_embeddings(embeddings)
    batch = emb.shape[0]
    lab = np.asarray(labels).ravel().astype(np.int64)
    if lab.shape[0] != batch:
        raise ValueError(f"{lab.shape[0]} labels for batch of {batch}")
    sims = cosine_similarity_matrix(emb, emb)
    same = lab[:, None] == lab[None, :]
    np.fill_diagonal(same, False)
    diff = ~same
    np.fill_diagonal(diff, False)
    grad_s = np.zeros_like(sims)
    loss = 0.0
    for i in range(batch):
        pos = np.flatnonzero(same[i])
        if pos.size == 0:
            continue
        neg = np.flatnonzero(diff[i])
        min_pos = float(np.min(sims[i, pos]))
        if neg.size:
            max_neg = float(np.max(sims[i, neg]))
            keep_pos = pos[sims[i, pos] < max_neg + params.epsilon]
            keep_neg = neg[sims[i, neg] > min_pos - params.epsilon]
        else:
            keep_pos = pos
            keep_neg = neg
        if keep_pos.size:
            hp_ = np.exp(-params.alpha * (sims[i, keep_pos] - params.lam))
            total = float(np.sum(hp_))
            loss += np.log1p(total) / params.alpha
            grad_s[i, keep_pos] += -hp_ / (1.0 + total) / batch
        if keep_neg.size:
            hn = np.exp(params.beta * (sims[i, keep_neg] - params.lam))
            total = float(np.sum(hn))
            loss += np.log1p(total) / params.beta
            grad_s[i, keep_neg] += hn / (1.0 + total) / batch
    loss = float(loss / batch)
    # each similarity s(i, k) feeds both x_i and x_k
    sym = grad_s + grad_s.T
    norms = np.linalg.norm(emb, axis=1)
    xh = emb / norms[:, None]
    gx = (sym @ xh - np.sum(sym * sims, axis=1)[:, None] * xh) / norms[:, None]
    return BatchLossResult(loss, gx, None, None, sims, grad_s)


def noise_filter_mask(confidences, labels, lambda_c: float) -> np.ndarray:
    """Keep mask: sample's confidence for its own labeled class >= lambda_c.

    labels are column indices into the confidence matrix. The boundary value
    is kept (>=), consistent with threshold semantics elsewhere.
    """
    conf = as_matrix(confidences, "confidences")
    lab = np.asarray(labels).ravel().astype(np.int64)
    if lab.shape[0] != conf.shape[0]:
        raise ValueError(f"{lab.shape[0]} labels for {conf.shape[0]} confidence rows")
    if np.any(lab < 0) or np.any(lab >= conf.shape[1]):
        raise ValueError("label indexes outside confidence columns")
    return conf[np.arange(conf.shape[0]), lab] >= float(lambda_c)
