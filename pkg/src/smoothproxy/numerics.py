"""Deterministic numeric primitives shared by every other module.

All math runs in 64-bit floats. The finite-difference checks in the test
suite assume tolerances that 32-bit arithmetic cannot reach, so inputs are
coerced to float64 on entry and never downcast.

Randomness flows exclusively through SeededRng. The generator algorithm is
numpy's PCG64, fixed once; changing it would silently invalidate every
recorded experiment, so don't.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = [
    "SeededRng",
    "derive_seed",
    "as_vector",
    "as_matrix",
    "l2_normalize",
    "l2_normalize_rows",
    "cosine_similarity",
    "cosine_similarity_matrix",
    "sigmoid",
    "log1p_sum_exp",
]

_SEED_MODULUS = 2**64


def derive_seed(seed: int, *tags) -> int:
    """Fold a parent seed and a sequence of tags into a fresh 64-bit seed.

    Uses SHA-256 over the decimal seed and the stringified tags joined with
    ':'; the first 8 digest bytes (big-endian) become the child seed. Purely
    deterministic, no global state.
    """
    parts = [str(int(seed))] + [str(t) for t in tags]
    digest = hashlib.sha256(":".join(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


class SeededRng:
    """Seeded random source with documented child-stream derivation.

    Wraps ``numpy.random.Generator(PCG64(seed))``. Identical seeds give
    identical streams on every platform. Instances are single-owner: never
    share one across threads; derive children with :meth:`child` instead.
    """

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < _SEED_MODULUS:
            raise ValueError(f"seed must be in [0, 2**64), got {seed}")
        self.seed = seed
        self.generator = np.random.Generator(np.random.PCG64(seed))

    def child(self, *tags) -> "SeededRng":
        """Return an independent generator derived from this seed and tags."""
        return SeededRng(derive_seed(self.seed, *tags))

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed})"


def as_vector(a, name: str = "vector") -> np.ndarray:
    """Coerce to a finite 1-d float64 array or raise ValueError."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-d float64 array or raise ValueError."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def l2_normalize(a, name: str = "vector") -> np.ndarray:
    """Return a / ||a||. Zero vectors are a domain error."""
    v = as_vector(a, name)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ValueError(f"cannot normalize zero-norm {name}")
    return v / norm


def l2_normalize_rows(m, name: str = "matrix") -> np.ndarray:
    """Row-wise L2 normalization; names the offending row on zero norm."""
    mat = as_matrix(m, name)
    norms = np.linalg.norm(mat, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValueError(f"{name} row {int(zero[0])} has zero norm")
    return mat / norms[:, None]


def cosine_similarity(a, b) -> float:
    """Cosine similarity of two vectors, clamped to [-1, 1].

    The clamp guards against |dot/norms| overshooting 1 by rounding, which
    would otherwise poison downstream exp arguments.
    """
    va = as_vector(a, "a")
    vb = as_vector(b, "b")
    if va.shape != vb.shape:
        raise ValueError(f"dimension mismatch: {va.shape[0]} vs {vb.shape[0]}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0:
        raise ValueError("zero-norm input: a")
    if nb == 0.0:
        raise ValueError("zero-norm input: b")
    return float(np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0))


def cosine_similarity_matrix(x, p) -> np.ndarray:
    """All-pairs cosine similarities between rows of x and rows of p.

    Returns shape (x_rows, p_rows), entries clamped to [-1, 1]. Rows are
    normalized internally, so callers may pass unnormalized matrices.
    """
    xn = l2_normalize_rows(x, "x")
    pn = l2_normalize_rows(p, "p")
    if xn.shape[1] != pn.shape[1]:
        raise ValueError(
            f"dimension mismatch: x cols {xn.shape[1]} vs p cols {pn.shape[1]}"
        )
    return np.clip(xn @ pn.T, -1.0, 1.0)


def sigmoid(z):
    """Numerically stable logistic function, elementwise.

    Branches on sign so the exp argument is never positive; stable for
    |z| up to 1000 and beyond. Accepts scalars or arrays; returns a float
    for scalar input.
    """
    arr = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("sigmoid input must be finite")
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ez = np.exp(arr[~pos])
    out[~pos] = ez / (1.0 + ez)
    if np.isscalar(z) or arr.ndim == 0:
        return float(out)
    return out


def log1p_sum_exp(terms) -> float:
    """log(1 + sum_i exp(t_i)) with the max exponent factored out.

    The terms are the exponents themselves. Empty input gives log(1) = 0.
    When the largest exponent is positive it is factored out so the result
    never overflows for exponents up to ~700; otherwise the naive log1p
    form is already stable.
    """
    t = np.asarray(terms, dtype=np.float64)
    if t.ndim != 1:
        t = t.reshape(-1)
    if t.size == 0:
        return 0.0
    if not np.all(np.isfinite(t)):
        raise ValueError("log1p_sum_exp terms must be finite")
    m = float(np.max(t))
    if m <= 0.0:
        return float(np.log1p(np.sum(np.exp(t))))
    return float(m + np.log(np.exp(-m) + np.sum(np.exp(t - m))))
