"""Minimal dense components with exact analytic backprop.

Two heads share the DenseLayer building block: a confidence classifier
(relu hidden layer, per-class sigmoid outputs) and an embedding head (one
linear layer followed by L2 normalization). Training uses Adam with
decoupled weight decay. Checkpoints are a self-describing binary container
so phase-1 output can feed phase 2 across processes bit-exactly.
"""

from __future__ import annotations

import json
import struct
from typing import Optional

import numpy as np

from .numerics import SeededRng, as_matrix

__all__ = [
    "DenseLayer",
    "ConfidenceModel",
    "EmbeddingModel",
    "Backbone",
    "Adam",
    "init_params",
    "one_hot",
    "bce_loss_and_grad",
    "save_checkpoint",
    "load_checkpoint",
    "snapshot_parameters",
    "parameters_equal",
]

_ACTIVATIONS = ("none", "relu", "sigmoid")

_MAGIC = b"SPXCKPT\x00"
_FORMAT_VERSION = 1


def init_params(rng: SeededRng, shape, scheme: str) -> np.ndarray:
    """Draw parameters: he (normal), xavier (uniform), or unit_normal_rows.

    For weight matrices of shape (out, in), fan_in is the input dimension.
    unit_normal_rows draws normal rows and L2-normalizes each (used for
    proxies so they start on the same sphere as the embeddings).
    """
    shape = tuple(int(s) for s in shape)
    gen = rng.generator
    if scheme == "he":
        fan_in = shape[-1]
        return gen.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    if scheme == "xavier":
        if len(shape) != 2:
            raise ValueError("xavier init needs a 2-d shape")
        fan_out, fan_in = shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return gen.uniform(-limit, limit, size=shape)
    if scheme == "unit_normal_rows":
        if len(shape) != 2:
            raise ValueError("unit_normal_rows init needs a 2-d shape")
        raw = gen.standard_normal(shape)
        return raw / np.linalg.norm(raw, axis=1, keepdims=True)
    raise ValueError(f"unknown init scheme {scheme!r}; expected he, xavier, "
                     "or unit_normal_rows")


class DenseLayer:
    """Fully connected layer, activation in {none, relu, sigmoid}.

    Weights have shape (out, in). forward caches its inputs so backward can
    produce exact gradients; backward before any forward is an error.
    """

    def __init__(self, weights, bias, activation: str = "none"):
        self.weights = np.array(as_matrix(weights, "weights"), copy=True)
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (self.weights.shape[0],):
            raise ValueError(
                f"bias shape {bias.shape} does not match out dim "
                f"{self.weights.shape[0]}"
            )
        if not np.all(np.isfinite(bias)):
            raise ValueError("bias contains non-finite entries")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.bias = np.array(bias, copy=True)
        self.activation = activation
        self._cache = None

    @classmethod
    def create(cls, rng: SeededRng, in_dim: int, out_dim: int,
               activation: str = "none", scheme: str = "he") -> "DenseLayer":
        """Seeded weights per scheme; biases start at zero."""
        w = init_params(rng, (out_dim, in_dim), scheme)
        return cls(w, np.zeros(out_dim), activation)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def forward(self, x) -> np.ndarray:
        x = as_matrix(x, "layer input")
        if x.shape[1] != self.in_dim:
            raise ValueError(
                f"input has {x.shape[1]} columns, layer expects {self.in_dim}"
            )
        z = x @ self.weights.T + self.bias
        if self.activation == "relu":
            out = np.maximum(z, 0.0)
        elif self.activation == "sigmoid":
            out = np.empty_like(z)
            pos = z >= 0
            out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
            ez = np.exp(z[~pos])
            out[~pos] = ez / (1.0 + ez)
        else:
            out = z
        self._cache = (x, z, out)
        return out

    def _local_grad(self, grad_output) -> np.ndarray:
        _, z, out = self._cache
        if self.activation == "relu":
            # subgradient at exactly 0 is 0 (strict inequality)
            return grad_output * (z > 0.0)
        if self.activation == "sigmoid":
            return grad_output * out * (1.0 - out)
        return np.asarray(grad_output, dtype=np.float64)

    def backward(self, grad_output):
        """Gradients from d loss / d activation output."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        return self.backward_preactivation(self._local_grad(grad_output))

    def backward_preactivation(self, grad_z):
        """Gradients from d loss / d pre-activation (fused-loss path).

        Returns (grad_input, {"weights": gW, "bias": gb}).
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        x, _, _ = self._cache
        grad_z = np.asarray(grad_z, dtype=np.float64)
        grad_w = grad_z.T @ x
        grad_b = grad_z.sum(axis=0)
        grad_x = grad_z @ self.weights
        return grad_x, {"weights": grad_w, "bias": grad_b}


class ConfidenceModel:
    """Reduce (relu) then classify (sigmoid): per-class confidences in (0,1).

    forward_calls counts every forward pass; baseline training paths are
    asserted to leave it untouched.
    """

    def __init__(self, reduce: DenseLayer, classify: DenseLayer):
        if reduce.activation != "relu" or classify.activation != "sigmoid":
            raise ValueError("expected relu reduce layer and sigmoid classifier")
        if classify.in_dim != reduce.out_dim:
            raise ValueError("classifier input dim does not match reduce output")
        self.reduce = reduce
        self.classify = classify
        self.forward_calls = 0

    @classmethod
    def create(cls, rng: SeededRng, feature_dim: int, class_count: int,
               hidden_dim: Optional[int] = None) -> "ConfidenceModel":
        """He-initialized reduce layer, Xavier classifier, zero biases.

        hidden_dim defaults to feature_dim // 4 (at least 1), mirroring the
        4x reduction of the reference architecture.
        """
        if hidden_dim is None:
            hidden_dim = max(1, int(feature_dim) // 4)
        reduce = DenseLayer.create(rng.child("reduce"), feature_dim,
                                   hidden_dim, "relu", scheme="he")
        classify = DenseLayer.create(rng.child("classify"), hidden_dim,
                                     class_count, "sigmoid", scheme="xavier")
        return cls(reduce, classify)

    @property
    def feature_dim(self) -> int:
        return self.reduce.in_dim

    @property
    def class_count(self) -> int:
        return self.classify.out_dim

    def forward(self, features) -> np.ndarray:
        self.forward_calls += 1
        return self.classify.forward(self.reduce.forward(features))

    def backward_from_logits(self, grad_logits):
        """Backprop from d loss / d classifier pre-activation.

        Used with the fused sigmoid BCE gradient. Returns parameter grads
        keyed like parameters().
        """
        grad_hidden, classify_grads = self.classify.backward_preactivation(grad_logits)
        _, reduce_grads = self.reduce.backward(grad_hidden)
        return {
            "reduce.weights": reduce_grads["weights"],
            "reduce.bias": reduce_grads["bias"],
            "classify.weights": classify_grads["weights"],
            "classify.bias": classify_grads["bias"],
        }

    def parameters(self) -> dict:
        return {
            "reduce.weights": self.reduce.weights,
            "reduce.bias": self.reduce.bias,
            "classify.weights": self.classify.weights,
            "classify.bias": self.classify.bias,
        }

    def save(self, path) -> None:
        save_checkpoint(path, "confidence", self.parameters(), {
            "feature_dim": self.feature_dim,
            "hidden_dim": self.reduce.out_dim,
            "class_count": self.class_count,
        })

    @classmethod
    def load(cls, path) -> "ConfidenceModel":
        kind, arrays, _ = load_checkpoint(path)
        if kind != "confidence":
            raise ValueError(f"checkpoint holds {kind!r}, expected confidence")
        reduce = DenseLayer(arrays["reduce.weights"], arrays["reduce.bias"], "relu")
        classify = DenseLayer(arrays["classify.weights"], arrays["classify.bias"],
                              "sigmoid")
        return cls(reduce, classify)


class EmbeddingModel:
    """One linear layer followed by per-row L2 normalization."""

    def __init__(self, embed: DenseLayer):
        if embed.activation != "none":
            raise ValueError("embedding layer must be linear")
        self.embed = embed
        self._norm_cache = None

    @classmethod
    def create(cls, rng: SeededRng, feature_dim: int, embed_dim: int) -> "EmbeddingModel":
        return cls(DenseLayer.create(rng.child("embed"), feature_dim,
                                     embed_dim, "none", scheme="he"))

    @property
    def feature_dim(self) -> int:
        return self.embed.in_dim

    @property
    def embed_dim(self) -> int:
        return self.embed.out_dim

    def forward(self, features) -> np.ndarray:
        z = self.embed.forward(features)
        norms = np.linalg.norm(z, axis=1)
        zero = np.flatnonzero(norms == 0.0)
        if zero.size:
            raise ValueError(
                f"embedding row {int(zero[0])} collapsed to zero before "
                "normalization"
            )
        unit = z / norms[:, None]
        self._norm_cache = (norms, unit)
        return unit

    def backward(self, grad_embeddings):
        """Chain through L2 normalization, then the linear layer.

        d(z/||z||)/dz = (I - u u^T) / ||z|| with u the unit output row.
        Returns (grad_features, parameter grads keyed like parameters()).
        """
        if self._norm_cache is None:
            raise RuntimeError("backward called before forward")
        norms, unit = self._norm_cache
        g = np.asarray(grad_embeddings, dtype=np.float64)
        radial = np.sum(g * unit, axis=1, keepdims=True)
        grad_z = (g - radial * unit) / norms[:, None]
        grad_features, grads = self.embed.backward_preactivation(grad_z)
        return grad_features, {
            "embed.weights": grads["weights"],
            "embed.bias": grads["bias"],
        }

    def parameters(self) -> dict:
        return {"embed.weights": self.embed.weights, "embed.bias": self.embed.bias}

    def save(self, path) -> None:
        save_checkpoint(path, "embedding", self.parameters(), {
            "feature_dim": self.feature_dim,
            "embed_dim": self.embed_dim,
        })

    @classmethod
    def load(cls, path) -> "EmbeddingModel":
        kind, arrays, _ = load_checkpoint(path)
        if kind != "embedding":
            raise ValueError(f"checkpoint holds {kind!r}, expected embedding")
        return cls(DenseLayer(arrays["embed.weights"], arrays["embed.bias"], "none"))


class Backbone:
    """Frozen feature source: identity, or a seeded linear projection.

    Stands in for a frozen pretrained network. Never trained; carries no
    bias and no gradients.
    """

    def __init__(self, weights: Optional[np.ndarray] = None):
        self.weights = None if weights is None else np.array(
            as_matrix(weights, "backbone weights"), copy=True)

    @classmethod
    def create(cls, rng: SeededRng, raw_dim: int, feature_dim: int) -> "Backbone":
        if int(raw_dim) == int(feature_dim):
            return cls(None)
        return cls(init_params(rng, (feature_dim, raw_dim), "he"))

    @property
    def is_identity(self) -> bool:
        return self.weights is None

    def output_dim(self, raw_dim: int) -> int:
        return raw_dim if self.weights is None else self.weights.shape[0]

    def transform(self, features) -> np.ndarray:
        feats = as_matrix(features, "features")
        if self.weights is None:
            return feats
        if feats.shape[1] != self.weights.shape[1]:
            raise ValueError(
                f"features have {feats.shape[1]} columns, backbone expects "
                f"{self.weights.shape[1]}"
            )
        return feats @ self.weights.T


def one_hot(columns, class_count: int) -> np.ndarray:
    """Rows of {0,1} with a single 1 at the given column per sample."""
    cols = np.asarray(columns).ravel().astype(np.int64)
    if cols.size and (cols.min() < 0 or cols.max() >= class_count):
        raise ValueError("column index outside [0, class_count)")
    out = np.zeros((cols.shape[0], int(class_count)))
    out[np.arange(cols.shape[0]), cols] = 1.0
    return out


def bce_loss_and_grad(confidences, targets):
    """Mean binary cross entropy over all entries, with the fused gradient.

    The forward value clamps confidences into [1e-12, 1 - 1e-12] so exact
    0/1 targets cannot produce infinities. The returned gradient is with
    respect to the pre-sigmoid logits: (c - t) / count.
    """
    conf = as_matrix(confidences, "confidences")
    targ = as_matrix(targets, "targets")
    if conf.shape != targ.shape:
        raise ValueError(f"shape mismatch {conf.shape} vs {targ.shape}")
    if not np.all((targ == 0.0) | (targ == 1.0)):
        raise ValueError("targets must be 0 or 1")
    c = np.clip(conf, 1e-12, 1.0 - 1e-12)
    loss = float(np.mean(-(targ * np.log(c) + (1.0 - targ) * np.log1p(-c))))
    grad_logits = (conf - targ) / conf.size
    return loss, grad_logits


class Adam:
    """Adam with decoupled weight decay (decay applied before the update).

    One instance per parameter group; moment buffers are keyed by parameter
    name and created lazily. step() mutates the parameter arrays in place
    and refuses non-finite gradients before touching anything.
    """

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError(f"lr must be > 0, got {lr}")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict) -> None:
        if set(params) != set(grads):
            raise ValueError("params and grads must have identical keys")
        for name, g in grads.items():
            g = np.asarray(g, dtype=np.float64)
            if g.shape != params[name].shape:
                raise ValueError(f"gradient shape mismatch for {name!r}")
            if not np.all(np.isfinite(g)):
                raise ValueError(f"non-finite gradient for {name!r}; step aborted")
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name, p in params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def snapshot_parameters(params: dict) -> dict:
    """Deep-copied view of a parameter dict, for frozen-module checks."""
    return {name: np.array(p, copy=True) for name, p in params.items()}


def parameters_equal(a: dict, b: dict) -> bool:
    """Bit-identical comparison (same keys, same bytes per array)."""
    if set(a) != set(b):
        return False
    return all(
        a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes()
        for k in a
    )


def save_checkpoint(path, kind: str, arrays: dict, extra: Optional[dict] = None) -> None:
    """Write a self-describing binary checkpoint.

    Layout: 8-byte magic, uint32 format version, uint32 header length, JSON
    header (kind, array names/shapes, extra metadata), then each array as
    little-endian float64 in header order.
    """
    names = list(arrays)
    header = {
        "kind": str(kind),
        "arrays": [{"name": n, "shape": list(np.asarray(arrays[n]).shape)}
                   for n in names],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            arr = np.ascontiguousarray(np.asarray(arrays[n], dtype=np.float64))
            fh.write(arr.astype("<f8", copy=False).tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (kind, {name: array}, extra)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != _FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        arrays = {}
        for spec in header["arrays"]:
            shape = tuple(int(s) for s in spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"{path}: truncated array {spec['name']!r}")
            arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(
                np.float64, copy=True)
    return header["kind"], arrays, header.get("extra", {})
