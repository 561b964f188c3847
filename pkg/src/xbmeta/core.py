"""Cosine-similarity classifier over a small MLP feature extractor.

The learner maps an input row ``x`` to a feature ``v = f(x)`` and scores it
against a frozen table of unit-norm class embeddings by cosine similarity.
Scores are multiplied by a fixed logit scale and fed to a softmax
cross-entropy. Gradients are derived by hand (reverse mode) and checked
against :func:`finite_diff_grad`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, LayoutError, NumericError
from .params import ParamVector

DEFAULT_LOGIT_SCALE = 10.0
DEFAULT_NORM_EPSILON = 1e-12


@dataclass(frozen=True, eq=False)
class SimilarityClassifier:
    """Frozen class-embedding table plus the extractor architecture.

    ``extractor_dims`` lists layer widths from input to output, so
    ``[d_x, h1, ..., d_embed]``; its last entry must equal the embedding width.
    """

    class_embeddings: np.ndarray
    extractor_dims: tuple[int, ...]
    logit_scale: float = DEFAULT_LOGIT_SCALE
    norm_epsilon: float = DEFAULT_NORM_EPSILON

    def __post_init__(self):
        emb = np.array(self.class_embeddings, dtype=np.float64, copy=True)
        if emb.ndim != 2:
            raise ConfigError("class_embeddings must be a K x d_embed matrix")
        k, d = emb.shape
        if k < 2 or d < 1:
            raise ConfigError(f"need K >= 2 classes and d_embed >= 1, got {emb.shape}")
        norms = np.linalg.norm(emb, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ConfigError("class embedding rows must have unit norm")
        dims = tuple(int(x) for x in self.extractor_dims)
        if len(dims) < 2 or any(x < 1 for x in dims):
            raise ConfigError(f"extractor_dims must hold at least two positive widths, got {dims}")
        if dims[-1] != d:
            raise ConfigError(f"extractor output width {dims[-1]} != d_embed {d}")
        if not self.logit_scale > 0:
            raise ConfigError("logit_scale must be positive")
        if not self.norm_epsilon > 0:
            raise ConfigError("norm_epsilon must be positive")
        emb.flags.writeable = False
        object.__setattr__(self, "class_embeddings", emb)
        object.__setattr__(self, "extractor_dims", dims)
        object.__setattr__(self, "logit_scale", float(self.logit_scale))
        object.__setattr__(self, "norm_epsilon", float(self.norm_epsilon))

    @property
    def n_classes(self) -> int:
        return self.class_embeddings.shape[0]

    @property
    def d_in(self) -> int:
        return self.extractor_dims[0]

    @property
    def d_embed(self) -> int:
        return self.extractor_dims[-1]

    def layout(self):
        dims = self.extractor_dims
        layout = []
        for i in range(1, len(dims)):
            layout.append((f"W{i}", (dims[i], dims[i - 1])))
            layout.append((f"b{i}", (dims[i],)))
        return tuple(layout)

    def restrict(self, classes: Sequence[int]) -> "SimilarityClassifier":
        """Classifier over a subset of the class table (rows in the given order)."""
        idx = np.asarray(list(classes), dtype=np.int64)
        return SimilarityClassifier(
            self.class_embeddings[idx], self.extractor_dims, self.logit_scale, self.norm_epsilon
        )


@dataclass(frozen=True, eq=False)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray

    def __post_init__(self):
        x = np.array(self.inputs, dtype=np.float64, copy=True)
        if x.ndim != 2 or x.shape[0] < 1:
            raise LayoutError(f"inputs must be a non-empty B x d_x matrix, got shape {x.shape}")
        y = np.array(self.labels, dtype=np.int64, copy=True).reshape(-1)
        ids = np.array(self.sample_ids, dtype=np.int64, copy=True).reshape(-1)
        if y.size != x.shape[0] or ids.size != x.shape[0]:
            raise LayoutError("labels and sample_ids must have one entry per input row")
        if np.any(y < 0):
            raise LayoutError("labels must be non-negative class indices")
        if np.unique(ids).size != ids.size:
            raise LayoutError("sample_ids must be distinct within a batch")
        for a in (x, y, ids):
            a.flags.writeable = False
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "sample_ids", ids)

    def __len__(self) -> int:
        return self.inputs.shape[0]


def _check_labels(labels: np.ndarray, k: int) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LayoutError(f"labels must lie in [0, {k})")


def init_params(classifier: SimilarityClassifier, seed: int) -> ParamVector:
    """Glorot-uniform weights, zero biases, reproducible for a fixed seed."""
    dims = classifier.extractor_dims
    if not dims:
        raise ConfigError("extractor_dims is empty")
    rng = np.random.default_rng(seed)
    arrays = {}
    for i in range(1, len(dims)):
        fan_in, fan_out = dims[i - 1], dims[i]
        s = np.sqrt(6.0 / (fan_in + fan_out))
        arrays[f"W{i}"] = rng.uniform(-s, s, size=(fan_out, fan_in))
        arrays[f"b{i}"] = np.zeros(fan_out)
    return ParamVector.from_arrays(arrays)


def _unpack(params: ParamVector, classifier: SimilarityClassifier):
    if params.layout != classifier.layout():
        raise LayoutError(
            f"parameter layout {params.layout} does not match extractor {classifier.extractor_dims}"
        )
    a = params.arrays()
    n_layers = len(classifier.extractor_dims) - 1
    return [(a[f"W{i}"], a[f"b{i}"]) for i in range(1, n_layers + 1)]


def _forward(params, inputs, classifier):
    layers = _unpack(params, classifier)
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != classifier.d_in:
        raise LayoutError(f"inputs of shape {x.shape} do not match d_x = {classifier.d_in}")
    acts = [x]
    h = x
    for i, (W, b) in enumerate(layers):
        z = h @ W.T + b
        h = z if i == len(layers) - 1 else np.tanh(z)
        acts.append(h)
    return layers, acts


def extract_features(params: ParamVector, inputs: np.ndarray, classifier: SimilarityClassifier) -> np.ndarray:
    """MLP forward pass: tanh hidden layers, affine output."""
    _, acts = _forward(params, inputs, classifier)
    return acts[-1]


def cosine_scores(features: np.ndarray, classifier: SimilarityClassifier) -> np.ndarray:
    v = np.asarray(features, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != classifier.d_embed:
        raise LayoutError(f"features of shape {v.shape} do not match d_embed = {classifier.d_embed}")
    t = classifier.class_embeddings
    vn = np.maximum(np.linalg.norm(v, axis=1), classifier.norm_epsilon)
    tn = np.linalg.norm(t, axis=1)
    return (v @ t.T) / vn[:, None] / tn[None, :]


def cross_entropy_loss(scores: np.ndarray, labels, logit_scale: float):
    """Mean softmax cross-entropy of ``logit_scale * scores``.

    Returns:
        ``(loss, probs)`` where ``probs`` holds the row-wise softmax.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if not np.all(np.isfinite(s)):
        raise NumericError("non-finite similarity scores")
    if s.ndim != 2 or y.size != s.shape[0]:
        raise LayoutError("scores must be B x K with one label per row")
    _check_labels(y, s.shape[1])
    logits = logit_scale * s
    logits = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(logits)
    z = exp.sum(axis=1, keepdims=True)
    probs = exp / z
    # log-sum-exp of margins against the true class; log1p keeps precision
    # when the true class leads and the loss is tiny
    rows = np.arange(y.size)
    margins = logits - logits[rows, y][:, None]
    top = margins.max(axis=1)
    others = np.exp(margins - top[:, None])
    others[rows, y] = 0.0
    nll = np.where(top > 0, top + np.log(np.exp(-top) + others.sum(axis=1)), np.log1p(others.sum(axis=1)))
    return float(nll.mean()), probs


def loss_and_grad(params: ParamVector, batch: Batch, classifier: SimilarityClassifier):
    """Cross-entropy loss of ``batch`` and its gradient with respect to ``params``."""
    layers, acts = _forward(params, batch.inputs, classifier)
    _check_labels(batch.labels, classifier.n_classes)
    v = acts[-1]
    if not np.all(np.isfinite(v)):
        raise NumericError("non-finite features in extractor output")

    t = classifier.class_embeddings
    t_hat = t / np.linalg.norm(t, axis=1, keepdims=True)
    raw_norm = np.linalg.norm(v, axis=1)
    n = np.maximum(raw_norm, classifier.norm_epsilon)
    u = v / n[:, None]
    scores = u @ t_hat.T
    loss, probs = cross_entropy_loss(scores, batch.labels, classifier.logit_scale)

    B = len(batch)
    rows = np.arange(B)
    d_logits = probs.copy()
    # p_y - 1 written as minus the other probabilities, exact when p_y ~ 1
    d_logits[rows, batch.labels] = 0.0
    d_logits[rows, batch.labels] = -d_logits.sum(axis=1)
    d_logits /= B
    du = (classifier.logit_scale * d_logits) @ t_hat
    # below the epsilon floor the normalizer is constant
    live = raw_norm > classifier.norm_epsilon
    radial = np.where(live, np.sum(u * du, axis=1), 0.0)
    dh = (du - u * radial[:, None]) / n[:, None]

    grads = {}
    for i in range(len(layers), 0, -1):
        W, _ = layers[i - 1]
        h_prev = acts[i - 1]
        if i < len(layers):
            dh = dh * (1.0 - acts[i] ** 2)
        grads[f"W{i}"] = dh.T @ h_prev
        grads[f"b{i}"] = dh.sum(axis=0)
        dh = dh @ W
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in segment {name!r}")
    ordered = {name: grads[name] for name, _ in params.layout}
    return loss, ParamVector.from_arrays(ordered)


def batch_loss(params: ParamVector, batch: Batch, classifier: SimilarityClassifier) -> float:
    scores = cosine_scores(extract_features(params, batch.inputs, classifier), classifier)
    return cross_entropy_loss(scores, batch.labels, classifier.logit_scale)[0]


def central_difference(fn: Callable[[ParamVector], float], params: ParamVector, h: float) -> ParamVector:
    """Coordinatewise central differences of a scalar function of a ParamVector."""
    if not h > 0:
        raise ConfigError(f"finite-difference step must be positive, got {h}")
    base = np.array(params.values)
    grad = np.empty_like(base)
    for k in range(base.size):
        plus = base.copy()
        plus[k] += h
        minus = base.copy()
        minus[k] -= h
        grad[k] = (fn(params.with_values(plus)) - fn(params.with_values(minus))) / (2.0 * h)
    return params.with_values(grad)


def finite_diff_grad(params: ParamVector, batch: Batch, classifier: SimilarityClassifier, h: float = 1e-5) -> ParamVector:
    return central_difference(lambda p: batch_loss(p, batch, classifier), params, h)
