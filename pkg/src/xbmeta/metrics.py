"""Zero-shot evaluation and summary statistics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .core import Batch, SimilarityClassifier, cosine_scores, cross_entropy_loss, extract_features
from .errors import ConfigError, LayoutError
from .params import ParamVector


@dataclass(frozen=True)
class EvalReport:
    split: str
    top1: float
    top5: float
    loss: float
    n: int


def harmonic_mean(values: Sequence[float]) -> float:
    values = [float(v) for v in values]
    if not values:
        raise ConfigError("harmonic mean of nothing")
    if any(not v > 0 for v in values):
        raise ConfigError("harmonic mean needs strictly positive values")
    return len(values) / sum(1.0 / v for v in values)


def prediction_ensemble(scores_a: np.ndarray, scores_b: np.ndarray, ratio: float = 0.5) -> np.ndarray:
    """Blend two score matrices in decision space: ``ratio * a + (1 - ratio) * b``."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape:
        raise LayoutError(f"score shapes differ: {a.shape} vs {b.shape}")
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"ensemble ratio must lie in [0, 1], got {ratio}")
    return ratio * a + (1.0 - ratio) * b


def ranked_classes(scores: np.ndarray) -> np.ndarray:
    """Column indices per row, best first; ties go to the lower index."""
    return np.argsort(-scores, axis=1, kind="stable")


def _shard_stats(theta, classifier, batch, subset, sub_clf):
    pos = {c: i for i, c in enumerate(subset)}
    target = np.array([pos.get(int(c), -1) for c in batch.labels])
    scores = cosine_scores(extract_features(theta, batch.inputs, classifier), sub_clf)
    order = ranked_classes(scores)
    k = min(5, len(subset))
    top1 = int(np.sum(order[:, 0] == target))
    top5 = int(np.sum(np.any(order[:, :k] == target[:, None], axis=1)))
    known = target >= 0
    loss_sum = 0.0
    if known.any():
        loss_sum = cross_entropy_loss(scores[known], target[known], classifier.logit_scale)[0] * int(known.sum())
    return top1, top5, loss_sum, int(known.sum()), len(batch)


def evaluate(theta: ParamVector, classifier: SimilarityClassifier, split: Union[Batch, Sequence[Batch]],
             class_subset: Sequence[int], name: str = "") -> EvalReport:
    """Zero-shot accuracy against the class-embedding rows in ``class_subset``.

    ``split`` may be one batch or a list of shards; shard results are merged
    by count in shard order. Samples whose label is outside the subset count
    as misses and are left out of the loss.
    """
    subset = [int(c) for c in class_subset]
    if not subset:
        raise ConfigError("class_subset is empty")
    shards = [split] if isinstance(split, Batch) else list(split)
    if not shards:
        raise ConfigError("nothing to evaluate")
    sub_clf = classifier.restrict(subset) if len(subset) >= 2 else None
    top1 = top5 = n = n_known = 0
    loss_sum = 0.0
    for batch in shards:
        if sub_clf is None:
            hits = int(np.sum(batch.labels == subset[0]))
            t1, t5, ls, nk, nb = hits, hits, 0.0, hits, len(batch)
        else:
            t1, t5, ls, nk, nb = _shard_stats(theta, classifier, batch, subset, sub_clf)
        top1 += t1
        top5 += t5
        loss_sum += ls
        n_known += nk
        n += nb
    return EvalReport(name, top1 / n, top5 / n, loss_sum / n_known if n_known else float("nan"), n)
