import os

import numpy as np
import pytest
from hypothesis import settings

from xbmeta.core import Batch, SimilarityClassifier, init_params

settings.register_profile("default", max_examples=40, deadline=None)
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def unit_rows(rng, k, d):
    t = rng.normal(size=(k, d))
    return t / np.linalg.norm(t, axis=1, keepdims=True)


def random_instance(rng, d_x=None, k=None, b=None, d_e=None, hidden=None, scale=None):
    """Random (classifier, params, batch) triple of the sizes used by the gradient checks."""
    d_x = d_x or int(rng.integers(1, 9))
    k = k or int(rng.integers(2, 7))
    b = b or int(rng.integers(1, 9))
    d_e = d_e or int(rng.integers(1, 6))
    if hidden is None:
        hidden = [int(w) for w in rng.integers(1, 6, size=rng.integers(0, 3))]
    clf = SimilarityClassifier(unit_rows(rng, k, d_e), [d_x, *hidden, d_e],
                               scale if scale is not None else float(rng.uniform(1, 20)))
    p = init_params(clf, int(rng.integers(2**31)))
    p = p.with_values(p.values + 0.5 * rng.normal(size=len(p)))
    batch = Batch(rng.normal(size=(b, d_x)), rng.integers(0, k, size=b), np.arange(b))
    return clf, p, batch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_clf(rng):
    return SimilarityClassifier(unit_rows(rng, 4, 3), [5, 4, 3])
