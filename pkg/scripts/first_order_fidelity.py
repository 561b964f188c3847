"""Cosine between the first-order combined gradient and the exact meta-gradient.

The exact gradient differentiates through the inner step by central
differences, so keep the model small.

    python scripts/first_order_fidelity.py --instances 5
"""

import argparse

import numpy as np

from xbmeta.core import Batch, SimilarityClassifier, init_params
from xbmeta.meta import MetaTask, first_order_meta_grad, second_order_meta_grad

ALPHAS = (1e-1, 1e-2, 1e-3, 1e-4)


def instance(seed, d_x=5, hidden=5, d_e=3, k=4, b=6):
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(k, d_e))
    clf = SimilarityClassifier(emb / np.linalg.norm(emb, axis=1, keepdims=True), [d_x, hidden, d_e])
    theta = init_params(clf, seed)
    s = Batch(rng.normal(size=(b, d_x)), rng.integers(0, k, b), np.arange(b))
    q = Batch(rng.normal(size=(b, d_x)), rng.integers(0, k, b), np.arange(b, 2 * b))
    return clf, theta, MetaTask(s, q)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--instances", type=int, default=5)
    ap.add_argument("--delta", type=float, default=1.0)
    args = ap.parse_args()
    print("seed " + " ".join(f"alpha={a:g}".rjust(14) for a in ALPHAS))
    for seed in range(args.instances):
        clf, theta, task = instance(seed)
        cells = []
        for alpha in ALPHAS:
            g_ex = second_order_meta_grad(theta, task, alpha, clf).values
            g_fo = first_order_meta_grad(theta, [task], alpha, args.delta, clf)[0].values
            cells.append(g_fo @ g_ex / (np.linalg.norm(g_fo) * np.linalg.norm(g_ex)))
        print(f"{seed:4d} " + " ".join(f"{c:14.9f}" for c in cells))


if __name__ == "__main__":
    main()
