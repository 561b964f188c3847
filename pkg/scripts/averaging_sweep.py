"""Compare weight-averaging schemes over one run's epoch checkpoints.

Reads ``epoch_*.omd1`` from a training output directory and reports
novel-class in-context and out-of-context top-1 for the final snapshot,
GWA over a grid of peaks and widths, the uniform mean and the EMA.

    xbmeta train --config cfg.json --out run
    python scripts/averaging_sweep.py --run run --data data
"""

import argparse
from pathlib import Path

from xbmeta.checkpoint import load_checkpoint
from xbmeta.core import SimilarityClassifier
from xbmeta.data import load_dataset
from xbmeta.ensemble import baseline_average, gwa_direct
from xbmeta.metrics import evaluate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run", required=True)
    ap.add_argument("--data", required=True)
    ap.add_argument("--sigma2", type=float, nargs="+", default=[1.0, 10.0, 100.0])
    args = ap.parse_args()

    paths = sorted(Path(args.run, "checkpoints").glob("epoch_*.omd1"))
    loaded = [load_checkpoint(p) for p in paths]
    thetas = [t for t, _ in loaded]
    ds = load_dataset(args.data)
    dims = [shape[1] for name, shape in thetas[0].layout if name == "W1"]
    dims += [shape[0] for name, shape in thetas[0].layout if name.startswith("W")]
    clf = SimilarityClassifier(ds.class_embeddings, dims, loaded[0][1]["meta"].get("logit_scale", 10.0))

    def row(label, theta):
        ic = evaluate(theta, clf, ds.splits["test_novel_ic"], ds.novel_classes).top1
        ooc = evaluate(theta, clf, ds.splits["test_novel_ooc"], ds.novel_classes).top1
        print(f"{label:<28} novel_ic {ic:.4f} novel_ooc {ooc:.4f}")

    R = len(thetas)
    row("final", thetas[-1])
    row("uniform", baseline_average(thetas, "uniform"))
    row("ema 0.9", baseline_average(thetas, "ema", 0.9))
    for frac in (0.4, 0.6, 0.8, 1.0):
        mu = max(1.0, round(frac * R))
        for s2 in args.sigma2:
            row(f"gwa mu={mu:g} sigma2={s2:g}", gwa_direct(thetas, mu, s2))


if __name__ == "__main__":
    main()
