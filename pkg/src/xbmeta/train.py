"""Training loop: warm-up steps, cross-batch meta steps and per-epoch GWA snapshots."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import save_checkpoint
from .core import SimilarityClassifier, init_params, loss_and_grad
from .data import (SAMPLER_MODES, SPLIT_NAMES, DatasetSpec, SyntheticDataset, batch_stream,
                   generate_dataset, load_dataset, pair_tasks)
from .ensemble import GwaState, gwa_finalize, gwa_update
from .errors import ConfigError, NumericError
from .meta import Adam, MetaStepConfig, fomaml_step
from .metrics import evaluate
from .params import ParamVector

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "step", "split", "metric", "value")


@dataclass
class TrainConfig:
    dataset_spec: Optional[dict] = None
    dataset_path: Optional[str] = None
    extractor_dims: Optional[list] = None
    hidden_width: int = 32
    logit_scale: float = 10.0
    method: str = "meta"
    alpha_init: float = 1e-2
    alpha_final: float = 1e-4
    beta_init: float = 1e-2
    beta_final: float = 1e-4
    total_steps: Optional[int] = None
    delta: float = 0.5
    tasks_per_step: int = 4
    batch_size: int = 8
    epochs: int = 20
    warmup_epochs: int = 0
    gwa_enabled: bool = True
    gwa_mu: Optional[float] = None
    gwa_sigma2: float = 10.0
    gwa_skip_warmup: bool = False
    sampler_mode: str = "shuffle"
    pairing: str = "disjoint"
    optimizer: str = "sgd"
    model_seed: int = 0
    sampler_seed: int = 0
    eval_splits: list = field(default_factory=lambda: list(SPLIT_NAMES[1:]))
    save_checkpoints: bool = True
    output_dir: Optional[str] = None

    def __post_init__(self):
        if (self.dataset_spec is None) == (self.dataset_path is None):
            raise ConfigError("give exactly one of dataset_spec and dataset_path")
        if self.method not in ("meta", "plain"):
            raise ConfigError(f"method must be 'meta' or 'plain', got {self.method!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must satisfy 0 <= warmup_epochs < epochs")
        if self.sampler_mode not in SAMPLER_MODES:
            raise ConfigError(f"unknown sampler mode {self.sampler_mode!r}")
        if self.pairing not in ("disjoint", "sliding"):
            raise ConfigError(f"unknown pairing {self.pairing!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if min(self.alpha_init, self.beta_init) <= 0 or min(self.alpha_final, self.beta_final) < 0:
            raise ConfigError("learning rates must be positive")
        if self.delta < 0:
            raise ConfigError("delta must be non-negative")
        if self.batch_size < 1 or self.tasks_per_step < 1:
            raise ConfigError("batch_size and tasks_per_step must be positive")
        if not self.gwa_sigma2 > 0:
            raise ConfigError("gwa_sigma2 must be positive")
        unknown = set(self.eval_splits) - set(SPLIT_NAMES)
        if unknown:
            raise ConfigError(f"unknown eval splits {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(d)

    def digest(self) -> str:
        """SHA-256 of the canonical config, ignoring where outputs go."""
        d = asdict(self)
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()


@dataclass
class TrainResult:
    theta: ParamVector
    gwa_theta: ParamVector
    checkpoints: list
    metrics: list
    classifier: SimilarityClassifier
    dataset: SyntheticDataset
    trajectory: list


def cosine_lr(step: int, total: int, init: float, final: float) -> float:
    """Cosine decay from ``init`` at step 0 to ``final`` at step ``total``."""
    if total <= 0:
        return init
    s = min(max(step, 0), total)
    return final + 0.5 * (init - final) * (1.0 + math.cos(math.pi * s / total))


def build_classifier(cfg: TrainConfig, dataset: SyntheticDataset) -> SimilarityClassifier:
    spec = dataset.spec
    dims = cfg.extractor_dims or [spec.d_x, cfg.hidden_width, spec.d_embed]
    if dims[0] != spec.d_x or dims[-1] != spec.d_embed:
        raise ConfigError(f"extractor_dims {dims} do not match data (d_x={spec.d_x}, d_embed={spec.d_embed})")
    return SimilarityClassifier(dataset.class_embeddings, dims, cfg.logit_scale)


def load_data(cfg: TrainConfig) -> SyntheticDataset:
    if cfg.dataset_spec is not None:
        return generate_dataset(DatasetSpec.from_dict(cfg.dataset_spec))
    return load_dataset(cfg.dataset_path)


def _subset_for(split_name: str, dataset: SyntheticDataset):
    return dataset.novel_classes if "novel" in split_name else dataset.base_classes


def _fmt(x: float) -> str:
    return repr(float(x))


def _epoch_batches(cfg, dataset, epoch):
    return batch_stream(dataset.splits["train_base"], cfg.sampler_mode, cfg.batch_size,
                        cfg.sampler_seed, epoch, dataset.class_embeddings)


def _steps_in_epoch(cfg, dataset, epoch):
    batches = _epoch_batches(cfg, dataset, epoch)
    if cfg.method == "plain" or epoch < cfg.warmup_epochs:
        return len(batches)
    return len(pair_tasks(batches, cfg.tasks_per_step, cfg.pairing == "sliding"))


def train(cfg: TrainConfig, dataset: Optional[SyntheticDataset] = None, out_dir=None) -> TrainResult:
    """Run the full schedule, optionally writing metrics and checkpoints to ``out_dir``."""
    dataset = dataset if dataset is not None else load_data(cfg)
    full_clf = build_classifier(cfg, dataset)
    base = dataset.base_classes
    train_clf = full_clf.restrict(base)
    if "train_base" not in dataset.splits:
        raise ConfigError("dataset has no train_base split")
    labels = dataset.splits["train_base"].labels
    if labels.max() >= len(base):
        raise ConfigError("training labels fall outside the base classes")

    out = Path(out_dir or cfg.output_dir) if (out_dir or cfg.output_dir) else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    digest = cfg.digest()

    steps_per_epoch = [_steps_in_epoch(cfg, dataset, e) for e in range(cfg.epochs)]
    total = cfg.total_steps or sum(steps_per_epoch)
    theta = init_params(full_clf, cfg.model_seed)
    optimizer = Adam() if cfg.optimizer == "adam" else None
    gwa_epochs = cfg.epochs - (cfg.warmup_epochs if cfg.gwa_skip_warmup else 0)
    step_length = max(1, steps_per_epoch[-1])
    gwa = GwaState.start(gwa_epochs, step_length, cfg.gwa_mu, cfg.gwa_sigma2)
    rows, checkpoints, trajectory = [], [], []
    step = 0

    for epoch in range(cfg.epochs):
        batches = _epoch_batches(cfg, dataset, epoch)
        losses = []
        warm = cfg.method == "plain" or epoch < cfg.warmup_epochs
        try:
            if warm:
                for batch in batches:
                    lr = cosine_lr(step, total, cfg.beta_init, cfg.beta_final)
                    loss, grad = loss_and_grad(theta, batch, train_clf)
                    theta = optimizer.step(theta, grad, lr) if optimizer else theta.axpy(-lr, grad)
                    losses.append(loss)
                    step += 1
            else:
                for group in pair_tasks(batches, cfg.tasks_per_step, cfg.pairing == "sliding"):
                    mcfg = MetaStepConfig(
                        alpha=cosine_lr(step, total, cfg.alpha_init, cfg.alpha_final),
                        beta=cosine_lr(step, total, cfg.beta_init, cfg.beta_final),
                        delta=cfg.delta,
                        tasks_per_step=cfg.tasks_per_step,
                    )
                    theta, report = fomaml_step(theta, group, mcfg, train_clf, optimizer)
                    losses.append(report.mean_support_loss)
                    step += 1
        except NumericError as e:
            raise NumericError(f"training diverged at step {step}: {e}") from None
        if losses and not math.isfinite(float(np.mean(losses))):
            raise NumericError(f"non-finite training loss at step {step}")

        trajectory.append(theta)
        if cfg.gwa_enabled and not (cfg.gwa_skip_warmup and epoch < cfg.warmup_epochs):
            gwa = gwa_update(gwa, theta)
        epoch_loss = float(np.mean(losses)) if losses else float("nan")
        rows.append((epoch + 1, step, "train_base", "loss", epoch_loss))
        for name in cfg.eval_splits:
            if name not in dataset.splits:
                continue
            r = evaluate(theta, full_clf, dataset.splits[name], _subset_for(name, dataset), name)
            rows.extend([(epoch + 1, step, name, "top1", r.top1), (epoch + 1, step, name, "top5", r.top5),
                         (epoch + 1, step, name, "loss", r.loss)])
        if out is not None and cfg.save_checkpoints:
            checkpoints.append(save_checkpoint(out / "checkpoints" / f"epoch_{epoch + 1:03d}.omd1", theta,
                                               epoch + 1, digest, {"kind": "snapshot", "step": step, "logit_scale": cfg.logit_scale}))
        log.info("epoch %d/%d step %d loss %.4f", epoch + 1, cfg.epochs, step, epoch_loss)

    gwa_theta = gwa_finalize(gwa) if cfg.gwa_enabled and gwa.t > 0 else theta
    for name in cfg.eval_splits:
        if name in dataset.splits:
            r = evaluate(gwa_theta, full_clf, dataset.splits[name], _subset_for(name, dataset), name)
            rows.extend([(cfg.epochs, step, name, "gwa_top1", r.top1), (cfg.epochs, step, name, "gwa_top5", r.top5)])

    if out is not None:
        write_metrics(out / "metrics.csv", rows)
        save_checkpoint(out / "final.omd1", theta, cfg.epochs, digest, {"kind": "final", "logit_scale": cfg.logit_scale})
        save_checkpoint(out / "gwa.omd1", gwa_theta, cfg.epochs, digest,
                        {"kind": "gwa", "logit_scale": cfg.logit_scale, "mu": gwa.mu, "sigma2": gwa.sigma2, "snapshots": gwa.t})
        cfg_dict = asdict(cfg)
        cfg_dict["output_dir"] = None
        (out / "config.json").write_text(json.dumps(cfg_dict, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return TrainResult(theta, gwa_theta, checkpoints, rows, full_clf, dataset, trajectory)


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for epoch, step, split, metric, value in rows:
        w.writerow((epoch, step, split, metric, _fmt(value)))
    return buf.getvalue()


def write_metrics(path, rows) -> None:
    Path(path).write_bytes(metrics_csv(rows).encode("utf-8"))


def final_metric(rows, split: str, metric: str) -> float:
    for epoch, step, s, m, v in reversed(rows):
        if s == split and m == metric:
            return v
    raise KeyError((split, metric))
