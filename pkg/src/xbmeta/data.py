"""Feature-space static-bias benchmark.

Each sample is the concatenation of a *motion* part, a fixed linear image of
its class embedding, and a *static* part, the prototype of a context. In
training data the context agrees with the class's assigned context with
probability ``bias_rho``, so a learner can shortcut through the static
features; out-of-context splits break that agreement.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import Batch
from .errors import ConfigError, FormatError, LayoutError

SPLIT_NAMES = ("train_base", "test_base_ic", "test_novel_ic", "test_base_ooc", "test_novel_ooc")
SAMPLER_MODES = ("shuffle", "initial", "similar")
OMDS_MAGIC = b"OMDS"
OMDS_VERSION = 1


@dataclass(frozen=True)
class DatasetSpec:
    k_base: int = 10
    k_novel: int = 10
    d_embed: int = 8
    d_motion: int = 8
    d_static: int = 8
    n_contexts: int = 10
    bias_rho: float = 0.9
    noise_sigma: float = 0.1
    samples_per_class_train: int = 200
    samples_per_class_test: int = 50
    seed: int = 0
    ooc_mode: str = "resample"
    min_class_angle_deg: float = 0.0
    motion_scale: float = 1.0
    context_scale: float = 1.0

    def __post_init__(self):
        for name in ("k_base", "k_novel", "d_embed", "d_motion", "d_static", "n_contexts",
                     "samples_per_class_train", "samples_per_class_test"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not 0.0 <= self.bias_rho <= 1.0:
            raise ConfigError(f"bias_rho must lie in [0, 1], got {self.bias_rho}")
        if self.bias_rho < 1.0 and self.n_contexts < 2:
            raise ConfigError("bias_rho < 1 needs at least two contexts")
        if not self.noise_sigma > 0:
            raise ConfigError("noise_sigma must be positive")
        if self.k_base + self.k_novel < 2:
            raise ConfigError("need at least two classes in total")
        if self.ooc_mode not in ("resample", "swap"):
            raise ConfigError(f"ooc_mode must be 'resample' or 'swap', got {self.ooc_mode!r}")
        if not self.motion_scale > 0 or not self.context_scale > 0:
            raise ConfigError("motion_scale and context_scale must be positive")
        if not 0.0 <= self.min_class_angle_deg < 90.0:
            raise ConfigError("min_class_angle_deg must lie in [0, 90)")

    @property
    def n_classes(self) -> int:
        return self.k_base + self.k_novel

    @property
    def d_x(self) -> int:
        return self.d_motion + self.d_static

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown dataset spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    spec: DatasetSpec
    class_embeddings: np.ndarray
    class_context_assignment: np.ndarray
    motion_map: np.ndarray
    context_prototypes: np.ndarray
    splits: dict = field(default_factory=dict)
    contexts: dict = field(default_factory=dict)

    @property
    def base_classes(self) -> list[int]:
        return list(range(self.spec.k_base))

    @property
    def novel_classes(self) -> list[int]:
        return list(range(self.spec.k_base, self.spec.n_classes))


def _sample_sphere(rng, n, d, min_angle_deg):
    max_cos = math.cos(math.radians(min_angle_deg))
    for _ in range(10_000):
        t = rng.normal(size=(n, d))
        t /= np.linalg.norm(t, axis=1, keepdims=True)
        if min_angle_deg <= 0:
            return t
        g = t @ t.T
        np.fill_diagonal(g, -1.0)
        if g.max() <= max_cos:
            return t
    raise ConfigError(f"could not place {n} classes in {d} dims {min_angle_deg} degrees apart")


def _motion_map(rng, d_motion, d_embed):
    a = rng.normal(size=(d_motion, d_embed))
    if d_motion >= d_embed:
        q, r = np.linalg.qr(a)
        return q * np.sign(np.diag(r))
    return a / math.sqrt(d_embed)


def _draw_contexts(rng, classes, assignment, n_contexts, mode, rho):
    n = classes.size
    if mode == "resample":
        return rng.integers(0, n_contexts, size=n)
    if mode == "swap":
        present = list(dict.fromkeys(classes.tolist()))
        swap = {}
        for i, c in enumerate(present):
            # next class in the split whose context differs, if any
            for j in range(1, len(present) + 1):
                other = present[(i + j) % len(present)]
                if assignment[other] != assignment[c] or j == len(present):
                    swap[c] = assignment[other]
                    break
        return np.array([swap[c] for c in classes.tolist()], dtype=np.int64)
    own = assignment[classes]
    if rho >= 1.0:
        return own.copy()
    keep = rng.random(n) < rho
    # uniform over the other n_contexts - 1 contexts
    other = rng.integers(0, n_contexts - 1, size=n)
    other = other + (other >= own)
    return np.where(keep, own, other)


def _make_split(rng, spec, classes, per_class, mode, embeddings, assignment, motion_map, protos, id_offset):
    labels = np.repeat(np.asarray(classes, dtype=np.int64), per_class)
    ctx = _draw_contexts(rng, labels, assignment, spec.n_contexts, mode, spec.bias_rho)
    motion = embeddings[labels] @ motion_map.T + spec.noise_sigma * rng.normal(size=(labels.size, spec.d_motion))
    static = protos[ctx] + spec.noise_sigma * rng.normal(size=(labels.size, spec.d_static))
    order = rng.permutation(labels.size)
    inputs = np.concatenate([motion, static], axis=1)[order]
    ids = id_offset + np.arange(labels.size, dtype=np.int64)
    return Batch(inputs, labels[order], ids), ctx[order]


def generate_dataset(spec: DatasetSpec) -> SyntheticDataset:
    """Realize every split of ``spec``; identical specs give identical data."""
    rng = np.random.default_rng(spec.seed)
    embeddings = _sample_sphere(rng, spec.n_classes, spec.d_embed, spec.min_class_angle_deg)
    ctx_perm = rng.permutation(spec.n_contexts)
    assignment = np.array([ctx_perm[c % spec.n_contexts] for c in range(spec.n_classes)], dtype=np.int64)
    motion_map = spec.motion_scale * _motion_map(rng, spec.d_motion, spec.d_embed)
    protos = spec.context_scale * _sample_sphere(rng, spec.n_contexts, spec.d_static, 0.0)

    base = list(range(spec.k_base))
    novel = list(range(spec.k_base, spec.n_classes))
    plan = [
        ("train_base", base, spec.samples_per_class_train, "in"),
        ("test_base_ic", base, spec.samples_per_class_test, "in"),
        ("test_novel_ic", novel, spec.samples_per_class_test, "in"),
        ("test_base_ooc", base, spec.samples_per_class_test, spec.ooc_mode),
        ("test_novel_ooc", novel, spec.samples_per_class_test, spec.ooc_mode),
    ]
    splits, contexts = {}, {}
    offset = 0
    for name, classes, per_class, mode in plan:
        if not classes:
            continue
        split_rng = np.random.default_rng([spec.seed, len(splits) + 1])
        batch, ctx = _make_split(split_rng, spec, classes, per_class, mode, embeddings, assignment,
                                 motion_map, protos, offset)
        splits[name] = batch
        contexts[name] = ctx
        offset += len(batch)
    return SyntheticDataset(spec, embeddings, assignment, motion_map, protos, splits, contexts)


def split_base_novel(dataset: SyntheticDataset) -> tuple[list[int], list[int]]:
    return dataset.base_classes, dataset.novel_classes


def static_oracle_predict(dataset: SyntheticDataset, inputs: np.ndarray, classes: Sequence[int]) -> np.ndarray:
    """Classify from static features alone: nearest context, mapped to its class.

    When several candidate classes share a context the lowest index wins.
    """
    static = np.asarray(inputs)[:, dataset.spec.d_motion:]
    d = ((static[:, None, :] - dataset.context_prototypes[None]) ** 2).sum(-1)
    ctx = d.argmin(axis=1)
    lookup = {}
    for c in sorted(classes):
        lookup.setdefault(int(dataset.class_context_assignment[c]), c)
    return np.array([lookup.get(int(k), -1) for k in ctx], dtype=np.int64)


def motion_oracle_predict(dataset: SyntheticDataset, inputs: np.ndarray, classes: Sequence[int]) -> np.ndarray:
    """Nearest class by motion features against the true motion map."""
    motion = np.asarray(inputs)[:, :dataset.spec.d_motion]
    classes = np.asarray(list(classes), dtype=np.int64)
    centers = dataset.class_embeddings[classes] @ dataset.motion_map.T
    d = ((motion[:, None, :] - centers[None]) ** 2).sum(-1)
    return classes[d.argmin(axis=1)]


def class_tour(embeddings: np.ndarray, classes: Sequence[int]) -> list[int]:
    """Greedy tour: start at the lowest class, always step to the most similar unvisited one."""
    remaining = sorted(set(int(c) for c in classes))
    if not remaining:
        return []
    tour = [remaining.pop(0)]
    while remaining:
        sims = embeddings[remaining] @ embeddings[tour[-1]]
        tour.append(remaining.pop(int(np.argmax(sims))))
    return tour


def _take(split: Batch, idx: np.ndarray) -> Batch:
    return Batch(split.inputs[idx], split.labels[idx], split.sample_ids[idx])


def batch_stream(split: Batch, mode: str, batch_size: int, seed: int, epoch: int,
                 class_embeddings: Optional[np.ndarray] = None) -> list[Batch]:
    """Partition a split into full batches for one epoch (remainder dropped)."""
    m = len(split)
    if batch_size < 1 or batch_size > m:
        raise ConfigError(f"batch size {batch_size} not in [1, {m}]")
    if mode == "shuffle":
        order = np.random.default_rng([seed, epoch]).permutation(m)
    elif mode == "initial":
        order = np.arange(m)
    elif mode == "similar":
        if class_embeddings is None:
            raise ConfigError("similar mode needs class embeddings")
        tour = class_tour(class_embeddings, np.unique(split.labels))
        rank = {c: i for i, c in enumerate(tour)}
        keys = np.array([rank[int(c)] for c in split.labels])
        order = np.argsort(keys, kind="stable")
    else:
        raise ConfigError(f"unknown sampler mode {mode!r}")
    n = m // batch_size
    return [_take(split, order[i * batch_size:(i + 1) * batch_size]) for i in range(n)]


def pair_tasks(batches: Sequence[Batch], n_tasks: int, sliding: bool = False) -> list[list]:
    """Group consecutive batches into meta steps of ``n_tasks`` support/query tasks.

    Disjoint pairing uses batches ``(2i, 2i+1)`` and consumes ``2 * n_tasks``
    batches per step. Sliding pairing reuses each query as the next support
    and consumes ``n_tasks`` batches per step (plus one lookahead).
    Leftovers that cannot fill a step are dropped.
    """
    from .meta import MetaTask

    if len(batches) < 2:
        raise ConfigError(f"need at least two batches to form a task, got {len(batches)}")
    if n_tasks < 1:
        raise ConfigError("n_tasks must be positive")
    groups = []
    if sliding:
        start = 0
        while start + n_tasks < len(batches):
            groups.append([MetaTask(batches[start + i], batches[start + i + 1]) for i in range(n_tasks)])
            start += n_tasks
    else:
        per = 2 * n_tasks
        for g in range(len(batches) // per):
            base = g * per
            groups.append([MetaTask(batches[base + 2 * i], batches[base + 2 * i + 1]) for i in range(n_tasks)])
    return groups


def save_split(path, split: Batch, metadata: dict) -> None:
    """Write one split as OMDS: header, JSON metadata, then raw little-endian arrays."""
    meta = dict(metadata)
    meta.update(n=len(split), d_x=int(split.inputs.shape[1]))
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(OMDS_MAGIC)
        f.write(struct.pack("<II", OMDS_VERSION, len(blob)))
        f.write(blob)
        f.write(np.ascontiguousarray(split.inputs, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(split.labels, dtype="<i4").tobytes())
        f.write(np.ascontiguousarray(split.sample_ids, dtype="<i8").tobytes())


def load_split(path) -> tuple[Batch, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != OMDS_MAGIC:
        raise FormatError(f"{path}: not an OMDS file")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    version, n_meta = struct.unpack_from("<II", raw, 4)
    if version != OMDS_VERSION:
        raise FormatError(f"{path}: unsupported OMDS version {version}")
    try:
        meta = json.loads(raw[12:12 + n_meta].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: bad metadata ({e})") from None
    n, d = int(meta["n"]), int(meta["d_x"])
    off = 12 + n_meta
    need = n * d * 8 + n * 4 + n * 8
    if len(raw) - off != need:
        raise FormatError(f"{path}: payload has {len(raw) - off} bytes, expected {need}")
    x = np.frombuffer(raw, "<f8", n * d, off).reshape(n, d)
    off += n * d * 8
    y = np.frombuffer(raw, "<i4", n, off)
    off += n * 4
    ids = np.frombuffer(raw, "<i8", n, off)
    return Batch(x.astype(np.float64), y.astype(np.int64), ids.astype(np.int64)), meta


def save_dataset(dataset: SyntheticDataset, out_dir) -> None:
    """Write ``dataset.json`` plus one ``<split>.omds`` file per split."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = dataset.spec
    header = {
        "spec": asdict(spec),
        "class_embeddings": dataset.class_embeddings.tolist(),
        "class_context_assignment": dataset.class_context_assignment.tolist(),
        "motion_map": dataset.motion_map.tolist(),
        "context_prototypes": dataset.context_prototypes.tolist(),
        "splits": list(dataset.splits),
    }
    (out / "dataset.json").write_text(json.dumps(header, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    for name, split in dataset.splits.items():
        save_split(out / f"{name}.omds", split, {
            "split": name,
            "seed": spec.seed,
            "d_motion": spec.d_motion,
            "d_static": spec.d_static,
            "d_embed": spec.d_embed,
            "n_classes": spec.n_classes,
            "contexts": dataset.contexts[name].tolist(),
        })


def load_dataset(data_dir) -> SyntheticDataset:
    d = Path(data_dir)
    try:
        header = json.loads((d / "dataset.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError(f"{d}: missing dataset.json") from None
    spec = DatasetSpec.from_dict(header["spec"])
    splits, contexts = {}, {}
    for name in header["splits"]:
        batch, meta = load_split(d / f"{name}.omds")
        if batch.inputs.shape[1] != spec.d_x:
            raise LayoutError(f"split {name} has d_x {batch.inputs.shape[1]}, spec says {spec.d_x}")
        splits[name] = batch
        contexts[name] = np.asarray(meta.get("contexts", []), dtype=np.int64)
    return SyntheticDataset(
        spec,
        np.asarray(header["class_embeddings"], dtype=np.float64),
        np.asarray(header["class_context_assignment"], dtype=np.int64),
        np.asarray(header["motion_map"], dtype=np.float64),
        np.asarray(header["context_prototypes"], dtype=np.float64),
        splits,
        contexts,
    )
