"""Task streams: dataset ingestion, class-incremental splits, batching.

A stream is an ordered list of tasks with disjoint class sets, each task
carrying train/val/test splits. Images are float32 in [0, 1] with an
explicit channel axis (grayscale keeps C=1) so every downstream pipeline
sees one layout.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, SchemaError, ShapeError

SPLITS = ("train", "val", "test")

# number of distinct parametric textures the synthetic generator knows
SYNTHETIC_CLASS_VOCAB = 16


@dataclass
class LabeledDataset:
    images: np.ndarray          # [N, H, W, C] float32 in [0, 1]
    labels: np.ndarray          # [N] int64
    class_set: tuple            # sorted class ids
    split: str

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.images.ndim != 4:
            raise ShapeError(f"images must be [N,H,W,C], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ShapeError("images and labels disagree on N")
        self.class_set = tuple(sorted(int(c) for c in self.class_set))

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def validate(self):
        if len(self) < 1:
            raise ShapeError("dataset is empty")
        if not set(np.unique(self.labels)).issubset(self.class_set):
            raise SchemaError("labels outside declared class_set")
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < 0.0 or hi > 1.0:
            raise SchemaError(f"pixels outside [0,1]: min={lo}, max={hi}")
        if self.split not in SPLITS:
            raise SchemaError(f"unknown split {self.split!r}")
        return self

    def subset(self, idx):
        return LabeledDataset(self.images[idx], self.labels[idx], self.class_set, self.split)


@dataclass
class Task:
    task_id: int
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset

    @property
    def class_set(self):
        return self.train.class_set


@dataclass
class TaskStream:
    tasks: list
    order: str = "canonical"

    def __post_init__(self):
        seen = set()
        for pos, task in enumerate(self.tasks, start=1):
            if task.task_id != pos:
                raise ConfigError("task_ids must be 1..K in stream order")
            if seen & set(task.class_set):
                raise ConfigError("tasks must have disjoint class sets")
            seen |= set(task.class_set)

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    @property
    def num_classes(self):
        return sum(len(t.class_set) for t in self.tasks)

    def cumulative_classes(self, k=None):
        """Sorted union of class sets over tasks 1..k (all tasks if None)."""
        k = len(self.tasks) if k is None else k
        out = set()
        for task in self.tasks[:k]:
            out |= set(task.class_set)
        return tuple(sorted(out))


@dataclass
class StreamConfig:
    dataset_name: str = "synthetic"
    num_tasks: int = 3
    classes_per_task: int = 2
    low_shot_fraction: float = 1.0
    seed: int = 0
    image_size: tuple = (16, 16, 1)
    order: str = "canonical"
    # per-class split sizes used by the synthetic generator
    train_per_class: int = 64
    val_per_class: int = 16
    test_per_class: int = 32

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        if self.num_tasks < 2:
            raise ConfigError("num_tasks must be >= 2")
        if self.classes_per_task < 1:
            raise ConfigError("classes_per_task must be >= 1")
        if not (0.0 < self.low_shot_fraction <= 1.0):
            raise ConfigError("low_shot_fraction must lie in (0, 1]")
        if self.order not in ("canonical", "reversed", "permutation"):
            raise ConfigError(f"unknown task order {self.order!r}")


def load_medmnist_file(path):
    """Read a compressed-array archive with the standard six split keys.

    Returns (train, val, test) LabeledDatasets normalized to [0, 1].
    """
    with np.load(path) as archive:
        arrays = {}
        for split in SPLITS:
            for kind in ("images", "labels"):
                key = f"{split}_{kind}"
                if key not in archive:
                    raise SchemaError(f"archive is missing required array {key!r}")
                arrays[key] = archive[key]

    def normalize(images):
        if images.dtype == np.uint8:
            images = images.astype(np.float32) / 255.0
        elif np.issubdtype(images.dtype, np.floating):
            images = images.astype(np.float32)
        else:
            raise TypeError(f"unsupported image dtype {images.dtype}")
        if images.ndim == 3:
            images = images[..., None]
        return images

    datasets = []
    all_labels = np.concatenate([arrays[f"{s}_labels"].reshape(-1) for s in SPLITS])
    class_set = tuple(sorted(int(c) for c in np.unique(all_labels)))
    for split in SPLITS:
        ds = LabeledDataset(
            images=normalize(arrays[f"{split}_images"]),
            labels=arrays[f"{split}_labels"],
            class_set=class_set,
            split=split,
        )
        datasets.append(ds.validate())
    return tuple(datasets)


def _grids(h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    return yy / max(h - 1, 1), xx / max(w - 1, 1)


def _class_pattern(c, h, w):
    """Deterministic base texture for synthetic class c, values in [0, 1].

    Families rotate with c so consecutive classes look different; later
    classes get finer structure, which makes later tasks progressively
    harder to classify and to generate.
    """
    yy, xx = _grids(h, w)
    family = c % 4
    variant = c // 4
    if family == 0:
        centers = [(0.3, 0.3), (0.7, 0.7), (0.25, 0.75), (0.75, 0.25)]
        cy, cx = centers[variant % 4]
        return np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.13 ** 2)))
    if family == 1:
        theta = (variant % 4) * np.pi / 4
        freq = 2.0 + variant
        phase = np.cos(theta) * xx + np.sin(theta) * yy
        return 0.5 + 0.5 * np.sin(2 * np.pi * freq * phase)
    if family == 2:
        rr = np.sqrt((yy - 0.5) ** 2 + (xx - 0.5) ** 2)
        return 0.5 + 0.5 * np.cos(2 * np.pi * (2.5 + variant) * rr)
    corners = [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, -1.0)]
    a, b = corners[variant % 4]
    ramp = a * xx + b * yy
    ramp = ramp - ramp.min()
    return ramp / max(ramp.max(), 1e-9)


def _synthetic_noise_scale(c):
    # later classes are noisier: tasks differ in difficulty by design
    return 0.05 + 0.012 * c


def _generate_class_samples(c, count, image_size, rng):
    h, w, ch = image_size
    pattern = _class_pattern(c, h, w)
    sigma = _synthetic_noise_scale(c)
    amps = rng.uniform(0.8, 1.0, size=count)
    shifts = rng.integers(-2, 3, size=(count, 2))
    out = np.empty((count, h, w, ch), dtype=np.float32)
    for i in range(count):
        base = np.roll(pattern, tuple(shifts[i]), axis=(0, 1)) * amps[i]
        noisy = base[..., None] + rng.normal(0.0, sigma, size=(h, w, ch))
        out[i] = np.clip(noisy, 0.0, 1.0)
    return out


def _synthetic_split(classes, per_class, image_size, seed, split):
    split_tag = SPLITS.index(split)
    images, labels = [], []
    for c in classes:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 977, split_tag, int(c)]))
        images.append(_generate_class_samples(c, per_class, image_size, rng))
        labels.append(np.full(per_class, c, dtype=np.int64))
    return LabeledDataset(
        images=np.concatenate(images),
        labels=np.concatenate(labels),
        class_set=tuple(classes),
        split=split,
    )


def _stratified_subsample(dataset, fraction):
    """Keep ceil(fraction * n_c) examples of each class, in stable order."""
    if fraction >= 1.0:
        return dataset
    keep = []
    for c in dataset.class_set:
        idx = np.flatnonzero(dataset.labels == c)
        keep.extend(idx[: math.ceil(fraction * len(idx))])
    return dataset.subset(np.sort(np.asarray(keep, dtype=np.int64)))


def _task_order(groups, config):
    if config.order == "canonical":
        return groups
    if config.order == "reversed":
        return groups[::-1]
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 1409]))
    return [groups[i] for i in rng.permutation(len(groups))]


def make_synthetic_stream(config):
    """Build a deterministic class-incremental stream of textured images."""
    total = config.num_tasks * config.classes_per_task
    if total > SYNTHETIC_CLASS_VOCAB:
        raise ConfigError(
            f"requested {total} classes but the synthetic generator defines {SYNTHETIC_CLASS_VOCAB}")
    class_ids = list(range(total))
    groups = [class_ids[i:i + config.classes_per_task]
              for i in range(0, total, config.classes_per_task)]
    tasks = []
    for pos, group in enumerate(_task_order(groups, config), start=1):
        train = _synthetic_split(group, config.train_per_class, config.image_size,
                                 config.seed, "train")
        train = _stratified_subsample(train, config.low_shot_fraction)
        val = _synthetic_split(group, config.val_per_class, config.image_size,
                               config.seed, "val")
        test = _synthetic_split(group, config.test_per_class, config.image_size,
                                config.seed, "test")
        tasks.append(Task(pos, train.validate(), val.validate(), test.validate()))
    return TaskStream(tasks, order=config.order)


def _carve_validation(train, fraction=0.1):
    """Deterministically reserve a per-class fraction of train as val."""
    val_idx, train_idx = [], []
    for c in train.class_set:
        idx = np.flatnonzero(train.labels == c)
        n_val = max(1, math.ceil(fraction * len(idx)))
        val_idx.extend(idx[:n_val])
        train_idx.extend(idx[n_val:])
    val = train.subset(np.sort(np.asarray(val_idx, dtype=np.int64)))
    val = replace(val, split="val")
    return train.subset(np.sort(np.asarray(train_idx, dtype=np.int64))), val


def split_class_incremental(dataset_triple, config):
    """Partition a labeled dataset triple into a class-incremental stream.

    dataset_triple is (train, val, test); val may be None, in which case
    10% of train is carved off per class.
    """
    train, val, test = dataset_triple
    classes = sorted(train.class_set)
    needed = config.num_tasks * config.classes_per_task
    if needed > len(classes):
        raise ConfigError(
            f"need {needed} classes but the dataset provides {len(classes)}")
    groups = [classes[i:i + config.classes_per_task]
              for i in range(0, needed, config.classes_per_task)]

    def restrict(ds, group, split):
        if ds is None:
            return None
        mask = np.isin(ds.labels, group)
        sub = LabeledDataset(ds.images[mask], ds.labels[mask], tuple(group), split)
        return sub.validate()

    tasks = []
    for pos, group in enumerate(_task_order(groups, config), start=1):
        tr = restrict(train, group, "train")
        va = restrict(val, group, "val")
        if va is None:
            tr, va = _carve_validation(tr)
        tr = _stratified_subsample(tr, config.low_shot_fraction)
        te = restrict(test, group, "test")
        tasks.append(Task(pos, tr, va, te))
    return TaskStream(tasks, order=config.order)


def batches(dataset, batch_size, seed):
    """One epoch of batches under a seeded permutation; last batch may be short."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7331]))
    perm = rng.permutation(len(dataset))
    for start in range(0, len(dataset), batch_size):
        idx = perm[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


def union_dataset(datasets, split):
    """Concatenate datasets over disjoint class sets (joint-training helper)."""
    images = np.concatenate([d.images for d in datasets])
    labels = np.concatenate([d.labels for d in datasets])
    class_set = tuple(sorted(set().union(*(d.class_set for d in datasets))))
    return LabeledDataset(images, labels, class_set, split)
