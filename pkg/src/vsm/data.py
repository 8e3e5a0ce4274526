"""Class datasets, class splits, rotation augmentation and episode sampling."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".pgm", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff"}
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    """Dataset layout or episode shape cannot be satisfied."""


@dataclass
class ClassRecord:
    class_id: int
    samples: np.ndarray  # [n, H, W, C] in [0, 1]
    name: str = ""

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class ClassDataset:
    classes: list[ClassRecord]
    split: str = "train"

    def __post_init__(self):
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise DataError("class ids must be unique within a dataset")
        self._by_id = {c.class_id: c for c in self.classes}

    def __len__(self) -> int:
        return len(self.classes)

    @property
    def class_ids(self) -> list[int]:
        return [c.class_id for c in self.classes]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        if not self.classes:
            raise DataError(f"{self.split} split is empty")
        return tuple(self.classes[0].samples.shape[1:])

    def by_id(self, class_id: int) -> ClassRecord:
        return self._by_id[class_id]

    def min_class_size(self) -> int:
        return min((len(c) for c in self.classes), default=0)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Flatten to ``(X, y)`` with ``y`` holding class ids."""
        xs = [c.samples for c in self.classes]
        ys = [np.full(len(c), c.class_id, dtype=np.int64) for c in self.classes]
        return np.concatenate(xs), np.concatenate(ys)


@dataclass
class Episode:
    """One N-way K-shot task. Class ``n`` of the episode is ``class_ids[n]``."""

    support: np.ndarray  # [N, K, H, W, C]
    query: np.ndarray  # [N, Q, H, W, C]
    class_ids: list[int] = field(default_factory=list)

    @property
    def way(self) -> int:
        return self.support.shape[0]

    @property
    def shot(self) -> int:
        return self.support.shape[1]

    @property
    def queries_per_class(self) -> int:
        return self.query.shape[1]

    @property
    def support_labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.way), self.shot)

    @property
    def query_labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.way), self.queries_per_class)


def from_arrays(X: np.ndarray, y: Sequence, split: str = "train") -> ClassDataset:
    """Group an image array by label into a dataset (labels become class ids)."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[..., None]
    y = np.asarray(y)
    classes = []
    for label in np.unique(y):
        classes.append(ClassRecord(int(label), X[y == label], name=str(label)))
    return ClassDataset(classes, split)


# splits ---------------------------------------------------------------------


def resolve_split_counts(n_classes: int, split_spec) -> tuple[int, int, int]:
    """Turn counts, fractions or ``"all"`` entries into exact class counts.

    ``split_spec`` has three entries for train/val/test. Integers are taken
    literally, floats in [0, 1] are fractions of ``n_classes`` and the
    string ``"all"`` (allowed once) absorbs the remainder.
    """
    if isinstance(split_spec, str):
        split_spec = [s.strip() for s in split_spec.split(",")]
    spec = list(split_spec)
    if len(spec) != 3:
        raise DataError(f"split spec needs 3 entries (train, val, test), got {spec!r}")
    counts: list[int | None] = []
    for entry in spec:
        if isinstance(entry, str) and entry.lower() == "all":
            counts.append(None)
            continue
        value = float(entry)
        if isinstance(entry, float) or (isinstance(entry, str) and "." in entry):
            if not 0 <= value <= 1:
                raise DataError(f"fractional split entry {entry!r} outside [0, 1]")
            counts.append(int(round(value * n_classes)))
        else:
            if value < 0 or value != int(value):
                raise DataError(f"split count {entry!r} must be a nonnegative integer")
            counts.append(int(value))
    if counts.count(None) > 1:
        raise DataError("'all' may appear only once in a split spec")
    fixed = sum(c for c in counts if c is not None)
    if fixed > n_classes:
        raise DataError(f"split counts {spec!r} need {fixed} classes but only {n_classes} exist")
    counts = [n_classes - fixed if c is None else c for c in counts]
    return tuple(counts)


def split_classes(class_ids: Sequence[int], split_spec, seed: int) -> dict[str, list[int]]:
    """Seeded shuffle of the class list, then consecutive slices per split."""
    ids = list(class_ids)
    counts = resolve_split_counts(len(ids), split_spec)
    order = np.random.default_rng(seed).permutation(len(ids))
    out, start = {}, 0
    for name, count in zip(SPLITS, counts):
        out[name] = sorted(ids[i] for i in order[start : start + count])
        start += count
    return out


def _class_directories(root: Path) -> list[Path]:
    """Leaf directories under ``root``; each one is a class."""
    leaves = []
    for dirpath, dirnames, _ in os.walk(root):
        if not dirnames and Path(dirpath) != root:
            leaves.append(Path(dirpath))
    return sorted(leaves)


def _image_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _load_image(path: Path, size: tuple[int, int], channels: int, invert: bool) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        img = img.convert("L" if channels == 1 else "RGB")
        if img.size != (size[1], size[0]):
            img = img.resize((size[1], size[0]), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[..., None]
    return 1.0 - arr if invert else arr


def load_image_folder(
    path,
    split_spec=("all", 0, 0),
    image_size: tuple[int, int] = (28, 28),
    channels: int = 1,
    seed: int = 0,
    invert: bool = False,
) -> dict[str, ClassDataset]:
    """Load ``root/<class>/<images>`` (nested class directories allowed).

    Every leaf directory (one without subdirectories) is one class; classes get
    ids by sorted relative path, are shuffled with ``seed`` and sliced into
    train/val/test according to ``split_spec``.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset path does not exist: {root}")
    dirs = _class_directories(root)
    if not dirs:
        raise DataError(f"no class directories under {root}")
    files_per_class = [_image_files(d) for d in dirs]
    for d, files in zip(dirs, files_per_class):
        if not files:
            raise DataError(f"class directory {d} contains no images")

    names = [str(d.relative_to(root)) for d in dirs]
    assignment = split_classes(range(len(dirs)), split_spec, seed)
    out = {}
    for split in SPLITS:
        records = []
        for cid in assignment[split]:
            files = files_per_class[cid]
            images = np.stack([_load_image(f, image_size, channels, invert) for f in files])
            records.append(ClassRecord(cid, images, names[cid]))
        out[split] = ClassDataset(records, split)
    logger.info(
        "loaded %d classes from %s: %s",
        len(dirs),
        root,
        {k: len(v) for k, v in out.items()},
    )
    return out


# augmentation -----------------------------------------------------------------


def augment_rotations(ds: ClassDataset) -> ClassDataset:
    """Each class spawns four classes rotated by 0, 90, 180 and 270 degrees.

    The rotated copy of class ``c`` by ``r`` quarter turns gets id ``4c + r``.
    """
    records = []
    for rec in ds.classes:
        h, w = rec.samples.shape[1:3]
        if h != w:
            raise DataError(f"rotation augmentation needs square images, class {rec.class_id} is {h}x{w}")
        for r in range(4):
            samples = rec.samples if r == 0 else np.rot90(rec.samples, k=r, axes=(1, 2)).copy()
            records.append(ClassRecord(4 * rec.class_id + r, samples, f"{rec.name}@rot{90 * r}"))
    return ClassDataset(records, ds.split)


# episodes -----------------------------------------------------------------------


def sample_episode(
    ds: ClassDataset, way: int, shot: int, queries_per_class: int, rng: np.random.Generator
) -> Episode:
    """Uniformly pick ``way`` classes, then disjoint support and query samples."""
    if way < 1 or shot < 1 or queries_per_class < 1:
        raise DataError("way, shot and queries_per_class must all be >= 1")
    if len(ds) < way:
        raise DataError(f"{ds.split} split has {len(ds)} classes, episode needs {way}")
    picked = rng.choice(len(ds), size=way, replace=False)
    need = shot + queries_per_class
    support, query, ids = [], [], []
    for i in picked:
        rec = ds.classes[int(i)]
        if len(rec) < need:
            raise DataError(
                f"class {rec.class_id} has {len(rec)} samples, episode needs {need}"
            )
        chosen = rng.choice(len(rec), size=need, replace=False)
        support.append(rec.samples[chosen[:shot]])
        query.append(rec.samples[chosen[shot:]])
        ids.append(rec.class_id)
    return Episode(np.stack(support), np.stack(query), ids)


# synthetic clusters -----------------------------------------------------------------


def synth_gaussian_clusters(
    n_classes: int,
    d_img: int,
    samples_per_class: int,
    cluster_spread: float,
    rng: np.random.Generator,
    channels: int = 1,
    n_blobs: int = 3,
    centers: np.ndarray | None = None,
    first_id: int = 0,
    split: str = "train",
) -> ClassDataset:
    """Isotropic Gaussian clusters around rendered class-center images.

    Each class center is a ``d_img`` x ``d_img`` image made of ``n_blobs``
    random 2-D Gaussian bumps; samples are ``center + spread * noise``
    clipped to [0, 1].
    """
    if n_classes < 2:
        raise DataError("synthetic dataset needs at least 2 classes")
    if centers is None:
        centers = render_blob_centers(n_classes, d_img, channels, n_blobs, rng)
    records = []
    for c in range(n_classes):
        noise = rng.standard_normal((samples_per_class,) + centers[c].shape)
        samples = np.clip(centers[c] + cluster_spread * noise, 0.0, 1.0).astype(np.float32)
        records.append(ClassRecord(first_id + c, samples, f"cluster{first_id + c}"))
    return ClassDataset(records, split)


def render_blob_centers(
    n_classes: int, d_img: int, channels: int, n_blobs: int, rng: np.random.Generator
) -> np.ndarray:
    yy, xx = np.mgrid[0:d_img, 0:d_img].astype(np.float64)
    centers = np.zeros((n_classes, d_img, d_img, channels))
    for c in range(n_classes):
        for ch in range(channels):
            for _ in range(n_blobs):
                cy, cx = rng.uniform(0, d_img - 1, size=2)
                width = rng.uniform(0.08, 0.25) * d_img
                amp = rng.uniform(0.5, 1.0)
                centers[c, :, :, ch] += amp * np.exp(
                    -((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2)
                )
    return np.clip(centers, 0.0, 1.0)


def synthetic_splits(
    n_train: int = 50,
    n_val: int = 10,
    n_test: int = 10,
    d_img: int = 16,
    samples_per_class: int = 40,
    cluster_spread: float = 0.35,
    channels: int = 1,
    n_blobs: int = 3,
    seed: int = 0,
) -> dict[str, ClassDataset]:
    """Train/val/test synthetic datasets with disjoint class ids."""
    rng = np.random.default_rng(seed)
    out, start = {}, 0
    for split, n in zip(SPLITS, (n_train, n_val, n_test)):
        if n == 0:
            out[split] = ClassDataset([], split)
            continue
        if n < 2:
            raise DataError(f"synthetic {split} split needs 0 or >= 2 classes, got {n}")
        out[split] = synth_gaussian_clusters(
            n, d_img, samples_per_class, cluster_spread, rng,
            channels=channels, n_blobs=n_blobs, first_id=start, split=split,
        )
        start += n
    return out
