"""IDX (MNIST-format) ingestion and a synthetic dataset with sparse informative tokens."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IDXError(ValueError):
    pass


class BadMagicError(IDXError):
    pass


class TruncatedFileError(IDXError):
    pass


class CountMismatchError(IDXError):
    pass


@dataclass
class Dataset:
    """uint8 images (count, channels, H, W) with integer labels.

    ``mean``/``std`` are the per-channel normalization constants applied by
    :meth:`floats`. ``informative`` optionally records the token index that
    carries the label (synthetic data only).
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    mean: np.ndarray = field(default=None)
    std: np.ndarray = field(default=None)
    informative: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and self.labels.max() >= self.num_classes:
            raise ValueError(f"label {self.labels.max()} >= num_classes {self.num_classes}")
        if self.mean is None:
            px = self.images.astype(np.float64) / 255.0
            self.mean = px.mean(axis=(0, 2, 3)) if len(px) else np.zeros(self.images.shape[1])
            self.std = px.std(axis=(0, 2, 3)) + 1e-8 if len(px) else np.ones(self.images.shape[1])

    def __len__(self) -> int:
        return len(self.labels)

    def floats(self, idx=slice(None), dtype=np.float64) -> np.ndarray:
        px = self.images[idx].astype(dtype) / 255.0
        return (px - self.mean[:, None, None].astype(dtype)) / self.std[:, None, None].astype(dtype)

    def subset(self, idx, split: str | None = None) -> Dataset:
        return Dataset(
            self.images[idx],
            self.labels[idx],
            self.num_classes,
            split or self.split,
            self.mean,
            self.std,
            None if self.informative is None else self.informative[idx],
        )

    def with_stats_of(self, other: Dataset) -> Dataset:
        self.mean, self.std = other.mean, other.std
        return self

    def batches(self, batch_size: int, rng: np.random.Generator | None = None, dtype=np.float64):
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            yield self.floats(idx, dtype), self.labels[idx]


# ---------------------------------------------------------------- IDX files


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4 + 4 * ndim:
        raise TruncatedFileError(f"{path}: header truncated ({len(raw)} bytes)")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise BadMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    need = int(np.prod(dims))
    body = raw[4 + 4 * ndim :]
    if len(body) < need:
        raise TruncatedFileError(f"{path}: expected {need} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=need).reshape(dims)


def load_idx_dataset(images_path, labels_path, num_classes: int | None = None, split: str = "train") -> Dataset:
    images = _read_idx(images_path, IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise CountMismatchError(f"image file holds {len(images)} items but label file holds {len(labels)}")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 1
    return Dataset(images[:, None].copy(), labels.astype(np.int64), num_classes, split)


def write_idx_dataset(ds: Dataset, images_path, labels_path) -> None:
    if ds.images.shape[1] != 1:
        raise IDXError("IDX image files hold single-channel images only")
    n, _, h, w = ds.images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, n, h, w))
        fh.write(np.ascontiguousarray(ds.images, dtype=np.uint8).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, n))
        fh.write(ds.labels.astype(np.uint8).tobytes())


SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "val": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(root: Path, stem: str) -> Path:
    for cand in (root / stem, root / (stem + ".gz")):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"no {stem}[.gz] in {root}")


def load_dir(root, split: str = "train", num_classes: int | None = None) -> Dataset:
    """Load a split from an MNIST-style directory (optionally gzipped files)."""
    root = Path(root)
    img, lab = SPLIT_FILES[split]
    return load_idx_dataset(_find(root, img), _find(root, lab), num_classes, split)


def save_dir(root, train: Dataset, val: Dataset) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for ds, (img, lab) in ((train, SPLIT_FILES["train"]), (val, SPLIT_FILES["val"])):
        write_idx_dataset(ds, root / img, root / lab)
    return root


# ---------------------------------------------------------------- synthetic data


def class_prototypes(classes: int, patch: int, seed: int) -> np.ndarray:
    """Distinct binary patch textures, one per class."""
    rng = np.random.default_rng(seed)
    protos: list[np.ndarray] = []
    while len(protos) < classes:
        p = rng.integers(0, 2, (patch, patch))
        if 3 <= p.sum() <= patch * patch - 3 and all(np.abs(p - q).sum() >= patch for q in protos):
            protos.append(p)
    return np.stack(protos)


def class_anchors(classes: int, grid: int) -> np.ndarray:
    """Spread class anchor cells over the interior of the token grid."""
    cells = [(r, c) for r in range(1, grid - 1, 2) for c in range(1, grid - 1, 2)]
    cells = cells * (classes // len(cells) + 1)
    return np.array(cells[:classes])


def synth_dataset(
    classes: int = 10,
    per_class: int = 100,
    seed: int = 0,
    image_size: int = 32,
    patch: int = 4,
    distractors: int = 8,
    jitter: int = 1,
    noise: float = 0.12,
    split: str = "train",
    proto_seed: int = 1234,
) -> Dataset:
    """Images whose label lives in a single token.

    Each image carries its class texture in one patch, placed at a class anchor
    cell plus a random offset of up to ``jitter`` cells, among ``distractors``
    random textures of equal contrast on a noisy background. Prototypes depend
    on ``proto_seed`` only, so splits drawn with different ``seed`` share them.
    """
    rng = np.random.default_rng(seed)
    grid = image_size // patch
    protos = class_prototypes(classes, patch, proto_seed)
    anchors = class_anchors(classes, grid)
    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    labels = labels[rng.permutation(n)]
    imgs = 0.35 + noise * rng.standard_normal((n, image_size, image_size))
    informative = np.empty(n, dtype=np.int64)
    for i, y in enumerate(labels):
        r, c = np.clip(anchors[y] + rng.integers(-jitter, jitter + 1, 2), 0, grid - 1)
        informative[i] = r * grid + c
        others = np.setdiff1d(np.arange(grid * grid), [informative[i]])
        for cell in rng.choice(others, size=distractors, replace=False):
            _paint(imgs[i], cell, grid, patch, rng.integers(0, 2, (patch, patch)), rng, noise)
        _paint(imgs[i], informative[i], grid, patch, protos[y], rng, noise)
    pixels = np.clip(np.round(imgs * 255.0), 0, 255).astype(np.uint8)
    return Dataset(pixels[:, None], labels, classes, split, informative=informative)


def _paint(img, cell, grid, patch, pattern, rng, noise):
    r, c = divmod(int(cell), grid)
    block = 0.1 + 0.8 * pattern + noise * rng.standard_normal(pattern.shape)
    img[r * patch : (r + 1) * patch, c * patch : (c + 1) * patch] = block


def synth_splits(classes: int = 10, per_class: int = 100, val_per_class: int = 50, seed: int = 0, **kw):
    """Train and validation splits sharing prototypes and normalization constants."""
    train = synth_dataset(classes, per_class, seed=seed, split="train", **kw)
    val = synth_dataset(classes, val_per_class, seed=seed + 10_000, split="val", **kw)
    return train, val.with_stats_of(train)


def token_pixels(ds: Dataset, cells: np.ndarray, patch: int) -> np.ndarray:
    """Pixels of one token per image, flattened: (count, channels * patch * patch)."""
    grid = ds.images.shape[-1] // patch
    out = []
    for img, cell in zip(ds.images, cells):
        r, c = divmod(int(cell), grid)
        out.append(img[:, r * patch : (r + 1) * patch, c * patch : (c + 1) * patch].ravel())
    return np.asarray(out, dtype=np.float64) / 255.0
