"""
Dataset loaders: MNIST IDX files, CIFAR-10 binary batches and the generic
CTED tensor format, plus stratified splitting and a synthetic generator.

Labels are 1-based everywhere; pixel values are scaled to [0, 1] on load.
"""

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from src.utils.errors import ConfigError, DatasetFormatError

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_SIDE = 32
CIFAR_RECORD = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE
CTED_MAGIC = b"CTED"
_CTED_HEADER = struct.Struct("<5I")

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """
    Images of uniform shape with 1-based labels

    ``images`` is float32 (N, height, width, depth); ``labels`` is uint16.
    """

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    provenance: str = ""

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        if images.ndim == 3:
            images = images[..., np.newaxis]
        labels = np.asarray(self.labels, dtype=np.uint16)
        if images.ndim != 4:
            raise DatasetFormatError(f"Images must be (N, height, width, depth), got {images.shape}")
        if images.shape[0] != labels.shape[0]:
            raise DatasetFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
        if labels.size and (labels.min() < 1 or labels.max() > self.class_count):
            raise DatasetFormatError(f"Labels must lie in 1..{self.class_count}")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: Sequence[int], provenance: Optional[str] = None) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[indices], self.labels[indices], self.class_count,
                              provenance or self.provenance)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count + 1)[1:]


def _read_bytes(path: Path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise DatasetFormatError(f"Dataset file not found: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as handle:
        return handle.read()


def _idx_payload(data: bytes, magic: int, path: Path, dims: int) -> Tuple[Tuple[int, ...], np.ndarray]:
    header = 4 + 4 * dims
    if len(data) < 4:
        raise DatasetFormatError(f"IDX file {path} too short for a magic number")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise DatasetFormatError(f"IDX file {path} has magic {found:#010x}, expected {magic:#010x}")
    if len(data) < header:
        raise DatasetFormatError(f"IDX file {path} truncated in header")
    shape = struct.unpack(f">{dims}I", data[4:header])
    size = int(np.prod(shape))
    if len(data) - header < size:
        raise DatasetFormatError(f"IDX file {path} truncated: {len(data) - header} of {size} payload bytes")
    return shape, np.frombuffer(data, dtype=np.uint8, count=size, offset=header)


def load_idx(images_path: Path, labels_path: Path, class_count: int = 10) -> LabeledDataset:
    """
    Read an IDX image/label file pair (plain or ``.gz``)

    Raises:
        DatasetFormatError: bad magic, truncated payload or count mismatch
    """
    shape, pixels = _idx_payload(_read_bytes(images_path), IDX_IMAGE_MAGIC, images_path, 3)
    (label_count,), raw_labels = _idx_payload(_read_bytes(labels_path), IDX_LABEL_MAGIC, labels_path, 1)
    count, rows, cols = shape
    if count != label_count:
        raise DatasetFormatError(f"{count} images in {images_path} but {label_count} labels in {labels_path}")
    if raw_labels.size and raw_labels.max() >= class_count:
        raise DatasetFormatError(f"Label {raw_labels.max()} out of range for {class_count} classes")
    images = pixels.reshape(count, rows, cols, 1).astype(np.float32) / 255.0
    logger.info("Loaded %d IDX images of %dx%d from %s", count, cols, rows, images_path)
    return LabeledDataset(images, raw_labels.astype(np.uint16) + 1, class_count, f"idx:{Path(images_path).name}")


def load_cifar10(batch_paths: Sequence[Path]) -> LabeledDataset:
    """
    Read CIFAR-10 binary batches

    Each record is one label byte followed by the red, green and blue 32x32
    planes.
    """
    images, labels = [], []
    for path in batch_paths:
        data = _read_bytes(path)
        if len(data) == 0 or len(data) % CIFAR_RECORD:
            raise DatasetFormatError(f"CIFAR-10 file {path} has {len(data)} bytes, not a multiple of {CIFAR_RECORD}")
        records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if records[:, 0].max() > 9:
            raise DatasetFormatError(f"CIFAR-10 file {path} has label {records[:, 0].max()} out of range")
        planes = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
        images.append(np.transpose(planes, (0, 2, 3, 1)))
        labels.append(records[:, 0])
    if not images:
        raise DatasetFormatError("No CIFAR-10 batch files given")
    stacked = np.concatenate(images).astype(np.float32) / 255.0
    logger.info("Loaded %d CIFAR-10 images from %d files", stacked.shape[0], len(images))
    return LabeledDataset(stacked, np.concatenate(labels).astype(np.uint16) + 1, 10, "cifar10")


def write_dataset(dataset: LabeledDataset, path: Path):
    """
    Write the generic format: magic "CTED", height, width, depth, C, N as
    u32, then N x height x width x depth f32 values, then N u16 labels
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    height, width, depth = dataset.image_shape
    with open(path, "wb") as handle:
        handle.write(CTED_MAGIC)
        handle.write(_CTED_HEADER.pack(height, width, depth, dataset.class_count, len(dataset)))
        handle.write(dataset.images.astype("<f4").tobytes())
        handle.write(dataset.labels.astype("<u2").tobytes())


def read_dataset(path: Path) -> LabeledDataset:
    data = _read_bytes(path)
    header = 4 + _CTED_HEADER.size
    if len(data) < header or data[:4] != CTED_MAGIC:
        raise DatasetFormatError(f"{path} is not a CTED dataset file")
    height, width, depth, class_count, count = _CTED_HEADER.unpack_from(data, 4)
    values = count * height * width * depth
    expected = header + 4 * values + 2 * count
    if len(data) != expected:
        raise DatasetFormatError(f"CTED file {path} has {len(data)} bytes, expected {expected}")
    images = np.frombuffer(data, dtype="<f4", count=values, offset=header)
    labels = np.frombuffer(data, dtype="<u2", count=count, offset=header + 4 * values)
    return LabeledDataset(images.reshape(count, height, width, depth), labels, class_count,
                          f"cted:{Path(path).name}")


def split_indices(dataset: LabeledDataset, fraction: float, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Deterministic stratified split, as index arrays into ``dataset``

    Part b receives ceil((1 - fraction) * N) examples, clipped to 1..N-1, and
    every class contributes its proportional share rounded by largest
    remainder.

    Returns:
        (indices of part a with about ``fraction`` of the examples, indices of part b)
    """
    count = len(dataset)
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"Split fraction must lie in (0, 1), got {fraction}")
    if count < 2:
        raise ConfigError(f"Cannot split a dataset of {count} examples")
    size_b = int(np.clip(np.ceil((1.0 - fraction) * count), 1, count - 1))

    rng = np.random.default_rng(seed)
    per_class = dataset.class_counts()
    quota = size_b * per_class / count
    take = np.floor(quota).astype(np.int64)
    remainder = size_b - int(take.sum())
    if remainder:
        order = np.argsort(-(quota - take), kind="stable")
        take[order[:remainder]] += 1

    part_a, part_b = [], []
    for c in range(dataset.class_count):
        members = rng.permutation(np.flatnonzero(dataset.labels == c + 1))
        part_b.extend(members[:take[c]])
        part_a.extend(members[take[c]:])
    return (rng.permutation(np.asarray(part_a, dtype=np.int64)),
            rng.permutation(np.asarray(part_b, dtype=np.int64)))


def split(dataset: LabeledDataset, fraction: float, seed: int = 0) -> Tuple[LabeledDataset, LabeledDataset]:
    """Stratified split into two datasets, see :func:`split_indices`"""
    part_a, part_b = split_indices(dataset, fraction, seed)
    return (dataset.subset(part_a, f"{dataset.provenance}[a]"),
            dataset.subset(part_b, f"{dataset.provenance}[b]"))


def synthetic_dataset(count: int, class_count: int = 2, size: int = 16, depth: int = 1,
                      noise: float = 0.1, seed: int = 0) -> LabeledDataset:
    """
    Seeded toy images: class c shows a bright vertical bar at its own column

    Bars jitter by one pixel and Gaussian noise is added, so the classes are
    separable by location but not by a single fixed pixel.
    """
    if class_count < 1 or count < class_count:
        raise ConfigError(f"Need at least one image per class, got {count} for {class_count} classes")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(count) % class_count) + 1
    images = rng.normal(0.0, noise, size=(count, size, size, depth))
    span = max(size - 6, 1)
    for i, label in enumerate(labels):
        column = 2 + (label - 1) * span // max(class_count - 1, 1) + int(rng.integers(-1, 2))
        column = int(np.clip(column, 0, size - 2))
        images[i, 2:size - 2, column:column + 2, :] += 1.0
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return LabeledDataset(images, labels.astype(np.uint16), class_count, f"synthetic:{seed}")


def _find(data_dir: Path, name: str) -> Path:
    for candidate in (data_dir / name, data_dir / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise DatasetFormatError(f"Dataset file {name}[.gz] not found under {data_dir}")


def load_named(name: str, data_dir: Path, part: str = "train") -> LabeledDataset:
    """
    Load ``mnist`` or ``cifar10`` from their standard file names, or a CTED
    file given by path

    Args:
        name: ``mnist``, ``cifar10`` or a path to a CTED file
        data_dir: Directory holding the standard files
        part: ``train`` or ``test``
    """
    data_dir = Path(data_dir)
    if part not in ("train", "test"):
        raise ConfigError(f"Dataset part must be 'train' or 'test', got {part!r}")
    if name == "mnist":
        images, labels = MNIST_FILES[part]
        return load_idx(_find(data_dir, images), _find(data_dir, labels))
    if name == "cifar10":
        return load_cifar10([_find(data_dir, f) for f in CIFAR_FILES[part]])
    path = Path(name)
    if not path.is_absolute() and not path.exists():
        path = data_dir / name
    return read_dataset(path)
