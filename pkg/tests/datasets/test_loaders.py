import gzip
import struct

import numpy as np
import pytest

from src.datasets.loaders import (
    CIFAR_RECORD,
    LabeledDataset,
    load_cifar10,
    load_idx,
    load_named,
    read_dataset,
    split,
    split_indices,
    synthetic_dataset,
    write_dataset,
)
from src.utils.errors import ConfigError, DatasetFormatError


def _idx_images(pixels):
    count, rows, cols = pixels.shape
    return struct.pack(">4I", 0x803, count, rows, cols) + pixels.astype(np.uint8).tobytes()


def _idx_labels(labels):
    return struct.pack(">2I", 0x801, len(labels)) + np.asarray(labels, dtype=np.uint8).tobytes()


@pytest.fixture
def idx_files(tmp_path, rng):
    pixels = rng.integers(0, 256, size=(5, 4, 3))
    labels = [0, 3, 9, 1, 0]
    images_path = tmp_path / "images-idx3-ubyte"
    labels_path = tmp_path / "labels-idx1-ubyte"
    images_path.write_bytes(_idx_images(pixels))
    labels_path.write_bytes(_idx_labels(labels))
    return images_path, labels_path, pixels, labels


def test_idx_pair(idx_files):
    images_path, labels_path, pixels, labels = idx_files
    dataset = load_idx(images_path, labels_path)
    assert dataset.image_shape == (4, 3, 1)
    assert dataset.class_count == 10
    np.testing.assert_array_equal(dataset.labels, np.array(labels) + 1)
    np.testing.assert_allclose(dataset.images[..., 0], pixels / 255.0, rtol=1e-6)


def test_gzipped_idx(idx_files, tmp_path):
    images_path, labels_path, _, labels = idx_files
    zipped = tmp_path / "images.gz"
    with gzip.open(zipped, "wb") as handle:
        handle.write(images_path.read_bytes())
    assert len(load_idx(zipped, labels_path)) == len(labels)


def test_idx_errors(idx_files, tmp_path):
    images_path, labels_path, _, _ = idx_files
    with pytest.raises(DatasetFormatError, match="magic"):
        load_idx(images_path, images_path)
    # a label file is shorter than an image header
    with pytest.raises(DatasetFormatError, match="magic"):
        load_idx(labels_path, labels_path)
    header_only = tmp_path / "header-only"
    header_only.write_bytes(struct.pack(">2I", 0x803, 5))
    with pytest.raises(DatasetFormatError, match="truncated in header"):
        load_idx(header_only, labels_path)
    truncated = tmp_path / "short"
    truncated.write_bytes(images_path.read_bytes()[:-1])
    with pytest.raises(DatasetFormatError, match="truncated"):
        load_idx(truncated, labels_path)
    fewer = tmp_path / "fewer"
    fewer.write_bytes(_idx_labels([1, 2]))
    with pytest.raises(DatasetFormatError):
        load_idx(images_path, fewer)
    with pytest.raises(DatasetFormatError):
        load_idx(tmp_path / "absent", labels_path)


def test_cifar_batch(tmp_path, rng):
    records = rng.integers(0, 256, size=(3, CIFAR_RECORD)).astype(np.uint8)
    records[:, 0] = [0, 9, 4]
    path = tmp_path / "data_batch_1.bin"
    path.write_bytes(records.tobytes())
    dataset = load_cifar10([path])
    assert dataset.image_shape == (32, 32, 3)
    np.testing.assert_array_equal(dataset.labels, [1, 10, 5])
    # planes are red, green, blue
    assert dataset.images[0, 0, 0, 1] == pytest.approx(records[0, 1 + 1024] / 255.0)
    path.write_bytes(records.tobytes()[:-1])
    with pytest.raises(DatasetFormatError):
        load_cifar10([path])


def test_generic_format(tmp_path, bars):
    path = tmp_path / "bars.cted"
    write_dataset(bars, path)
    back = read_dataset(path)
    np.testing.assert_array_equal(back.images, bars.images)
    np.testing.assert_array_equal(back.labels, bars.labels)
    assert back.class_count == 2
    path.write_bytes(path.read_bytes()[:-2])
    with pytest.raises(DatasetFormatError):
        read_dataset(path)


def test_dataset_validation():
    with pytest.raises(DatasetFormatError):
        LabeledDataset(np.zeros((2, 4, 4)), np.array([1, 3]), 2)
    with pytest.raises(DatasetFormatError):
        LabeledDataset(np.zeros((2, 4, 4)), np.array([1]), 2)


def test_split_is_stratified(bars3):
    part_a, part_b = split(bars3, 0.8, seed=1)
    assert len(part_b) == 12 and len(part_a) == 48
    np.testing.assert_array_equal(part_b.class_counts(), [4, 4, 4])
    assert part_b.provenance.endswith("[b]")


def test_split_indices_partition_and_repeat(bars):
    idx_a, idx_b = split_indices(bars, 0.7, seed=3)
    assert set(idx_a).isdisjoint(idx_b)
    assert sorted(np.concatenate([idx_a, idx_b])) == list(range(len(bars)))
    again_a, again_b = split_indices(bars, 0.7, seed=3)
    np.testing.assert_array_equal(idx_a, again_a)
    np.testing.assert_array_equal(idx_b, again_b)
    with pytest.raises(ConfigError):
        split_indices(bars, 1.0)


def test_tiny_split_keeps_both_parts():
    dataset = synthetic_dataset(2, class_count=2)
    part_a, part_b = split(dataset, 0.99)
    assert len(part_a) == 1 and len(part_b) == 1


def test_synthetic_is_seeded():
    first = synthetic_dataset(12, class_count=3, seed=5)
    second = synthetic_dataset(12, class_count=3, seed=5)
    np.testing.assert_array_equal(first.images, second.images)
    np.testing.assert_array_equal(first.class_counts(), [4, 4, 4])
    assert first.images.min() >= 0.0 and first.images.max() <= 1.0
    with pytest.raises(ConfigError):
        synthetic_dataset(1, class_count=2)


def test_load_named(tmp_path, rng):
    (tmp_path / "t10k-images-idx3-ubyte").write_bytes(_idx_images(rng.integers(0, 256, size=(2, 3, 3))))
    with gzip.open(tmp_path / "t10k-labels-idx1-ubyte.gz", "wb") as handle:
        handle.write(_idx_labels([7, 2]))
    test = load_named("mnist", tmp_path, "test")
    np.testing.assert_array_equal(test.labels, [8, 3])
    with pytest.raises(DatasetFormatError):
        load_named("mnist", tmp_path, "train")
    with pytest.raises(ConfigError):
        load_named("mnist", tmp_path, "validation")

    write_dataset(test, tmp_path / "small.cted")
    assert len(load_named("small.cted", tmp_path)) == 2
