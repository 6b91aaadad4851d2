import struct

import numpy as np
import pytest

from netdeconv.errors import ContractError, DataFormatError
from netdeconv.models.data import Dataset
from netdeconv.services.data_io import (
    CIFAR_RECORD,
    IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
    blur_valid,
    gaussian_kernel,
    load_cifar10,
    load_cifar10_dir,
    load_idx,
    load_mnist_dir,
    make_blur_problem,
    read_idx,
    sample_patch_batch,
    save_idx,
    synthetic_classification,
    synthetic_natural_images,
    write_idx,
)


# IDX

def test_load_idx_scales_to_unit_interval(tmp_path):
    images = np.array([[[0, 255], [51, 102]]], dtype=np.uint8)
    write_idx(tmp_path / "img", images)
    write_idx(tmp_path / "lbl", np.array([7], dtype=np.uint8))
    dataset = load_idx(tmp_path / "img", tmp_path / "lbl")
    assert dataset.images.shape == (1, 1, 2, 2)
    np.testing.assert_allclose(dataset.images[0, 0], [[0.0, 1.0], [0.2, 0.4]])
    assert dataset.labels.tolist() == [7]


def test_idx_header_magics(tmp_path):
    path = write_idx(tmp_path / "img", np.zeros((2, 3, 3), dtype=np.uint8))
    assert struct.unpack(">I", path.read_bytes()[:4])[0] == IDX_IMAGES_MAGIC
    path = write_idx(tmp_path / "lbl", np.zeros(2, dtype=np.uint8))
    assert struct.unpack(">I", path.read_bytes()[:4])[0] == IDX_LABELS_MAGIC


def test_read_idx_wrong_magic(tmp_path):
    path = write_idx(tmp_path / "lbl", np.zeros(3, dtype=np.uint8))
    with pytest.raises(DataFormatError) as info:
        read_idx(path, IDX_IMAGES_MAGIC)
    assert info.value.offset == 0


def test_read_idx_truncated_payload(tmp_path):
    path = write_idx(tmp_path / "img", np.zeros((2, 4, 4), dtype=np.uint8))
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(DataFormatError) as info:
        read_idx(path)
    assert info.value.offset == len(raw) - 5


def test_read_idx_trailing_bytes(tmp_path):
    path = write_idx(tmp_path / "img", np.zeros((1, 2, 2), dtype=np.uint8))
    raw = path.read_bytes()
    path.write_bytes(raw + b"\x00")
    with pytest.raises(DataFormatError) as info:
        read_idx(path)
    assert info.value.offset == len(raw)


def test_save_idx_rounds_pixels(tmp_path):
    dataset = Dataset(np.full((2, 1, 2, 2), 0.5), np.array([1, 2]))
    save_idx(dataset, tmp_path / "img", tmp_path / "lbl")
    assert read_idx(tmp_path / "img").max() == 128


def test_load_mnist_dir(mnist_dir):
    train = load_mnist_dir(mnist_dir, "train")
    test = load_mnist_dir(mnist_dir, "test")
    assert len(train) == 12 and len(test) == 6
    assert train.images.shape[1:] == (1, 28, 28)


def test_load_mnist_dir_accepts_dotted_names(mnist_dir):
    for path in mnist_dir.iterdir():
        path.rename(mnist_dir / path.name.replace("-idx", ".idx"))
    assert len(load_mnist_dir(mnist_dir, "test")) == 6


# CIFAR-10

def _cifar_bytes(labels):
    records = []
    for label in labels:
        records.append(bytes([label]) + bytes(range(256)) * 12)
    return b"".join(records)


def test_load_cifar10_records(tmp_path):
    path = tmp_path / "data_batch_1.bin"
    path.write_bytes(_cifar_bytes([3, 9]))
    dataset = load_cifar10(path)
    assert dataset.images.shape == (2, 3, 32, 32)
    assert dataset.labels.tolist() == [3, 9]
    assert dataset.images[0, 0, 0, 1] == pytest.approx(1 / 255)


def test_load_cifar10_bad_size(tmp_path):
    path = tmp_path / "data_batch_1.bin"
    path.write_bytes(_cifar_bytes([1]) + b"\x00" * 10)
    with pytest.raises(DataFormatError) as info:
        load_cifar10(path)
    assert info.value.offset == CIFAR_RECORD


def test_load_cifar10_label_out_of_range(tmp_path):
    path = tmp_path / "data_batch_1.bin"
    path.write_bytes(_cifar_bytes([1, 10]))
    with pytest.raises(DataFormatError) as info:
        load_cifar10(path)
    assert info.value.offset == CIFAR_RECORD


def test_load_cifar10_dir(tmp_path):
    nested = tmp_path / "cifar-10-batches-bin"
    nested.mkdir()
    (nested / "test_batch.bin").write_bytes(_cifar_bytes([0, 1, 2]))
    assert len(load_cifar10_dir(tmp_path, "test")) == 3
    with pytest.raises(FileNotFoundError):
        load_cifar10_dir(tmp_path, "train")


# Desenfoque

def test_gaussian_kernel():
    kernel = gaussian_kernel(5, 1.0)
    assert kernel.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(kernel, kernel.T)
    assert kernel.argmax() == 12
    with pytest.raises(ContractError):
        gaussian_kernel(4, 1.0)


def test_zero_sigma_is_delta(rng):
    kernel = gaussian_kernel(3, 0.0)
    image = rng.normal(size=(6, 6))
    np.testing.assert_allclose(blur_valid(image, kernel), image[1:-1, 1:-1])


def test_blur_problem_is_reproducible(rng):
    image = rng.uniform(size=(12, 12))
    first = make_blur_problem(image, k=5, noise_sigma=0.01, seed=4)
    second = make_blur_problem(image, k=5, noise_sigma=0.01, seed=4)
    assert first.y_blurred.shape == (8, 8)
    np.testing.assert_array_equal(first.y_blurred, second.y_blurred)
    clean = make_blur_problem(image, k=5, noise_sigma=0.0)
    np.testing.assert_allclose(clean.y_blurred, blur_valid(image, clean.true_kernel))


# Muestreo y datos sintéticos

def test_sample_patch_batch():
    dataset = Dataset(np.arange(10.0).reshape(10, 1, 1, 1), np.zeros(10, dtype=np.uint8))
    first = sample_patch_batch(dataset, 4, seed=1)
    assert np.array_equal(first, sample_patch_batch(dataset, 4, seed=1))
    assert len(np.unique(first)) == 4
    with pytest.raises(ContractError):
        sample_patch_batch(dataset, 11)
    assert sample_patch_batch(dataset, 11, replace=True).shape[0] == 11


def test_synthetic_natural_images():
    images = synthetic_natural_images(4, channels=3, size=16, seed=2)
    assert images.shape == (4, 3, 16, 16)
    assert images.min() >= 0.0 and images.max() <= 1.0
    np.testing.assert_array_equal(images, synthetic_natural_images(4, 3, 16, seed=2))
    left = images[..., :-1].ravel()
    right = images[..., 1:].ravel()
    assert np.corrcoef(left, right)[0, 1] > 0.5


def test_synthetic_classification():
    train = synthetic_classification(20, channels=1, size=8, seed=0)
    test = synthetic_classification(10, channels=1, size=8, seed=0, split="test")
    assert train.images.shape == (20, 1, 8, 8)
    assert train.labels.max() < 10
    assert test.split == "test"
    assert not np.array_equal(train.images[:10], test.images)
