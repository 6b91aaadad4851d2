import numpy as np
import pytest

from netdeconv.errors import DataFormatError
from netdeconv.models.whitening import WhiteningConfig
from netdeconv.services.networks import build_mlp
from netdeconv.services.storage import (
    load_network,
    normalize_to_u8,
    read_ndcv,
    read_pnm,
    save_network,
    write_ndcv,
    write_pgm,
)


# NDCV

def test_ndcv_preserves_values(tmp_path, rng):
    matrix = rng.normal(size=(7, 3))
    path = write_ndcv(tmp_path / "m.ndcv", matrix)
    assert path.stat().st_size == 16 + 7 * 3 * 8
    np.testing.assert_array_equal(read_ndcv(path), matrix)


def test_ndcv_vectors_are_single_rows(tmp_path):
    path = write_ndcv(tmp_path / "v.ndcv", np.arange(4.0))
    assert read_ndcv(path).shape == (1, 4)


def test_ndcv_bad_magic(tmp_path):
    path = tmp_path / "bad.ndcv"
    path.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(DataFormatError) as info:
        read_ndcv(path)
    assert info.value.offset == 0


def test_ndcv_truncated_payload(tmp_path, rng):
    path = write_ndcv(tmp_path / "m.ndcv", rng.normal(size=(2, 2)))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(DataFormatError) as info:
        read_ndcv(path)
    assert info.value.offset == 16 + 24


# Checkpoints

def test_network_checkpoint_restores_predictions_and_state(tmp_path, rng):
    network = build_mlp(in_features=16, hidden=8, depth=1, variant="deconv",
                        overrides={1: WhiteningConfig(freeze_after=1, ns_iters=5)})
    x = rng.uniform(size=(30, 1, 4, 4))
    network.forward(x)
    network.eval()
    save_network(network, tmp_path / "ckpt")

    restored = load_network(tmp_path / "ckpt").eval()
    np.testing.assert_allclose(restored.predict(x), network.predict(x), atol=1e-12)
    assert restored.layers[1].whitener.frozen
    assert restored.layers[1].whitener.states[0].step == 1
    assert restored.name == network.name


# PGM / PPM

def test_pgm_pixels_survive(tmp_path, rng):
    pixels = rng.integers(0, 256, size=(5, 7)).astype(np.uint8)
    path = write_pgm(tmp_path / "img.pgm", pixels, normalize=False)
    np.testing.assert_array_equal(read_pnm(path), pixels)


def test_read_ppm_with_comment(tmp_path):
    payload = bytes(range(12))
    path = tmp_path / "img.ppm"
    path.write_bytes(b"P6\n# comentario\n2 2\n255\n" + payload)
    image = read_pnm(path)
    assert image.shape == (2, 2, 3)
    assert image[1, 1, 2] == 11


def test_pnm_rejects_16_bit(tmp_path):
    path = tmp_path / "deep.pgm"
    path.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(DataFormatError):
        read_pnm(path)


def test_pnm_truncated(tmp_path):
    path = tmp_path / "short.pgm"
    path.write_bytes(b"P5\n4 4\n255\n" + bytes(10))
    with pytest.raises(DataFormatError):
        read_pnm(path)


def test_normalize_to_u8():
    assert normalize_to_u8(np.array([[-1.0, 1.0]])).tolist() == [[0, 255]]
    assert normalize_to_u8(np.ones((2, 2))).max() == 0
