import numpy as np
import pytest

from netdeconv.models.whitening import WhiteningConfig
from netdeconv.services.layers import BatchNorm, DeconvConv2d, DeconvLinear, Flatten, Linear
from netdeconv.services.networks import build_mlp, build_regressor, build_vgg_small


def test_mlp_first_layer_gets_input_settings(rng):
    network = build_mlp(in_features=64, hidden=16, variant="deconv",
                        whitening=WhiteningConfig(ns_iters=5))
    deconv = network.deconv_layers()
    assert isinstance(network.layers[0], Flatten)
    assert deconv[0].index == 1
    assert deconv[0].whitening.ns_iters == 15
    assert deconv[0].whitening.freeze_after == 200
    assert all(layer.whitening.ns_iters == 5 for layer in deconv[1:])
    assert all(layer.whitening.freeze_after is None for layer in deconv[1:])
    assert network.forward(rng.uniform(size=(6, 1, 8, 8))).shape == (6, 10)


def test_mlp_overrides_take_priority():
    override = WhiteningConfig(eps=0.01, ns_iters=2)
    network = build_mlp(in_features=16, hidden=8, variant="deconv", overrides={1: override})
    assert network.layers[1].whitening == override


@pytest.mark.parametrize("variant,expected", [("plain", Linear), ("batchnorm", BatchNorm),
                                              ("deconv", DeconvLinear)])
def test_regressor_variants_start_at_zero(rng, variant, expected):
    network = build_regressor(12, 3, variant)
    assert isinstance(network.layers[1], expected)
    for layer in network.layers:
        if isinstance(layer, Linear):
            assert np.all(layer.params["W"] == 0.0)
    out = network.forward(rng.uniform(size=(5, 1, 3, 4)))
    assert out.shape == (5, 3)


def test_batchnorm_mlp_layer_layout():
    network = build_mlp(in_features=16, hidden=8, depth=2, variant="batchnorm")
    kinds = [layer.kind for layer in network.layers]
    assert kinds == ["flatten", "linear", "batchnorm", "sigmoid", "linear", "batchnorm",
                     "sigmoid", "linear"]


def test_vgg_small_shapes(rng):
    network = build_vgg_small(in_channels=3, classes=10, image_size=16, widths=(4, 4, 8, 8),
                              whitening=WhiteningConfig(ns_iters=3))
    first = network.layers[0]
    assert isinstance(first, DeconvConv2d)
    assert first.whitening.ns_iters == 15
    out = network.forward(rng.uniform(size=(2, 3, 16, 16)))
    assert out.shape == (2, 10)


def test_whitening_diagnostics_after_training_forward(rng):
    network = build_mlp(in_features=16, hidden=8, depth=1, variant="deconv")
    network.set_diagnostics(True)
    network.forward(rng.uniform(size=(40, 1, 4, 4)))
    diag = network.whitening_diagnostics()
    assert set(diag) == {"diag_1", "diag_3"}
    assert all(np.isfinite(value) for value in diag.values())
