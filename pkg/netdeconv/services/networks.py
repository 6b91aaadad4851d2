"""
Constructores de las redes de los experimentos: regresor de una capa, MLP
de 3 capas ocultas y una CNN pequeña estilo VGG.
"""
from typing import List, Literal, Optional, Sequence

from netdeconv.models.whitening import WhiteningConfig
from netdeconv.services.layers import (
    BatchNorm,
    Conv2d,
    DeconvConv2d,
    DeconvLinear,
    Flatten,
    Layer,
    Linear,
    MaxPool2d,
    Network,
    ReLU,
    Sigmoid,
)
from netdeconv.services.linalg import seeded_rng


Variant = Literal["plain", "batchnorm", "deconv"]


def _whitening_for(index: int, base: WhiteningConfig,
                   overrides: Optional[dict] = None, first: bool = False) -> WhiteningConfig:
    """
    La primera capa con pesos usa 15 iteraciones y congela D tras 200 pasos;
    las demás heredan `base`. `overrides` (por índice de capa) tiene prioridad.
    """
    if overrides and index in overrides:
        return overrides[index]
    if first:
        return base.model_copy(update={"ns_iters": max(base.ns_iters, 15),
                                       "freeze_after": base.freeze_after or 200})
    return base


def build_regressor(in_features: int, out_features: int, variant: Variant = "plain",
                    whitening: Optional[WhiteningConfig] = None, seed: int = 0,
                    overrides: Optional[dict] = None) -> Network:
    """Modelo lineal de una capa (regresión L2 o logística) sobre la entrada aplanada."""
    rng = seeded_rng(seed)
    base = whitening or WhiteningConfig()
    layers: List[Layer] = [Flatten()]
    if variant == "deconv":
        layers.append(DeconvLinear(in_features, out_features,
                                   _whitening_for(1, base, overrides, first=True), rng))
    elif variant == "batchnorm":
        layers += [BatchNorm(in_features), Linear(in_features, out_features, rng=rng)]
    else:
        layers.append(Linear(in_features, out_features, rng=rng))
    # w = 0 al inicio, como en el análisis de convergencia
    for layer in layers:
        if isinstance(layer, Linear):
            layer.params["W"][...] = 0.0
    return Network(layers, name=f"regressor-{variant}")


def build_mlp(in_features: int = 784, hidden: int = 128, depth: int = 3,
              classes: int = 10, variant: Variant = "deconv",
              whitening: Optional[WhiteningConfig] = None, seed: int = 0,
              overrides: Optional[dict] = None) -> Network:
    """
    MLP con `depth` capas ocultas sigmoides de `hidden` nodos sobre la entrada aplanada.
    """
    rng = seeded_rng(seed)
    base = whitening or WhiteningConfig()
    widths = [in_features] + [hidden] * depth
    layers: List[Layer] = [Flatten()]
    for position, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        if variant == "deconv":
            layers.append(DeconvLinear(fan_in, fan_out,
                                       _whitening_for(len(layers), base, overrides,
                                                      first=position == 0), rng))
        else:
            layers.append(Linear(fan_in, fan_out, rng=rng))
            if variant == "batchnorm":
                layers.append(BatchNorm(fan_out))
        layers.append(Sigmoid())
    head_index = len(layers)
    if variant == "deconv":
        layers.append(DeconvLinear(widths[-1], classes,
                                   _whitening_for(head_index, base, overrides), rng))
    else:
        layers.append(Linear(widths[-1], classes, rng=rng))
    return Network(layers, name=f"mlp-{variant}")


def build_vgg_small(in_channels: int = 3, classes: int = 10, image_size: int = 32,
                    widths: Sequence[int] = (64, 128, 256, 256),
                    pools_after: Sequence[int] = (0, 1, 3),
                    variant: Variant = "deconv",
                    whitening: Optional[WhiteningConfig] = None, seed: int = 0,
                    overrides: Optional[dict] = None) -> Network:
    """
    CNN estilo VGG: conv3-64, conv3-128, conv3-256 ×2 con max pooling y una
    capa lineal final.
    """
    rng = seeded_rng(seed)
    base = whitening or WhiteningConfig()
    layers: List[Layer] = []
    channels, size = in_channels, image_size
    for position, width in enumerate(widths):
        index = len(layers)
        if variant == "deconv":
            layers.append(DeconvConv2d(channels, width, 3,
                                       whitening=_whitening_for(index, base, overrides,
                                                                first=position == 0),
                                       rng=rng))
        else:
            layers.append(Conv2d(channels, width, 3, rng=rng))
            if variant == "batchnorm":
                layers.append(BatchNorm(width))
        layers.append(ReLU())
        if position in pools_after:
            layers.append(MaxPool2d())
            size //= 2
        channels = width
    layers.append(Flatten())
    features = channels * size * size
    head_index = len(layers)
    if variant == "deconv":
        layers.append(DeconvLinear(features, classes,
                                   _whitening_for(head_index, base, overrides), rng))
    else:
        layers.append(Linear(features, classes, rng=rng))
    return Network(layers, name=f"vgg-small-{variant}")
