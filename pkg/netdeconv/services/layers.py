"""
Capas con gradientes en modo reverso: convolución y lineal (con y sin
deconvolución), batch norm, activaciones, pooling y pérdidas.
"""
from abc import ABC, abstractmethod
from typing import Any, Callable, ClassVar, Dict, List, Optional, Tuple

import numpy as np
import structlog

from netdeconv.config import settings
from netdeconv.errors import ContractError, InsufficientDataError, ShapeError, StateError
from netdeconv.models.whitening import PatchMatrix, PatchSpec, WhiteningConfig, WhiteningState
from netdeconv.services.linalg import RandomStream, matmul, seeded_rng
from netdeconv.services.patches import col2im, im2col, nchw_to_rows, rows_to_nchw
from netdeconv.services.whitening import GroupWhitener


logger = structlog.get_logger(__name__)

# Ancho máximo de bloque para capas totalmente conectadas
FC_MAX_BLOCK = 512


def he_uniform(rng: RandomStream, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    """Inicialización uniforme escalada por fan-in (estilo He)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(settings.activation_dtype)


class Layer(ABC):
    """
    Capa base con parámetros, gradientes y caché del forward.
    """
    kind: ClassVar[str] = "layer"

    def __init__(self):
        self.training = True
        self.index: Optional[int] = None
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self._cache: Any = None

    def train(self) -> "Layer":
        self.training = True
        return self

    def eval(self) -> "Layer":
        self.training = False
        return self

    def zero_grads(self) -> None:
        self.grads = {name: np.zeros_like(value) for name, value in self.params.items()}

    def _require_cache(self) -> Any:
        if self._cache is None:
            raise StateError(f"{self.kind}: backward sin forward previo")
        return self._cache

    @abstractmethod
    def forward(self, x: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        ...

    def config(self) -> Dict[str, Any]:
        """Argumentos del constructor, para los checkpoints."""
        return {}

    def buffers(self) -> Dict[str, np.ndarray]:
        """Estado no entrenable."""
        return {}

    def load_buffers(self, tensors: Dict[str, np.ndarray]) -> None:
        pass

    def buffer_meta(self) -> Dict[str, Any]:
        return {}

    def load_buffer_meta(self, meta: Dict[str, Any]) -> None:
        pass


class _Affine(Layer):
    """
    Parte común de conv y lineal: y = cols·Wᵀ + b, con ganchos para
    transformar las columnas (deconvolución) y su gradiente.
    """

    def _columns(self, X: PatchMatrix) -> np.ndarray:
        return X.data

    def _project(self, grad_cols: np.ndarray) -> np.ndarray:
        return grad_cols

    def _affine_forward(self, X: PatchMatrix) -> np.ndarray:
        cols = self._columns(X)
        self._cache = (X, cols)
        return matmul(cols, self.params["W"].T.astype(cols.dtype)) + self.params["b"]

    def _affine_backward(self, g: np.ndarray) -> np.ndarray:
        X, cols = self._require_cache()
        self.grads["W"] = matmul(g.T, cols).astype(self.params["W"].dtype)
        self.grads["b"] = g.sum(axis=0).astype(self.params["b"].dtype)
        return self._project(matmul(g, self.params["W"].astype(g.dtype)))


class Conv2d(_Affine):
    """
    Convolución como producto matricial: W tiene forma (C_out, C_in·k·k).
    """
    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3,
                 stride: int = 1, padding: Optional[int] = None, block_size: int = 64,
                 rng: Optional[RandomStream] = None):
        super().__init__()
        rng = rng or seeded_rng(0)
        padding = kernel // 2 if padding is None else padding
        self.spec = PatchSpec(kernel, stride, padding, in_channels, block_size)
        self.out_channels = out_channels
        fan_in = self.spec.columns
        self.params = {
            "W": he_uniform(rng, (out_channels, fan_in), fan_in),
            "b": np.zeros(out_channels, dtype=settings.activation_dtype),
        }
        self.zero_grads()

    def config(self) -> Dict[str, Any]:
        return {
            "in_channels": self.spec.channels_in,
            "out_channels": self.out_channels,
            "kernel": self.spec.kernel,
            "stride": self.spec.stride,
            "padding": self.spec.padding,
            "block_size": self.spec.block_size,
        }

    def forward(self, x: np.ndarray) -> np.ndarray:
        X = im2col(x, self.spec)
        self._x_shape = x.shape
        y = self._affine_forward(X)
        return rows_to_nchw(y, X.batch, X.out_h, X.out_w).astype(x.dtype, copy=False)

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        self._require_cache()
        grad_cols = self._affine_backward(nchw_to_rows(grad_y))
        return col2im(grad_cols, self.spec, self._x_shape).astype(grad_y.dtype, copy=False)


class Linear(_Affine):
    """
    Capa totalmente conectada; equivale a una conv 1×1 sobre un mapa 1×1.
    """
    kind = "linear"

    def __init__(self, in_features: int, out_features: int, block_size: Optional[int] = None,
                 rng: Optional[RandomStream] = None):
        super().__init__()
        rng = rng or seeded_rng(0)
        block_size = block_size or min(in_features, FC_MAX_BLOCK)
        self.spec = PatchSpec(1, 1, 0, in_features, block_size)
        self.out_features = out_features
        self.params = {
            "W": he_uniform(rng, (out_features, in_features), in_features),
            "b": np.zeros(out_features, dtype=settings.activation_dtype),
        }
        self.zero_grads()

    def config(self) -> Dict[str, Any]:
        return {
            "in_features": self.spec.channels_in,
            "out_features": self.out_features,
            "block_size": self.spec.block_size,
        }

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.spec.channels_in:
            raise ShapeError(f"linear espera (N, {self.spec.channels_in}), forma {x.shape}")
        X = PatchMatrix(x, self.spec, batch=x.shape[0], out_h=1, out_w=1)
        return self._affine_forward(X).astype(x.dtype, copy=False)

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        return self._affine_backward(grad_y).astype(grad_y.dtype, copy=False)


class _DeconvMixin:
    """
    Aplica la deconvolución (X − μ)·D por grupos antes de los pesos.
    D se trata como constante en el backward.
    """
    whitener: GroupWhitener

    def _init_whitening(self, whitening: Optional[WhiteningConfig]) -> None:
        self.whitening = whitening or WhiteningConfig()
        self.whitener = GroupWhitener(self.spec, self.whitening)

    def _columns(self, X: PatchMatrix) -> np.ndarray:
        self.whitener.layer_index = self.index
        return self.whitener.whiten(X, self.training)

    def _project(self, grad_cols: np.ndarray) -> np.ndarray:
        return self.whitener.project_gradient(grad_cols)

    def whitened_columns(self) -> np.ndarray:
        """Columnas blanqueadas del último forward."""
        _, cols = self._require_cache()
        return cols

    def buffers(self) -> Dict[str, np.ndarray]:
        tensors = {}
        for g, state in enumerate(self.whitener.states):
            tensors[f"g{g}.mu"] = state.mu
            tensors[f"g{g}.D"] = state.D
            tensors[f"g{g}.running_mu"] = state.running_mu
            tensors[f"g{g}.running_D"] = state.running_D
        return tensors

    def load_buffers(self, tensors: Dict[str, np.ndarray]) -> None:
        for g, state in enumerate(self.whitener.states):
            state.mu = tensors[f"g{g}.mu"].reshape(-1)
            state.D = tensors[f"g{g}.D"]
            state.running_mu = tensors[f"g{g}.running_mu"].reshape(-1)
            state.running_D = tensors[f"g{g}.running_D"]

    def buffer_meta(self) -> Dict[str, Any]:
        return {
            "whitening": self.whitening.model_dump(),
            "groups": [{"step": s.step, "frozen": s.frozen} for s in self.whitener.states],
        }

    def load_buffer_meta(self, meta: Dict[str, Any]) -> None:
        for state, values in zip(self.whitener.states, meta.get("groups", [])):
            state.step = int(values["step"])
            state.frozen = bool(values["frozen"])


class DeconvConv2d(_DeconvMixin, Conv2d):
    """
    Convolución precedida de deconvolución de parches: y = (X − μ)·D·w + b.
    """
    kind = "deconv_conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3,
                 stride: int = 1, padding: Optional[int] = None,
                 whitening: Optional[WhiteningConfig] = None,
                 rng: Optional[RandomStream] = None, block_size: Optional[int] = None):
        whitening = whitening or WhiteningConfig()
        super().__init__(in_channels, out_channels, kernel, stride, padding,
                         block_size or whitening.block_size, rng)
        self._init_whitening(whitening)

    def config(self) -> Dict[str, Any]:
        values = super().config()
        values["whitening"] = self.whitening.model_dump()
        return values


class DeconvLinear(_DeconvMixin, Linear):
    """
    Capa lineal precedida de deconvolución; B = número de entradas (máx. 512).
    """
    kind = "deconv_linear"

    def __init__(self, in_features: int, out_features: int,
                 whitening: Optional[WhiteningConfig] = None,
                 rng: Optional[RandomStream] = None, block_size: Optional[int] = None):
        whitening = whitening or WhiteningConfig()
        super().__init__(in_features, out_features,
                         block_size or min(in_features, FC_MAX_BLOCK), rng)
        self._init_whitening(whitening)

    def config(self) -> Dict[str, Any]:
        values = super().config()
        values["whitening"] = self.whitening.model_dump()
        return values


def fold_implicit(layer: _DeconvMixin) -> Tuple[np.ndarray, np.ndarray]:
    """
    Pliega μ y D en los parámetros: w_eff = W·Dᵀ y b_eff = b − μ·D·Wᵀ por grupo.

    Raises:
        ContractError: Si la capa está en entrenamiento sin congelar
    """
    if not isinstance(layer, _DeconvMixin):
        raise ContractError(f"{type(layer).__name__} no es una capa de deconvolución")
    if layer.training and not layer.whitener.frozen:
        raise ContractError("fold_implicit requiere modo eval o D congelada")

    W = np.asarray(layer.params["W"], dtype=np.float64)
    w_eff = W.copy()
    b_eff = np.asarray(layer.params["b"], dtype=np.float64).copy()
    for cols, (mu, D) in zip(layer.spec.group_slices(), layer.whitener.effective(training=False)):
        W_g = W[:, cols]
        w_eff[:, cols] = W_g @ D.T
        b_eff -= (mu @ D) @ W_g.T
    return w_eff, b_eff


def to_plain(layer: _DeconvMixin) -> _Affine:
    """
    Capa conv/lineal común con los parámetros plegados, en modo eval.
    """
    w_eff, b_eff = fold_implicit(layer)
    if isinstance(layer, DeconvConv2d):
        plain: _Affine = Conv2d(layer.spec.channels_in, layer.out_channels, layer.spec.kernel,
                                layer.spec.stride, layer.spec.padding, layer.spec.block_size)
    else:
        plain = Linear(layer.spec.channels_in, layer.out_features, layer.spec.block_size)
    plain.params = {"W": w_eff, "b": b_eff}
    plain.zero_grads()
    plain.index = layer.index
    return plain.eval()


class BatchNorm(Layer):
    """
    Estandarización por canal con escala γ y desplazamiento β. Acepta
    entradas (N, C) o (N, C, H, W).
    """
    kind = "batchnorm"

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.params = {
            "gamma": np.ones(num_features, dtype=settings.activation_dtype),
            "beta": np.zeros(num_features, dtype=settings.activation_dtype),
        }
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.zero_grads()

    def config(self) -> Dict[str, Any]:
        return {"num_features": self.num_features, "eps": self.eps, "momentum": self.momentum}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def load_buffers(self, tensors: Dict[str, np.ndarray]) -> None:
        self.running_mean = tensors["running_mean"].reshape(-1)
        self.running_var = tensors["running_var"].reshape(-1)

    @staticmethod
    def _rows(x: np.ndarray) -> np.ndarray:
        return nchw_to_rows(x) if x.ndim == 4 else x

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim not in (2, 4) or x.shape[1] != self.num_features:
            raise ShapeError(f"batchnorm espera {self.num_features} canales, forma {x.shape}")
        rows = self._rows(x)
        if self.training:
            if x.shape[0] < 2:
                raise InsufficientDataError("batch norm en entrenamiento con un lote de 1")
            mean = rows.mean(axis=0)
            var = rows.var(axis=0)
            n = rows.shape[0]
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = ((1 - self.momentum) * self.running_var
                                + self.momentum * var * n / max(n - 1, 1))
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (rows - mean) * inv_std
        self._cache = (x.shape, x_hat, inv_std)
        out = x_hat * self.params["gamma"] + self.params["beta"]
        if x.ndim == 4:
            n, _, h, w = x.shape
            out = rows_to_nchw(out, n, h, w)
        return out.astype(x.dtype, copy=False)

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        shape, x_hat, inv_std = self._require_cache()
        g = self._rows(grad_y)
        self.grads["gamma"] = (g * x_hat).sum(axis=0)
        self.grads["beta"] = g.sum(axis=0)
        dx_hat = g * self.params["gamma"]
        if self.training:
            n = g.shape[0]
            dx = (inv_std / n) * (n * dx_hat - dx_hat.sum(axis=0)
                                  - x_hat * (dx_hat * x_hat).sum(axis=0))
        else:
            dx = dx_hat * inv_std
        if len(shape) == 4:
            n, _, h, w = shape
            dx = rows_to_nchw(dx, n, h, w)
        return dx.astype(grad_y.dtype, copy=False)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = x > 0
        return np.where(self._cache, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        return np.where(self._require_cache(), grad_y, 0).astype(grad_y.dtype, copy=False)


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x: np.ndarray) -> np.ndarray:
        y = sigmoid(x)
        self._cache = y
        return y

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        y = self._require_cache()
        return grad_y * y * (1.0 - y)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        return grad_y.reshape(self._require_cache())


class MaxPool2d(Layer):
    """Max pooling 2×2 con stride 2."""
    kind = "maxpool2d"

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool 2x2 requiere dimensiones pares, forma {x.shape}")
        windows = (x.reshape(n, c, h // 2, 2, w // 2, 2)
                   .transpose(0, 1, 2, 4, 3, 5)
                   .reshape(n, c, h // 2, w // 2, 4))
        index = windows.argmax(axis=-1)
        self._cache = (x.shape, index)
        return np.take_along_axis(windows, index[..., None], axis=-1)[..., 0]

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        shape, index = self._require_cache()
        n, c, h, w = shape
        windows = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad_y.dtype)
        np.put_along_axis(windows, index[..., None], grad_y[..., None], axis=-1)
        return (windows.reshape(n, c, h // 2, w // 2, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, h, w))


LAYER_TYPES: Dict[str, type] = {
    cls.kind: cls
    for cls in (Conv2d, Linear, DeconvConv2d, DeconvLinear, BatchNorm, ReLU, Sigmoid,
                Flatten, MaxPool2d)
}


def build_layer(kind: str, config: Dict[str, Any]) -> Layer:
    """Reconstruye una capa a partir de su tipo y configuración."""
    if kind not in LAYER_TYPES:
        raise ContractError(f"tipo de capa desconocido: {kind}")
    values = dict(config)
    if "whitening" in values:
        values["whitening"] = WhiteningConfig(**values["whitening"])
    return LAYER_TYPES[kind](**values)


# Pérdidas: cada una devuelve (pérdida, gradiente respecto a la predicción)

def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    positive = z >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-z[positive]))
    exp_z = np.exp(z[~positive])
    out[~positive] = exp_z / (1.0 + exp_z)
    return out


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Entropía cruzada media con softmax; `labels` son índices de clase."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -float(log_probs[np.arange(n), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def l2_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """½·(1/N)·‖pred − target‖²"""
    if pred.shape != target.shape:
        raise ShapeError(f"formas distintas: {pred.shape} vs {target.shape}")
    n = pred.shape[0]
    diff = pred - target
    return 0.5 * float(np.sum(diff * diff)) / n, diff / n


def logistic_loss(logits: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Entropía cruzada binaria sobre logits, sumada por salida y promediada por muestra."""
    if logits.shape != target.shape:
        raise ShapeError(f"formas distintas: {logits.shape} vs {target.shape}")
    n = logits.shape[0]
    loss = float(np.sum(np.logaddexp(0.0, logits) - target * logits)) / n
    return loss, (sigmoid(logits) - target) / n


LOSSES: Dict[str, Callable[[np.ndarray, np.ndarray], Tuple[float, np.ndarray]]] = {
    "xent": softmax_xent,
    "l2": l2_loss,
    "logistic": logistic_loss,
}


def loss_targets(loss: str, labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Índices para xent; codificación one-hot para l2 y logistic."""
    if loss == "xent":
        return labels.astype(np.int64)
    return np.eye(num_classes)[labels]


class Network:
    """
    Grafo secuencial de capas con ranuras de parámetros y gradientes.
    """

    def __init__(self, layers: List[Layer], name: str = "network"):
        self.layers = layers
        self.name = name
        for index, layer in enumerate(layers):
            layer.index = index

    def __len__(self) -> int:
        return len(self.layers)

    def train(self) -> "Network":
        for layer in self.layers:
            layer.train()
        return self

    def eval(self) -> "Network":
        for layer in self.layers:
            layer.eval()
        return self

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def parameters(self) -> List[Tuple[str, np.ndarray, np.ndarray]]:
        """(nombre, parámetro, gradiente) de todas las capas."""
        entries = []
        for layer in self.layers:
            for name, value in layer.params.items():
                entries.append((f"{layer.index}.{name}", value, layer.grads[name]))
        return entries

    def deconv_layers(self) -> List[_DeconvMixin]:
        return [layer for layer in self.layers if isinstance(layer, _DeconvMixin)]

    def set_diagnostics(self, enabled: bool) -> None:
        for layer in self.deconv_layers():
            layer.whitener.diagnostics = enabled

    def whitening_diagnostics(self) -> Dict[str, float]:
        """Mayor residuo ‖D·D·Cov − I‖_F por capa de deconvolución."""
        diag = {}
        for layer in self.deconv_layers():
            values = [r for r in layer.whitener.residuals() if r is not None]
            diag[f"diag_{layer.index}"] = max(values) if values else float("nan")
        return diag

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Forward por lotes sin alterar el modo de las capas."""
        outputs = [self.forward(x[start:start + batch_size])
                   for start in range(0, x.shape[0], batch_size)]
        return np.concatenate(outputs, axis=0)

    def fold(self) -> "Network":
        """Copia para inferencia con cada deconvolución plegada en sus pesos."""
        layers = [to_plain(layer) if isinstance(layer, _DeconvMixin) else layer
                  for layer in self.layers]
        return Network(layers, name=f"{self.name}-folded").eval()
