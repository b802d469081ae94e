"""Small differentiable CNN kernel in float64 numpy.

Parameters live in one flat vector (a "ParamVector"). Layout: layers in
order; for each parametric layer the weight block comes first (row-major),
then the bias.

    Conv2d   weight (out, in, k, k), bias (out,)
    Dense    weight (out, in),       bias (out,)

Inputs are C x H x W pixel arrays in [0, 255]; the model rescales them by
``input_scale`` and subtracts ``input_shift`` before the first layer.
Activations are kept channels-last internally, so ``Flatten`` emits features
in H, W, C order and a following Dense weight is indexed accordingly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NumericalError(FloatingPointError):
    """A forward or backward pass produced a non-finite value."""


@dataclass(frozen=True)
class Conv2d:
    out_channels: int
    kernel: int = 3
    stride: int = 1


@dataclass(frozen=True)
class Dense:
    out_features: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Union[Conv2d, Dense, ReLU, Flatten]


@dataclass(frozen=True)
class ModelArch:
    input_shape: tuple[int, int, int]
    layers: tuple[Layer, ...]
    n_classes: int
    # x / 64 - 2 maps [0, 255] onto roughly [-2, 2]; standardised inputs let
    # small high-frequency perturbations move the first layer noticeably
    input_scale: float = 1.0 / 64.0
    input_shift: float = 2.0
    # per-layer (input shape, output shape, param slices) resolved at construction
    _plan: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        plan = []
        shape: tuple[int, ...] = self.input_shape
        offset = 0
        for idx, layer in enumerate(self.layers):
            if isinstance(layer, Conv2d):
                if len(shape) != 3:
                    raise ValueError(f"layer {idx}: Conv2d needs C x H x W input, got {shape}")
                c, h, w = shape
                k, s = layer.kernel, layer.stride
                if k < 1 or s < 1 or h < k or w < k:
                    raise ValueError(f"layer {idx}: kernel {k}/stride {s} does not fit input {shape}")
                out = (layer.out_channels, (h - k) // s + 1, (w - k) // s + 1)
                n_w = layer.out_channels * c * k * k
                slices = (slice(offset, offset + n_w), slice(offset + n_w, offset + n_w + layer.out_channels))
                offset += n_w + layer.out_channels
            elif isinstance(layer, Dense):
                if len(shape) != 1:
                    raise ValueError(f"layer {idx}: Dense needs flat input, got {shape} (add Flatten)")
                n_w = layer.out_features * shape[0]
                out = (layer.out_features,)
                slices = (slice(offset, offset + n_w), slice(offset + n_w, offset + n_w + layer.out_features))
                offset += n_w + layer.out_features
            elif isinstance(layer, Flatten):
                out = (int(np.prod(shape)),)
                slices = None
            elif isinstance(layer, ReLU):
                out = shape
                slices = None
            else:
                raise TypeError(f"layer {idx}: unknown layer {layer!r}")
            plan.append((shape, out, slices))
            shape = out
        if shape != (self.n_classes,):
            raise ValueError(f"architecture ends in shape {shape}, expected ({self.n_classes},)")
        object.__setattr__(self, "_plan", tuple(plan))
        object.__setattr__(self, "_n_params", offset)

    @property
    def n_params(self) -> int:
        return self._n_params


def tiny_conv(n_classes: int = 10, input_shape=(3, 32, 32)) -> ModelArch:
    """conv 3->8 (3x3) -> relu -> conv 8->16 (3x3, stride 2) -> relu -> dense K."""
    return ModelArch(
        input_shape=input_shape,
        layers=(Conv2d(8, 3, 1), ReLU(), Conv2d(16, 3, 2), ReLU(), Flatten(), Dense(n_classes)),
        n_classes=n_classes,
    )


def init_params(arch: ModelArch, rng: np.random.Generator) -> np.ndarray:
    """He-normal weights, zero biases."""
    params = np.zeros(arch.n_params)
    for layer, (in_shape, _, slices) in zip(arch.layers, arch._plan):
        if slices is None:
            continue
        w_slice, _ = slices
        if isinstance(layer, Conv2d):
            fan_in = in_shape[0] * layer.kernel * layer.kernel
        else:
            fan_in = in_shape[0]
        params[w_slice] = rng.normal(0.0, np.sqrt(2.0 / fan_in), w_slice.stop - w_slice.start)
    return params


def _check_batch(arch: ModelArch, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1:] != arch.input_shape:
        raise ValueError(f"batch shape {X.shape} does not match model input {arch.input_shape}")
    return X


def _check_params(arch: ModelArch, params) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (arch.n_params,):
        raise ValueError(f"expected {arch.n_params} parameters, got shape {params.shape}")
    return params


def _conv_cols(x: np.ndarray, k: int, s: int) -> np.ndarray:
    # (N, H, W, C) -> (N, Ho, Wo, C*k*k), window order matching weight (C, k, k)
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
    n, ho, wo, c = win.shape[:4]
    return win.reshape(n, ho, wo, c * k * k)


def _finite(a: np.ndarray, idx: int, layer, stage: str) -> None:
    if not np.isfinite(a).all():
        raise NumericalError(f"non-finite {stage} at layer {idx} ({type(layer).__name__})")


def _run_forward(arch: ModelArch, params: np.ndarray, X: np.ndarray, keep: bool):
    # overflow is reported as NumericalError by _finite, not as a RuntimeWarning
    with np.errstate(over="ignore", invalid="ignore"):
        return _forward_layers(arch, params, X, keep)


def _forward_layers(arch: ModelArch, params: np.ndarray, X: np.ndarray, keep: bool):
    a = X.transpose(0, 2, 3, 1) * arch.input_scale - arch.input_shift
    caches = []
    for idx, (layer, (in_shape, out_shape, slices)) in enumerate(zip(arch.layers, arch._plan)):
        if isinstance(layer, Conv2d):
            c = in_shape[0]
            k, s = layer.kernel, layer.stride
            w = params[slices[0]].reshape(layer.out_channels, c * k * k)
            cols = _conv_cols(a, k, s)
            out = cols @ w.T + params[slices[1]]
            caches.append((cols, a.shape) if keep else None)
            a = out
        elif isinstance(layer, Dense):
            w = params[slices[0]].reshape(layer.out_features, in_shape[0])
            caches.append(a if keep else None)
            a = a @ w.T + params[slices[1]]
        elif isinstance(layer, ReLU):
            caches.append(a > 0 if keep else None)
            a = np.maximum(a, 0.0)
        else:
            caches.append(a.shape if keep else None)
            a = a.reshape(a.shape[0], -1)
        _finite(a, idx, layer, "activation")
    return a, caches


def forward(arch: ModelArch, params, X) -> np.ndarray:
    """Logits (N x K) for a batch of C x H x W images."""
    params = _check_params(arch, params)
    X = _check_batch(arch, X)
    logits, _ = _run_forward(arch, params, X, keep=False)
    return logits


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits (log-sum-exp form)."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_z[:, None]
    loss = -log_p[np.arange(n), labels].mean()
    dlogits = np.exp(log_p)
    dlogits[np.arange(n), labels] -= 1.0
    return float(loss), dlogits / n


def loss_and_grad(arch: ModelArch, params, X, labels) -> tuple[float, np.ndarray]:
    params = _check_params(arch, params)
    X = _check_batch(arch, X)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (X.shape[0],):
        raise ValueError(f"{labels.shape[0] if labels.ndim else 0} labels for {X.shape[0]} images")
    if labels.size and (labels.min() < 0 or labels.max() >= arch.n_classes):
        raise ValueError(f"labels must lie in [0, {arch.n_classes})")

    logits, caches = _run_forward(arch, params, X, keep=True)
    loss, delta = softmax_cross_entropy(logits, labels)
    if not np.isfinite(loss):
        raise NumericalError("non-finite loss")

    with np.errstate(over="ignore", invalid="ignore"):
        return loss, _backward(arch, params, caches, delta)


def _backward(arch: ModelArch, params: np.ndarray, caches: list, delta: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(params)
    for idx in range(len(arch.layers) - 1, -1, -1):
        layer = arch.layers[idx]
        in_shape, _, slices = arch._plan[idx]
        cache = caches[idx]
        if isinstance(layer, Conv2d):
            cols, x_shape = cache
            c = in_shape[0]
            k, s = layer.kernel, layer.stride
            n, ho, wo, o = delta.shape
            d2 = delta.reshape(-1, o)
            grad[slices[0]] = (d2.T @ cols.reshape(-1, c * k * k)).ravel()
            grad[slices[1]] = d2.sum(axis=0)
            if idx == 0:
                break
            w = params[slices[0]].reshape(o, c * k * k)
            dcols = (d2 @ w).reshape(n, ho, wo, c, k, k)
            dx = np.zeros(x_shape)
            for i in range(k):
                for j in range(k):
                    dx[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[..., i, j]
            delta = dx
        elif isinstance(layer, Dense):
            w = params[slices[0]].reshape(layer.out_features, in_shape[0])
            grad[slices[0]] = (delta.T @ cache).ravel()
            grad[slices[1]] = delta.sum(axis=0)
            delta = delta @ w
        elif isinstance(layer, ReLU):
            delta = delta * cache
        else:
            delta = delta.reshape(cache)
        _finite(delta, idx, layer, "gradient")
    return grad


@dataclass(frozen=True)
class SgdConfig:
    """SGD with heavy-ball momentum and L2 weight decay.

    ``lr_decay`` shrinks the learning rate multiplicatively once per local
    epoch: epoch ``e`` uses ``learning_rate * (1 - lr_decay) ** e``.
    """

    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay: float = 0.0

    def __post_init__(self):
        vals = (self.learning_rate, self.momentum, self.weight_decay, self.lr_decay)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("SgdConfig fields must be finite")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0 <= self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in [0, 1]")

    def lr_for_epoch(self, epoch: int) -> float:
        return self.learning_rate * (1.0 - self.lr_decay) ** epoch


def sgd_step(params, grad, velocity, cfg: SgdConfig, lr: float | None = None):
    """One update: v <- mu*v + g + wd*p ; p <- p - lr*v.  Returns (params, velocity)."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if velocity is None:
        velocity = np.zeros_like(params)
    if not (params.shape == grad.shape == velocity.shape):
        raise ValueError(f"length mismatch: params {params.shape}, grad {grad.shape}, velocity {velocity.shape}")
    lr = cfg.learning_rate if lr is None else lr
    velocity = cfg.momentum * velocity + grad + cfg.weight_decay * params
    return params - lr * velocity, velocity


BatchHook = Callable[[np.ndarray, np.ndarray, np.random.Generator], tuple]


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_sgd(
    arch: ModelArch,
    params,
    X: np.ndarray,
    y: np.ndarray,
    cfg: SgdConfig,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
    batch_hook: BatchHook | None = None,
) -> tuple[np.ndarray, list[float]]:
    """Minibatch SGD from a fresh momentum buffer.

    ``batch_hook(images, labels, rng)`` may rewrite each batch before the
    gradient step (the attack path uses it to inject poisoned samples).
    Returns the final parameters and the per-step losses.
    """
    params = _check_params(arch, params).copy()
    velocity = np.zeros_like(params)
    losses: list[float] = []
    if len(y) == 0:
        return params, losses
    for epoch in range(epochs):
        lr = cfg.lr_for_epoch(epoch)
        for idx in iterate_minibatches(len(y), batch_size, rng):
            xb, yb = X[idx], y[idx]
            if batch_hook is not None:
                xb, yb = batch_hook(xb, yb, rng)
            loss, grad = loss_and_grad(arch, params, xb, yb)
            params, velocity = sgd_step(params, grad, velocity, cfg, lr)
            losses.append(loss)
    return params, losses


def predict(arch: ModelArch, params, X, batch_size: int = 512) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    out = np.empty(len(X), dtype=np.int64)
    for start in range(0, len(X), batch_size):
        out[start:start + batch_size] = forward(arch, params, X[start:start + batch_size]).argmax(axis=1)
    return out


def accuracy(arch: ModelArch, params, X, y) -> float:
    if len(y) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(predict(arch, params, X) == np.asarray(y)))
