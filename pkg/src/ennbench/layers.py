"""Composable layers, deterministic initializers, and network builders."""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor, conv2d

INIT_SCHEMES = ("uniform-fan-in", "zeros")


def init_array(scheme: str, seed, shape, fan_in: int) -> np.ndarray:
    """Deterministic float32 parameter init.

    Same (scheme, seed, shape) always yields bit-identical values.
    ``uniform-fan-in`` draws from U(-1/sqrt(fan_in), +1/sqrt(fan_in)).
    """
    if scheme not in INIT_SCHEMES:
        raise ContractError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")
    if scheme == "zeros":
        return np.zeros(shape, dtype=np.float32)
    bound = 1.0 / np.sqrt(fan_in)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Dense:
    """Affine layer: x @ w + b with w of shape (in, out)."""

    kind = "dense"

    def __init__(self, in_features: int, out_features: int, *, scheme="uniform-fan-in", seed=0):
        if in_features < 1 or out_features < 1:
            raise ContractError(f"dense sizes must be positive, got {in_features}, {out_features}")
        self.in_features = in_features
        self.out_features = out_features
        self.w = Tensor(init_array(scheme, [seed, 0], (in_features, out_features), in_features),
                        requires_grad=True)
        self.b = Tensor(init_array(scheme, [seed, 1], (out_features,), in_features),
                        requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x.matmul(self.w).add_bias(self.b)

    def params(self):
        return [self.w, self.b]


class Conv2d:
    """Valid-padding convolution with per-channel bias."""

    kind = "conv"

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1,
                 *, scheme="uniform-fan-in", seed=0):
        fan_in = in_channels * kernel * kernel
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.w = Tensor(init_array(scheme, [seed, 0], (out_channels, in_channels, kernel, kernel), fan_in),
                        requires_grad=True)
        self.b = Tensor(init_array(scheme, [seed, 1], (out_channels,), fan_in), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.stride).add_channel_bias(self.b)

    def params(self):
        return [self.w, self.b]


class ReLU:
    kind = "relu"

    def __call__(self, x: Tensor) -> Tensor:
        return x.relu()

    def params(self):
        return []


class Flatten:
    kind = "flatten"

    def __call__(self, x: Tensor) -> Tensor:
        return x.flatten2d()

    def params(self):
        return []


class Sequential:
    """Layer chain; owns the parameter list in application order."""

    def __init__(self, layers):
        self.layers = list(layers)

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params():
            p.requires_grad = bool(flag)


def build_mlp(layer_sizes, seed: int, *, scheme="uniform-fan-in") -> Sequential:
    """Dense->ReLU stack with a linear final layer.

    ``layer_sizes`` lists at least [input, output]; hidden sizes between.
    """
    sizes = list(layer_sizes)
    if len(sizes) < 2:
        raise ContractError(f"build_mlp needs at least input and output sizes, got {sizes}")
    if any(s < 1 for s in sizes):
        raise ContractError(f"build_mlp sizes must be positive, got {sizes}")
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense(a, b, scheme=scheme, seed=[seed, i]))
        if i < len(sizes) - 2:
            layers.append(ReLU())
    return Sequential(layers)


class ConvNet:
    """Small conv->relu stack with a dense head; exposes pre-head features.

    Images are (N, C, H, W). The feature tap returns the flattened output
    of the last conv block, before the classification head.
    """

    def __init__(self, image_shape, channels, classes: int, *, kernel=3, stride=2,
                 scheme="uniform-fan-in", seed=0):
        image_shape = tuple(int(v) for v in image_shape)
        if len(image_shape) != 3:
            raise ShapeError(f"image_shape must be (C, H, W), got {image_shape}")
        if classes < 1:
            raise ContractError(f"classes must be positive, got {classes}")
        channels = [int(c) for c in channels]
        if not channels or any(c < 1 for c in channels):
            raise ContractError(f"channels must be a non-empty positive list, got {channels}")

        c, h, w = image_shape
        self.blocks = []
        for i, out_c in enumerate(channels):
            if kernel > h or kernel > w:
                raise ShapeError(
                    f"conv layer {i}: kernel {kernel} exceeds feature map {h}x{w} "
                    f"(image too small for this stack)"
                )
            self.blocks.append(Conv2d(c, out_c, kernel, stride, scheme=scheme, seed=[seed, i]))
            h = (h - kernel) // stride + 1
            w = (w - kernel) // stride + 1
            c = out_c
        self.feature_dim = c * h * w
        self.head = Dense(self.feature_dim, classes, scheme=scheme, seed=[seed, len(channels)])
        self.image_shape = image_shape
        self.channels = channels
        self.classes = classes
        self.kernel = kernel
        self.stride = stride
        self.scheme = scheme
        self.seed = seed

    def features(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x).relu()
        return x.flatten2d()

    def logits(self, x: Tensor) -> Tensor:
        return self.head(self.features(x))

    def params(self):
        out = []
        for block in self.blocks:
            out.extend(block.params())
        out.extend(self.head.params())
        return out

    def named_params(self):
        named = {}
        for i, block in enumerate(self.blocks):
            named[f"conv{i}.w"] = block.w
            named[f"conv{i}.b"] = block.b
        named["head.w"] = self.head.w
        named["head.b"] = self.head.b
        return named

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params():
            p.requires_grad = bool(flag)

    def arch(self) -> dict:
        return {
            "image_shape": list(self.image_shape),
            "channels": list(self.channels),
            "classes": self.classes,
            "kernel": self.kernel,
            "stride": self.stride,
        }


def build_small_convnet(image_shape, channels, classes: int, seed: int, *,
                        kernel=3, stride=2, scheme="uniform-fan-in") -> ConvNet:
    """Conv->ReLU repeated over ``channels``, flatten, dense head to logits."""
    return ConvNet(image_shape, channels, classes, kernel=kernel, stride=stride,
                   scheme=scheme, seed=seed)
