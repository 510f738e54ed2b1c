"""Small neural-network building blocks on top of the tape ops.

Activations flow per sample: dense layers take (n, 1) columns, conv layers
take (c, h, w) maps. Batches are python loops with batch-averaged losses.
Normalization layers standardize per channel (conv) or per feature vector
(dense) with a fixed epsilon, and can be disabled via net configs.
"""

from __future__ import annotations

from typing import List, Optional

import numpy as np

from ..errors import ConfigError, DimensionError
from . import ops
from .tensor import Tensor, parameter

NORM_EPS = 1e-5


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) with draws beyond two standard deviations resampled."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


class Module:
    """Minimal parameter-holder base: children registered in creation order."""

    def __init__(self, name: str):
        self.name = name
        self._params: List[Tensor] = []
        self._children: List["Module"] = []

    def _param(self, suffix: str, value: np.ndarray) -> Tensor:
        p = parameter(value, name="%s/%s" % (self.name, suffix))
        self._params.append(p)
        return p

    def _child(self, module: "Module") -> "Module":
        self._children.append(module)
        return module

    def params(self) -> List[Tensor]:
        out = list(self._params)
        for c in self._children:
            out.extend(c.params())
        return out

    def named_params(self):
        return [(p.name, p) for p in self.params()]


class Dense(Module):
    def __init__(self, rng, n_in: int, n_out: int, name: str, std: float = 0.02):
        super().__init__(name)
        self.w = self._param("w", truncated_normal(rng, (n_out, n_in), std))
        self.b = self._param("b", np.zeros((n_out, 1)))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != 1:
            raise DimensionError("Dense expects a (n, 1) column, got %s" % (x.shape,))
        return ops.add(ops.matmul(self.w, x), self.b)


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int, name: str,
                 stride: int = 1, pad: int = 0, std: float = 0.02):
        super().__init__(name)
        self.stride = stride
        self.pad = pad
        self.w = self._param("w", truncated_normal(rng, (c_out, c_in, k, k), std))
        self.b = self._param("b", np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.bias_add(ops.conv2d(x, self.w, self.stride, self.pad), self.b)


class ConvTranspose2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int, name: str,
                 stride: int = 1, pad: int = 0, std: float = 0.02):
        super().__init__(name)
        self.stride = stride
        self.pad = pad
        self.w = self._param("w", truncated_normal(rng, (c_in, c_out, k, k), std))
        self.b = self._param("b", np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.bias_add(ops.conv2d_transpose(x, self.w, self.stride, self.pad), self.b)


def channel_norm(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Per-channel standardization of a (c, h, w) map."""
    if x.ndim != 3:
        raise DimensionError("channel_norm expects (c,h,w)")
    return ops.standardize(x, axes=(1, 2), eps=eps)


def vector_norm(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Feature-wise standardization of a (n, 1) column."""
    if x.ndim != 2 or x.shape[1] != 1:
        raise DimensionError("vector_norm expects (n,1)")
    return ops.standardize(x, axes=(0, 1), eps=eps)


class MLP(Module):
    """Fully connected stack: leaky-relu (and optional norm) between layers.

    ``final`` selects the output nonlinearity: None, "sigmoid", or "tanh".
    """

    def __init__(self, rng, sizes, name: str, slope: float = 0.2,
                 normalize: bool = True, final: Optional[str] = None):
        super().__init__(name)
        if len(sizes) < 2:
            raise ConfigError("MLP needs at least input and output sizes")
        self.slope = slope
        self.normalize = normalize
        self.final = final
        self.layers = [
            self._child(Dense(rng, sizes[i], sizes[i + 1], "%s/fc%d" % (name, i)))
            for i in range(len(sizes) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                if self.normalize:
                    h = vector_norm(h)
                h = ops.leaky_relu(h, self.slope)
        if self.final == "sigmoid":
            h = ops.sigmoid(h)
        elif self.final == "tanh":
            h = ops.tanh(h)
        elif self.final is not None:
            raise ConfigError("unknown final activation %r" % (self.final,))
        return h


class ConvStack(Module):
    """Stride-2 conv encoder returning all intermediate feature maps."""

    def __init__(self, rng, c_in: int, widths, name: str, k: int = 3,
                 slope: float = 0.2, normalize: bool = True):
        super().__init__(name)
        self.slope = slope
        self.normalize = normalize
        self.convs = []
        prev = c_in
        for i, wd in enumerate(widths):
            conv = Conv2d(rng, prev, wd, k, "%s/conv%d" % (name, i), stride=2,
                          pad=k // 2)
            self.convs.append(self._child(conv))
            prev = wd

    def __call__(self, x: Tensor):
        feats = []
        h = x
        for conv in self.convs:
            h = conv(h)
            if self.normalize:
                h = channel_norm(h)
            h = ops.leaky_relu(h, self.slope)
            feats.append(h)
        return feats
