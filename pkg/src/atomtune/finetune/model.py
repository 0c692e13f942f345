"""Sequential model container, softmax cross-entropy, and the demo CNN."""
from __future__ import annotations

from copy import deepcopy
from typing import Iterator, Optional

import numpy as np

from ..layers import (ChannelNorm, Conv2d, FrozenParameterError, GlobalAvgPool, Layer,
                      Linear, ReLU)
from ..tensor import ACC, ConvGeometry

ParamKey = tuple[str, str]


class Model:
    """Ordered named layers; the last layer is the classifier head and must be linear."""

    def __init__(self, layers: list[tuple[str, Layer]]):
        names = [n for n, _ in layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        self.names = names
        self.layers = [l for _, l in layers]

    def __iter__(self) -> Iterator[tuple[str, Layer]]:
        return iter(zip(self.names, self.layers))

    def __getitem__(self, name: str) -> Layer:
        return self.layers[self.names.index(name)]

    def __setitem__(self, name: str, layer: Layer) -> None:
        self.layers[self.names.index(name)] = layer

    @property
    def head_name(self) -> str:
        return self.names[-1]

    @property
    def head(self) -> Layer:
        return self.layers[-1]

    def params(self) -> dict[ParamKey, np.ndarray]:
        return {(n, p): a for n, l in self for p, a in l.params.items()}

    def tunable(self) -> dict[ParamKey, np.ndarray]:
        return {(n, p): l.params[p] for n, l in self for p in sorted(l.tunable)}

    def frozen(self) -> dict[ParamKey, np.ndarray]:
        return {(n, p): a for n, l in self for p, a in l.params.items() if p not in l.tunable}

    def copy(self) -> "Model":
        """Deep copy with frozen/tunable flags preserved."""
        out = deepcopy(self)
        for _, layer in out:
            layer.set_tunable(layer.tunable)
        return out

    def snapshot(self) -> dict[ParamKey, np.ndarray]:
        return {k: v.copy() for k, v in self.params().items()}

    def num_params(self) -> int:
        return sum(a.size for a in self.params().values())

    def forward(self, x: np.ndarray, keep_cache: bool = True):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache if keep_cache else None)
        return x, caches

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x, keep_cache=False)[0]

    def backward(self, grad_out: np.ndarray, caches: list) -> dict[ParamKey, np.ndarray]:
        """Gradients for tunable parameters only; stops at the earliest tunable layer."""
        first = next((i for i, l in enumerate(self.layers) if l.tunable), None)
        grads: dict[ParamKey, np.ndarray] = {}
        if first is None:
            return grads
        g = grad_out
        for i in range(len(self.layers) - 1, first - 1, -1):
            layer = self.layers[i]
            g, lg = layer.backward(g, caches[i], need_input_grad=i > first)
            for p, v in lg.items():
                if p not in layer.tunable:
                    raise FrozenParameterError(f"{self.names[i]}.{p} produced a gradient while frozen")
                grads[(self.names[i], p)] = v
        return grads

    def grad(self, grads: dict[ParamKey, np.ndarray], key: ParamKey) -> np.ndarray:
        """Look up a gradient; asking for a frozen parameter is a contract violation."""
        name, p = key
        if p not in self[name].tunable:
            raise FrozenParameterError(f"{name}.{p} is frozen and has no gradient")
        return grads[key]


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    z = logits.astype(ACC)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).astype(logits.dtype)


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def build_demo_cnn(seed: int = 0, num_classes: int = 10, in_channels: int = 3,
                   widths=(16, 32, 64, 64), strides=(1, 2, 2, 1), hidden: int = 64) -> Model:
    """Four 3x3 conv blocks (conv, norm, ReLU, 1x1 conv, ReLU), pooling, MLP head."""
    rng = np.random.default_rng(seed)
    layers: list[tuple[str, Layer]] = []
    c = in_channels
    for b, (w, s) in enumerate(zip(widths, strides), start=1):
        layers.append((f"conv{b}", Conv2d(_he(rng, (w, c, 3, 3), 9 * c), None, ConvGeometry(s, 1))))
        layers.append((f"norm{b}", ChannelNorm(np.ones(w, np.float32), np.zeros(w, np.float32))))
        layers.append((f"relu{b}", ReLU()))
        layers.append((f"pw{b}", Conv2d(_he(rng, (w, w, 1, 1), w), np.zeros(w, np.float32), ConvGeometry(1, 0))))
        layers.append((f"relu{b}b", ReLU()))
        c = w
    layers.append(("pool", GlobalAvgPool()))
    layers.append(("fc", Linear(_he(rng, (c, hidden), c), np.zeros(hidden, np.float32))))
    layers.append(("relu_fc", ReLU()))
    layers.append(("head", Linear(_he(rng, (hidden, num_classes), 2 * hidden), np.zeros(num_classes, np.float32))))
    for _, layer in layers:
        layer.set_tunable([])
    return Model(layers)


def reinit_head(model: Model, num_classes: Optional[int] = None, seed: int = 0) -> None:
    """Fresh classifier head (used when the target label space differs)."""
    rng = np.random.default_rng(seed)
    w = model.head.params["weight"]
    nc = num_classes or w.shape[1]
    head = Linear(_he(rng, (w.shape[0], nc), 2 * w.shape[0]), np.zeros(nc, np.float32))
    head.set_tunable([])
    model[model.head_name] = head
