"""Layer protocol with hand-derived gradients, plus the dense building blocks.

Every layer keeps its parameters in ``self.params``. A parameter is tunable iff it is
named in ``self.tunable``; frozen parameters are made read-only numpy arrays so any
write is rejected by numpy itself. ``forward`` returns ``(y, cache)`` and ``backward``
consumes that cache, returning ``(grad_x, grads)`` where ``grads`` holds entries for
tunable parameters only.
"""
from __future__ import annotations

from typing import Iterable, Optional

import numpy as np

from .tensor import (ACC, ConvGeometry, ShapeError, conv2d, conv2d_input_grad,
                     conv2d_weight_grad, im2col, out_dtype)


class FrozenParameterError(RuntimeError):
    """A gradient or write was requested for a frozen parameter."""


class StaleCacheError(RuntimeError):
    """A backward pass was given a cache from an older parameter state."""


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.tunable: set[str] = set()
        self.version = 0

    def add_param(self, name: str, value, frozen: bool = True) -> np.ndarray:
        value = np.asarray(value)
        dtype = np.float64 if value.dtype == np.float64 else np.float32
        arr = np.array(value, dtype=dtype, order="C")
        self.params[name] = arr
        arr.flags.writeable = not frozen
        if not frozen:
            self.tunable.add(name)
        return arr

    def set_tunable(self, names: Iterable[str]) -> None:
        names = set(names)
        unknown = names - set(self.params)
        if unknown:
            raise KeyError(f"{self.kind}: unknown parameters {sorted(unknown)}")
        self.tunable = names
        for name, arr in self.params.items():
            arr.flags.writeable = name in names

    def touch(self) -> None:
        """Mark parameters as changed; invalidates outstanding caches."""
        self.version += 1

    def assign(self, name: str, value) -> None:
        """Replace a tunable parameter's values in place."""
        if name not in self.tunable:
            raise FrozenParameterError(f"{self.kind}.{name} is frozen")
        self.params[name][...] = value
        self.touch()

    def num_params(self, names: Optional[Iterable[str]] = None) -> int:
        names = self.params if names is None else names
        return int(sum(self.params[n].size for n in names))

    def _check(self, cache: dict) -> None:
        if cache.get("version") != self.version or cache.get("layer") is not self:
            raise StaleCacheError(f"{self.kind}: cache does not match current parameters")

    def _cache(self, **kw) -> dict:
        return {"layer": self, "version": self.version, **kw}

    def forward(self, x: np.ndarray):
        raise NotImplementedError

    def backward(self, grad_y: np.ndarray, cache: dict, need_input_grad: bool = True):
        raise NotImplementedError

    def __repr__(self):
        shapes = ", ".join(f"{k}={tuple(v.shape)}" for k, v in self.params.items())
        return f"{type(self).__name__}({shapes})"


class ConvBase(Layer):
    """Shared machinery for layers whose forward is a single conv with derived filters."""

    geom: ConvGeometry

    def filters(self) -> np.ndarray:
        raise NotImplementedError

    def filter_grads(self, grad_f: np.ndarray) -> dict[str, np.ndarray]:
        """Map dL/dfilters onto tunable parameters."""
        raise NotImplementedError

    @property
    def bias(self) -> Optional[np.ndarray]:
        return self.params.get("bias")

    def forward(self, x: np.ndarray):
        f = self.filters()
        xb = x if x.ndim == 4 else x[None]
        cols, _, _ = im2col(xb, f.shape[-1], self.geom)
        y = conv2d(xb, f, self.geom, cols=cols)
        if self.bias is not None:
            y = y + self.bias[:, None, None].astype(y.dtype)
        y = y if x.ndim == 4 else y[0]
        return y, self._cache(x=x, f=f, cols=cols)

    def backward(self, grad_y: np.ndarray, cache: dict, need_input_grad: bool = True):
        self._check(cache)
        x, f = cache["x"], cache["f"]
        gy = grad_y if grad_y.ndim == 4 else grad_y[None]
        grads: dict[str, np.ndarray] = {}
        if self.tunable - {"bias"}:
            gf = conv2d_weight_grad(x if x.ndim == 4 else x[None], gy, f.shape[-1],
                                    self.geom, cols=cache["cols"])
            grads.update(self.filter_grads(gf))
        if "bias" in self.tunable:
            grads["bias"] = gy.astype(ACC).sum(axis=(0, 2, 3)).astype(gy.dtype)
        gx = None
        if need_input_grad:
            gx = conv2d_input_grad(gy, f, (gy.shape[0], *x.shape[-3:]), self.geom)
            gx = gx if x.ndim == 4 else gx[0]
        return gx, grads


class Conv2d(ConvBase):
    kind = "conv2d"

    def __init__(self, weight, bias=None, geom: ConvGeometry = ConvGeometry()):
        super().__init__()
        self.geom = geom
        self.add_param("weight", weight)
        if bias is not None:
            self.add_param("bias", bias)

    @property
    def weight(self) -> np.ndarray:
        return self.params["weight"]

    @property
    def k(self) -> int:
        return self.weight.shape[-1]

    def filters(self) -> np.ndarray:
        return self.weight

    def filter_grads(self, grad_f):
        return {"weight": grad_f} if "weight" in self.tunable else {}


def _pointwise(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Apply ``w`` [in, out] along the channel axis (axis 1) of ``x``."""
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"expected {w.shape[0]} input features, got {x.shape[1]}")
    y = np.tensordot(x.astype(ACC), w.astype(ACC), axes=([1], [0]))
    if x.ndim > 2:
        y = np.moveaxis(y, -1, 1)
    return np.ascontiguousarray(y, dtype=out_dtype(x, w))


class MatrixBase(Layer):
    """Layers computing ``y = x W + b`` over the channel axis ([n, in] or [n, in, h, w])."""

    def matrix(self) -> np.ndarray:
        raise NotImplementedError

    def matrix_grads(self, grad_w: np.ndarray) -> dict[str, np.ndarray]:
        raise NotImplementedError

    @property
    def bias(self) -> Optional[np.ndarray]:
        return self.params.get("bias")

    def forward(self, x: np.ndarray):
        w = self.matrix()
        y = _pointwise(x, w)
        if self.bias is not None:
            shape = (1, -1) + (1,) * (x.ndim - 2)
            y = y + self.bias.reshape(shape).astype(y.dtype)
        return y, self._cache(x=x, w=w)

    def backward(self, grad_y: np.ndarray, cache: dict, need_input_grad: bool = True):
        self._check(cache)
        x, w = cache["x"], cache["w"]
        grads: dict[str, np.ndarray] = {}
        red = (0,) + tuple(range(2, x.ndim))
        if self.tunable - {"bias"}:
            gw = np.tensordot(x.astype(ACC), grad_y.astype(ACC), axes=(red, red))
            grads.update(self.matrix_grads(gw.astype(out_dtype(x, grad_y))))
        if "bias" in self.tunable:
            grads["bias"] = grad_y.astype(ACC).sum(axis=red).astype(grad_y.dtype)
        gx = _pointwise(grad_y, w.T) if need_input_grad else None
        return gx, grads


class Linear(MatrixBase):
    """Dense linear map; on 4-D input it acts as a 1x1 convolution."""

    kind = "linear"

    def __init__(self, weight, bias=None):
        super().__init__()
        self.add_param("weight", weight)
        if bias is not None:
            self.add_param("bias", bias)

    @property
    def weight(self) -> np.ndarray:
        return self.params["weight"]

    def matrix(self):
        return self.weight

    def matrix_grads(self, grad_w):
        return {"weight": grad_w} if "weight" in self.tunable else {}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        return np.maximum(x, 0).astype(x.dtype), self._cache(mask=x > 0)

    def backward(self, grad_y, cache, need_input_grad=True):
        self._check(cache)
        return (grad_y * cache["mask"] if need_input_grad else None), {}


class ChannelNorm(Layer):
    """Per-sample, per-channel normalization over spatial extent, with affine scale/shift."""

    kind = "channel_norm"

    def __init__(self, scale, shift, eps: float = 1e-5):
        super().__init__()
        self.eps = float(eps)
        self.add_param("scale", scale)
        self.add_param("shift", shift)

    def forward(self, x):
        xd = x.astype(ACC)
        mu = xd.mean(axis=(2, 3), keepdims=True)
        var = xd.var(axis=(2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (xd - mu) * inv
        g = self.params["scale"].astype(ACC)[None, :, None, None]
        b = self.params["shift"].astype(ACC)[None, :, None, None]
        y = (g * xhat + b).astype(x.dtype)
        return y, self._cache(xhat=xhat, inv=inv, dtype=x.dtype)

    def backward(self, grad_y, cache, need_input_grad=True):
        self._check(cache)
        xhat, inv = cache["xhat"], cache["inv"]
        gy = grad_y.astype(ACC)
        grads = {}
        if "scale" in self.tunable:
            grads["scale"] = (gy * xhat).sum(axis=(0, 2, 3)).astype(grad_y.dtype)
        if "shift" in self.tunable:
            grads["shift"] = gy.sum(axis=(0, 2, 3)).astype(grad_y.dtype)
        gx = None
        if need_input_grad:
            g = gy * self.params["scale"].astype(ACC)[None, :, None, None]
            gx = inv * (g - g.mean(axis=(2, 3), keepdims=True)
                        - xhat * (g * xhat).mean(axis=(2, 3), keepdims=True))
            gx = gx.astype(grad_y.dtype)
        return gx, grads


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def forward(self, x):
        return x.astype(ACC).mean(axis=(2, 3)).astype(x.dtype), self._cache(shape=x.shape)

    def backward(self, grad_y, cache, need_input_grad=True):
        self._check(cache)
        n, c, h, w = cache["shape"]
        gx = np.broadcast_to(grad_y[:, :, None, None] / (h * w), (n, c, h, w))
        return np.ascontiguousarray(gx, dtype=grad_y.dtype), {}
