"""LoRA baseline: frozen base weight plus a scaled low-rank update ``scale * down @ up``.

For a k x k conv the update lives on the ``(c_in*k) x (c_out*k)`` reshaping of the
filter bank, which gives the ``c_in*k*r + c_out*k*r`` parameter count.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..layers import Conv2d, ConvBase, Linear, MatrixBase
from ..tensor import ACC, ShapeError, out_dtype


@dataclass
class LoRAAdapter:
    down: np.ndarray  # [rows, r]
    up: np.ndarray    # [r, cols]
    scale: float = 1.0

    @classmethod
    def init(cls, rows: int, cols: int, r: int, rng: np.random.Generator, scale: float = 1.0):
        """``down ~ N(0, 1/r)``, ``up = 0``: the update starts at exactly zero."""
        down = (rng.standard_normal((rows, r)) / np.sqrt(r)).astype(np.float32)
        return cls(down, np.zeros((r, cols), dtype=np.float32), scale)

    def delta(self) -> np.ndarray:
        d = self.scale * (self.down.astype(ACC) @ self.up.astype(ACC))
        return d.astype(out_dtype(self.down, self.up))


def lora_forward(base_w: np.ndarray, adapter: LoRAAdapter, x: np.ndarray) -> np.ndarray:
    """``y = x (W + scale * down up)`` with ``W`` [c_in, c_out]."""
    if base_w.shape != (adapter.down.shape[0], adapter.up.shape[1]):
        raise ShapeError(f"adapter {adapter.down.shape}x{adapter.up.shape} vs base {base_w.shape}")
    w = base_w.astype(ACC) + adapter.delta().astype(ACC)
    return (x.astype(ACC) @ w).astype(out_dtype(x, base_w))


def _low_rank_grads(layer, g_matrix):
    down, up, s = layer.params["down"].astype(ACC), layer.params["up"].astype(ACC), layer.scale
    g = g_matrix.astype(ACC)
    dt = layer.params["down"].dtype
    grads = {}
    if "down" in layer.tunable:
        grads["down"] = (s * g @ up.T).astype(dt)
    if "up" in layer.tunable:
        grads["up"] = (s * down.T @ g).astype(dt)
    return grads


class LoRAConv2d(ConvBase):
    kind = "lora_conv2d"

    def __init__(self, weight, bias, geom, down, up, scale: float = 1.0):
        super().__init__()
        self.geom = geom
        self.scale = float(scale)
        self.add_param("weight", weight)
        if bias is not None:
            self.add_param("bias", bias)
        self.add_param("down", down, frozen=False)
        self.add_param("up", up, frozen=False)

    @classmethod
    def wrap(cls, base: Conv2d, r: int, rng: np.random.Generator, scale: float = 1.0):
        c_out, c_in, k, _ = base.weight.shape
        a = LoRAAdapter.init(c_in * k, c_out * k, r, rng, scale)
        bias = None if base.bias is None else base.bias.copy()
        return cls(base.weight.copy(), bias, base.geom, a.down, a.up, scale)

    @property
    def r(self) -> int:
        return self.params["down"].shape[1]

    def filters(self):
        w = self.params["weight"]
        c_out, c_in, k, _ = w.shape
        d = self.scale * (self.params["down"].astype(ACC) @ self.params["up"].astype(ACC))
        d = d.reshape(c_in, k, c_out, k).transpose(2, 0, 1, 3)
        return (w.astype(ACC) + d).astype(w.dtype)

    def filter_grads(self, grad_f):
        c_out, c_in, k, _ = grad_f.shape
        return _low_rank_grads(self, grad_f.transpose(1, 2, 0, 3).reshape(c_in * k, c_out * k))


class LoRALinear(MatrixBase):
    kind = "lora_linear"

    def __init__(self, weight, bias, down, up, scale: float = 1.0):
        super().__init__()
        self.scale = float(scale)
        self.add_param("weight", weight)
        if bias is not None:
            self.add_param("bias", bias)
        self.add_param("down", down, frozen=False)
        self.add_param("up", up, frozen=False)

    @classmethod
    def wrap(cls, base: Linear, r: int, rng: np.random.Generator, scale: float = 1.0):
        c_in, c_out = base.weight.shape
        a = LoRAAdapter.init(c_in, c_out, r, rng, scale)
        bias = None if base.bias is None else base.bias.copy()
        return cls(base.weight.copy(), bias, a.down, a.up, scale)

    @property
    def r(self) -> int:
        return self.params["down"].shape[1]

    def matrix(self):
        w = self.params["weight"]
        adapter = LoRAAdapter(self.params["down"], self.params["up"], self.scale)
        return (w.astype(ACC) + adapter.delta().astype(ACC)).astype(w.dtype)

    def matrix_grads(self, grad_w):
        return _low_rank_grads(self, grad_w)
