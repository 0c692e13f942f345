"""Convolution layers factorized as ``F = alpha x D``.

``D`` [m, k, k] holds the filter atoms, ``alpha`` [c_in, c_out, m] the atom coefficients,
indexed ``alpha[i, j, l]`` with ``i`` the input channel and ``j`` the output channel.
Filters follow the ``[c_out, c_in, k, k]`` layout, so ``F[j, i] = sum_l alpha[i, j, l] D[l]``.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .layers import ConvBase, FrozenParameterError
from .sparse_coding import DecompositionReport, SparseCodingConfig, decompose
from .tensor import ACC, ConvGeometry, ShapeError, contract, conv2d, out_dtype


def compose_filters(alpha: np.ndarray, atoms: np.ndarray) -> np.ndarray:
    """Filters [c_out, c_in, k, k] from coefficients [c_in, c_out, m] and atoms [m, k, k]."""
    if alpha.ndim != 3 or atoms.ndim != 3 or alpha.shape[2] != atoms.shape[0]:
        raise ShapeError(f"compose_filters: alpha {alpha.shape} vs atoms {atoms.shape}")
    return np.ascontiguousarray(contract(alpha, atoms, 1).transpose(1, 0, 2, 3))


def spatial_conv(atoms: np.ndarray, x: np.ndarray, geom: ConvGeometry = ConvGeometry()) -> np.ndarray:
    """Convolve every input channel with every atom separately.

    Output channel ``i * m + l`` is input channel ``i`` convolved with atom ``l``.
    """
    squeeze = x.ndim == 3
    xb = x[None] if squeeze else x
    n, c_in, h, w = xb.shape
    m, k, _ = atoms.shape
    z = conv2d(xb.reshape(n * c_in, 1, h, w), atoms[:, None], geom)
    z = z.reshape(n, c_in * m, *z.shape[-2:])
    return z[0] if squeeze else z


def mixing_matrix(alpha: np.ndarray) -> np.ndarray:
    """``alpha`` as a [c_out, c_in*m] 1x1 weight matching :func:`spatial_conv` channel order."""
    c_in, c_out, m = alpha.shape
    return np.ascontiguousarray(alpha.transpose(1, 0, 2).reshape(c_out, c_in * m))


def channel_mix(alpha: np.ndarray, zprime: np.ndarray) -> np.ndarray:
    """Spatially invariant combination ``Z[j] = sum_{i,l} alpha[i,j,l] Z'[i*m + l]``."""
    c_in, c_out, m = alpha.shape
    ch_axis = zprime.ndim - 3
    if zprime.shape[ch_axis] != c_in * m:
        raise ShapeError(
            f"channel_mix: expected {c_in * m} intermediate channels, got {zprime.shape[ch_axis]}"
        )
    z = np.tensordot(mixing_matrix(alpha).astype(ACC), zprime.astype(ACC), axes=([1], [ch_axis]))
    if ch_axis == 1:
        z = np.moveaxis(z, 0, 1)
    return np.ascontiguousarray(z, dtype=out_dtype(alpha, zprime))


def atom_grad(alpha: np.ndarray, grad_f: np.ndarray) -> np.ndarray:
    """Chain rule through :func:`compose_filters`: ``dL/dD[l] = sum_{i,j} alpha[i,j,l] dL/dF[j,i]``."""
    return contract(alpha, grad_f.transpose(1, 0, 2, 3), axes=([0, 1], [0, 1]))


class DecomposedConv2d(ConvBase):
    """Conv layer with tunable atoms and frozen coefficients.

    The training forward composes the filters once and runs a single convolution;
    ``two_stage=True`` materializes the intermediate ``c_in * m`` channels instead.
    """

    kind = "atom_conv2d"

    def __init__(self, atoms, alpha, bias=None, geom: ConvGeometry = ConvGeometry()):
        super().__init__()
        self.geom = geom
        atoms = np.asarray(atoms)
        alpha = np.asarray(alpha)
        if atoms.ndim != 3 or atoms.shape[1] != atoms.shape[2]:
            raise ShapeError(f"atoms must be [m, k, k], got {atoms.shape}")
        if alpha.ndim != 3 or alpha.shape[2] != atoms.shape[0]:
            raise ShapeError(f"alpha must be [c_in, c_out, {atoms.shape[0]}], got {alpha.shape}")
        self.add_param("atoms", atoms, frozen=False)
        self.add_param("alpha", alpha)
        if bias is not None:
            self.add_param("bias", bias)

    @property
    def atoms(self) -> np.ndarray:
        return self.params["atoms"]

    @property
    def alpha(self) -> np.ndarray:
        return self.params["alpha"]

    @property
    def m(self) -> int:
        return self.atoms.shape[0]

    @property
    def k(self) -> int:
        return self.atoms.shape[-1]

    @property
    def c_in(self) -> int:
        return self.alpha.shape[0]

    @property
    def c_out(self) -> int:
        return self.alpha.shape[1]

    def filters(self):
        return compose_filters(self.alpha, self.atoms)

    def set_tunable(self, names):
        names = set(names)
        if "alpha" in names:
            raise FrozenParameterError("atom coefficients stay frozen")
        super().set_tunable(names)

    def filter_grads(self, grad_f):
        return {"atoms": atom_grad(self.alpha, grad_f)} if "atoms" in self.tunable else {}

    def two_stage(self, x: np.ndarray) -> np.ndarray:
        y = channel_mix(self.alpha, spatial_conv(self.atoms, x, self.geom))
        return self._add_bias(y)

    def _add_bias(self, y):
        if self.bias is not None:
            y = y + self.bias[:, None, None].astype(y.dtype)
        return y

    def forward(self, x, two_stage: bool = False):
        y, cache = super().forward(x)
        if two_stage:
            y = self.two_stage(x)
        return y, cache


def backward_atoms(layer: DecomposedConv2d, grad_y: np.ndarray, cache: dict) -> np.ndarray:
    """Gradient with respect to the atoms only."""
    _, grads = layer.backward(grad_y, cache, need_input_grad=False)
    return grads["atoms"]


def decompose_conv(weight: np.ndarray, m: int, cfg: Optional[SparseCodingConfig] = None,
                   seed: int = 0) -> tuple[np.ndarray, np.ndarray, DecompositionReport]:
    """Sparse-code a dense filter bank [c_out, c_in, k, k] into ``(alpha, atoms, report)``."""
    weight = np.asarray(weight)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"weight must be [c_out, c_in, k, k], got {weight.shape}")
    c_out, c_in, k, _ = weight.shape
    rows = weight.transpose(1, 0, 2, 3).reshape(c_in * c_out, k * k)
    coeffs, atoms, report = decompose(rows, m, cfg, seed=seed)
    alpha = coeffs.reshape(c_in, c_out, m).astype(np.float32)
    return alpha, atoms.reshape(m, k, k).astype(np.float32), report


def from_dense(weight, bias=None, geom: ConvGeometry = ConvGeometry(), m: int = 9,
               cfg: Optional[SparseCodingConfig] = None, seed: int = 0
               ) -> tuple[DecomposedConv2d, DecompositionReport]:
    alpha, atoms, report = decompose_conv(weight, m, cfg, seed)
    return DecomposedConv2d(atoms, alpha, bias, geom), report
