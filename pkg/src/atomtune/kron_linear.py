"""Linear and 1x1-conv layers as Kronecker sums ``W = sum_i A_i (x) B_i``.

``W`` is [c_in, c_out] (``y = x W``). Block ``(p, q)`` of ``W`` (size ``k_in x k_out``)
equals ``sum_i A[i, p, q] B[i]``, so after :func:`block_rearrange` the Kronecker sum
is an ordinary coefficient-times-atom factorization with ``A`` as coefficients and
``B`` as atoms.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .layers import FrozenParameterError, MatrixBase
from .sparse_coding import DecompositionReport, SparseCodingConfig, decompose
from .tensor import ACC, ShapeError, out_dtype


def _grid(c_in: int, c_out: int, k_in: int, k_out: int) -> tuple[int, int]:
    if k_in < 1 or k_out < 1 or c_in % k_in or c_out % k_out:
        raise ShapeError(
            f"block size ({k_in}, {k_out}) does not divide matrix shape ({c_in}, {c_out})"
        )
    return c_in // k_in, c_out // k_out


def block_rearrange(w: np.ndarray, k_in: int, k_out: int) -> np.ndarray:
    """Rows are the vectorized ``k_in x k_out`` blocks of ``w``, block-row-major."""
    if w.ndim != 2:
        raise ShapeError(f"expected a matrix, got {w.shape}")
    p, q = _grid(*w.shape, k_in, k_out)
    return np.ascontiguousarray(w.reshape(p, k_in, q, k_out).transpose(0, 2, 1, 3).reshape(p * q, k_in * k_out))


def block_unrearrange(r: np.ndarray, c_in: int, c_out: int, k_in: int, k_out: int) -> np.ndarray:
    """Inverse of :func:`block_rearrange`."""
    p, q = _grid(c_in, c_out, k_in, k_out)
    if r.shape != (p * q, k_in * k_out):
        raise ShapeError(f"expected rearranged shape {(p * q, k_in * k_out)}, got {r.shape}")
    return np.ascontiguousarray(r.reshape(p, q, k_in, k_out).transpose(0, 2, 1, 3).reshape(c_in, c_out))


@dataclass
class KronFactors:
    A: np.ndarray  # [m_c, c_in/k_in, c_out/k_out], frozen coefficients
    B: np.ndarray  # [m_c, k_in, k_out], tunable atoms
    report: Optional[DecompositionReport] = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.A.shape[1] * self.B.shape[1], self.A.shape[2] * self.B.shape[2]


def compose_linear(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``sum_i kron(A[i], B[i])``."""
    if A.ndim != 3 or B.ndim != 3 or A.shape[0] != B.shape[0]:
        raise ShapeError(f"compose_linear: A {A.shape} vs B {B.shape}")
    m, p, q = A.shape
    _, a, b = B.shape
    w = np.einsum("ipq,iab->paqb", A.astype(ACC), B.astype(ACC)).reshape(p * a, q * b)
    return w.astype(out_dtype(A, B))


def backward_kron(A: np.ndarray, grad_w: np.ndarray, k_in: int, k_out: int) -> np.ndarray:
    """``grad_B[i] = sum_{p,q} A[i,p,q] * block_{p,q}(grad_W)``."""
    m, p, q = A.shape
    if grad_w.shape != (p * k_in, q * k_out):
        raise ShapeError(f"grad_W {grad_w.shape} does not match factors ({p * k_in}, {q * k_out})")
    g = grad_w.astype(ACC).reshape(p, k_in, q, k_out)
    return np.einsum("ipq,paqb->iab", A.astype(ACC), g).astype(out_dtype(A, grad_w))


def decompose_linear(w: np.ndarray, m_c: int, k_in: int, k_out: int,
                     cfg: Optional[SparseCodingConfig] = None, seed: int = 0) -> KronFactors:
    """Factor ``w`` [c_in, c_out] into ``m_c`` Kronecker pairs via sparse coding."""
    if m_c < 1:
        raise ValueError(f"m_c must be >= 1, got {m_c}")
    c_in, c_out = w.shape
    p, q = _grid(c_in, c_out, k_in, k_out)
    coeffs, atoms, report = decompose(block_rearrange(np.asarray(w), k_in, k_out), m_c, cfg, seed=seed)
    A = coeffs.T.reshape(m_c, p, q).astype(np.float32)
    B = atoms.reshape(m_c, k_in, k_out).astype(np.float32)
    return KronFactors(A, B, report)


class KronLinear(MatrixBase):
    """Linear map (or 1x1 conv on 4-D input) with frozen ``A`` and tunable ``B``.

    The composed matrix is cached until the parameters change.
    """

    kind = "kron_linear"

    def __init__(self, A, B, bias=None):
        super().__init__()
        A, B = np.asarray(A), np.asarray(B)
        if A.ndim != 3 or B.ndim != 3 or A.shape[0] != B.shape[0]:
            raise ShapeError(f"KronLinear: A {A.shape} vs B {B.shape}")
        self.add_param("A", A)
        self.add_param("B", B, frozen=False)
        if bias is not None:
            self.add_param("bias", bias)
        self._w_cache: tuple[int, np.ndarray] | None = None

    A = property(lambda self: self.params["A"])
    B = property(lambda self: self.params["B"])

    @property
    def m_c(self) -> int:
        return self.B.shape[0]

    @property
    def blocks(self) -> tuple[int, int]:
        return self.B.shape[1], self.B.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.A.shape[1] * self.B.shape[1], self.A.shape[2] * self.B.shape[2]

    def set_tunable(self, names):
        names = set(names)
        if "A" in names:
            raise FrozenParameterError("Kronecker coefficients stay frozen")
        super().set_tunable(names)

    def matrix(self):
        if self._w_cache is None or self._w_cache[0] != self.version:
            self._w_cache = (self.version, compose_linear(self.A, self.B))
        return self._w_cache[1]

    def matrix_grads(self, grad_w):
        if "B" not in self.tunable:
            return {}
        return {"B": backward_kron(self.A, grad_w, *self.blocks)}
