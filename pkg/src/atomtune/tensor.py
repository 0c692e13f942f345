"""Dense tensor primitives: convolution, mode contraction, Kronecker product, ATF1 I/O.

Tensors are plain C-contiguous numpy arrays. Storage dtype is float32; every
reduction accumulates in float64 and casts back to the storage dtype of the
inputs, so float64 inputs (used by finite-difference oracles) stay float64.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from os import PathLike
from typing import BinaryIO, Sequence, Union

import numpy as np

ATF_MAGIC = b"ATF1"
ACC = np.float64


class ShapeError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


@dataclass(frozen=True)
class ConvGeometry:
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if int(self.stride) != self.stride or self.stride < 1:
            raise ValueError(f"stride must be a positive integer, got {self.stride}")
        if int(self.padding) != self.padding or self.padding < 0:
            raise ValueError(f"padding must be a non-negative integer, got {self.padding}")

    def out_size(self, size: int, k: int) -> int:
        n = (size + 2 * self.padding - k) // self.stride + 1
        if size + 2 * self.padding - k < 0 or n < 1:
            raise ShapeError(
                f"non-positive output extent: in={size}, k={k}, "
                f"stride={self.stride}, padding={self.padding}"
            )
        return n


def out_dtype(*arrays: np.ndarray) -> np.dtype:
    """float64 if any input is float64, otherwise float32."""
    return np.dtype(np.float64) if any(a.dtype == np.float64 for a in arrays) else np.dtype(np.float32)


def as_tensor(x, dtype=np.float32) -> np.ndarray:
    """Validate and convert to a contiguous tensor (all extents >= 1)."""
    a = np.ascontiguousarray(x, dtype=dtype)
    if a.ndim == 0 or any(s < 1 for s in a.shape):
        raise ShapeError(f"tensor extents must all be >= 1, got {a.shape}")
    return a


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected input of rank 3 [c,h,w] or 4 [n,c,h,w], got {x.shape}")


def im2col(x: np.ndarray, k: int, geom: ConvGeometry) -> tuple[np.ndarray, int, int]:
    """Unfold [n,c,h,w] into columns [n, c*k*k, ho*wo] (float64)."""
    n, c, h, w = x.shape
    ho, wo = geom.out_size(h, k), geom.out_size(w, k)
    p, s = geom.padding, geom.stride
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=ACC)
    xp[:, :, p:p + h, p:p + w] = x
    cols = np.empty((n, c, k, k, ho, wo), dtype=ACC)
    for u in range(k):
        for v in range(k):
            cols[:, :, u, v] = xp[:, :, u:u + s * (ho - 1) + 1:s, v:v + s * (wo - 1) + 1:s]
    return cols.reshape(n, c * k * k, ho * wo), ho, wo


def col2im(cols: np.ndarray, shape: Sequence[int], k: int, geom: ConvGeometry) -> np.ndarray:
    """Adjoint of :func:`im2col`: fold [n, c*k*k, ho*wo] back into [n,c,h,w]."""
    n, c, h, w = shape
    ho, wo = geom.out_size(h, k), geom.out_size(w, k)
    p, s = geom.padding, geom.stride
    cols = cols.reshape(n, c, k, k, ho, wo)
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=ACC)
    for u in range(k):
        for v in range(k):
            xp[:, :, u:u + s * (ho - 1) + 1:s, v:v + s * (wo - 1) + 1:s] += cols[:, :, u, v]
    return xp[:, :, p:p + h, p:p + w]


def _check_conv(x: np.ndarray, weight: np.ndarray) -> None:
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"weight must be [c_out, c_in, k, k], got {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"weight expects {weight.shape[1]} input channels, input has {x.shape[1]}"
        )


def conv2d(x: np.ndarray, weight: np.ndarray, geom: ConvGeometry = ConvGeometry(),
           cols: np.ndarray | None = None) -> np.ndarray:
    """Cross-correlation of ``x`` ([c,h,w] or [n,c,h,w]) with ``weight`` [c_out,c_in,k,k].

    ``cols`` may carry a precomputed :func:`im2col` of ``x`` to avoid unfolding twice.
    """
    xb, squeeze = _batched(x)
    _check_conv(xb, weight)
    c_out, _, k, _ = weight.shape
    if cols is None:
        cols, ho, wo = im2col(xb, k, geom)
    else:
        ho, wo = geom.out_size(xb.shape[2], k), geom.out_size(xb.shape[3], k)
    y = np.matmul(weight.reshape(c_out, -1).astype(ACC), cols)
    y = y.reshape(xb.shape[0], c_out, ho, wo).astype(out_dtype(x, weight))
    return y[0] if squeeze else y


def conv2d_weight_grad(x: np.ndarray, grad_y: np.ndarray, k: int,
                       geom: ConvGeometry = ConvGeometry(),
                       cols: np.ndarray | None = None) -> np.ndarray:
    """dL/dweight for :func:`conv2d` given dL/dy; shape [c_out, c_in, k, k]."""
    xb, _ = _batched(x)
    gy, _ = _batched(grad_y)
    if cols is None:
        cols, _, _ = im2col(xb, k, geom)
    n, c_out = gy.shape[:2]
    g = np.tensordot(gy.reshape(n, c_out, -1).astype(ACC), cols, axes=([0, 2], [0, 2]))
    return g.reshape(c_out, xb.shape[1], k, k).astype(out_dtype(x, grad_y))


def conv2d_input_grad(grad_y: np.ndarray, weight: np.ndarray, in_shape: Sequence[int],
                      geom: ConvGeometry = ConvGeometry()) -> np.ndarray:
    """dL/dx for :func:`conv2d` given dL/dy; shape ``in_shape``."""
    gy, squeeze = _batched(grad_y)
    c_out, c_in, k, _ = weight.shape
    shape4 = tuple(in_shape) if len(in_shape) == 4 else (1, *in_shape)
    dcols = np.matmul(weight.reshape(c_out, -1).T.astype(ACC), gy.reshape(gy.shape[0], c_out, -1))
    gx = col2im(dcols, shape4, k, geom).astype(out_dtype(grad_y, weight))
    return gx[0] if squeeze else gx


def contract(a: np.ndarray, b: np.ndarray, axes: Union[int, tuple[Sequence[int], Sequence[int]]] = 1) -> np.ndarray:
    """Generalized mode contraction (tensor product with summed axes).

    ``axes`` follows :func:`numpy.tensordot`: an int contracts the last ``axes`` modes
    of ``a`` against the first ``axes`` modes of ``b``; a pair of sequences names the
    modes explicitly. Result modes are the free modes of ``a`` followed by those of ``b``.
    """
    if isinstance(axes, int):
        ax_a, ax_b = list(range(a.ndim - axes, a.ndim)), list(range(axes))
    else:
        ax_a, ax_b = [list(s) for s in axes]
    if len(ax_a) != len(ax_b):
        raise ShapeError("contract: axis lists differ in length")
    for i, j in zip(ax_a, ax_b):
        if a.shape[i] != b.shape[j]:
            raise ShapeError(
                f"contract: extent mismatch a.shape[{i}]={a.shape[i]} vs b.shape[{j}]={b.shape[j]}"
            )
    r = np.tensordot(a.astype(ACC), b.astype(ACC), axes=(ax_a, ax_b))
    return np.ascontiguousarray(r, dtype=out_dtype(a, b))


def kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kronecker product of two matrices; block (i, j) equals ``a[i, j] * b``."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"kron expects rank-2 operands, got {a.shape} and {b.shape}")
    p, q = a.shape
    r, s = b.shape
    out = a.astype(ACC)[:, None, :, None] * b.astype(ACC)[None, :, None, :]
    return out.reshape(p * r, q * s).astype(out_dtype(a, b))


# --- ATF1 binary format ---------------------------------------------------------

def write_atf(dest: Union[str, PathLike, BinaryIO], tensor: np.ndarray) -> None:
    """Write ``tensor`` as ATF1: magic, u8 rank, u32le extents, f32le values."""
    a = np.asarray(tensor)
    if a.ndim == 0 or a.ndim > 255:
        raise ShapeError(f"ATF1 rank must be in [1, 255], got {a.ndim}")
    if any(s < 1 for s in a.shape):
        raise ShapeError(f"ATF1 extents must be >= 1, got {a.shape}")
    payload = ATF_MAGIC + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    payload += np.ascontiguousarray(a, dtype="<f4").tobytes()
    if hasattr(dest, "write"):
        dest.write(payload)
    else:
        with open(dest, "wb") as f:
            f.write(payload)


def read_atf(src: Union[str, PathLike, BinaryIO, bytes]) -> np.ndarray:
    """Read an ATF1 tensor into a float32 array."""
    if isinstance(src, (bytes, bytearray)):
        f: BinaryIO = io.BytesIO(src)
    elif hasattr(src, "read"):
        f = src
    else:
        with open(src, "rb") as fh:
            return read_atf(fh.read())
    if f.read(4) != ATF_MAGIC:
        raise ValueError("not an ATF1 file (bad magic)")
    (rank,) = struct.unpack("<B", f.read(1))
    shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
    count = int(np.prod(shape))
    raw = f.read(4 * count)
    if len(raw) != 4 * count:
        raise ValueError(f"truncated ATF1 payload: expected {4 * count} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
