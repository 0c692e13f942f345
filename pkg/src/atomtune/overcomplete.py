"""Overcomplete filter atoms: every atom re-expressed over ``m_1`` sub-atoms.

``D1`` [m*m_1, k, k] stores sub-atoms grouped per parent atom (sub-atom ``l*m_1 + j``
belongs to parent ``l``). ``beta`` combines them, either shared across input channels
([m, m_1], compact) or per input channel ([c_in, m, m_1], count-faithful, the default).
"""
from __future__ import annotations

import numpy as np

from .atom_conv import DecomposedConv2d, channel_mix, compose_filters, spatial_conv
from .layers import ConvBase, FrozenParameterError
from .tensor import ACC, ConvGeometry, ShapeError, out_dtype


def combine(beta: np.ndarray, d1: np.ndarray) -> np.ndarray:
    """Parent atoms ``D[l] = sum_j beta[l, j] D1[l*m_1 + j]``.

    Returns [m, k, k] for compact ``beta`` and [c_in, m, k, k] for per-channel ``beta``.
    """
    m, m1 = beta.shape[-2:]
    if d1.ndim != 3 or d1.shape[0] != m * m1:
        raise ShapeError(f"combine: D1 {d1.shape} incompatible with beta {beta.shape}")
    groups = d1.astype(ACC).reshape(m, m1, *d1.shape[1:])
    if beta.ndim == 2:
        r = np.einsum("lj,ljab->lab", beta.astype(ACC), groups)
    elif beta.ndim == 3:
        r = np.einsum("ilj,ljab->ilab", beta.astype(ACC), groups)
    else:
        raise ShapeError(f"beta must be rank 2 or 3, got {beta.shape}")
    return r.astype(out_dtype(beta, d1))


def intra_channel_mix(beta: np.ndarray, z1: np.ndarray) -> np.ndarray:
    """Combine each group of ``m_1`` consecutive channels with its parent atom's ``beta`` row.

    ``z1`` has ``c_in*m*m_1`` channels ordered (input channel, parent atom, sub-atom);
    the result has ``c_in*m``. Channels of different input channels never mix.
    """
    m, m1 = beta.shape[-2:]
    squeeze = z1.ndim == 3
    zb = z1[None] if squeeze else z1
    n, ch, h, w = zb.shape
    if ch % (m * m1):
        raise ShapeError(f"intra_channel_mix: {ch} channels not divisible by m*m_1={m * m1}")
    c_in = ch // (m * m1)
    if beta.ndim == 3 and beta.shape[0] != c_in:
        raise ShapeError(f"intra_channel_mix: beta has {beta.shape[0]} channels, input has {c_in}")
    g = zb.astype(ACC).reshape(n, c_in, m, m1, h, w)
    spec = "niljhw,lj->nilhw" if beta.ndim == 2 else "niljhw,ilj->nilhw"
    z = np.einsum(spec, g, beta.astype(ACC)).reshape(n, c_in * m, h, w)
    z = z.astype(out_dtype(beta, z1))
    return z[0] if squeeze else z


def compose_overcomplete(alpha: np.ndarray, beta: np.ndarray, d1: np.ndarray) -> np.ndarray:
    """Effective filters [c_out, c_in, k, k] of an overcomplete layer."""
    atoms = combine(beta, d1)
    if atoms.ndim == 3:
        return compose_filters(alpha, atoms)
    f = np.einsum("ijl,ilab->jiab", alpha.astype(ACC), atoms.astype(ACC))
    return np.ascontiguousarray(f, dtype=out_dtype(alpha, atoms))


class OvercompleteConv2d(ConvBase):
    """Decomposed conv whose atoms are ``beta``-weighted sums of sub-atoms ``D1``.

    Tunable: ``beta`` and ``D1``. ``alpha`` stays frozen.
    """

    kind = "overcomplete_conv2d"

    def __init__(self, beta, d1, alpha, bias=None, geom: ConvGeometry = ConvGeometry()):
        super().__init__()
        self.geom = geom
        beta, d1, alpha = np.asarray(beta), np.asarray(d1), np.asarray(alpha)
        m, m1 = beta.shape[-2:]
        if alpha.ndim != 3 or alpha.shape[2] != m:
            raise ShapeError(f"alpha {alpha.shape} incompatible with beta {beta.shape}")
        if beta.ndim == 3 and beta.shape[0] != alpha.shape[0]:
            raise ShapeError(f"per-channel beta {beta.shape} vs alpha {alpha.shape}")
        if d1.ndim != 3 or d1.shape[0] != m * m1:
            raise ShapeError(f"D1 must be [{m * m1}, k, k], got {d1.shape}")
        self.add_param("beta", beta, frozen=False)
        self.add_param("d1", d1, frozen=False)
        self.add_param("alpha", alpha)
        if bias is not None:
            self.add_param("bias", bias)

    beta = property(lambda self: self.params["beta"])
    d1 = property(lambda self: self.params["d1"])
    alpha = property(lambda self: self.params["alpha"])

    @property
    def count_faithful(self) -> bool:
        return self.beta.ndim == 3

    @property
    def m(self) -> int:
        return self.beta.shape[-2]

    @property
    def m1(self) -> int:
        return self.beta.shape[-1]

    @property
    def k(self) -> int:
        return self.d1.shape[-1]

    @property
    def c_in(self) -> int:
        return self.alpha.shape[0]

    @property
    def c_out(self) -> int:
        return self.alpha.shape[1]

    def set_tunable(self, names):
        names = set(names)
        if "alpha" in names:
            raise FrozenParameterError("atom coefficients stay frozen")
        super().set_tunable(names)

    def filters(self):
        return compose_overcomplete(self.alpha, self.beta, self.d1)

    def filter_grads(self, grad_f):
        if not self.tunable & {"beta", "d1"}:
            return {}
        alpha, beta = self.alpha.astype(ACC), self.beta.astype(ACC)
        m, m1, k = self.m, self.m1, self.k
        # per-(input channel, parent atom) gradient of the combined atoms
        g = np.einsum("ijl,jiab->ilab", alpha, grad_f.astype(ACC))
        groups = self.d1.astype(ACC).reshape(m, m1, k, k)
        grads = {}
        if beta.ndim == 2:
            g_atom = g.sum(axis=0)
            gb = np.einsum("lab,ljab->lj", g_atom, groups)
            gd = beta[:, :, None, None] * g_atom[:, None]
        else:
            gb = np.einsum("ilab,ljab->ilj", g, groups)
            gd = np.einsum("ilj,ilab->ljab", beta, g)
        dt = out_dtype(self.alpha, grad_f)
        if "beta" in self.tunable:
            grads["beta"] = gb.astype(dt)
        if "d1" in self.tunable:
            grads["d1"] = gd.reshape(m * m1, k, k).astype(dt)
        return grads

    def three_stage(self, x: np.ndarray) -> np.ndarray:
        z1 = spatial_conv(self.d1, x, self.geom)
        y = channel_mix(self.alpha, intra_channel_mix(self.beta, z1))
        if self.bias is not None:
            y = y + self.bias[:, None, None].astype(y.dtype)
        return y

    def forward(self, x, three_stage: bool = False):
        y, cache = super().forward(x)
        if three_stage:
            y = self.three_stage(x)
        return y, cache

    def tunable_count(self) -> int:
        return self.num_params(self.tunable)


def forward3(layer: OvercompleteConv2d, x: np.ndarray, three_stage: bool = False):
    return layer.forward(x, three_stage=three_stage)


def backward_overcomplete(layer: OvercompleteConv2d, grad_y: np.ndarray, cache: dict
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Gradients ``(grad_beta, grad_D1)``."""
    _, grads = layer.backward(grad_y, cache, need_input_grad=False)
    return grads["beta"], grads["d1"]


def expand(layer: DecomposedConv2d, m1: int, count_faithful: bool = True,
           perturb: float = 0.0, seed: int = 0) -> OvercompleteConv2d:
    """Replace each atom by ``m1`` copies combined with weights ``1/m1``.

    The layer's function is unchanged up to rounding of ``1/m1``. ``perturb > 0`` adds
    i.i.d. N(0, perturb) noise (variance) to the copies, which breaks that equivalence.
    """
    if m1 < 1:
        raise ValueError(f"m1 must be >= 1, got {m1}")
    atoms = layer.atoms
    d1 = np.repeat(atoms, m1, axis=0)
    if perturb > 0:
        rng = np.random.default_rng(seed)
        d1 = (d1 + rng.normal(0.0, np.sqrt(perturb), d1.shape)).astype(atoms.dtype)
    shape = (layer.c_in, layer.m, m1) if count_faithful else (layer.m, m1)
    beta = np.full(shape, 1.0 / m1, dtype=atoms.dtype)
    bias = None if layer.bias is None else layer.bias.copy()
    return OvercompleteConv2d(beta, d1, layer.alpha.copy(), bias, layer.geom)
