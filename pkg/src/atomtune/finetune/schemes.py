"""Tuning schemes: which parameters train, and the model conversions each scheme needs."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..atom_conv import DecomposedConv2d, from_dense
from ..kron_linear import KronLinear, decompose_linear
from ..layers import Conv2d, Linear
from ..overcomplete import OvercompleteConv2d, expand
from ..sparse_coding import DecompositionReport, SparseCodingConfig
from .lora import LoRAConv2d, LoRALinear
from .model import Model, ParamKey

log = logging.getLogger(__name__)


class Variant(str, enum.Enum):
    LINEAR_PROBE = "linear-probe"
    ATOMS_ONLY = "atoms-only"
    ATOMS_PLUS_LINEAR = "atoms-plus-linear"
    OVERCOMPLETE_PLUS_LINEAR = "overcomplete-plus-linear"
    LORA = "lora"
    FULL = "full"


@dataclass(frozen=True)
class TuningScheme:
    variant: Variant
    r: Optional[int] = None  # LoRA rank

    @classmethod
    def parse(cls, text: str) -> "TuningScheme":
        """``"atoms-only"``, ``"lora:8"``, ..."""
        name, _, arg = text.partition(":")
        variant = Variant(name)
        if variant is Variant.LORA:
            return cls(variant, int(arg) if arg else 8)
        if arg:
            raise ValueError(f"scheme {name} takes no argument")
        return cls(variant)

    def __str__(self):
        return f"lora:{self.r}" if self.variant is Variant.LORA else self.variant.value


LinearProbe = TuningScheme(Variant.LINEAR_PROBE)
AtomsOnly = TuningScheme(Variant.ATOMS_ONLY)
AtomsPlusLinear = TuningScheme(Variant.ATOMS_PLUS_LINEAR)
OvercompletePlusLinear = TuningScheme(Variant.OVERCOMPLETE_PLUS_LINEAR)
FullFinetune = TuningScheme(Variant.FULL)


def LoRABaseline(r: int = 8) -> TuningScheme:
    return TuningScheme(Variant.LORA, r)


class SchemeError(ValueError):
    """The model lacks the decomposition a scheme requires."""


_SCHEME_PARAMS = {
    Variant.ATOMS_ONLY: {"atom_conv2d": {"atoms"}},
    Variant.ATOMS_PLUS_LINEAR: {"atom_conv2d": {"atoms"}, "kron_linear": {"B"}},
    Variant.OVERCOMPLETE_PLUS_LINEAR: {"overcomplete_conv2d": {"beta", "d1"}, "kron_linear": {"B"}},
    Variant.LORA: {"lora_conv2d": {"down", "up"}, "lora_linear": {"down", "up"}},
    Variant.LINEAR_PROBE: {},
}

_REQUIRED = {
    Variant.ATOMS_ONLY: [("atom_conv2d",)],
    Variant.ATOMS_PLUS_LINEAR: [("atom_conv2d",), ("kron_linear",)],
    Variant.OVERCOMPLETE_PLUS_LINEAR: [("overcomplete_conv2d",), ("kron_linear",)],
    Variant.LORA: [("lora_conv2d", "lora_linear")],
}

_DECOMPOSED = {"atom_conv2d", "overcomplete_conv2d", "kron_linear"}


@dataclass
class Partition:
    tunable: list[ParamKey]
    frozen: list[ParamKey]
    per_layer: dict[str, int]
    head: int
    total: int = field(init=False)

    def __post_init__(self):
        self.total = sum(self.per_layer.values()) + self.head

    @property
    def backbone(self) -> int:
        return sum(self.per_layer.values())


def freeze_partition(model: Model, scheme: TuningScheme, tune_bias: bool = False,
                     tune_norm: bool = False) -> Partition:
    """Set tunable/frozen flags on every layer for ``scheme`` and report the counts.

    The classifier head is always fully tunable. Biases and normalization parameters
    of the backbone are frozen unless ``tune_bias`` / ``tune_norm`` (always tunable
    under full fine-tuning).
    """
    v = scheme.variant
    kinds = {layer.kind for _, layer in model}
    for options in _REQUIRED.get(v, []):
        if not kinds.intersection(options):
            raise SchemeError(f"scheme {scheme} needs a layer of kind {' or '.join(options)}")
    if v is Variant.FULL and kinds & _DECOMPOSED:
        raise SchemeError("full fine-tuning needs a dense model (decomposed coefficients stay frozen)")
    if v is Variant.OVERCOMPLETE_PLUS_LINEAR and "atom_conv2d" in kinds:
        raise SchemeError("overcomplete scheme needs expanded atoms; run prepare_model first")

    wanted = _SCHEME_PARAMS.get(v, {})
    per_layer: dict[str, int] = {}
    for name, layer in model:
        if name == model.head_name:
            layer.set_tunable(layer.params)
            continue
        if v is Variant.FULL:
            names = set(layer.params)
        else:
            names = set(wanted.get(layer.kind, set()))
            if tune_bias and "bias" in layer.params:
                names.add("bias")
            if tune_norm and layer.kind == "channel_norm":
                names |= {"scale", "shift"}
        layer.set_tunable(names & set(layer.params))
        per_layer[name] = layer.num_params(layer.tunable)
    tunable = list(model.tunable())
    frozen = list(model.frozen())
    return Partition(tunable, frozen, per_layer, model.head.num_params())


def prepare_model(model: Model, scheme: TuningScheme, m1: int = 3, count_faithful: bool = True,
                  perturb: float = 0.0, seed: int = 0) -> Model:
    """Return a copy of ``model`` converted as ``scheme`` requires.

    Overcomplete schemes expand every atom layer; LoRA wraps every dense conv/linear
    layer except the head. Other schemes only copy.
    """
    out = model.copy()
    rng = np.random.default_rng(seed)
    for name, layer in list(out):
        if name == out.head_name:
            continue
        if scheme.variant is Variant.OVERCOMPLETE_PLUS_LINEAR and isinstance(layer, DecomposedConv2d):
            out[name] = expand(layer, m1, count_faithful, perturb, seed)
        elif scheme.variant is Variant.LORA and isinstance(layer, Conv2d):
            out[name] = LoRAConv2d.wrap(layer, scheme.r, rng)
        elif scheme.variant is Variant.LORA and isinstance(layer, Linear):
            out[name] = LoRALinear.wrap(layer, scheme.r, rng)
    return out


@dataclass
class DecomposeOptions:
    m: int = 9
    m_c: int = 9
    k_in: int = 4
    k_out: int = 4
    linear: bool = True
    sparse: SparseCodingConfig = field(default_factory=SparseCodingConfig)


def decompose_model(model: Model, opts: DecomposeOptions, seed: int = 0
                    ) -> tuple[Model, dict[str, dict], list[str]]:
    """Replace eligible dense layers by their decomposed forms.

    Convs with k > 1 become :class:`DecomposedConv2d`; 1x1 convs and linear layers
    (except the head) become :class:`KronLinear` when the block size divides them.
    Returns ``(model, reports, notes)``; ineligible or already-decomposed layers are
    left alone and mentioned in ``notes``.
    """
    out = model.copy()
    reports: dict[str, dict] = {}
    notes: list[str] = []
    for idx, (name, layer) in enumerate(list(out)):
        if name == out.head_name:
            continue
        if layer.kind in _DECOMPOSED:
            notes.append(f"{name}: already decomposed, left unchanged")
            continue
        layer_seed = seed + 1009 * idx
        bias = layer.params.get("bias")
        bias = None if bias is None else bias.copy()
        if isinstance(layer, Conv2d) and layer.k > 1:
            new, rep = from_dense(layer.weight, bias, layer.geom, opts.m, opts.sparse, layer_seed)
            new.set_tunable([])
            out[name] = new
            reports[name] = _report(rep, "conv")
            continue
        pointwise = isinstance(layer, Conv2d) and layer.k == 1 and layer.geom.stride == 1 \
            and layer.geom.padding == 0
        if not opts.linear or not (pointwise or isinstance(layer, Linear)):
            continue
        w = layer.weight[:, :, 0, 0].T if pointwise else layer.weight
        c_in, c_out = w.shape
        if c_in % opts.k_in or c_out % opts.k_out:
            notes.append(f"{name}: shape {w.shape} not divisible by blocks "
                         f"({opts.k_in}, {opts.k_out}); left dense and frozen")
            continue
        f = decompose_linear(w, opts.m_c, opts.k_in, opts.k_out, opts.sparse, layer_seed)
        new = KronLinear(f.A, f.B, bias)
        new.set_tunable([])
        out[name] = new
        reports[name] = _report(f.report, "linear")
    for note in notes:
        log.warning(note)
    return out, reports, notes


def _report(rep: DecompositionReport, kind: str) -> dict:
    d = rep.to_dict()
    d["kind"] = kind
    return d
