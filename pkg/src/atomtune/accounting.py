"""Closed-form tunable-parameter counts and FLOP estimates. Integer arithmetic only."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

METHODS = ("original", "lora", "loha", "lokr", "oft", "ours_d", "ours_beta")
METHOD_LABELS = {
    "original": "Original",
    "lora": "LoRA",
    "loha": "LoHa",
    "lokr": "LoKr",
    "oft": "OFT",
    "ours_d": "Ours (D or D_c)",
    "ours_d_dc": "Ours (D + D_c)",
    "ours_beta": "Ours (+beta)",
}

# Reference sizes and the printed parameter table they produce.
REFERENCE_SIZES = dict(c=640, k=3, r=8, m=9, m1=3, k_c=4)
REFERENCE_TABLE = {
    ("conv", "original"): 3_686_400,
    ("conv", "lora"): 30_720,
    ("conv", "loha"): 61_440,
    ("conv", "lokr"): 3_904,
    ("conv", "oft"): 460_800,
    ("conv", "ours_d"): 81,
    ("conv", "ours_beta"): 17_523,
    ("attention", "original"): 1_638_400,
    ("attention", "lora"): 40_960,
    ("attention", "loha"): 81_920,
    ("attention", "lokr"): 5_378,
    ("attention", "oft"): 207_360,
    ("attention", "ours_d"): 576,
}


class AccountingError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """One layer's shape plus whichever method hyperparameters apply.

    ``kind`` is ``"conv"`` (c_in x c_out x k x k), ``"linear"`` (one c_in x c_out
    matrix) or ``"attention"`` (the four c x c projections Q, K, V, O).
    """

    kind: str
    c_in: int
    c_out: int
    k: int = 1
    r: Optional[int] = None
    m: Optional[int] = None
    m1: Optional[int] = None
    k_c: Optional[int] = None
    k_c_in: Optional[int] = None
    m_c: Optional[int] = None
    count_faithful: bool = True

    def __post_init__(self):
        if self.kind not in ("conv", "linear", "attention"):
            raise AccountingError(f"unknown layer kind {self.kind!r}")
        if min(self.c_in, self.c_out, self.k) < 1:
            raise AccountingError("layer extents must be positive")
        if self.kind == "attention" and self.c_in != self.c_out:
            raise AccountingError("attention projections are square (c_in == c_out)")

    def need(self, name: str) -> int:
        v = getattr(self, name)
        if v is None:
            raise AccountingError(f"missing hyperparameter {name!r} for {self.kind} layer")
        return v


def _exact_div(a: int, b: int) -> int:
    if a % b:
        raise AccountingError(f"{a} is not divisible by {b}")
    return a // b


def _blocks(spec: LayerSpec) -> tuple[int, int, int]:
    k_c = spec.need("k_c")
    k_c_in = spec.k_c_in if spec.k_c_in is not None else k_c
    m_c = spec.m_c if spec.m_c is not None else spec.need("m")
    _exact_div(spec.c_in, k_c_in)
    _exact_div(spec.c_out, k_c)
    return m_c, k_c_in, k_c


def param_count(spec: LayerSpec, method: str) -> int:
    """Tunable parameters ``method`` adds (or, for ``original``, holds) in one layer."""
    ci, c, k = spec.c_in, spec.c_out, spec.k
    if spec.kind == "conv":
        if method == "original":
            return ci * c * k * k
        if method == "lora":
            r = spec.need("r")
            return ci * k * r + c * k * r
        if method == "loha":
            r = spec.need("r")
            return 2 * ci * k * r + 2 * c * k * r
        if method == "lokr":
            r = spec.need("r")
            return ci * k + c * k + r * r
        if method == "oft":
            return _exact_div(ci * c * k * k, spec.need("r"))
        if method == "ours_d":
            return spec.need("m") * k * k
        if method == "ours_beta":
            m, m1 = spec.need("m"), spec.need("m1")
            return m * m1 * k * k + (ci * m * m1 if spec.count_faithful else m * m1)
    elif spec.kind == "attention":
        if method == "original":
            return 4 * c * c
        if method == "lora":
            return 8 * c * spec.need("r")
        if method == "loha":
            return 16 * c * spec.need("r")
        if method == "lokr":
            r = spec.need("r")
            return 8 * c + 4 * r * r
        if method == "oft":
            return _exact_div(4 * c * c, spec.need("r")) + 4 * c
        if method in ("ours_d", "ours_beta"):
            m_c, a, b = _blocks(spec)
            return 4 * m_c * a * b
    else:  # one linear matrix: a quarter of the attention column
        if method == "original":
            return ci * c
        if method == "lora":
            return (ci + c) * spec.need("r")
        if method == "loha":
            return 2 * (ci + c) * spec.need("r")
        if method == "lokr":
            r = spec.need("r")
            return ci + c + r * r
        if method == "oft":
            return _exact_div(ci * c, spec.need("r")) + c
        if method in ("ours_d", "ours_beta"):
            m_c, a, b = _blocks(spec)
            return m_c * a * b
    raise AccountingError(f"unknown method {method!r}")


def reference_table() -> dict[tuple[str, str], int]:
    """Evaluate every formula at the reference sizes, keyed like ``REFERENCE_TABLE``."""
    s = REFERENCE_SIZES
    conv = LayerSpec("conv", s["c"], s["c"], s["k"], r=s["r"], m=s["m"], m1=s["m1"], k_c=s["k_c"])
    attn = LayerSpec("attention", s["c"], s["c"], r=s["r"], m=s["m"], m1=s["m1"], k_c=s["k_c"])
    specs = {"conv": conv, "attention": attn}
    return {(kind, meth): param_count(specs[kind], meth) for kind, meth in REFERENCE_TABLE}


def decomposition_flops(c_in: int, c_out: int, k: int, m: int, iterations: int) -> int:
    """FLOPs of ``iterations`` ISTA steps on a ``c_in x c_out`` weight.

    ``k`` is the side of a flattened atom (atoms have ``k*k`` entries), i.e. the block
    size of the rearranged matrix, not necessarily a spatial kernel size.
    """
    if min(c_in, c_out, k, iterations) < 1 or m < 0:
        raise AccountingError("decomposition_flops: sizes must be positive")
    return iterations * (4 * c_in * c_out * m + c_in * c_out + 6 * m * k * k)


def linear_flops(batch: int, c_in: int, c_out: int) -> int:
    """Forward + backward + update FLOPs for one linear layer on a batch."""
    if batch < 0 or min(c_in, c_out) < 1:
        raise AccountingError("linear_flops: sizes must be positive")
    forward = 2 * batch * c_in * c_out + 2 * batch * c_out
    backward = 4 * batch * c_in * c_out + 2 * batch * c_out
    update = c_in * c_out + c_out
    return forward + backward + update


# --- model-level reports -----------------------------------------------------------

@dataclass
class ModelReport:
    scheme: str
    per_layer: dict[str, int]
    head: int
    total: int
    comparison: list[tuple[str, int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "per_layer": self.per_layer,
            "backbone": sum(self.per_layer.values()),
            "head": self.head,
            "total": self.total,
            "comparison": [{"method": m, "label": METHOD_LABELS[m], "params": n}
                           for m, n in self.comparison],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        lines = [f"scheme: {self.scheme}"]
        w = max([len(n) for n in self.per_layer] + [5])
        for name, n in self.per_layer.items():
            lines.append(f"  {name:<{w}}  {n:>10,}")
        lines.append(f"  {'head':<{w}}  {self.head:>10,}")
        lines.append(f"  {'total':<{w}}  {self.total:>10,}")
        if self.comparison:
            lines.append("")
            lw = max(len(METHOD_LABELS[m]) for m, _ in self.comparison)
            lines.append(f"  {'method':<{lw}}  {'backbone params':>15}")
            for m, n in self.comparison:
                lines.append(f"  {METHOD_LABELS[m]:<{lw}}  {n:>15,}")
        return "\n".join(lines)


def layer_geometry(layer) -> Optional[tuple[str, int, int, int]]:
    """``(kind, c_in, c_out, k)`` of a weight-bearing layer, else None."""
    kind = layer.kind
    p = layer.params
    if kind in ("conv2d", "lora_conv2d"):
        c_out, c_in, k, _ = p["weight"].shape
        return ("conv" if k > 1 else "linear"), c_in, c_out, k
    if kind == "atom_conv2d":
        c_in, c_out, _ = p["alpha"].shape
        return "conv", c_in, c_out, p["atoms"].shape[-1]
    if kind == "overcomplete_conv2d":
        c_in, c_out, _ = p["alpha"].shape
        return "conv", c_in, c_out, p["d1"].shape[-1]
    if kind in ("linear", "lora_linear"):
        c_in, c_out = p["weight"].shape
        return "linear", c_in, c_out, 1
    if kind == "kron_linear":
        m_c, a, b = p["B"].shape
        return "linear", p["A"].shape[1] * a, p["A"].shape[2] * b, 1
    return None


def scheme_layer_count(layer, scheme, tune_bias: bool = False, tune_norm: bool = False) -> int:
    """Tunable parameters of one backbone layer under ``scheme``, from formulas."""
    from .finetune.schemes import Variant

    v = scheme.variant
    geo = layer_geometry(layer)
    extra = 0
    if v is Variant.FULL:
        if layer.kind == "channel_norm":
            return 2 * layer.params["scale"].shape[0]
        if geo is None:
            return 0
        kind, ci, c, k = geo
        bias = c if "bias" in layer.params else 0
        return param_count(LayerSpec("conv" if k > 1 else "linear", ci, c, k), "original") + bias
    if tune_norm and layer.kind == "channel_norm":
        extra += 2 * layer.params["scale"].shape[0]
    if tune_bias and "bias" in layer.params:
        extra += layer.params["bias"].shape[0]
    if geo is None:
        return extra
    kind, ci, c, k = geo
    if v is Variant.LINEAR_PROBE:
        return extra
    if layer.kind == "atom_conv2d" and v in (Variant.ATOMS_ONLY, Variant.ATOMS_PLUS_LINEAR):
        m = layer.params["atoms"].shape[0]
        return extra + param_count(LayerSpec("conv", ci, c, k, m=m), "ours_d")
    if layer.kind == "overcomplete_conv2d" and v is Variant.OVERCOMPLETE_PLUS_LINEAR:
        beta = layer.params["beta"]
        spec = LayerSpec("conv", ci, c, k, m=beta.shape[-2], m1=beta.shape[-1],
                         count_faithful=beta.ndim == 3)
        return extra + param_count(spec, "ours_beta")
    if layer.kind == "kron_linear" and v in (Variant.ATOMS_PLUS_LINEAR, Variant.OVERCOMPLETE_PLUS_LINEAR):
        m_c, a, b = layer.params["B"].shape
        return extra + param_count(LayerSpec("linear", ci, c, m_c=m_c, k_c_in=a, k_c=b), "ours_d")
    if layer.kind in ("lora_conv2d", "lora_linear") and v is Variant.LORA:
        r = layer.params["down"].shape[1]
        return extra + param_count(LayerSpec(kind, ci, c, k, r=r), "lora")
    return extra


def comparison_table(model, r: int = 8, m: int = 9, m1: int = 3, k_c: int = 4,
                     m_c: Optional[int] = None, count_faithful: bool = True) -> list[tuple[str, int]]:
    """Backbone tunable counts of every method on the model's architecture, ascending.

    Hyperparameters recorded in decomposed layers override the defaults.
    """
    totals = {meth: 0 for meth in ("original", "lora", "loha", "lokr", "oft",
                                   "ours_d", "ours_d_dc", "ours_beta")}
    for name, layer in model:
        if name == model.head_name:
            continue
        geo = layer_geometry(layer)
        if geo is None:
            continue
        kind, ci, c, k = geo
        lm, lm1, blocks, lmc = m, m1, (k_c, k_c), (m_c or m)
        faithful = count_faithful
        if layer.kind == "atom_conv2d":
            lm = layer.params["atoms"].shape[0]
        elif layer.kind == "overcomplete_conv2d":
            lm, lm1 = layer.params["beta"].shape[-2:]
            faithful = layer.params["beta"].ndim == 3
        elif layer.kind == "kron_linear":
            lmc, *blocks = layer.params["B"].shape
        spec = LayerSpec(kind, ci, c, k, r=r, m=lm, m1=lm1, k_c=blocks[1], k_c_in=blocks[0],
                         m_c=lmc, count_faithful=faithful)
        for meth in ("original", "lora", "loha", "lokr", "oft"):
            try:
                totals[meth] += param_count(spec, meth)
            except AccountingError:
                totals[meth] += 0
        if kind == "conv":
            totals["ours_d"] += param_count(spec, "ours_d")
            totals["ours_d_dc"] += param_count(spec, "ours_d")
            totals["ours_beta"] += param_count(spec, "ours_beta")
        elif ci % blocks[0] == 0 and c % blocks[1] == 0:
            totals["ours_d_dc"] += param_count(spec, "ours_d")
            totals["ours_beta"] += param_count(spec, "ours_beta")
    return sorted(totals.items(), key=lambda kv: (kv[1], kv[0]))


def model_report(model, scheme, tune_bias: bool = False, tune_norm: bool = False,
                 compare: bool = True) -> ModelReport:
    """Formula-based counts for ``scheme``, cross-checked against the actual partition."""
    from .finetune.schemes import freeze_partition

    per_layer = {}
    for name, layer in model:
        if name == model.head_name:
            continue
        per_layer[name] = scheme_layer_count(layer, scheme, tune_bias, tune_norm)
    head = model.head.num_params()
    probe = model.copy()
    part = freeze_partition(probe, scheme, tune_bias, tune_norm)
    if part.per_layer != per_layer or part.head != head:
        diff = {n: (per_layer.get(n), part.per_layer.get(n))
                for n in set(per_layer) | set(part.per_layer)
                if per_layer.get(n) != part.per_layer.get(n)}
        raise AccountingError(f"formula counts disagree with freeze_partition: {diff}")
    comparison = comparison_table(model) if compare else []
    return ModelReport(str(scheme), per_layer, head, sum(per_layer.values()) + head, comparison)
