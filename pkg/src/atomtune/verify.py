"""Self-consistency checks run against a saved checkpoint."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .accounting import AccountingError, model_report
from .finetune.model import Model
from .finetune.schemes import (AtomsOnly, AtomsPlusLinear, LinearProbe, LoRABaseline,
                               OvercompletePlusLinear, SchemeError, TuningScheme, freeze_partition)
from .layers import Layer
from .manifest import (DECOMPOSED_KINDS, PROBE_KINDS, digest, load_model, probe_input,
                       stored_probe)
from .tensor import kron

EQUIV_TOL = 1e-5
FD_STEP = 1e-3
FD_ENTRY_TOL = 1e-3
FD_WORST_TOL = 1e-2
FD_FRACTION = 0.99
FD_SAMPLES = 24

# parameters whose gradients the fine-tuning schemes rely on, per layer kind
GRAD_PARAMS = {
    "atom_conv2d": ("atoms",),
    "overcomplete_conv2d": ("beta", "d1"),
    "kron_linear": ("B",),
    "lora_conv2d": ("down", "up"),
    "lora_linear": ("down", "up"),
}


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    deviation: Optional[float] = None

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


@dataclass
class VerifyReport:
    checks: list[Check]
    warnings: list[str]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def text(self) -> str:
        lines = [f"warning: {w}" for w in self.warnings]
        lines += [c.line() for c in self.checks]
        n_fail = sum(not c.passed for c in self.checks)
        lines.append(f"{len(self.checks) - n_fail}/{len(self.checks)} checks passed")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "warnings": self.warnings,
                "checks": [c.__dict__ for c in self.checks]}


def rel_dev(a: np.ndarray, b: np.ndarray) -> float:
    """max |a - b| relative to max |b| (absolute when ``b`` vanishes)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = float(np.max(np.abs(b))) if b.size else 0.0
    return float(np.max(np.abs(a - b))) / (scale if scale > 1e-12 else 1.0)


def _dense_kron(layer) -> np.ndarray:
    A = layer.A.astype(np.float64)
    B = layer.B.astype(np.float64)
    return sum(kron(A[i], B[i]) for i in range(A.shape[0]))


def equivalence_checks(name: str, layer: Layer, probe: Optional[tuple[int, np.ndarray]]) -> list[Check]:
    out = []
    if probe is not None:
        seed, stored = probe
        x = probe_input(layer, seed)
        y, _ = layer.forward(x)
        if layer.kind == "atom_conv2d":
            d = rel_dev(layer.two_stage(x), y)
            out.append(Check(f"equivalence/two-stage/{name}", d <= EQUIV_TOL,
                             f"composed vs spatial+mixing deviation {d:.2e}", d))
        elif layer.kind == "overcomplete_conv2d":
            d = rel_dev(layer.three_stage(x), y)
            out.append(Check(f"equivalence/three-stage/{name}", d <= EQUIV_TOL,
                             f"composed vs three-stage deviation {d:.2e}", d))
        elif layer.kind == "kron_linear":
            ref = x.astype(np.float64) @ _dense_kron(layer)
            if "bias" in layer.params:
                ref = ref + layer.params["bias"]
            d = rel_dev(y, ref)
            out.append(Check(f"equivalence/kronecker/{name}", d <= EQUIV_TOL,
                             f"composed vs explicit Kronecker sum deviation {d:.2e}", d))
        d = rel_dev(y, stored)
        out.append(Check(f"equivalence/stored-probe/{name}", d <= EQUIV_TOL,
                         f"output vs output recorded at save time deviation {d:.2e}", d))
    return out


def frozen_checks(name: str, layer: Layer) -> list[Check]:
    refs = getattr(layer, "annotations", {}).get("reference_sha256", {})
    out = []
    for pname, ref in sorted(refs.items()):
        ok = digest(layer.params[pname]) == ref
        n_diff = "" if ok else " (tensor differs from the one produced at decomposition)"
        out.append(Check(f"frozen/{name}.{pname}", ok,
                         ("bitwise identical to decomposition output" if ok else "digest mismatch") + n_diff,
                         0.0 if ok else 1.0))
    return out


def _float64_copy(layer: Layer, tunable) -> Layer:
    c = copy.deepcopy(layer)
    for pname, arr in list(c.params.items()):
        c.params[pname] = np.array(arr, dtype=np.float64)
    c.set_tunable(tunable)
    c.touch()
    return c


def gradient_checks(name: str, layer: Layer, seed: int) -> list[Check]:
    pnames = GRAD_PARAMS.get(layer.kind, ())
    if not pnames:
        return []
    lay = _float64_copy(layer, pnames)
    rng = np.random.default_rng(seed)
    x = probe_input(layer, seed).astype(np.float64)
    y, cache = lay.forward(x)
    r = rng.standard_normal(y.shape)
    _, grads = lay.backward(r, cache, need_input_grad=False)

    def loss():
        lay.touch()
        out, _ = lay.forward(x)
        return float(np.sum(out * r))

    checks = []
    for pname in pnames:
        arr = lay.params[pname]
        flat = arr.reshape(-1)
        idx = rng.choice(flat.size, size=min(FD_SAMPLES, flat.size), replace=False)
        errs = []
        for i in idx:
            orig = flat[i]
            flat[i] = orig + FD_STEP
            fp = loss()
            flat[i] = orig - FD_STEP
            fm = loss()
            flat[i] = orig
            num = (fp - fm) / (2 * FD_STEP)
            ana = float(grads[pname].reshape(-1)[i])
            den = max(abs(num), abs(ana))
            errs.append(abs(num - ana) / den if den > 1e-8 else abs(num - ana))
        lay.touch()
        errs = np.array(errs)
        frac = float(np.mean(errs <= FD_ENTRY_TOL))
        worst = float(errs.max())
        ok = frac >= FD_FRACTION and worst <= FD_WORST_TOL
        checks.append(Check(f"gradient/{name}.{pname}", ok,
                            f"{len(errs)} entries, worst relative error {worst:.2e}, "
                            f"{frac:.0%} within {FD_ENTRY_TOL:g}", worst))
    return checks


def infer_scheme(model: Model) -> TuningScheme:
    """The scheme a checkpoint was most plausibly prepared for."""
    kinds = {layer.kind for _, layer in model}
    if "overcomplete_conv2d" in kinds:
        return OvercompletePlusLinear
    if "lora_conv2d" in kinds or "lora_linear" in kinds:
        r = next(l.r for _, l in model if l.kind in ("lora_conv2d", "lora_linear"))
        return LoRABaseline(r)
    if "kron_linear" in kinds:
        return AtomsPlusLinear
    if "atom_conv2d" in kinds:
        return AtomsOnly
    return LinearProbe


def accounting_checks(model: Model, meta: dict) -> list[Check]:
    scheme = TuningScheme.parse(meta["scheme"]) if "scheme" in meta else infer_scheme(model)
    tb, tn = bool(meta.get("tune_bias", False)), bool(meta.get("tune_norm", False))
    out = []
    try:
        rep = model_report(model, scheme, tb, tn, compare=False)
        out.append(Check(f"accounting/{scheme}", True,
                         f"formula counts match partition ({rep.total} tunable incl. head)", 0.0))
    except (AccountingError, SchemeError) as e:
        out.append(Check(f"accounting/{scheme}", False, str(e), 1.0))
        return out
    if "scheme" in meta:
        probe = model.copy()
        freeze_partition(probe, scheme, tb, tn)
        expected, actual = set(probe.tunable()), set(model.tunable())
        ok = expected == actual
        detail = "stored frozen flags match the scheme" if ok else \
            f"flag mismatch: {sorted(expected ^ actual)}"
        out.append(Check("accounting/frozen-flags", ok, detail, 0.0 if ok else 1.0))
    return out


def verify_checkpoint(path) -> VerifyReport:
    path = Path(path)
    model, meta = load_model(path)
    checks: list[Check] = []
    warnings: list[str] = []
    decomposed = [(n, l) for n, l in model if l.kind in DECOMPOSED_KINDS]
    if not decomposed:
        warnings.append("no decomposed layers")
    for idx, (name, layer) in enumerate(model):
        if layer.kind not in PROBE_KINDS:
            continue
        checks += equivalence_checks(name, layer, stored_probe(path, name))
        checks += frozen_checks(name, layer)
        checks += gradient_checks(name, layer, seed=104729 + idx)
    if decomposed or "scheme" in meta:
        checks += accounting_checks(model, meta)
    return VerifyReport(checks, warnings)
