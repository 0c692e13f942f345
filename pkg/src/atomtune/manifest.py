"""Model checkpoints: a JSON manifest plus one ATF1 blob per tensor in a sibling directory.

Layout for ``model.json``::

    model.json          ordered layer records, frozen flags, hyperparameters, metadata
    model.blobs/        <layer>.<param>.atf  and  <layer>.probe.atf

Every decomposed layer also stores the output it produced on a seeded probe input
at save time, and the SHA-256 digests its frozen factors had when they were created.
``verify`` uses both to detect corrupted or silently modified blobs.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .atom_conv import DecomposedConv2d
from .finetune.lora import LoRAConv2d, LoRALinear
from .finetune.model import Model
from .kron_linear import KronLinear
from .layers import ChannelNorm, Conv2d, GlobalAvgPool, Layer, Linear, ReLU
from .overcomplete import OvercompleteConv2d
from .tensor import ConvGeometry, read_atf, write_atf

FORMAT = "atomtune-manifest"
FORMAT_VERSION = 1
DECOMPOSED_KINDS = ("atom_conv2d", "overcomplete_conv2d", "kron_linear")
PROBE_KINDS = DECOMPOSED_KINDS + ("lora_conv2d", "lora_linear")


class ManifestError(ValueError):
    pass


def digest(arr: np.ndarray) -> str:
    """SHA-256 of the little-endian float32 bytes of ``arr``."""
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f4").tobytes()).hexdigest()


def blob_dir(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".blobs")


def annotations(layer: Layer) -> dict:
    """Per-layer bookkeeping carried through checkpoints (created on first use)."""
    if not hasattr(layer, "annotations"):
        layer.annotations = {}
    return layer.annotations


def record_reference_digests(layer: Layer) -> None:
    """Remember the current digests of the layer's frozen decomposition factors."""
    names = [n for n in ("alpha", "A") if n in layer.params]
    annotations(layer)["reference_sha256"] = {n: digest(layer.params[n]) for n in names}


# --- probes ---------------------------------------------------------------------------

def probe_input(layer: Layer, seed: int) -> np.ndarray:
    """Deterministic float32 input matching the layer's expected channels."""
    rng = np.random.default_rng(seed)
    if layer.kind in ("kron_linear", "lora_linear", "linear"):
        c_in = layer.matrix().shape[0]
        return rng.standard_normal((2, c_in)).astype(np.float32)
    c_in = layer.filters().shape[1]
    return rng.standard_normal((2, c_in, 9, 9)).astype(np.float32)


def probe_output(layer: Layer, seed: int) -> np.ndarray:
    y, _ = layer.forward(probe_input(layer, seed))
    return np.ascontiguousarray(y, dtype=np.float32)


# --- layer (de)construction --------------------------------------------------------------

def _hyper(layer: Layer) -> dict[str, Any]:
    h: dict[str, Any] = {}
    geom = getattr(layer, "geom", None)
    if geom is not None:
        h["stride"], h["padding"] = geom.stride, geom.padding
    if isinstance(layer, ChannelNorm):
        h["eps"] = layer.eps
    if isinstance(layer, (LoRAConv2d, LoRALinear)):
        h["scale"] = layer.scale
    return h


def _dims(layer: Layer) -> dict[str, Any]:
    """Readable shape summary of decomposed layers (informational; shapes live in the blobs)."""
    if isinstance(layer, DecomposedConv2d):
        return {"m": layer.m, "k": layer.k, "c_in": layer.c_in, "c_out": layer.c_out}
    if isinstance(layer, OvercompleteConv2d):
        return {"m": layer.m, "m1": layer.m1, "k": layer.k, "c_in": layer.c_in,
                "c_out": layer.c_out, "count_faithful": layer.count_faithful}
    if isinstance(layer, KronLinear):
        c_in, c_out = layer.shape
        k_in, k_out = layer.blocks
        return {"m_c": layer.m_c, "k_in": k_in, "k_out": k_out, "c_in": c_in, "c_out": c_out}
    return {}


def _build(kind: str, p: dict[str, np.ndarray], h: dict[str, Any]) -> Layer:
    geom = ConvGeometry(int(h.get("stride", 1)), int(h.get("padding", 0)))
    bias = p.get("bias")
    if kind == "conv2d":
        return Conv2d(p["weight"], bias, geom)
    if kind == "atom_conv2d":
        return DecomposedConv2d(p["atoms"], p["alpha"], bias, geom)
    if kind == "overcomplete_conv2d":
        return OvercompleteConv2d(p["beta"], p["d1"], p["alpha"], bias, geom)
    if kind == "linear":
        return Linear(p["weight"], bias)
    if kind == "kron_linear":
        return KronLinear(p["A"], p["B"], bias)
    if kind == "lora_conv2d":
        return LoRAConv2d(p["weight"], bias, geom, p["down"], p["up"], float(h["scale"]))
    if kind == "lora_linear":
        return LoRALinear(p["weight"], bias, p["down"], p["up"], float(h["scale"]))
    if kind == "channel_norm":
        return ChannelNorm(p["scale"], p["shift"], float(h.get("eps", 1e-5)))
    if kind == "relu":
        return ReLU()
    if kind == "global_avg_pool":
        return GlobalAvgPool()
    raise ManifestError(f"unknown layer kind {kind!r}")


# --- save / load ---------------------------------------------------------------------------

def save_model(model: Model, path, meta: Optional[dict] = None) -> dict:
    """Write ``model`` to ``path`` (JSON) and its blobs; returns the manifest dict.

    Stale ``.atf`` files in the blob directory that the new manifest does not
    reference are removed so the directory always mirrors the manifest.
    """
    path = Path(path)
    bdir = blob_dir(path)
    bdir.mkdir(parents=True, exist_ok=True)
    written: set[str] = set()
    records = []
    for idx, (name, layer) in enumerate(model):
        params = {}
        for pname in sorted(layer.params):
            arr = layer.params[pname]
            fname = f"{name}.{pname}.atf"
            write_atf(bdir / fname, arr)
            written.add(fname)
            params[pname] = {"blob": fname, "shape": list(arr.shape),
                             "frozen": pname not in layer.tunable}
        rec: dict[str, Any] = {"name": name, "kind": layer.kind, "hyper": _hyper(layer),
                               "params": params}
        if _dims(layer):
            rec["dims"] = _dims(layer)
        ann = dict(getattr(layer, "annotations", {}))
        if layer.kind in PROBE_KINDS:
            seed = 7919 + idx
            fname = f"{name}.probe.atf"
            write_atf(bdir / fname, probe_output(layer, seed))
            written.add(fname)
            ann["probe"] = {"seed": seed, "blob": fname}
        if ann:
            rec["annotations"] = ann
        records.append(rec)
    doc = {"format": FORMAT, "version": FORMAT_VERSION, "blob_dir": bdir.name,
           "layers": records, "meta": meta or {}}
    for stale in bdir.glob("*.atf"):
        if stale.name not in written:
            stale.unlink()
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    if doc.get("format") != FORMAT:
        raise ManifestError(f"{path} is not an {FORMAT} file")
    if doc.get("version") != FORMAT_VERSION:
        raise ManifestError(f"unsupported manifest version {doc.get('version')}")
    return doc


def load_model(path) -> tuple[Model, dict]:
    """Inverse of :func:`save_model`; returns ``(model, meta)``.

    Every referenced blob must exist and match its recorded shape.
    """
    path = Path(path)
    doc = read_manifest(path)
    bdir = path.parent / doc["blob_dir"]
    layers = []
    for rec in doc["layers"]:
        params = {}
        for pname, info in rec["params"].items():
            f = bdir / info["blob"]
            if not f.is_file():
                raise ManifestError(f"{rec['name']}: missing blob {f}")
            arr = read_atf(f)
            if list(arr.shape) != list(info["shape"]):
                raise ManifestError(f"{rec['name']}.{pname}: blob shape {list(arr.shape)} "
                                    f"!= recorded {info['shape']}")
            params[pname] = arr
        try:
            layer = _build(rec["kind"], params, rec.get("hyper", {}))
        except (KeyError, ValueError) as e:
            raise ManifestError(f"{rec['name']}: cannot build {rec['kind']}: {e}") from e
        layer.set_tunable([p for p, info in rec["params"].items() if not info["frozen"]])
        if "annotations" in rec:
            layer.annotations = {k: v for k, v in rec["annotations"].items() if k != "probe"}
        layers.append((rec["name"], layer))
    if not layers:
        raise ManifestError("manifest has no layers")
    return Model(layers), doc.get("meta", {})


def stored_probe(path, name: str) -> Optional[tuple[int, np.ndarray]]:
    """``(seed, output)`` recorded for layer ``name``, or None when it has no probe."""
    path = Path(path)
    doc = read_manifest(path)
    for rec in doc["layers"]:
        if rec["name"] == name:
            probe = rec.get("annotations", {}).get("probe")
            if probe is None:
                return None
            return probe["seed"], read_atf(path.parent / doc["blob_dir"] / probe["blob"])
    raise ManifestError(f"no layer named {name!r}")
