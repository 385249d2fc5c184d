"""Versioned binary checkpoints.

Layout::

    magic    8 bytes   b"EMEACKPT"
    version  uint32 LE
    length   uint64 LE  byte length of the manifest
    manifest UTF-8 JSON {"meta": {...}, "tensors": [{name, dtype, shape, offset, nbytes}]}
    payload  raw little-endian float32 arrays, offsets relative to payload start

Loading validates everything before building any object, so a corrupt file
never yields a partial model.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Node
from .encoder import AdapterParams, AdapterRegistry, Backbone, Encoder, ModelConfig
from .ensemble import FusionParams
from .tokenizer import Vocabulary

MAGIC = b"EMEACKPT"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")
_DTYPE = "<f4"


class CheckpointError(ValueError):
    """A checkpoint file is malformed, truncated or incompatible."""


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=_DTYPE)
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": "float32", "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(manifest)))
        fh.write(manifest)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read ({exc.strerror})") from exc
    if len(blob) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, mlen = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    start = _HEADER.size
    if start + mlen > len(blob):
        raise CheckpointError(f"{path}: manifest length {mlen} runs past end of file")
    try:
        manifest = json.loads(blob[start : start + mlen].decode("utf-8"))
        meta, entries = manifest["meta"], manifest["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from exc
    payload = memoryview(blob)[start + mlen :]
    tensors = {}
    for e in entries:
        name = e.get("name")
        if e.get("dtype") != "float32":
            raise CheckpointError(f"{path}: tensor {name!r} has unsupported dtype {e.get('dtype')!r}")
        shape = tuple(e["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if nbytes != e["nbytes"] or e["offset"] + nbytes > len(payload):
            raise CheckpointError(f"{path}: tensor {name!r} is truncated or mis-sized")
        arr = np.frombuffer(payload[e["offset"] : e["offset"] + nbytes], dtype=_DTYPE).reshape(shape)
        tensors[name] = arr.astype(np.float32)
    return tensors, meta


# --------------------------------------------------------------------------- #
# model-level containers
# --------------------------------------------------------------------------- #


def _group_tensors(prefix: str, params) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.value for k, v in params.items()}


def save_checkpoint(
    path: str | Path,
    model: Encoder | None = None,
    adapters: list[AdapterParams] | AdapterRegistry | None = None,
    fusions: list[FusionParams] | None = None,
    extra_meta: dict | None = None,
) -> None:
    """Write any of: backbone (+config, vocabulary), adapters, fusion layers."""
    tensors: dict[str, np.ndarray] = {}
    meta: dict = {"adapters": [], "fusions": [], **(extra_meta or {})}
    if model is not None:
        meta["config"] = model.config.to_dict()
        meta["vocab"] = model.vocab.tokens
        meta["max_pieces"] = model.vocab.max_pieces
        tensors.update(_group_tensors("backbone", model.backbone.params))
    items = list(adapters.values()) if isinstance(adapters, dict) else list(adapters or [])
    seen = set()
    for a in items:
        if a.name in seen:
            raise CheckpointError(f"duplicate adapter name {a.name!r}")
        seen.add(a.name)
        meta["adapters"].append({"name": a.name, "kind": a.kind, "n_layers": a.n_layers})
        tensors.update(_group_tensors(f"adapter/{a.name}", a.params))
    for f in fusions or []:
        meta["fusions"].append({"name": f.name, "n_adapters": f.n_adapters, "n_layers": f.n_layers})
        tensors.update(_group_tensors(f"fusion/{f.name}", f.params))
    save_tensors(path, tensors, meta)


def manifest(path: str | Path) -> list[tuple[str, tuple[int, ...]]]:
    tensors, _ = load_tensors(path)
    return [(k, v.shape) for k, v in sorted(tensors.items())]


def _expected_adapter_names(kind: str, n_layers: int) -> set[str]:
    names = set()
    for i in range(n_layers):
        for part in ("down.w", "down.b", "up.w", "up.b", "ln.g", "ln.b"):
            names.add(f"layer{i}.{part}")
    if kind == "task":
        names |= {"head.w", "head.b"}
    return names


class Checkpoint:
    """Contents of a loaded checkpoint."""

    def __init__(self, model: Encoder | None, adapters: AdapterRegistry, fusions: dict[str, FusionParams], meta: dict):
        self.model = model
        self.adapters = adapters
        self.fusions = fusions
        self.meta = meta


def load_checkpoint(path: str | Path) -> Checkpoint:
    tensors, meta = load_tensors(path)
    groups: dict[str, dict[str, np.ndarray]] = {}
    for full, arr in tensors.items():
        if full.startswith("backbone/"):
            key = "backbone"
        elif full.startswith(("adapter/", "fusion/")):
            kind, rest = full.split("/", 1)
            if "/" not in rest:
                raise CheckpointError(f"{path}: malformed tensor name {full!r}")
            key = f"{kind}/{rest.split('/', 1)[0]}"
        else:
            raise CheckpointError(f"{path}: unknown tensor name {full!r}")
        groups.setdefault(key, {})[full[len(key) + 1 :]] = arr

    model = None
    if "backbone" in groups or "config" in meta:
        try:
            config = ModelConfig(**meta["config"])
            vocab = Vocabulary(meta["vocab"], max_pieces=meta.get("max_pieces", 6))
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: bad model metadata ({exc})") from exc
        template = Backbone.create(config, np.random.default_rng(0))
        _fill(path, "backbone", template, groups.pop("backbone", {}))
        model = Encoder(config, vocab, template)

    registry = AdapterRegistry()
    for info in meta.get("adapters", []):
        key = f"adapter/{info['name']}"
        state = groups.pop(key, {})
        expected = _expected_adapter_names(info["kind"], info["n_layers"])
        _check_names(path, key, expected, state)
        params = {k: _leaf(v, k) for k, v in state.items()}
        registry.add(AdapterParams(info["kind"], info["name"], params, info["n_layers"]))

    fusions = {}
    for info in meta.get("fusions", []):
        key = f"fusion/{info['name']}"
        state = groups.pop(key, {})
        expected = {f"layer{i}.{w}" for i in range(info["n_layers"]) for w in ("wq", "wk", "wv")}
        _check_names(path, key, expected, state)
        fusions[info["name"]] = FusionParams(info["n_adapters"], info["n_layers"], {k: _leaf(v, k) for k, v in state.items()}, info["name"])

    if groups:
        stray = sorted(groups)[0]
        raise CheckpointError(f"{path}: unknown tensor group {stray!r} not listed in the manifest metadata")
    return Checkpoint(model, registry, fusions, meta)


def _leaf(arr: np.ndarray, name: str) -> Node:
    return Node(arr, requires_grad=False, name=name)


def _check_names(path, group: str, expected: set[str], state: dict) -> None:
    unknown = sorted(set(state) - expected)
    missing = sorted(expected - set(state))
    if unknown:
        raise CheckpointError(f"{path}: unknown tensor {group}/{unknown[0]}")
    if missing:
        raise CheckpointError(f"{path}: missing tensor {group}/{missing[0]}")


def _fill(path, group: str, target: Backbone, state: dict[str, np.ndarray]) -> None:
    _check_names(path, group, set(target.params), state)
    for k, arr in state.items():
        if arr.shape != target.params[k].shape:
            raise CheckpointError(f"{path}: tensor {group}/{k} has shape {arr.shape}, expected {target.params[k].shape}")
        target.params[k].value = arr
