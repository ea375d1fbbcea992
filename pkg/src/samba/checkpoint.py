"""Shared on-disk checkpoint format for all three networks.

A checkpoint is a directory holding ``manifest.json`` (model kind,
constructor args, parameter collections with shapes, frozen set,
training provenance) plus one raw little-endian float32 payload file per
parameter tensor, row-major, named by parameter path. Round trips are
bit-exact for float32 models.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .errors import CheckpointError, MissingArtifactError

MANIFEST_NAME = "manifest.json"


def _payload_name(param_path: str) -> str:
    return f"{param_path}.bin"


def collection_params(model) -> dict[str, dict[str, torch.Tensor]]:
    """Map collection name -> {parameter path: tensor} using identity."""
    by_id = {id(p): name for name, p in model.named_parameters()}
    out: dict[str, dict[str, torch.Tensor]] = {}
    for coll, module in model.collections().items():
        out[coll] = {}
        for p in module.parameters():
            out[coll][by_id[id(p)]] = p
    return out


def collection_digests(model) -> dict[str, str]:
    """sha256 over the concatenated float32 payloads of each collection."""
    digests = {}
    for coll, params in collection_params(model).items():
        h = hashlib.sha256()
        for path in sorted(params):
            h.update(params[path].detach().numpy().astype("<f4").tobytes())
        digests[coll] = h.hexdigest()
    return digests


def save_checkpoint(
    model,
    directory: str | Path,
    kind: str,
    arch: dict[str, Any],
    provenance: dict[str, Any] | None = None,
) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    colls = collection_params(model)
    manifest = {
        "kind": kind,
        "arch": arch,
        "collections": {
            coll: {path: list(t.shape) for path, t in sorted(params.items())}
            for coll, params in colls.items()
        },
        "frozen": sorted(model.frozen),
        "provenance": provenance or {},
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    for params in colls.values():
        for path, t in params.items():
            data = t.detach().numpy().astype("<f4").tobytes()
            (directory / _payload_name(path)).write_bytes(data)


def _build(kind: str, arch: dict[str, Any]):
    # local imports keep this module free of circular dependencies
    if kind == "promptnet":
        from .promptnet import PromptModel

        return PromptModel(**arch)
    if kind == "localizer":
        from .localizer import LocalizerNet

        return LocalizerNet(**arch)
    if kind == "votenet":
        from .voting import VoteNet

        return VoteNet(**arch)
    raise CheckpointError(f"unknown checkpoint kind {kind!r}")


def load_manifest(directory: str | Path) -> dict[str, Any]:
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise MissingArtifactError(f"checkpoint manifest not found: {path}")
    return json.loads(path.read_text())


def load_checkpoint(directory: str | Path):
    """Rebuild the model from a checkpoint directory; returns (model, manifest)."""
    directory = Path(directory)
    manifest = load_manifest(directory)
    model = _build(manifest["kind"], manifest["arch"])
    named = dict(model.named_parameters())
    listed: set[str] = set()
    for coll, params in manifest["collections"].items():
        for path, shape in params.items():
            listed.add(path)
            if path not in named:
                raise CheckpointError(
                    f"{directory}: manifest lists unknown parameter {path!r}"
                )
            payload = directory / _payload_name(path)
            if not payload.is_file():
                raise MissingArtifactError(f"missing checkpoint payload: {payload}")
            arr = np.frombuffer(payload.read_bytes(), dtype="<f4")
            expected = tuple(shape)
            if arr.size != int(np.prod(expected, dtype=np.int64)):
                raise CheckpointError(
                    f"{payload}: payload has {arr.size} values, expected shape {expected}"
                )
            with torch.no_grad():
                named[path].copy_(torch.from_numpy(arr.reshape(expected).copy()))
    if listed != set(named):
        raise CheckpointError(
            f"{directory}: manifest parameters do not cover the model"
            f" (missing {sorted(set(named) - listed)})"
        )
    model.frozen = frozenset(manifest.get("frozen", []))
    if hasattr(model, "freeze"):
        model.freeze(set(manifest.get("frozen", [])))
    return model, manifest
