"""Core data model: multi-modal volumes, labels, slicing, composites, SVOL I/O.

Conventions used throughout the package:

* volumes are dense ``float32`` numpy arrays indexed ``[d][h][w]``
* label volumes are ``uint8`` arrays over the codes
  0 = background, 1 = NETC, 2 = SNFH, 3 = ET
* all objects are treated as immutable after construction; operations
  allocate fresh arrays and never write through their inputs.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (
    SvolMagicError,
    SvolModalityError,
    SvolPayloadError,
    SvolVersionError,
    ValidationError,
)

MODALITY_NAMES = ("t1", "t2", "flair", "t1ce")

LABEL_BACKGROUND = 0
LABEL_NETC = 1
LABEL_SNFH = 2
LABEL_ET = 3

_SVOL_MAGIC = b"SVOL"
_SVOL_VERSION = 1


class Quality(str, Enum):
    STANDARD = "standard"
    DEGRADED = "degraded"


class ViewAxis(str, Enum):
    """Slicing direction: axial iterates D, coronal H, sagittal W."""

    AXIAL = "axial"
    CORONAL = "coronal"
    SAGITTAL = "sagittal"

    @property
    def dim(self) -> int:
        return {"axial": 0, "coronal": 1, "sagittal": 2}[self.value]


def check_volume(data: np.ndarray, name: str = "volume") -> np.ndarray:
    """Validate a 3D float32 intensity volume and return it."""
    arr = np.asarray(data)
    if arr.ndim != 3:
        raise ValidationError(f"{name}: expected 3 dims, got shape {arr.shape}")
    if any(s <= 0 for s in arr.shape):
        raise ValidationError(f"{name}: non-positive extent in shape {arr.shape}")
    if arr.dtype != np.float32:
        raise ValidationError(f"{name}: expected float32, got {arr.dtype}")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name}: contains non-finite values")
    return arr


def check_labels(data: np.ndarray, name: str = "labels") -> np.ndarray:
    """Validate a 3D uint8 label volume with values in {0,1,2,3}."""
    arr = np.asarray(data)
    if arr.ndim != 3:
        raise ValidationError(f"{name}: expected 3 dims, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise ValidationError(f"{name}: expected uint8, got {arr.dtype}")
    bad = arr > LABEL_ET
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValidationError(
            f"{name}: value {int(arr[idx])} at voxel {idx} outside {{0,1,2,3}}"
        )
    return arr


@dataclass(frozen=True)
class Case:
    """One subject: four co-registered modality volumes plus labels.

    ``modalities`` maps each name in MODALITY_NAMES to a (D, H, W)
    float32 volume; ``labels`` shares that shape.
    """

    id: str
    modalities: dict[str, np.ndarray]
    labels: np.ndarray
    voxel_spacing: tuple[float, float, float]
    quality: Quality = Quality.STANDARD

    def __post_init__(self):
        if set(self.modalities) != set(MODALITY_NAMES):
            unknown = sorted(set(self.modalities) - set(MODALITY_NAMES))
            missing = sorted(set(MODALITY_NAMES) - set(self.modalities))
            raise ValidationError(
                f"case {self.id!r}: modalities must be exactly {MODALITY_NAMES}"
                f" (unknown={unknown}, missing={missing})"
            )
        shape = self.labels.shape
        check_labels(self.labels, f"case {self.id!r} labels")
        for name, vol in self.modalities.items():
            check_volume(vol, f"case {self.id!r} modality {name!r}")
            if vol.shape != shape:
                raise ValidationError(
                    f"case {self.id!r}: modality {name!r} shape {vol.shape}"
                    f" != label shape {shape}"
                )
        if len(self.voxel_spacing) != 3 or any(s <= 0 for s in self.voxel_spacing):
            raise ValidationError(
                f"case {self.id!r}: voxel_spacing must be 3 positive values,"
                f" got {self.voxel_spacing}"
            )

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    def modality_stack(self, order: tuple[str, ...] = MODALITY_NAMES) -> np.ndarray:
        """Stack modalities into a (len(order), D, H, W) array."""
        return np.stack([self.modalities[m] for m in order], axis=0)


@dataclass(frozen=True)
class CompositeRegions:
    """Nested composite tumor regions: et <= tc <= wt (voxelwise)."""

    et: np.ndarray
    tc: np.ndarray
    wt: np.ndarray

    def by_name(self, name: str) -> np.ndarray:
        try:
            return {"et": self.et, "tc": self.tc, "wt": self.wt}[name]
        except KeyError:
            raise ValidationError(f"unknown composite region {name!r}") from None


def composite_regions(labels: np.ndarray) -> CompositeRegions:
    """Derive ET / TC / WT boolean masks from a label volume.

    ET = code 3; TC = ET plus NETC (code 1); WT = TC plus SNFH (code 2).
    """
    labels = check_labels(labels)
    et = labels == LABEL_ET
    tc = et | (labels == LABEL_NETC)
    wt = tc | (labels == LABEL_SNFH)
    return CompositeRegions(et=et, tc=tc, wt=wt)


def composite_slice(label_slice: np.ndarray, target: str) -> np.ndarray:
    """Composite mask of a 2D label slice; target in {'et','tc','wt'}."""
    if target not in ("et", "tc", "wt"):
        raise ValidationError(f"unknown composite region {target!r}")
    et = label_slice == LABEL_ET
    if target == "et":
        return et
    tc = et | (label_slice == LABEL_NETC)
    if target == "tc":
        return tc
    return tc | (label_slice == LABEL_SNFH)


def extract_slices(vol: np.ndarray, axis: ViewAxis) -> list[np.ndarray]:
    """Split a volume into its ordered 2D slices along ``axis``."""
    if vol.ndim != 3:
        raise ValidationError(f"expected a 3D volume, got shape {vol.shape}")
    moved = np.moveaxis(vol, axis.dim, 0)
    return [np.ascontiguousarray(moved[k]) for k in range(moved.shape[0])]


def reassemble(slices: list[np.ndarray], axis: ViewAxis) -> np.ndarray:
    """Inverse of extract_slices: stack 2D slices back into a volume."""
    if not slices:
        raise ValidationError("reassemble: empty slice sequence")
    shape0 = slices[0].shape
    for k, sl in enumerate(slices):
        if sl.ndim != 2 or sl.shape != shape0:
            raise ValidationError(
                f"reassemble: slice {k} has shape {sl.shape}, expected {shape0}"
            )
    return np.ascontiguousarray(np.moveaxis(np.stack(slices, axis=0), 0, axis.dim))


# ---------------------------------------------------------------------------
# SVOL container
#
# magic "SVOL" | u16 version=1 | u32 D,H,W | u8 modality count |
# u8 label-present | u32 metadata length | UTF-8 JSON metadata |
# modality payloads (float32 LE, row-major) | label payload (uint8).
# All integers little-endian.
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sHIIIBB")


def _write_svol(
    path: Path,
    shape: tuple[int, int, int],
    modalities: dict[str, np.ndarray],
    labels: np.ndarray | None,
    meta: dict,
) -> None:
    d, h, w = shape
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(
        _HEADER.pack(
            _SVOL_MAGIC, _SVOL_VERSION, d, h, w, len(modalities), int(labels is not None)
        )
    )
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    for name in meta["modalities"]:
        arr = np.ascontiguousarray(modalities[name], dtype="<f4")
        buf.write(arr.tobytes())
    if labels is not None:
        buf.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue())


def _read_svol(path: Path) -> tuple[tuple[int, int, int], dict, dict[str, np.ndarray], np.ndarray | None]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size or raw[:4] != _SVOL_MAGIC:
        raise SvolMagicError(f"{path}: missing SVOL magic bytes")
    magic, version, d, h, w, n_mod, label_present = _HEADER.unpack_from(raw, 0)
    if version != _SVOL_VERSION:
        raise SvolVersionError(f"{path}: unsupported SVOL version {version}")
    off = _HEADER.size
    if len(raw) < off + 4:
        raise SvolPayloadError(f"{path}: truncated before metadata length")
    (meta_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    if len(raw) < off + meta_len:
        raise SvolPayloadError(f"{path}: truncated metadata block")
    meta = json.loads(raw[off : off + meta_len].decode("utf-8"))
    off += meta_len

    names = meta.get("modalities", [])
    if len(names) != n_mod:
        raise SvolModalityError(
            f"{path}: header declares {n_mod} modalities, metadata lists {len(names)}"
        )
    voxels = d * h * w
    expected = off + n_mod * voxels * 4 + (voxels if label_present else 0)
    if len(raw) != expected:
        raise SvolPayloadError(
            f"{path}: payload length {len(raw) - off} bytes does not match"
            f" shape ({d},{h},{w}) x {n_mod} modalities"
            f" (expected file size {expected}, got {len(raw)})"
        )
    mods: dict[str, np.ndarray] = {}
    for name in names:
        arr = np.frombuffer(raw, dtype="<f4", count=voxels, offset=off)
        mods[name] = arr.reshape(d, h, w).astype(np.float32)
        off += voxels * 4
    labels = None
    if label_present:
        labels = (
            np.frombuffer(raw, dtype=np.uint8, count=voxels, offset=off)
            .reshape(d, h, w)
            .copy()
        )
    return (d, h, w), meta, mods, labels


def save_case(case: Case, path: str | Path) -> None:
    """Write a full case to an SVOL container (bit-exact round trip)."""
    meta = {
        "id": case.id,
        "modalities": list(case.modalities.keys()),
        "voxel_spacing": list(case.voxel_spacing),
        "quality": case.quality.value,
    }
    _write_svol(Path(path), case.shape, case.modalities, case.labels, meta)


def load_case(path: str | Path) -> Case:
    """Read a full case written by save_case."""
    _, meta, mods, labels = _read_svol(Path(path))
    if set(mods) != set(MODALITY_NAMES):
        unknown = sorted(set(mods) - set(MODALITY_NAMES))
        raise SvolModalityError(
            f"{path}: modality names {sorted(mods)} are not the expected"
            f" {sorted(MODALITY_NAMES)} (unknown={unknown})"
        )
    if labels is None:
        raise SvolPayloadError(f"{path}: full case requires a label payload")
    return Case(
        id=meta["id"],
        modalities=mods,
        labels=labels,
        voxel_spacing=tuple(meta["voxel_spacing"]),
        quality=Quality(meta["quality"]),
    )


def save_labels(labels: np.ndarray, path: str | Path, case_id: str,
                voxel_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> None:
    """Write a label-only SVOL file (used for fused segmentation outputs)."""
    check_labels(labels)
    meta = {
        "id": case_id,
        "modalities": [],
        "voxel_spacing": list(voxel_spacing),
        "quality": Quality.STANDARD.value,
    }
    _write_svol(Path(path), labels.shape, {}, labels, meta)


def load_labels(path: str | Path) -> tuple[np.ndarray, dict]:
    """Read a label-only SVOL file; returns (labels, metadata)."""
    _, meta, _, labels = _read_svol(Path(path))
    if labels is None:
        raise SvolPayloadError(f"{path}: no label payload present")
    return labels, meta
