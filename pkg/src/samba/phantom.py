"""Deterministic synthetic multi-modal glioma phantoms with ground-truth labels.

Geometry is ellipsoid-based: a large central "brain" ellipsoid, and per
tumor a nested set of ellipsoids (NETC core, ET rim, SNFH halo).
Intensities are fixed per-region levels plus a gentle radial ramp inside
the brain and i.i.d. Gaussian noise, so the separability of every region
is explicit rather than tuned. Everything is a pure function of
(config, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from .errors import ConfigError
from .volumes import (
    LABEL_ET,
    LABEL_NETC,
    LABEL_SNFH,
    MODALITY_NAMES,
    Case,
    Quality,
)

BACKGROUND_LEVEL = 0.02
BRAIN_RADIUS_FRACTION = 0.47
BRAIN_RAMP = 0.02  # linear brightening toward the brain center

PARENCHYMA_LEVELS = {"t1": 0.45, "t2": 0.40, "flair": 0.40, "t1ce": 0.45}

# Per-modality mean intensity of each tumor sub-region (before noise).
# Chosen so that: t1ce is brightest in ET, flair brightest in SNFH,
# t2 elevated over halo and core, t1 darkest in NETC.
REGION_LEVELS = {
    "netc": {"t1": 0.15, "t2": 0.70, "flair": 0.60, "t1ce": 0.20},
    "et": {"t1": 0.30, "t2": 0.62, "flair": 0.55, "t1ce": 0.90},
    "snfh": {"t1": 0.32, "t2": 0.75, "flair": 0.85, "t1ce": 0.50},
}


def derive_seed(*parts: int) -> int:
    """Stable child seed from a tuple of integers."""
    ss = np.random.SeedSequence(list(parts))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class PhantomConfig:
    shape: tuple[int, int, int] = (32, 64, 64)
    tumor_count: int = 1
    radius_range_voxels: tuple[float, float] = (9.0, 13.0)
    rim_fraction: float = 0.25
    halo_fraction: float = 0.5
    noise_sigma: float = 0.05
    seed: int = 0
    healthy_case: bool = False

    def __post_init__(self):
        if len(self.shape) != 3 or any(int(s) <= 0 for s in self.shape):
            raise ConfigError(f"phantom shape must be 3 positive ints, got {self.shape}")
        if self.tumor_count < 1:
            raise ConfigError("tumor_count must be >= 1 (use healthy_case for tumor-free cases)")
        r_min, r_max = self.radius_range_voxels
        if not (0 < r_min <= r_max):
            raise ConfigError(f"invalid radius range {self.radius_range_voxels}")
        if r_max + 2 > min(self.shape) / 2:
            raise ConfigError(
                f"radius {r_max} plus 2-voxel margin does not fit in shape {self.shape}"
            )
        for name in ("rim_fraction", "halo_fraction"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ConfigError(f"{name} must be in (0,1), got {v}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass(frozen=True)
class QualityProfile:
    """Degradation knobs; (1, 0, 1) is the identity/standard profile."""

    downsample_factor: int = 1
    extra_noise_sigma: float = 0.0
    slice_thickness_factor: int = 1

    def __post_init__(self):
        if self.downsample_factor < 1 or self.slice_thickness_factor < 1:
            raise ConfigError("degradation factors must be integers >= 1")
        if self.extra_noise_sigma < 0:
            raise ConfigError("extra_noise_sigma must be >= 0")

    @property
    def is_identity(self) -> bool:
        return (
            self.downsample_factor == 1
            and self.extra_noise_sigma == 0.0
            and self.slice_thickness_factor == 1
        )


@dataclass(frozen=True)
class TumorGeometry:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]  # whole-tumor (WT) ellipsoid semi-axes


@dataclass(frozen=True)
class PhantomInfo:
    """Construction internals exposed for property tests and diagnostics."""

    brain_mask: np.ndarray
    tumors: tuple[TumorGeometry, ...]


@dataclass(frozen=True)
class DatasetSplit:
    train: list[Case]
    val: list[Case]

    @property
    def all_cases(self) -> list[Case]:
        return [*self.train, *self.val]


def _coordinate_grids(shape: tuple[int, int, int]) -> tuple[np.ndarray, ...]:
    return np.meshgrid(
        *(np.arange(s, dtype=np.float64) for s in shape), indexing="ij", sparse=True
    )


def _ellipsoid_rho2(grids, center, radii) -> np.ndarray:
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))


def build_phantom(cfg: PhantomConfig, case_id: str | None = None) -> tuple[Case, PhantomInfo]:
    """Generate a phantom case plus its construction internals."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    shape = tuple(int(s) for s in cfg.shape)
    grids = _coordinate_grids(shape)

    brain_center = tuple((s - 1) / 2.0 for s in shape)
    brain_radii = tuple(BRAIN_RADIUS_FRACTION * s for s in shape)
    brain_rho2 = _ellipsoid_rho2(grids, brain_center, brain_radii)
    brain = brain_rho2 <= 1.0

    labels = np.zeros(shape, dtype=np.uint8)
    tumors: list[TumorGeometry] = []
    if not cfg.healthy_case:
        r_min, r_max = cfg.radius_range_voxels
        for _ in range(cfg.tumor_count):
            radii = tuple(rng.uniform(r_min, r_max) for _ in range(3))
            center = []
            for dim, r, c_p, r_p in zip(shape, radii, brain_center, brain_radii):
                lo, hi = r + 2.0, dim - 2.0 - r
                slack = r_p - r
                if slack > 0:
                    lo2, hi2 = max(lo, c_p - slack), min(hi, c_p + slack)
                    if lo2 <= hi2:
                        lo, hi = lo2, hi2
                center.append(rng.uniform(lo, hi))
            center = tuple(center)
            tumors.append(TumorGeometry(center=center, radii=radii))

            rho2 = _ellipsoid_rho2(grids, center, radii)
            tc_scale = 1.0 - cfg.halo_fraction
            netc_scale = tc_scale * (1.0 - cfg.rim_fraction)
            wt = rho2 <= 1.0
            tc = rho2 <= tc_scale**2
            netc = rho2 <= netc_scale**2
            labels[wt & ~tc] = LABEL_SNFH
            labels[tc & ~netc] = LABEL_ET
            labels[netc] = LABEL_NETC
        for code, name in ((LABEL_NETC, "NETC"), (LABEL_ET, "ET"), (LABEL_SNFH, "SNFH")):
            if not (labels == code).any():
                raise ConfigError(
                    f"tumor geometry too small to voxelize a nonempty {name} region"
                )

    ramp = np.where(brain, 1.0 - np.sqrt(np.minimum(brain_rho2, 1.0)), 0.0)
    modalities: dict[str, np.ndarray] = {}
    for name in MODALITY_NAMES:
        vol = np.full(shape, BACKGROUND_LEVEL, dtype=np.float64)
        vol[brain] = PARENCHYMA_LEVELS[name]
        vol += BRAIN_RAMP * ramp
        vol[labels == LABEL_NETC] = REGION_LEVELS["netc"][name]
        vol[labels == LABEL_ET] = REGION_LEVELS["et"][name]
        vol[labels == LABEL_SNFH] = REGION_LEVELS["snfh"][name]
        if cfg.noise_sigma > 0:
            vol = vol + rng.normal(0.0, cfg.noise_sigma, size=shape)
        modalities[name] = vol.astype(np.float32)

    case = Case(
        id=case_id if case_id is not None else f"phantom-{cfg.seed}",
        modalities=modalities,
        labels=labels,
        voxel_spacing=(1.0, 1.0, 1.0),
        quality=Quality.STANDARD,
    )
    return case, PhantomInfo(brain_mask=brain, tumors=tuple(tumors))


def generate_case(cfg: PhantomConfig, case_id: str | None = None) -> Case:
    """Generate one phantom case; bit-identical for identical (cfg, id)."""
    case, _ = build_phantom(cfg, case_id)
    return case


def _trilinear_blur(vol: np.ndarray, factor: int) -> np.ndarray:
    """Downsample then upsample (trilinear), removing high-frequency detail."""
    t = torch.from_numpy(vol.copy())[None, None]
    small = tuple(max(1, s // factor) for s in vol.shape)
    t = torch.nn.functional.interpolate(t, size=small, mode="trilinear", align_corners=False)
    t = torch.nn.functional.interpolate(t, size=vol.shape, mode="trilinear", align_corners=False)
    return t[0, 0].numpy().astype(np.float32)


def _coarsen_slices(vol: np.ndarray, factor: int) -> np.ndarray:
    """Replace each group of `factor` consecutive D-slices by their mean."""
    out = vol.copy()
    d = vol.shape[0]
    for start in range(0, d, factor):
        stop = min(start + factor, d)
        out[start:stop] = vol[start:stop].mean(axis=0, dtype=np.float64).astype(np.float32)
    return out


def degrade(case: Case, q: QualityProfile, seed: int) -> Case:
    """Blur/noise/coarsen the intensity volumes; labels are untouched.

    Fixed application order: downsample-upsample blur, then extra noise,
    then slice-thickness coarsening. Deterministic per seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    modalities: dict[str, np.ndarray] = {}
    for name, vol in case.modalities.items():
        out = vol
        if q.downsample_factor > 1:
            out = _trilinear_blur(out, q.downsample_factor)
        if q.extra_noise_sigma > 0:
            noise = rng.normal(0.0, q.extra_noise_sigma, size=out.shape)
            out = (out.astype(np.float64) + noise).astype(np.float32)
        if q.slice_thickness_factor > 1:
            out = _coarsen_slices(out, q.slice_thickness_factor)
        modalities[name] = out
    return Case(
        id=case.id,
        modalities=modalities,
        labels=case.labels,
        voxel_spacing=case.voxel_spacing,
        quality=Quality.DEGRADED,
    )


def generate_dataset(
    n: int,
    template: PhantomConfig,
    seed: int,
    quality: QualityProfile | None = None,
) -> DatasetSplit:
    """Generate n cases split 3:1 into train/val (train = ceil(3n/4)).

    Case i derives its own seed from (seed, i); when a quality profile is
    given every case is additionally degraded with seed (seed, i, 1).
    """
    if n < 4:
        raise ConfigError(f"dataset needs at least 4 cases, got {n}")
    cases: list[Case] = []
    for i in range(n):
        cfg_i = replace(template, seed=derive_seed(seed, i))
        case = generate_case(cfg_i, case_id=f"case-{i:04d}")
        if quality is not None:
            case = degrade(case, quality, derive_seed(seed, i, 1))
        cases.append(case)
    n_train = math.ceil(3 * n / 4)
    return DatasetSplit(train=cases[:n_train], val=cases[n_train:])
