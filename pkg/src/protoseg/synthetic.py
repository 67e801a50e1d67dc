"""Synthetic two-phase cases: smooth background plus enhancing tumor blobs.

Stands in for clinical data: the pre-contrast volume is a smooth random
texture, the post-contrast volume adds soft-edged spherical enhancements at
the tumor sites plus optional Gaussian noise, and the mask is the union of
the spheres. Everything is deterministic given the spec seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError
from .volumes import VolumeCase

_BACKGROUND_LEVEL = 100.0
_BACKGROUND_AMPLITUDE = 15.0
_EDGE_WIDTH_MM = 1.5


@dataclass(frozen=True)
class SyntheticSpec:
    grid_size: Tuple[int, int, int] = (96, 96, 48)
    n_tumors: int = 1
    tumor_radius_range_mm: Tuple[float, float] = (8.0, 14.0)
    enhancement_gain: float = 80.0
    noise_sigma: float = 2.0
    background_texture_scale: float = 8.0
    seed: int = 0
    spacing_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def validate(self) -> list:
        v = []
        if any(n < 32 for n in self.grid_size):
            v.append(f"grid_size {self.grid_size} must be >= 32 per axis")
        if self.n_tumors < 0:
            v.append("n_tumors must be >= 0")
        lo, hi = self.tumor_radius_range_mm
        if lo > hi or lo <= 0:
            v.append(f"tumor radius range ({lo}, {hi}) must satisfy 0 < low <= high")
        if self.enhancement_gain < 0:
            v.append("enhancement_gain must be >= 0")
        if self.noise_sigma < 0:
            v.append("noise_sigma must be >= 0")
        if self.background_texture_scale <= 0:
            v.append("background_texture_scale must be > 0")
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            v.append("spacing_mm must be three positive values")
        return v

    def to_json_dict(self) -> dict:
        return {
            "grid_size": list(self.grid_size),
            "n_tumors": self.n_tumors,
            "tumor_radius_range_mm": list(self.tumor_radius_range_mm),
            "enhancement_gain": self.enhancement_gain,
            "noise_sigma": self.noise_sigma,
            "background_texture_scale": self.background_texture_scale,
            "seed": self.seed,
            "spacing_mm": list(self.spacing_mm),
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "SyntheticSpec":
        known = {"grid_size", "n_tumors", "tumor_radius_range_mm", "enhancement_gain",
                 "noise_sigma", "background_texture_scale", "seed", "spacing_mm"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        data = dict(data)
        for key in ("grid_size", "tumor_radius_range_mm", "spacing_mm"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


def generate_synthetic_case(spec: SyntheticSpec, case_id: str | None = None) -> VolumeCase:
    """Draw one case from the spec; the same spec always yields the same case."""
    violations = spec.validate()
    if violations:
        raise ConfigError("; ".join(violations))
    rng = np.random.default_rng(spec.seed)
    shape = tuple(spec.grid_size)
    spacing = np.asarray(spec.spacing_mm, dtype=np.float64)

    sigma_vox = spec.background_texture_scale / spacing
    texture = gaussian_filter(rng.standard_normal(shape), sigma=sigma_vox)
    std = texture.std()
    if std > 0:
        texture /= std
    pre = (_BACKGROUND_LEVEL + _BACKGROUND_AMPLITUDE * texture).astype(np.float32)

    mask = np.zeros(shape, dtype=np.uint8)
    enhancement = np.zeros(shape, dtype=np.float64)
    grids = np.meshgrid(*(np.arange(n, dtype=np.float64) * spacing[i]
                          for i, n in enumerate(shape)), indexing="ij")
    extent_mm = [(n - 1) * spacing[i] for i, n in enumerate(shape)]
    for _ in range(spec.n_tumors):
        radius = rng.uniform(*spec.tumor_radius_range_mm)
        # keep the whole sphere inside the grid
        center = [rng.uniform(min(radius, e / 2), max(e - radius, e / 2)) for e in extent_mm]
        r = np.sqrt(sum((g - c) ** 2 for g, c in zip(grids, center)))
        mask |= (r <= radius).astype(np.uint8)
        enhancement += 1.0 / (1.0 + np.exp((r - radius) / _EDGE_WIDTH_MM))

    post = pre.astype(np.float64)
    if spec.enhancement_gain > 0:
        post = post + spec.enhancement_gain * enhancement
    if spec.noise_sigma > 0:
        post = post + rng.normal(0.0, spec.noise_sigma, size=shape)
    return VolumeCase(
        case_id=case_id or f"synth-{spec.seed:05d}",
        pre_contrast=pre,
        post_contrast=post.astype(np.float32),
        tumor_mask=mask,
        spacing_mm=tuple(float(s) for s in spec.spacing_mm),
    )
