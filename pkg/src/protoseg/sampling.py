"""Class-balanced patch extraction: per case and iteration, one patch covering
the tumor centroid and two random patches forced to touch tumor tissue.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .config import NetworkConfig
from .volumes import VolumeCase, build_input_tensor

logger = logging.getLogger(__name__)

MAX_REJECTION_TRIES = 50

KIND_FULL = "full_tumor"
KIND_PARTIAL = "partial_tumor"
KIND_FALLBACK = "fallback"


@dataclass(frozen=True)
class PatchRecord:
    input: np.ndarray            # (2, H, W, Z) float32
    label: np.ndarray            # (H, W, Z) uint8
    origin: Tuple[int, int, int]  # corner in prepared-case coordinates
    kind: str
    case_id: str = ""


def prepare_case(case: VolumeCase, patch_dims: Tuple[int, int, int]) -> VolumeCase:
    """Reflect-pad a case so every axis holds at least one patch."""
    pads = [(0, max(0, patch_dims[i] - case.shape[i])) for i in range(3)]
    if not any(p[1] for p in pads):
        return case
    return VolumeCase(
        case_id=case.case_id,
        pre_contrast=np.pad(case.pre_contrast, pads, mode="reflect"),
        post_contrast=np.pad(case.post_contrast, pads, mode="reflect"),
        tumor_mask=np.pad(case.tumor_mask, pads, mode="reflect"),
        spacing_mm=case.spacing_mm,
    )


def _make_record(case: VolumeCase, origin, dims, kind: str, window_size: int) -> PatchRecord:
    sl = tuple(slice(origin[i], origin[i] + dims[i]) for i in range(3))
    patch_input = build_input_tensor(case.pre_contrast[sl], case.post_contrast[sl],
                                     window_size=window_size)
    return PatchRecord(input=patch_input,
                       label=np.ascontiguousarray(case.tumor_mask[sl]).astype(np.uint8),
                       origin=tuple(int(o) for o in origin), kind=kind,
                       case_id=case.case_id)


def _clamp_origin(origin, shape, dims):
    return tuple(int(np.clip(origin[i], 0, shape[i] - dims[i])) for i in range(3))


def _random_origin(rng: np.random.Generator, shape, dims):
    return tuple(int(rng.integers(0, shape[i] - dims[i] + 1)) for i in range(3))


def sample_patches(case: VolumeCase, cfg: NetworkConfig,
                   rng: np.random.Generator) -> List[PatchRecord]:
    """Draw the three training patches for one case.

    Patch 1 is centered on the tumor centroid; patches 2 and 3 are uniform
    random crops rejected until they contain tumor (bounded tries, then an
    origin window around a random tumor voxel guarantees a hit). Cases with
    an empty mask fall back to three uniform crops.
    """
    dims = cfg.patch_dims
    case = prepare_case(case, dims)
    shape = case.shape
    coords = np.argwhere(case.tumor_mask > 0)
    if coords.shape[0] == 0:
        logger.warning("case %s has an empty tumor mask; sampling fallback patches", case.case_id)
        return [_make_record(case, _random_origin(rng, shape, dims), dims, KIND_FALLBACK,
                             cfg.window_size) for _ in range(3)]

    centroid = coords.mean(axis=0)
    origin = _clamp_origin(np.round(centroid).astype(int) - np.asarray(dims) // 2, shape, dims)
    records = [_make_record(case, origin, dims, KIND_FULL, cfg.window_size)]

    for _ in range(2):
        origin = None
        for _try in range(MAX_REJECTION_TRIES):
            candidate = _random_origin(rng, shape, dims)
            sl = tuple(slice(candidate[i], candidate[i] + dims[i]) for i in range(3))
            if case.tumor_mask[sl].any():
                origin = candidate
                break
        if origin is None:
            # center an origin window on one tumor voxel so the crop must hit it
            voxel = coords[rng.integers(coords.shape[0])]
            origin = tuple(
                int(rng.integers(max(0, voxel[i] - dims[i] + 1),
                                 min(shape[i] - dims[i], voxel[i]) + 1))
                for i in range(3)
            )
        records.append(_make_record(case, origin, dims, KIND_PARTIAL, cfg.window_size))
    return records


def build_batch(cases: Sequence[VolumeCase], cfg: NetworkConfig,
                rng: np.random.Generator) -> List[PatchRecord]:
    """Concatenate the per-case patch triples, in case order."""
    batch: List[PatchRecord] = []
    for case in cases:
        batch.extend(sample_patches(case, cfg, rng))
    return batch
