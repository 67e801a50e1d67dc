"""Whole-volume prediction: overlapping windows, probability averaging,
optional region-of-interest restriction, and hard thresholding.
"""

from __future__ import annotations

from typing import Callable, List, Optional, Tuple

import numpy as np
import torch

from .config import NetworkConfig
from .errors import InvalidInputError
from .prototypes import PrototypeBank, threshold_mask
from .volumes import VolumeCase, build_input_tensor, resample_case

TARGET_SPACING = (1.0, 1.0, 1.0)

Predictor = Callable[[np.ndarray], np.ndarray]


def window_origins(volume_shape, patch_dims, stride) -> List[Tuple[int, int, int]]:
    """Origins of a tiling that covers the volume; the last window per axis is
    clamped to the boundary so no window sticks out."""
    per_axis = []
    for size, patch, step in zip(volume_shape, patch_dims, stride):
        if patch > size:
            raise InvalidInputError(f"patch {patch} exceeds volume extent {size}")
        origins = list(range(0, size - patch + 1, step))
        if origins[-1] != size - patch:
            origins.append(size - patch)
        per_axis.append(origins)
    return [(i, j, k) for i in per_axis[0] for j in per_axis[1] for k in per_axis[2]]


def coverage_counts(volume_shape, patch_dims, stride) -> np.ndarray:
    """How many windows visit each voxel (pure geometry, >= 1 everywhere)."""
    counts = np.zeros(volume_shape, dtype=np.int32)
    for origin in window_origins(volume_shape, patch_dims, stride):
        sl = tuple(slice(o, o + p) for o, p in zip(origin, patch_dims))
        counts[sl] += 1
    return counts


def sliding_window_predict(pre: np.ndarray, post: np.ndarray, predictor: Predictor,
                           cfg: NetworkConfig, origins=None) -> np.ndarray:
    """Average the predictor's window probabilities into a volume-shaped grid.

    Volumes smaller than the patch are reflect-padded for prediction and the
    output is cropped back. `origins` overrides the window list (the result is
    independent of visit order; callers may also shard it for parallel work).
    """
    if pre.shape != post.shape:
        raise InvalidInputError(f"pre/post volume shapes differ: {pre.shape} vs {post.shape}")
    original_shape = pre.shape
    pads = [(0, max(0, cfg.patch_dims[i] - pre.shape[i])) for i in range(3)]
    if any(p[1] for p in pads):
        pre = np.pad(pre, pads, mode="reflect")
        post = np.pad(post, pads, mode="reflect")
    accum = np.zeros(pre.shape, dtype=np.float64)
    counts = np.zeros(pre.shape, dtype=np.int32)
    if origins is None:
        origins = window_origins(pre.shape, cfg.patch_dims, cfg.stride)
    for origin in origins:
        sl = tuple(slice(o, o + p) for o, p in zip(origin, cfg.patch_dims))
        window = build_input_tensor(pre[sl], post[sl], window_size=cfg.window_size)
        prob = np.asarray(predictor(window), dtype=np.float64)
        if prob.shape != tuple(cfg.patch_dims):
            raise InvalidInputError(
                f"predictor returned shape {prob.shape}, expected {tuple(cfg.patch_dims)}"
            )
        accum[sl] += prob
        counts[sl] += 1
    out = (accum / counts).astype(np.float32)
    crop = tuple(slice(0, s) for s in original_shape)
    return out[crop]


def make_model_predictor(model, bank: Optional[PrototypeBank], cfg: NetworkConfig) -> Predictor:
    """Wrap a trained model as a window predictor (eval mode, fused output when
    the prototype head is available, intermediate output otherwise)."""

    def predict(window: np.ndarray) -> np.ndarray:
        model.eval()
        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(window, dtype=np.float32)).unsqueeze(0)
            use_bank = bank if (model.distance_net is not None and bank is not None) else None
            out = model(x, bank=use_bank, activate_transformer=True)
            prob = out.pf if out.pf is not None else out.p1
            return prob.squeeze(0).numpy()

    return predict


def apply_roi_mask(prob: np.ndarray, roi: np.ndarray) -> np.ndarray:
    """Zero probabilities outside the region of interest."""
    if prob.shape != roi.shape:
        raise InvalidInputError(f"roi shape {roi.shape} does not match volume {prob.shape}")
    return prob * (np.asarray(roi) > 0)


def predict_case(case: VolumeCase, model, bank: Optional[PrototypeBank], cfg: NetworkConfig,
                 roi: Optional[np.ndarray] = None,
                 target_spacing=TARGET_SPACING) -> Tuple[np.ndarray, np.ndarray, dict]:
    """Resample, tile, average, (optionally) restrict to a ROI, threshold.

    Returns (binary mask at native spacing, probability grid at the working
    spacing, info dict).
    """
    working = resample_case(case, target_spacing)
    predictor = make_model_predictor(model, bank, cfg)
    prob = sliding_window_predict(working.pre_contrast, working.post_contrast, predictor, cfg)
    if roi is not None:
        roi_case = VolumeCase(case_id=f"{case.case_id}-roi", pre_contrast=case.pre_contrast,
                              post_contrast=case.post_contrast,
                              tumor_mask=(np.asarray(roi) > 0).astype(np.uint8),
                              spacing_mm=case.spacing_mm)
        roi_working = resample_case(roi_case, target_spacing).tumor_mask
        prob = apply_roi_mask(prob, roi_working)
    mask_working = threshold_mask(prob)
    # map the working-grid mask back onto the native grid (nearest neighbor)
    mask_case = VolumeCase(case_id=f"{case.case_id}-pred", pre_contrast=prob,
                           post_contrast=prob, tumor_mask=mask_working,
                           spacing_mm=working.spacing_mm)
    native = resample_to_shape(mask_case.tumor_mask, working.spacing_mm, case.spacing_mm,
                               case.shape)
    info = {
        "case_id": case.case_id,
        "native_shape": list(case.shape),
        "working_shape": list(working.shape),
        "working_spacing_mm": list(working.spacing_mm),
        "num_windows": len(window_origins(
            [max(s, p) for s, p in zip(working.shape, cfg.patch_dims)],
            cfg.patch_dims, cfg.stride)),
    }
    return native, prob, info


def resample_to_shape(mask: np.ndarray, spacing, native_spacing, native_shape) -> np.ndarray:
    """Nearest-neighbor resample of a working-grid mask onto the native grid."""
    from scipy.ndimage import map_coordinates

    axes = [
        np.arange(n, dtype=np.float64) * native_spacing[i] / spacing[i]
        for i, n in enumerate(native_shape)
    ]
    coords = np.meshgrid(*axes, indexing="ij")
    out = map_coordinates(mask.astype(np.float64), coords, order=0, mode="nearest")
    return out.astype(np.uint8)
