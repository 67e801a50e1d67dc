"""Spacing-aware segmentation metrics.

Overlap: Dice, positive predictive value, sensitivity on binary masks.
Distance: average symmetric surface distance and 95th-percentile Hausdorff
distance in mm, over the pooled bidirectional set of nearest-surface
distances. Surfaces are 6-connectivity boundary voxels (a foreground voxel
with a background or out-of-bounds face neighbor), measured center-to-center.

Undefined values (empty prediction or ground truth) are flagged missing and
excluded from aggregates rather than turned into infinities.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInputError

METRIC_NAMES = ("dsc", "ppv", "sen", "asd_mm", "hd95_mm")


def _check_binary(grid: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(grid)
    if not np.isin(arr, (0, 1)).all():
        raise InvalidInputError(f"{name} is not a binary mask")
    return arr.astype(bool)


def overlap_metrics(pred: np.ndarray, gt: np.ndarray) -> Tuple[Optional[float], Optional[float], Optional[float]]:
    """(DSC, PPV, SEN); None where the denominator is empty.

    Empty-vs-empty Dice is defined as 1.0; PPV needs a non-empty prediction
    and SEN a non-empty ground truth.
    """
    p = _check_binary(pred, "prediction")
    g = _check_binary(gt, "ground truth")
    if p.shape != g.shape:
        raise InvalidInputError(f"mask shapes differ: {p.shape} vs {g.shape}")
    tp = float(np.logical_and(p, g).sum())
    p_total = float(p.sum())
    g_total = float(g.sum())
    dsc = 1.0 if (p_total + g_total) == 0 else 2.0 * tp / (p_total + g_total)
    ppv = None if p_total == 0 else tp / p_total
    sen = None if g_total == 0 else tp / g_total
    return dsc, ppv, sen


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Coordinates (N, 3) of foreground voxels with at least one 6-neighbor
    that is background or outside the grid."""
    m = _check_binary(mask, "mask")
    if not m.any():
        return np.empty((0, 3), dtype=np.int64)
    padded = np.pad(m, 1, mode="constant", constant_values=False)
    interior = np.ones_like(m)
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return np.argwhere(m & ~interior)


def surface_distances(a_surface: np.ndarray, b_surface: np.ndarray,
                      spacing_mm) -> Tuple[Optional[float], Optional[float]]:
    """(ASD, HD95) in mm over the pooled bidirectional nearest-distance set;
    (None, None) when either surface is empty."""
    a = np.asarray(a_surface, dtype=np.float64)
    b = np.asarray(b_surface, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return None, None
    scale = np.asarray(spacing_mm, dtype=np.float64)
    a_mm = a * scale
    b_mm = b * scale
    d_ab = cKDTree(b_mm).query(a_mm)[0]
    d_ba = cKDTree(a_mm).query(b_mm)[0]
    pooled = np.concatenate([d_ab, d_ba])
    return float(pooled.mean()), float(np.percentile(pooled, 95))


@dataclass
class CaseMetrics:
    case_id: str
    dsc: Optional[float]
    ppv: Optional[float]
    sen: Optional[float]
    asd_mm: Optional[float]
    hd95_mm: Optional[float]
    flags: List[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"case_id": self.case_id, "dsc": self.dsc, "ppv": self.ppv, "sen": self.sen,
                "asd_mm": self.asd_mm, "hd95_mm": self.hd95_mm, "flags": list(self.flags)}


def evaluate_case(case_id: str, pred: np.ndarray, gt: np.ndarray, spacing_mm) -> CaseMetrics:
    dsc, ppv, sen = overlap_metrics(pred, gt)
    asd, hd95 = surface_distances(surface_voxels(pred), surface_voxels(gt), spacing_mm)
    flags = [f"missing:{name}" for name, value in
             zip(METRIC_NAMES, (dsc, ppv, sen, asd, hd95)) if value is None]
    return CaseMetrics(case_id, dsc, ppv, sen, asd, hd95, flags)


@dataclass
class MetricsReport:
    rows: List[CaseMetrics]
    aggregates: Dict[str, Dict[str, float]]
    missing_counts: Dict[str, int]
    surface_convention: str = "6-connectivity boundary voxels, center-to-center distances"

    def as_dict(self) -> dict:
        return {
            "surface_convention": self.surface_convention,
            "aggregates": self.aggregates,
            "missing_counts": self.missing_counts,
            "cases": [row.as_dict() for row in self.rows],
        }


def aggregate_metrics(rows: Sequence[CaseMetrics]) -> MetricsReport:
    """Mean and normal-approximation 95% half-width per metric, skipping
    flagged-missing values."""
    aggregates: Dict[str, Dict[str, float]] = {}
    missing: Dict[str, int] = {}
    for name in METRIC_NAMES:
        values = [getattr(r, name) for r in rows]
        present = np.asarray([v for v in values if v is not None], dtype=np.float64)
        missing[name] = len(values) - present.size
        if present.size == 0:
            aggregates[name] = {"mean": float("nan"), "half_width_95": float("nan"), "n": 0}
            continue
        mean = float(present.mean())
        if present.size > 1:
            half = float(1.96 * present.std(ddof=1) / np.sqrt(present.size))
        else:
            half = 0.0
        aggregates[name] = {"mean": mean, "half_width_95": half, "n": int(present.size)}
    return MetricsReport(rows=list(rows), aggregates=aggregates, missing_counts=missing)


def write_report(report: MetricsReport, csv_path, json_path) -> None:
    """CSV of per-case rows plus a JSON document with the aggregates."""
    csv_path, json_path = Path(csv_path), Path(json_path)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", *METRIC_NAMES, "flags"])
        for row in report.rows:
            writer.writerow([
                row.case_id,
                *("" if getattr(row, name) is None else repr(getattr(row, name))
                  for name in METRIC_NAMES),
                ";".join(row.flags),
            ])
        for name in METRIC_NAMES:
            agg = report.aggregates[name]
            writer.writerow([f"mean_{name}", repr(agg["mean"]), f"+-{agg['half_width_95']:.6g}",
                             f"n={agg['n']}", f"missing={report.missing_counts[name]}", ""])
    json_path.write_text(json.dumps(report.as_dict(), indent=2))
