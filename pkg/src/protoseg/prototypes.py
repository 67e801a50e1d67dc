"""Prototype bank: non-learnable per-class feature centers kept by online clustering.

Each of the C classes owns K unit-norm prototype vectors in the decoder's
M-dimensional embedding space. Prototypes are never trained by gradient
descent: batches assign their labeled voxels to slots winner-take-all,
per-slot normalized means are formed, and the bank moves by an exponential
moving average. A small learned MLP scores voxel/prototype similarity; the
plain cosine measure is kept as a drop-in oracle.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .config import NetworkConfig

logger = logging.getLogger(__name__)

UNIT_NORM_EPS = 1e-12
DEAD_SLOT_ITERATIONS = 100
_SIMILARITY_CHUNK = 16384


class PrototypeBank:
    """C x K x M matrix of unit-norm prototypes plus momentum bookkeeping."""

    def __init__(self, prototypes: torch.Tensor, momentum: float):
        if prototypes.ndim != 3:
            raise ValueError("prototypes must have shape (C, K, M)")
        vectors = prototypes.detach().clone()
        if not vectors.is_floating_point():
            vectors = vectors.float()
        self.prototypes = _renormalize(vectors)
        self.momentum = float(momentum)
        self.update_count = 0
        self.empty_streak = torch.zeros(prototypes.shape[:2], dtype=torch.long)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.prototypes.shape)

    @property
    def flat(self) -> torch.Tensor:
        """(C*K, M) view; slot index = class * K + k."""
        c, k, m = self.prototypes.shape
        return self.prototypes.reshape(c * k, m)

    def norms(self) -> torch.Tensor:
        return self.prototypes.norm(dim=-1)

    def state_dict(self) -> dict:
        return {
            "prototypes": self.prototypes.clone(),
            "momentum": self.momentum,
            "update_count": self.update_count,
            "empty_streak": self.empty_streak.clone(),
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "PrototypeBank":
        bank = cls.__new__(cls)
        bank.prototypes = state["prototypes"].clone()
        bank.momentum = float(state["momentum"])
        bank.update_count = int(state["update_count"])
        bank.empty_streak = state["empty_streak"].clone()
        return bank


def _renormalize(vectors: torch.Tensor) -> torch.Tensor:
    norm = vectors.norm(dim=-1, keepdim=True)
    return torch.where(norm > UNIT_NORM_EPS, vectors / norm.clamp_min(UNIT_NORM_EPS),
                       torch.zeros_like(vectors))


class DistanceNetwork(nn.Module):
    """Learned similarity: MLP on the concatenated voxel/prototype pair."""

    def __init__(self, feature_dim: int):
        super().__init__()
        hidden = 2 * feature_dim
        self.fc1 = nn.Linear(2 * feature_dim, hidden)
        self.act = nn.LeakyReLU(inplace=True)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, x_flat: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
        """(V, M) x (S, M) -> (V, S) similarity scores, chunked over voxels."""
        n_slots = prototypes.shape[0]
        chunks = []
        for chunk in torch.split(x_flat, _SIMILARITY_CHUNK):
            pairs = torch.cat(
                [
                    chunk.unsqueeze(1).expand(-1, n_slots, -1),
                    prototypes.unsqueeze(0).expand(chunk.shape[0], -1, -1),
                ],
                dim=-1,
            )
            chunks.append(self.fc2(self.act(self.fc1(pairs))).squeeze(-1))
        return torch.cat(chunks, dim=0)


class CosineDistance:
    """Fixed measure for unit vectors: plain dot product. Test oracle."""

    def __call__(self, x_flat: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
        return x_flat @ prototypes.T


def _flatten_voxels(x: torch.Tensor) -> Tuple[torch.Tensor, tuple]:
    if x.ndim == 2:
        return x, ()
    if x.ndim == 4:  # (M, H, W, Z)
        m = x.shape[0]
        return x.reshape(m, -1).T, tuple(x.shape[1:])
    if x.ndim == 5:  # (B, M, H, W, Z)
        b, m = x.shape[:2]
        return x.permute(0, 2, 3, 4, 1).reshape(-1, m), (x.shape[0],) + tuple(x.shape[2:])
    raise ValueError(f"unsupported feature shape {tuple(x.shape)}")


def measure_similarity(x: torch.Tensor, bank: PrototypeBank, dist) -> torch.Tensor:
    """Similarity of every voxel to every prototype slot.

    Accepts flat (V, M) features or (B, M, H, W, Z) grids; the result matches
    ((V, S) or (B, S, H, W, Z)) with S = C*K.
    """
    x_flat, grid = _flatten_voxels(x)
    scores = dist(x_flat, bank.flat)
    if not grid:
        return scores
    s = scores.shape[-1]
    if len(grid) == 3:
        return scores.T.reshape(s, *grid)
    b = grid[0]
    return scores.reshape(b, *grid[1:], s).permute(0, 4, 1, 2, 3)


@dataclass
class Assignment:
    """Winner-take-all voxel-to-slot map; one-hot over C*K slots per voxel."""

    slot_index: torch.Tensor   # (V,) long, in [0, C*K)
    class_index: torch.Tensor  # (V,) long ground-truth class per voxel
    num_classes: int
    prototypes_per_class: int

    @property
    def num_slots(self) -> int:
        return self.num_classes * self.prototypes_per_class

    def one_hot(self) -> torch.Tensor:
        return nn.functional.one_hot(self.slot_index, self.num_slots).to(torch.float32)


def assign_from_similarity(similarity_flat: torch.Tensor, class_index: torch.Tensor,
                           num_classes: int, prototypes_per_class: int,
                           across_classes: bool = False) -> Assignment:
    """Pick each voxel's slot from precomputed (V, C*K) scores.

    By default the argmax runs over the voxel's ground-truth class only (the
    per-class cluster means are defined on class members); `across_classes`
    widens it to every slot for ablation.
    """
    k = prototypes_per_class
    if across_classes:
        slot = similarity_flat.argmax(dim=1)
    else:
        per_class = similarity_flat.reshape(-1, num_classes, k)
        rows = torch.arange(class_index.shape[0], device=similarity_flat.device)
        best_k = per_class[rows, class_index].argmax(dim=1)
        slot = class_index * k + best_k
    return Assignment(slot_index=slot, class_index=class_index,
                      num_classes=num_classes, prototypes_per_class=k)


def assign_prototypes(x: torch.Tensor, labels: torch.Tensor, bank: PrototypeBank, dist,
                      across_classes: bool = False) -> Assignment:
    """Winner-take-all assignment of labeled voxels to prototype slots."""
    x_flat, _ = _flatten_voxels(x)
    class_index = labels.reshape(-1).long()
    scores = dist(x_flat, bank.flat)
    c, k, _ = bank.shape
    return assign_from_similarity(scores, class_index, c, k, across_classes=across_classes)


def compute_cluster_means(x: torch.Tensor, assignment: Assignment) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per-slot normalized mean of assigned features.

    Returns (means (C, K, M), empty (C, K)); a slot is empty when no voxel
    landed on it or when the raw mean collapses below the norm floor (e.g.
    antipodal members cancelling out). Empty slots hold zero vectors.
    """
    x_flat, _ = _flatten_voxels(x)
    x_flat = x_flat.detach()
    n_slots = assignment.num_slots
    m = x_flat.shape[1]
    sums = torch.zeros(n_slots, m, dtype=x_flat.dtype, device=x_flat.device)
    counts = torch.zeros(n_slots, dtype=x_flat.dtype, device=x_flat.device)
    sums.index_add_(0, assignment.slot_index, x_flat)
    counts.index_add_(0, assignment.slot_index, torch.ones_like(assignment.slot_index, dtype=x_flat.dtype))
    means = sums / counts.clamp_min(1.0).unsqueeze(1)
    norms = means.norm(dim=1)
    empty = (counts == 0) | (norms <= UNIT_NORM_EPS)
    means = torch.where(empty.unsqueeze(1), torch.zeros_like(means), means)
    means = _renormalize(means)
    c, k = assignment.num_classes, assignment.prototypes_per_class
    return means.reshape(c, k, m), empty.reshape(c, k)


def momentum_update(bank: PrototypeBank, means: torch.Tensor,
                    empty: torch.Tensor | None = None) -> PrototypeBank:
    """Move non-empty slots toward the batch means by the bank's momentum.

    eta=1 leaves the bank bitwise untouched; eta=0 adopts the means exactly;
    empty slots never move. Every slot is re-normalized after the blend.
    """
    eta = bank.momentum
    if empty is None:
        empty = means.norm(dim=-1) <= UNIT_NORM_EPS
    update = ~empty
    if eta == 1.0:
        blended = bank.prototypes
    elif eta == 0.0:
        blended = means
    else:
        blended = _renormalize(eta * bank.prototypes + (1.0 - eta) * means)
    bank.prototypes = torch.where(update.unsqueeze(-1), blended, bank.prototypes)
    bank.empty_streak = torch.where(update, torch.zeros_like(bank.empty_streak),
                                    bank.empty_streak + 1)
    bank.update_count += 1
    return bank


def refresh_dead_prototypes(bank: PrototypeBank, x: torch.Tensor, assignment: Assignment,
                            similarity_flat: torch.Tensor,
                            dead_after: int = DEAD_SLOT_ITERATIONS) -> int:
    """Re-seed slots that stayed empty too long from their class's worst-matched voxel.

    Returns the number of re-seeded slots.
    """
    stale = (bank.empty_streak > dead_after).nonzero(as_tuple=False)
    if stale.numel() == 0:
        return 0
    x_flat, _ = _flatten_voxels(x)
    x_flat = x_flat.detach()
    assigned_scores = similarity_flat.detach().gather(1, assignment.slot_index.unsqueeze(1)).squeeze(1)
    refreshed = 0
    for c, k in stale.tolist():
        members = (assignment.class_index == c).nonzero(as_tuple=False).squeeze(1)
        if members.numel() == 0:
            continue
        worst = members[assigned_scores[members].argmin()]
        bank.prototypes[c, k] = _renormalize(x_flat[worst].unsqueeze(0)).squeeze(0)
        bank.empty_streak[c, k] = 0
        refreshed += 1
    if refreshed:
        logger.info("re-seeded %d dead prototype slot(s)", refreshed)
    return refreshed


def attention_fuse(x: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """Refit voxel features as attention over the prototype set.

    Query = voxel feature, key = value = prototypes, no score scaling.
    Accepts flat (V, M) or (B, M, H, W, Z) input and mirrors the shape.
    """
    u = prototypes.reshape(-1, prototypes.shape[-1]).detach()
    x_flat, grid = _flatten_voxels(x)
    weights = torch.softmax(x_flat @ u.T, dim=-1)
    fused = weights @ u
    if not grid:
        return fused
    m = fused.shape[-1]
    if len(grid) == 3:
        return fused.T.reshape(m, *grid)
    b = grid[0]
    return fused.reshape(b, *grid[1:], m).permute(0, 4, 1, 2, 3)


def threshold_mask(pf: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Hard threshold, inclusive at the boundary: 1 where pf >= threshold."""
    return (np.asarray(pf) >= threshold).astype(np.uint8)


# ---------------------------------------------------------------------------
# initialization by k-means over the first batch's features
# ---------------------------------------------------------------------------

def _pairwise_sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = (points ** 2).sum(1)[:, None] + (centers ** 2).sum(1)[None, :] - 2.0 * points @ centers.T
    return np.maximum(d2, 0.0)


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator, iters: int = 10) -> np.ndarray:
    """k-means++ seeding followed by a fixed number of Lloyd iterations."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[rng.integers(n)]
    d2 = _pairwise_sq_dists(points, centers[:1]).ravel()
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = points[rng.integers(n)]
        else:
            centers[j] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, _pairwise_sq_dists(points, centers[j:j + 1]).ravel())
    for _ in range(iters):
        labels = _pairwise_sq_dists(points, centers).argmin(axis=1)
        for j in range(k):
            members = points[labels == j]
            if members.shape[0]:
                centers[j] = members.mean(axis=0)
    return centers


def init_prototypes(features_by_class: Sequence, cfg: NetworkConfig,
                    rng: np.random.Generator | None = None) -> PrototypeBank:
    """Seed the bank with per-class sub-cluster centers of the given features.

    Classes with fewer than K vectors are padded by jittered duplicates (with
    a warning) so the bank shape is always (C, K, M).
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    k = cfg.prototypes_per_class
    groups = []
    for c, features in enumerate(features_by_class):
        pts = np.asarray(features.detach().cpu().numpy() if torch.is_tensor(features) else features,
                         dtype=np.float64)
        if pts.ndim != 2:
            raise ValueError(f"class {c}: expected (N, M) features")
        groups.append(pts)
    dims = {g.shape[1] for g in groups if g.shape[0]}
    if len(dims) != 1:
        raise ValueError(f"feature groups disagree on dimension (or all empty): {sorted(dims)}")
    feature_dim = dims.pop()
    centers = []
    for c, pts in enumerate(groups):
        if pts.shape[0] == 0:
            warnings.warn(f"class {c} has no voxels; seeding its prototypes randomly",
                          stacklevel=2)
            pts = rng.normal(size=(k, feature_dim))
        if pts.shape[0] < k:
            warnings.warn(
                f"class {c} has {pts.shape[0]} voxels for {k} prototypes; duplicating with jitter",
                stacklevel=2,
            )
            picks = rng.integers(pts.shape[0], size=k - pts.shape[0])
            extra = pts[picks] + rng.normal(0.0, 1e-3, size=(len(picks), pts.shape[1]))
            pts = np.concatenate([pts, extra], axis=0)
        centers.append(_kmeans(pts, k, rng))
    bank = PrototypeBank(torch.as_tensor(np.stack(centers), dtype=torch.float32),
                         momentum=cfg.prototype_momentum)
    return bank
