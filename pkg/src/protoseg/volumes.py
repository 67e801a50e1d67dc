"""Volume domain types, two-channel input construction, file I/O and resampling.

Two on-disk formats are supported:

* raw pair: ``<name>.json`` (shape, spacing, dtype, byte order) next to
  ``<name>.bin`` holding the little-endian float32 array. Round trips are
  bit exact.
* NIfTI-1 single file (``.nii`` / ``.nii.gz``), a minimal subset: 348-byte
  header, no extensions, spacing from ``pixdim``.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np
from scipy.ndimage import map_coordinates

from .config import patch_dim_violations
from .errors import ConfigError, InvalidInputError, VolumeIOError

Spacing = Tuple[float, float, float]


@dataclass(frozen=True)
class VolumeCase:
    """A registered pre/post-contrast pair with its binary tumor mask.

    All three grids share one shape; the mask is {0,1}; spacing components are
    the voxel edge lengths in mm and must be positive.
    """

    case_id: str
    pre_contrast: np.ndarray
    post_contrast: np.ndarray
    tumor_mask: np.ndarray
    spacing_mm: Spacing

    def __post_init__(self):
        if not (self.pre_contrast.shape == self.post_contrast.shape == self.tumor_mask.shape):
            raise InvalidInputError(
                f"case {self.case_id}: grids disagree on shape "
                f"{self.pre_contrast.shape}/{self.post_contrast.shape}/{self.tumor_mask.shape}"
            )
        if self.pre_contrast.ndim != 3:
            raise InvalidInputError(f"case {self.case_id}: expected 3D grids")
        mask = np.asarray(self.tumor_mask)
        if not np.isin(mask, (0, 1)).all():
            raise InvalidInputError(f"case {self.case_id}: tumor mask must be binary")
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise InvalidInputError(f"case {self.case_id}: spacing must be three positive values")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.pre_contrast.shape


def build_input_tensor(pre_patch: np.ndarray, post_patch: np.ndarray,
                       window_size: int = 0) -> np.ndarray:
    """Stack the network input: channel 0 post-contrast, channel 1 subtraction.

    ``window_size`` > 0 additionally enforces that the stride-8 token grid is
    divisible by the attention window.
    """
    pre = np.asarray(pre_patch, dtype=np.float32)
    post = np.asarray(post_patch, dtype=np.float32)
    if pre.shape != post.shape:
        raise InvalidInputError(f"pre/post patch shapes differ: {pre.shape} vs {post.shape}")
    if pre.ndim != 3:
        raise InvalidInputError("patches must be 3D")
    violations = patch_dim_violations(pre.shape, window_size)
    if violations:
        raise ConfigError("; ".join(violations))
    return np.stack([post, post - pre], axis=0)


# ---------------------------------------------------------------------------
# raw pair format
# ---------------------------------------------------------------------------

def _raw_paths(path: Path) -> Tuple[Path, Path]:
    path = Path(path)
    if path.suffix == ".json":
        return path, path.with_suffix(".bin")
    return path.with_suffix(path.suffix + ".json"), path.with_suffix(path.suffix + ".bin")


def _save_raw(grid: np.ndarray, spacing: Spacing, path: Path) -> None:
    header_path, bin_path = _raw_paths(path)
    header = {
        "shape": list(grid.shape),
        "spacing_mm": [float(s) for s in spacing],
        "dtype": "f32",
        "byte_order": "LE",
    }
    header_path.write_text(json.dumps(header, indent=2))
    np.ascontiguousarray(grid, dtype="<f4").tofile(bin_path)


def _load_raw(path: Path) -> Tuple[np.ndarray, Spacing]:
    header_path, bin_path = _raw_paths(path)
    try:
        header = json.loads(header_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise VolumeIOError(f"{header_path}: cannot read raw header ({exc})") from exc
    for key in ("shape", "spacing_mm", "dtype", "byte_order"):
        if key not in header:
            raise VolumeIOError(f"{header_path}: raw header missing '{key}'")
    if header["dtype"] != "f32" or header["byte_order"] != "LE":
        raise VolumeIOError(f"{header_path}: unsupported raw encoding {header['dtype']}/{header['byte_order']}")
    shape = tuple(int(s) for s in header["shape"])
    try:
        data = np.fromfile(bin_path, dtype="<f4")
    except OSError as exc:
        raise VolumeIOError(f"{bin_path}: cannot read raw data ({exc})") from exc
    if data.size != int(np.prod(shape)):
        raise VolumeIOError(f"{bin_path}: payload has {data.size} values, header shape {shape}")
    spacing = tuple(float(s) for s in header["spacing_mm"])
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise VolumeIOError(f"{header_path}: bad spacing {spacing}")
    return data.reshape(shape), spacing


# ---------------------------------------------------------------------------
# minimal NIfTI-1
# ---------------------------------------------------------------------------

_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32,
                 64: np.float64, 512: np.uint16}


def _save_nifti(grid: np.ndarray, spacing: Spacing, path: Path) -> None:
    grid = np.asarray(grid, dtype=np.float32)
    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)                      # sizeof_hdr
    struct.pack_into("<8h", header, 40, 3, *grid.shape, 1, 1, 1, 1)  # dim
    struct.pack_into("<h", header, 70, 16)                      # datatype: float32
    struct.pack_into("<h", header, 72, 32)                      # bitpix
    struct.pack_into("<8f", header, 76, 1.0, *(float(s) for s in spacing), 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", header, 108, 352.0)                  # vox_offset
    struct.pack_into("<f", header, 112, 1.0)                    # scl_slope
    struct.pack_into("<4s", header, 344, b"n+1\x00")
    payload = bytes(header) + b"\x00" * 4 + np.asfortranarray(grid).tobytes(order="F")
    if str(path).endswith(".gz"):
        with gzip.open(path, "wb") as fh:
            fh.write(payload)
    else:
        Path(path).write_bytes(payload)


def _load_nifti(path: Path) -> Tuple[np.ndarray, Spacing]:
    try:
        raw = gzip.open(path, "rb").read() if str(path).endswith(".gz") else Path(path).read_bytes()
    except OSError as exc:
        raise VolumeIOError(f"{path}: cannot read ({exc})") from exc
    if len(raw) < 352:
        raise VolumeIOError(f"{path}: truncated NIfTI file")
    if struct.unpack_from("<i", raw, 0)[0] != 348:
        raise VolumeIOError(f"{path}: not a little-endian NIfTI-1 file")
    magic = struct.unpack_from("<4s", raw, 344)[0]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise VolumeIOError(f"{path}: bad NIfTI magic {magic!r}")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] < 3:
        raise VolumeIOError(f"{path}: expected a 3D volume, got {dim[0]}D")
    if dim[0] > 3 and any(d > 1 for d in dim[4:4 + dim[0] - 3]):
        raise VolumeIOError(f"{path}: only single-frame 3D volumes are supported")
    shape = tuple(int(d) for d in dim[1:4])
    dtype_code = struct.unpack_from("<h", raw, 70)[0]
    if dtype_code not in _NIFTI_DTYPES:
        raise VolumeIOError(f"{path}: unsupported NIfTI datatype code {dtype_code}")
    dtype = _NIFTI_DTYPES[dtype_code]
    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = tuple(float(abs(p)) for p in pixdim[1:4])
    if any(s <= 0 for s in spacing):
        raise VolumeIOError(f"{path}: non-positive spacing {spacing}")
    vox_offset = int(struct.unpack_from("<f", raw, 108)[0])
    count = int(np.prod(shape))
    data = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<"),
                         count=count, offset=vox_offset)
    if data.size != count:
        raise VolumeIOError(f"{path}: payload shorter than header shape {shape}")
    grid = data.reshape(shape, order="F").astype(np.float32)
    slope = struct.unpack_from("<f", raw, 112)[0]
    inter = struct.unpack_from("<f", raw, 116)[0]
    if slope not in (0.0, 1.0) or inter != 0.0:
        grid = grid * (slope if slope != 0.0 else 1.0) + inter
    return grid, spacing


def save_volume(grid: np.ndarray, spacing: Spacing, path) -> None:
    """Write a 3D grid with its spacing; format chosen from the file suffix."""
    path = Path(path)
    if path.name.endswith((".nii", ".nii.gz")):
        _save_nifti(grid, spacing, path)
    else:
        _save_raw(grid, spacing, path)


def load_volume(path) -> Tuple[np.ndarray, Spacing]:
    """Read a 3D grid and its spacing (raw pair or NIfTI-1)."""
    path = Path(path)
    if path.name.endswith((".nii", ".nii.gz")):
        return _load_nifti(path)
    return _load_raw(path)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def _resample_grid(grid: np.ndarray, in_spacing: Spacing, out_shape, target: Spacing,
                   order: int) -> np.ndarray:
    axes = [
        np.arange(n, dtype=np.float64) * target[i] / in_spacing[i]
        for i, n in enumerate(out_shape)
    ]
    coords = np.meshgrid(*axes, indexing="ij")
    out = map_coordinates(grid.astype(np.float64), coords, order=order, mode="nearest")
    return out.astype(grid.dtype if order == 0 else np.float32)


def resample_case(case: VolumeCase, target_spacing_mm: Spacing) -> VolumeCase:
    """Resample to the target spacing: trilinear images, nearest-neighbor mask.

    Output shape is round(shape * spacing / target) per axis. Identical
    spacings return a bit-identical copy.
    """
    target = tuple(float(s) for s in target_spacing_mm)
    if any(s <= 0 for s in target):
        raise InvalidInputError(f"target spacing must be positive, got {target}")
    if tuple(float(s) for s in case.spacing_mm) == target:
        return case
    out_shape = tuple(
        int(round(n * case.spacing_mm[i] / target[i])) for i, n in enumerate(case.shape)
    )
    if any(n < 1 for n in out_shape):
        raise InvalidInputError(
            f"case {case.case_id}: resampling {case.shape} from {case.spacing_mm} to "
            f"{target} collapses the grid to {out_shape}"
        )
    return VolumeCase(
        case_id=case.case_id,
        pre_contrast=_resample_grid(case.pre_contrast, case.spacing_mm, out_shape, target, order=1),
        post_contrast=_resample_grid(case.post_contrast, case.spacing_mm, out_shape, target, order=1),
        tumor_mask=_resample_grid(case.tumor_mask, case.spacing_mm, out_shape, target, order=0),
        spacing_mm=target,
    )


def save_case(case: VolumeCase, directory, fmt: str = "raw") -> dict:
    """Write a case as pre/post/mask volumes; returns the file map."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    suffix = ".nii.gz" if fmt == "nifti" else ""
    files = {}
    for name, grid in (("pre", case.pre_contrast), ("post", case.post_contrast),
                       ("mask", case.tumor_mask.astype(np.float32))):
        path = directory / f"{name}{suffix}"
        save_volume(grid, case.spacing_mm, path)
        files[name] = path.name if suffix else f"{name}.json"
    return files


def load_case(directory, case_id: str | None = None) -> VolumeCase:
    """Read a case saved by :func:`save_case` (either format)."""
    directory = Path(directory)
    grids = {}
    spacing = None
    for name in ("pre", "post", "mask"):
        for candidate in (directory / f"{name}.json", directory / f"{name}.nii.gz",
                          directory / f"{name}.nii"):
            if candidate.exists():
                grids[name], spacing = load_volume(candidate)
                break
        else:
            raise VolumeIOError(f"{directory}: missing '{name}' volume")
    return VolumeCase(
        case_id=case_id or directory.name,
        pre_contrast=grids["pre"],
        post_contrast=grids["post"],
        tumor_mask=(grids["mask"] > 0.5).astype(np.uint8),
        spacing_mm=spacing,
    )
