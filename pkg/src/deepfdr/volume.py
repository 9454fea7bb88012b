"""Dense 3D volumes and their on-disk format.

A volume is a scalar grid over an ``(nx, ny, nz)`` lattice stored as a flat
float64 array in x-fastest order (index ``ix + nx * (iy + ny * iz)``), with
an optional boolean mask marking voxels of interest.

On disk a volume is two files:

* ``<name>.vol`` -- raw little-endian 32-bit floats, x-fastest; if the
  volume is masked, one byte per voxel (0/1) follows the payload.
* ``<name>.vol.json`` -- UTF-8 sidecar
  ``{"dims": [nx, ny, nz], "kind": ..., "mask": true|false,
  "order": "x-fastest", "dtype": "f32le"}``.

Payloads are 32-bit for compactness; all in-memory computation is 64-bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gauss import two_sided_pvalue

KINDS = ("statistic", "pvalue", "label", "rejection", "probability")

_SIDECAR_KEYS = {"dims", "kind", "mask", "order", "dtype"}


class VolumeFormatError(ValueError):
    """Raised for malformed volume files or invalid volume contents."""


@dataclass
class Volume3D:
    dims: tuple[int, int, int]
    data: np.ndarray
    mask: np.ndarray | None = None
    kind: str | None = None

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or any(d <= 0 for d in self.dims):
            raise VolumeFormatError(f"dims must be three positive integers, got {self.dims}")
        self.data = np.asarray(self.data, dtype=np.float64).reshape(-1)
        if self.data.size != self.m:
            raise VolumeFormatError(
                f"length mismatch: data has {self.data.size} values, dims {self.dims} need {self.m}"
            )
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool).reshape(-1)
            if self.mask.size != self.m:
                raise VolumeFormatError("length mismatch: mask length differs from dims product")
        if not np.all(np.isfinite(self.masked_values())):
            raise VolumeFormatError("masked entries must be finite")
        if self.kind is not None:
            _check_kind(self.data, self.kind)

    @property
    def m(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def masked_values(self) -> np.ndarray:
        return self.data if self.mask is None else self.data[self.mask]

    def masked_indices(self) -> np.ndarray:
        """Linear (x-fastest) indices of masked voxels, ascending."""
        if self.mask is None:
            return np.arange(self.m, dtype=np.int64)
        return np.nonzero(self.mask)[0].astype(np.int64)

    def effective_mask(self) -> np.ndarray:
        return np.ones(self.m, dtype=bool) if self.mask is None else self.mask

    def to_grid(self) -> np.ndarray:
        """View of the data as an (nx, ny, nz)-indexed array."""
        nx, ny, nz = self.dims
        return self.data.reshape(nz, ny, nx).transpose(2, 1, 0)

    @classmethod
    def from_grid(cls, grid: np.ndarray, mask_grid: np.ndarray | None = None,
                  kind: str | None = None) -> "Volume3D":
        grid = np.asarray(grid)
        flat = grid.transpose(2, 1, 0).reshape(-1)
        mask = None if mask_grid is None else np.asarray(mask_grid).transpose(2, 1, 0).reshape(-1)
        return cls(dims=grid.shape, data=flat, mask=mask, kind=kind)


def _check_kind(data: np.ndarray, kind: str) -> None:
    if kind not in KINDS:
        raise VolumeFormatError(f"unknown volume kind {kind!r}")
    if kind in ("pvalue", "probability"):
        if np.any(data < 0.0) or np.any(data > 1.0):
            raise VolumeFormatError(f"{kind} entries must lie in [0, 1]")
    elif kind in ("label", "rejection"):
        if not np.all((data == 0.0) | (data == 1.0)):
            raise VolumeFormatError(f"{kind} entries must be exactly 0 or 1")


def save_volume(v: Volume3D, path: str | Path, kind: str) -> None:
    """Write ``<path>`` payload and ``<path>.json`` sidecar."""
    _check_kind(v.data, kind)
    if not np.all(np.isfinite(v.masked_values())):
        raise VolumeFormatError("masked entries must be finite")
    path = Path(path)
    sidecar = {
        "dims": list(v.dims),
        "kind": kind,
        "mask": v.mask is not None,
        "order": "x-fastest",
        "dtype": "f32le",
    }
    payload = v.data.astype("<f4").tobytes()
    if v.mask is not None:
        payload += v.mask.astype(np.uint8).tobytes()
    path.write_bytes(payload)
    Path(str(path) + ".json").write_text(json.dumps(sidecar) + "\n", encoding="utf-8")


def load_volume(path: str | Path) -> Volume3D:
    """Read a volume written by :func:`save_volume`."""
    path = Path(path)
    sidecar_path = Path(str(path) + ".json")
    if not path.exists():
        raise FileNotFoundError(f"missing volume payload {path}")
    if not sidecar_path.exists():
        raise VolumeFormatError(f"missing sidecar {sidecar_path}")
    try:
        meta = json.loads(sidecar_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise VolumeFormatError(f"corrupt sidecar {sidecar_path}: {e}") from e
    if not isinstance(meta, dict) or set(meta) != _SIDECAR_KEYS:
        raise VolumeFormatError(f"sidecar {sidecar_path} must have exactly keys {sorted(_SIDECAR_KEYS)}")
    if meta["order"] != "x-fastest" or meta["dtype"] != "f32le":
        raise VolumeFormatError("unsupported payload order/dtype")
    dims = meta["dims"]
    if not (isinstance(dims, list) and len(dims) == 3 and all(isinstance(d, int) and d > 0 for d in dims)):
        raise VolumeFormatError("sidecar dims must be three positive integers")
    m = dims[0] * dims[1] * dims[2]
    raw = path.read_bytes()
    expected = 4 * m + (m if meta["mask"] else 0)
    if len(raw) != expected:
        raise VolumeFormatError(f"length mismatch: payload is {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw[: 4 * m], dtype="<f4").astype(np.float64)
    mask = None
    if meta["mask"]:
        mask_bytes = np.frombuffer(raw[4 * m:], dtype=np.uint8)
        if np.any(mask_bytes > 1):
            raise VolumeFormatError("mask bytes must be 0 or 1")
        mask = mask_bytes.astype(bool)
    return Volume3D(dims=tuple(dims), data=data, mask=mask, kind=meta["kind"])


def z_to_pvalue(z: Volume3D) -> Volume3D:
    """Two-sided p-values from z-statistics; unmasked voxels get p = 1."""
    p = two_sided_pvalue(z.data)
    if z.mask is not None:
        p = np.where(z.mask, p, 1.0)
    return Volume3D(dims=z.dims, data=p, mask=None if z.mask is None else z.mask.copy(),
                    kind="pvalue")


def pad_to(v: Volume3D, target_dims: tuple[int, int, int], fill: float) -> Volume3D:
    """Center the volume inside ``target_dims`` at offset floor((t-s)/2).

    Padded voxels carry ``fill`` and mask False; an unmasked source becomes
    masked True on its original extent.
    """
    target_dims = tuple(int(d) for d in target_dims)
    if any(t < s for t, s in zip(target_dims, v.dims)):
        raise VolumeFormatError(f"target dims {target_dims} smaller than source {v.dims}")
    off = tuple((t - s) // 2 for t, s in zip(target_dims, v.dims))
    tx, ty, tz = target_dims
    grid = np.full((tx, ty, tz), float(fill), dtype=np.float64)
    mask_grid = np.zeros((tx, ty, tz), dtype=bool)
    sl = tuple(slice(o, o + s) for o, s in zip(off, v.dims))
    grid[sl] = v.to_grid()
    mask_grid[sl] = True if v.mask is None else v.mask.reshape(
        v.dims[2], v.dims[1], v.dims[0]).transpose(2, 1, 0)
    return Volume3D.from_grid(grid, mask_grid, kind=v.kind)


def crop_to(v: Volume3D, source_dims: tuple[int, int, int]) -> Volume3D:
    """Inverse of :func:`pad_to`: extract the centered ``source_dims`` block."""
    source_dims = tuple(int(d) for d in source_dims)
    if any(s > t for s, t in zip(source_dims, v.dims)):
        raise VolumeFormatError(f"source dims {source_dims} larger than padded {v.dims}")
    off = tuple((t - s) // 2 for t, s in zip(v.dims, source_dims))
    sl = tuple(slice(o, o + s) for o, s in zip(off, source_dims))
    grid = v.to_grid()[sl]
    mask_grid = None
    if v.mask is not None:
        nx, ny, nz = v.dims
        mask_grid = v.mask.reshape(nz, ny, nx).transpose(2, 1, 0)[sl]
    return Volume3D.from_grid(grid, mask_grid, kind=v.kind)
