"""Volume/mask data model, raw file I/O, body extraction and phantom generation.

Arrays are stored (z, y, x) so that a C-order flatten matches the on-disk
x-fastest voxel ordering. External headers report dims as (nx, ny, nz).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

INTENSITY_MAX = 4095  # rescaled Hounsfield-style range is [0, 4095]

_DTYPES = {
    "i16le": np.dtype("<i2"),
    "u8le": np.dtype("u1"),
    "f32le": np.dtype("<f4"),
    "i32le": np.dtype("<i4"),
}


class VolumeFormatError(ValueError):
    """Raised for missing/corrupt headers or payload size mismatches."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Volume3D:
    """Intensity grid with physical voxel spacing; values in [0, 4095]."""

    values: np.ndarray  # (nz, ny, nx) int16
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)  # (sx, sy, sz)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.int16)
        if v.ndim != 3:
            raise ValueError(f"volume must be 3-D, got shape {v.shape}")
        if v.size == 0:
            raise ValueError("volume must be non-empty")
        if v.min() < 0 or v.max() > INTENSITY_MAX:
            raise ValueError("volume values outside [0, 4095]")
        if any(s <= 0 for s in self.spacing_mm):
            raise ValueError(f"spacing must be strictly positive, got {self.spacing_mm}")
        object.__setattr__(self, "values", _freeze(v))
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))

    @property
    def dims(self) -> tuple[int, int, int]:
        """(nx, ny, nz) as reported in file headers."""
        nz, ny, nx = self.values.shape
        return nx, ny, nz


@dataclass(frozen=True)
class SegmentationMask:
    """Binary voxel mask paired with a volume of identical dims."""

    values: np.ndarray  # (nz, ny, nx) uint8 in {0, 1}
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ValueError(f"mask must be 3-D, got shape {v.shape}")
        if not np.isin(v, (0, 1)).all():
            raise ValueError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "values", _freeze(v.astype(np.uint8)))
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.values.shape
        return nx, ny, nz

    def count(self) -> int:
        return int(self.values.sum())


# ---------------------------------------------------------------------------
# Raw file I/O: <name>.json header + <name>.raw payload, x-fastest ordering.
# ---------------------------------------------------------------------------

def _base_path(path) -> Path:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p


def write_raw(path, array: np.ndarray, dtype_tag: str, spacing_mm, extra: dict | None = None) -> None:
    """Write a (nz, ny, nx) array as header + little-endian raw payload."""
    base = _base_path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    nz, ny, nx = array.shape
    header = {
        "dims": [int(nx), int(ny), int(nz)],
        "spacing_mm": [float(s) for s in spacing_mm],
        "dtype": dtype_tag,
    }
    if extra:
        header.update(extra)
    tmp_json = base.with_suffix(".json.tmp")
    tmp_raw = base.with_suffix(".raw.tmp")
    tmp_json.write_text(json.dumps(header, sort_keys=True))
    np.ascontiguousarray(array).astype(_DTYPES[dtype_tag]).tofile(tmp_raw)
    tmp_json.replace(base.with_suffix(".json"))
    tmp_raw.replace(base.with_suffix(".raw"))


def read_raw(path, expect_dtype: str | None = None) -> tuple[np.ndarray, dict]:
    """Read header + payload, returning the (nz, ny, nx) array and header dict."""
    base = _base_path(path)
    hpath, rpath = base.with_suffix(".json"), base.with_suffix(".raw")
    if not hpath.exists():
        raise VolumeFormatError(f"missing header {hpath}")
    if not rpath.exists():
        raise VolumeFormatError(f"missing payload {rpath}")
    try:
        header = json.loads(hpath.read_text())
        nx, ny, nz = (int(d) for d in header["dims"])
        spacing = tuple(float(s) for s in header["spacing_mm"])
        dtype_tag = header["dtype"]
        dt = _DTYPES[dtype_tag]
    except (KeyError, ValueError, TypeError, json.JSONDecodeError) as e:
        raise VolumeFormatError(f"corrupt header {hpath}: {e}") from e
    if min(nx, ny, nz) <= 0 or min(spacing) <= 0:
        raise VolumeFormatError(f"corrupt header {hpath}: non-positive dims or spacing")
    if expect_dtype is not None and dtype_tag != expect_dtype:
        raise VolumeFormatError(f"{hpath}: expected dtype {expect_dtype}, found {dtype_tag}")
    payload = rpath.read_bytes()
    expected = nx * ny * nz * dt.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{rpath}: payload is {len(payload)} bytes, expected {expected} "
            f"({nx}x{ny}x{nz} of {dt.itemsize} bytes)")
    arr = np.frombuffer(payload, dtype=dt).reshape(nz, ny, nx)
    return arr, header


def save_volume(v: Volume3D, path) -> None:
    write_raw(path, v.values, "i16le", v.spacing_mm)


def load_volume(path) -> Volume3D:
    """Load a volume; out-of-range values are clamped and counted in a warning."""
    arr, header = read_raw(path, expect_dtype="i16le")
    n_bad = int(((arr < 0) | (arr > INTENSITY_MAX)).sum())
    if n_bad:
        logger.warning("%s: clamped %d voxels outside [0, %d]", path, n_bad, INTENSITY_MAX)
        arr = np.clip(arr, 0, INTENSITY_MAX)
    return Volume3D(values=arr.astype(np.int16), spacing_mm=tuple(header["spacing_mm"]))


def save_mask(m: SegmentationMask, path) -> None:
    write_raw(path, m.values, "u8le", m.spacing_mm)


def load_mask(path) -> SegmentationMask:
    arr, header = read_raw(path, expect_dtype="u8le")
    return SegmentationMask(values=(arr > 0).astype(np.uint8), spacing_mm=tuple(header["spacing_mm"]))


@dataclass(frozen=True)
class ProbabilityVolume:
    """Per-voxel class probability map in [0, 1]."""

    values: np.ndarray  # (nz, ny, nx) float32
    provenance: str  # "RF" | "CNN" | "KDE"
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3:
            raise ValueError(f"probability volume must be 3-D, got shape {v.shape}")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("probabilities outside [0, 1]")
        if self.provenance not in ("RF", "CNN", "KDE"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        object.__setattr__(self, "values", _freeze(v))
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))


def save_probability(p: ProbabilityVolume, path) -> None:
    write_raw(path, p.values, "f32le", p.spacing_mm, extra={"provenance": p.provenance})


def load_probability(path) -> ProbabilityVolume:
    arr, header = read_raw(path, expect_dtype="f32le")
    return ProbabilityVolume(values=arr, provenance=header.get("provenance", "RF"),
                             spacing_mm=tuple(header["spacing_mm"]))


# ---------------------------------------------------------------------------
# Body-region extraction (table removal analog).
# ---------------------------------------------------------------------------

def body_mask(v: Volume3D, air_threshold: int = 500) -> SegmentationMask:
    """Per axial slice: threshold, keep largest 4-connected component, fill holes.

    The default threshold of 500 (shifted units, about -524 HU) separates air
    from tissue. An all-air slice yields an empty slice mask.
    """
    out = np.zeros_like(v.values, dtype=np.uint8)
    structure = ndimage.generate_binary_structure(2, 1)  # 4-connectivity
    for z in range(v.values.shape[0]):
        fg = v.values[z] >= air_threshold
        if not fg.any():
            continue
        labels, n = ndimage.label(fg, structure=structure)
        sizes = np.bincount(labels.ravel())
        sizes[0] = 0
        largest = labels == np.argmax(sizes)  # first max -> lowest first-pixel component
        out[z] = ndimage.binary_fill_holes(largest, structure=structure)
    return SegmentationMask(values=out, spacing_mm=v.spacing_mm)


# ---------------------------------------------------------------------------
# Synthetic phantom generation.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhantomSpec:
    """Parameters for a seeded synthetic scan with a known target mask.

    A bright body ellipsoid on an air background contains one irregular
    low-contrast target blob plus confuser blobs sharing the target's
    intensity band, so intensity alone cannot separate them.
    """

    dims: tuple[int, int, int] = (64, 64, 16)  # (nx, ny, nz)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    air_level: int = 40
    body_level: int = 1050
    body_texture: float = 45.0
    target_level: int = 1330
    target_blob_range: tuple[int, int] = (3, 6)
    confuser_range: tuple[int, int] = (3, 5)
    noise_sigma: float = 22.0
    max_target_fraction: float = 0.045  # of body voxels; enforced by erosion


def _ellipsoid(shape, center, semi) -> np.ndarray:
    nz, ny, nx = shape
    zz, yy, xx = np.ogrid[0:nz, 0:ny, 0:nx]
    cz, cy, cx = center
    sz, sy, sx = semi
    return ((zz - cz) / sz) ** 2 + ((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2 <= 1.0


def _largest_cc_26(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=np.ones((3, 3, 3), dtype=bool))
    if n <= 1:
        return mask.astype(bool)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == np.argmax(sizes)


def generate_phantom(spec: PhantomSpec) -> tuple[Volume3D, SegmentationMask]:
    """Deterministically generate (volume, target mask) from a spec."""
    nx, ny, nz = spec.dims
    if nx < 32 or ny < 32 or nz < 8:
        raise ValueError(f"dims {spec.dims} too small to place the body ellipsoid")
    shape = (nz, ny, nx)
    rng = np.random.default_rng(spec.seed)

    body_center = (nz / 2.0, ny / 2.0 + rng.uniform(-1.5, 1.5), nx / 2.0 + rng.uniform(-1.5, 1.5))
    body_semi = (0.72 * nz, 0.40 * ny, 0.42 * nx)
    body = _ellipsoid(shape, body_center, body_semi)
    interior = ndimage.binary_erosion(body, iterations=2)

    # Irregular target: union of jittered ellipsoids, smoothed, single 26-CC.
    tcenter = np.array([body_center[0] + rng.uniform(-1.0, 1.0),
                        body_center[1] - 0.12 * ny + rng.uniform(-2.0, 2.0),
                        body_center[2] + 0.16 * nx + rng.uniform(-2.0, 2.0)])
    n_blobs = int(rng.integers(spec.target_blob_range[0], spec.target_blob_range[1] + 1))
    target = np.zeros(shape, dtype=bool)
    lo_off = np.array([-0.09375 * nz, -0.0546875 * ny, -0.0546875 * nx])
    lo_semi = np.array([0.125 * nz, 0.0625 * ny, 0.0625 * nx])
    hi_semi = np.array([0.2 * nz, 0.1015625 * ny, 0.1015625 * nx])
    for _ in range(n_blobs):
        off = rng.uniform(lo_off, -lo_off)
        semi = rng.uniform(lo_semi, hi_semi)
        target |= _ellipsoid(shape, tcenter + off, semi)
    target = ndimage.gaussian_filter(target.astype(np.float64), sigma=0.8) > 0.42
    target &= interior
    target = _largest_cc_26(target)

    body_voxels = int(body.sum())
    while target.sum() >= spec.max_target_fraction * body_voxels:
        target = _largest_cc_26(ndimage.binary_erosion(target))
        if not target.any():
            raise ValueError("target erosion emptied the mask; dims too small for the spec")

    # Confusers share the target intensity band but sit elsewhere in the body.
    confusers = np.zeros(shape, dtype=bool)
    n_conf = int(rng.integers(spec.confuser_range[0], spec.confuser_range[1] + 1))
    placed = 0
    while placed < n_conf:
        cc = np.array([rng.uniform(0.3 * nz, 0.7 * nz),
                       rng.uniform(0.25 * ny, 0.75 * ny),
                       rng.uniform(0.25 * nx, 0.75 * nx)])
        if np.hypot(cc[1] - tcenter[1], cc[2] - tcenter[2]) < 0.17 * nx:
            continue  # clear of the target, but near enough to yield hard negatives
        semi = rng.uniform([0.125 * nz, 0.0546875 * ny, 0.0546875 * nx],
                           [0.175 * nz, 0.0859375 * ny, 0.0859375 * nx])
        confusers |= _ellipsoid(shape, cc, semi)
        placed += 1
    confusers &= interior
    confusers &= ~ndimage.binary_dilation(target, iterations=2)

    vol = np.full(shape, float(spec.air_level))
    texture = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=2.5)
    texture *= spec.body_texture / max(texture.std(), 1e-9)
    vol[body] = spec.body_level + texture[body]
    band = target | confusers
    vol[band] = spec.target_level + texture[band]
    vol += rng.normal(0.0, spec.noise_sigma, size=shape)
    values = np.clip(np.rint(vol), 0, INTENSITY_MAX).astype(np.int16)

    return (Volume3D(values=values, spacing_mm=spec.spacing_mm),
            SegmentationMask(values=target.astype(np.uint8), spacing_mm=spec.spacing_mm))
