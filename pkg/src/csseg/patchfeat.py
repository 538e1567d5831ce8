"""The 46-dimensional hand-crafted patch descriptor: dense SIFT texture,
KDE intensity class likelihood, patch/superpixel-intersected statistics and
normalized body-relative positions.

Descriptor layout (46): 32 dSIFT bins | mean, median, std of intensity over
the patch P | same over P' = P intersected with the center superpixel | the
two triples again on the KDE response channel | relative (x, y) position.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume import INTENSITY_MAX, ProbabilityVolume, Volume3D

logger = logging.getLogger(__name__)

DESCRIPTOR_LEN = 46
_EPS = 1e-12


# ---------------------------------------------------------------------------
# Dense SIFT (2x2 spatial bins, bin size 6, 8 orientations -> 32 dims).
# ---------------------------------------------------------------------------

_N_BINS = 2
_N_ORIENT = 8
_CLIP = 0.2


def _dsift_geometry(bin_size: int):
    side = _N_BINS * bin_size
    pos = np.arange(side, dtype=np.float64)
    bin_centers = (2 * np.arange(_N_BINS) + 1) / (2.0 * _N_BINS) * side - 0.5
    w_axis = np.maximum(0.0, 1.0 - np.abs(pos[None, :] - bin_centers[:, None]) / bin_size)
    weights = (w_axis[:, None, :, None] * w_axis[None, :, None, :]).reshape(_N_BINS ** 2, side * side)
    offsets = np.arange(side) - side // 2
    return weights, offsets


_W6, _OFF6 = _dsift_geometry(6)


def orientation_maps(slice_img: np.ndarray) -> np.ndarray:
    """(h, w, 8) gradient magnitude distributed over adjacent orientation bins.

    Gradients are clamped central differences, so border samples reuse the
    edge pixel.
    """
    img = np.asarray(slice_img, dtype=np.float64)
    p = np.pad(img, 1, mode="edge")
    gx = (p[1:-1, 2:] - p[1:-1, :-2]) * 0.5
    gy = (p[2:, 1:-1] - p[:-2, 1:-1]) * 0.5
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), 2.0 * np.pi)
    a = theta / (2.0 * np.pi / _N_ORIENT)
    i0 = np.floor(a).astype(int) % _N_ORIENT
    frac = a - np.floor(a)
    maps = np.zeros(img.shape + (_N_ORIENT,))
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    np.add.at(maps, (yy, xx, i0), mag * (1.0 - frac))
    np.add.at(maps, (yy, xx, (i0 + 1) % _N_ORIENT), mag * frac)
    return maps


def _dsift_from_maps(maps: np.ndarray, centers: np.ndarray, bin_size: int = 6) -> np.ndarray:
    if bin_size == 6:
        weights, offsets = _W6, _OFF6
    else:
        weights, offsets = _dsift_geometry(bin_size)
    h, w = maps.shape[:2]
    rows = np.clip(centers[:, 0:1] + offsets[None, :], 0, h - 1)
    cols = np.clip(centers[:, 1:2] + offsets[None, :], 0, w - 1)
    block = maps[rows[:, :, None], cols[:, None, :]]  # (n, side, side, 8)
    n, side = len(centers), len(offsets)
    raw = np.einsum("bp,npo->nbo", weights, block.reshape(n, side * side, _N_ORIENT))
    desc = raw.reshape(n, _N_BINS ** 2 * _N_ORIENT)
    norms = np.linalg.norm(desc, axis=1)
    live = norms > _EPS
    desc[live] /= norms[live, None]
    np.minimum(desc, _CLIP, out=desc)
    norms = np.linalg.norm(desc, axis=1)
    desc[live] /= norms[live, None]
    desc[~live] = 0.0
    return desc


def dsift(slice_img: np.ndarray, center: tuple[int, int], bin_size: int = 6) -> np.ndarray:
    """32-dim dense SIFT descriptor at one (y, x) center."""
    maps = orientation_maps(slice_img)
    return _dsift_from_maps(maps, np.asarray([center]), bin_size)[0]


# ---------------------------------------------------------------------------
# KDE intensity likelihood lookup over H = [0..4095].
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KdeLookup:
    """Normalized likelihood ratio y+ = f+/(f+ + f-) tabulated per intensity."""

    table: np.ndarray  # float64 (4096,)
    bandwidth: float
    n_pos: int
    n_neg: int


def fit_kde(pos_samples, neg_samples, bandwidth: float = 3.039) -> KdeLookup:
    """Gaussian-kernel class densities from integer intensity samples.

    Intensities are integers, so each density is the histogram convolved with
    the full-width kernel; this equals the direct per-sample sum. Intensities
    where both densities vanish get the uninformative value 0.5.
    """
    pos = np.asarray(pos_samples, dtype=np.int64).ravel()
    neg = np.asarray(neg_samples, dtype=np.int64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both sample sets must be non-empty")
    for name, s in (("pos", pos), ("neg", neg)):
        if s.min() < 0 or s.max() > INTENSITY_MAX:
            raise ValueError(f"{name} samples outside [0, {INTENSITY_MAX}]")
    size = INTENSITY_MAX + 1
    u = np.arange(-INTENSITY_MAX, INTENSITY_MAX + 1, dtype=np.float64)
    kernel = np.exp(-(u * u) / (2.0 * bandwidth * bandwidth)) / (bandwidth * np.sqrt(2.0 * np.pi))
    f_pos = np.convolve(np.bincount(pos, minlength=size), kernel)[INTENSITY_MAX:INTENSITY_MAX + size]
    f_neg = np.convolve(np.bincount(neg, minlength=size), kernel)[INTENSITY_MAX:INTENSITY_MAX + size]
    f_pos /= pos.size
    f_neg /= neg.size
    denom = f_pos + f_neg
    table = np.full(size, 0.5)
    nz = denom > 0.0
    table[nz] = f_pos[nz] / denom[nz]
    return KdeLookup(table=table, bandwidth=float(bandwidth), n_pos=pos.size, n_neg=neg.size)


def kde_response_map(v: Volume3D, lut: KdeLookup) -> ProbabilityVolume:
    """O(1) per-voxel table lookup."""
    return ProbabilityVolume(values=lut.table[v.values].astype(np.float32),
                             provenance="KDE", spacing_mm=v.spacing_mm)


def save_kde(lut: KdeLookup, path) -> None:
    doc = {"bandwidth": lut.bandwidth, "n_pos": lut.n_pos, "n_neg": lut.n_neg,
           "table": [float(x) for x in lut.table]}  # repr round-trips exactly
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_kde(path) -> KdeLookup:
    doc = json.loads(Path(path).read_text())
    table = np.array(doc["table"], dtype=np.float64)
    return KdeLookup(table=table, bandwidth=doc["bandwidth"],
                     n_pos=doc["n_pos"], n_neg=doc["n_neg"])


def kde_training_samples(volume: Volume3D, gt_values: np.ndarray, body_values: np.ndarray,
                         neg_fraction: float, rng: np.random.Generator):
    """Positive = all target voxels; negative = a random neg_fraction subsample
    of the in-body non-target voxels of this scan."""
    gt = gt_values.astype(bool)
    pool = volume.values[body_values.astype(bool) & ~gt]
    pos = volume.values[gt]
    k = max(1, int(round(neg_fraction * pool.size)))
    neg = rng.choice(pool, size=min(k, pool.size), replace=False)
    return pos, neg


# ---------------------------------------------------------------------------
# Position features and the assembled 46-dim descriptor.
# ---------------------------------------------------------------------------

def body_bbox_slice(body_slice: np.ndarray):
    """(xmin, xmax, ymin, ymax) inclusive bounds of the body on one slice."""
    ys, xs = np.nonzero(body_slice)
    if ys.size == 0:
        return None
    return int(xs.min()), int(xs.max()), int(ys.min()), int(ys.max())


def relative_position(center: tuple[int, int], bbox) -> tuple[float, float]:
    """Normalized (x, y) of a (y, x) center against the body bounding box."""
    if bbox is None:
        return 0.5, 0.5  # empty body on this slice
    xmin, xmax, ymin, ymax = bbox
    cy, cx = center
    relx = 0.5 if xmax == xmin else (cx - xmin) / (xmax - xmin)
    rely = 0.5 if ymax == ymin else (cy - ymin) / (ymax - ymin)
    return float(np.clip(relx, 0.0, 1.0)), float(np.clip(rely, 0.0, 1.0))


def _stats3(vals: np.ndarray) -> tuple[float, float, float]:
    """(mean, lower median, population std) of a non-empty value set."""
    v = np.sort(np.asarray(vals, dtype=np.float64).ravel())
    return float(v.mean()), float(v[(v.size - 1) // 2]), float(v.std())


def _window_bounds(c: int, half: int, size: int) -> tuple[int, int]:
    return max(0, c - half), min(size, c + half + 1)


def patch_descriptor(slice_img: np.ndarray, kde_slice: np.ndarray, sp_labels: np.ndarray,
                     center: tuple[int, int], body_bbox=None, patch_size: int = 25,
                     _maps: np.ndarray | None = None) -> np.ndarray:
    """46-dim descriptor at one (y, x) center.

    The stats window is truncated (not padded) at slice bounds; P' restricts
    it to the superpixel covering the center and always contains the center.
    """
    h, w = slice_img.shape
    cy, cx = center
    if not (0 <= cy < h and 0 <= cx < w):
        raise ValueError(f"center {center} outside slice {slice_img.shape}")
    maps = orientation_maps(slice_img) if _maps is None else _maps
    sift = _dsift_from_maps(maps, np.asarray([center]))[0]

    half = patch_size // 2
    y0, y1 = _window_bounds(cy, half, h)
    x0, x1 = _window_bounds(cx, half, w)
    win_int = slice_img[y0:y1, x0:x1].astype(np.float64)
    win_kde = kde_slice[y0:y1, x0:x1].astype(np.float64)
    inside = sp_labels[y0:y1, x0:x1] == sp_labels[cy, cx]

    relx, rely = relative_position(center, body_bbox)
    feats = np.concatenate([
        sift,
        _stats3(win_int), _stats3(win_int[inside]),
        _stats3(win_kde), _stats3(win_kde[inside]),
        [relx, rely],
    ])
    return feats.astype(np.float32)


def grid_centers(body_slice: np.ndarray, stride: int) -> np.ndarray:
    """In-body (y, x) grid points every `stride` pixels, raster order."""
    h, w = body_slice.shape
    ys = np.arange(0, h, stride)
    xs = np.arange(0, w, stride)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    pts = np.column_stack([gy.ravel(), gx.ravel()])
    keep = body_slice[pts[:, 0], pts[:, 1]].astype(bool)
    return pts[keep]


def extract_grid_descriptors(slice_img: np.ndarray, kde_slice: np.ndarray,
                             sp_labels: np.ndarray, body_slice: np.ndarray,
                             stride: int = 3, patch_size: int = 25):
    """Descriptors at every in-body grid center of one slice.

    Returns (centers (n, 2) int, features (n, 46) float32). Interior windows
    are computed batched; truncated border windows fall back to the scalar
    path.
    """
    h, w = slice_img.shape
    centers = grid_centers(body_slice, stride)
    n = len(centers)
    feats = np.empty((n, DESCRIPTOR_LEN), dtype=np.float32)
    if n == 0:
        return centers, feats

    maps = orientation_maps(slice_img)
    feats[:, :32] = _dsift_from_maps(maps, centers)

    bbox = body_bbox_slice(body_slice)
    rel = np.array([relative_position((cy, cx), bbox) for cy, cx in centers])
    feats[:, 44] = rel[:, 0]
    feats[:, 45] = rel[:, 1]

    half = patch_size // 2
    interior = ((centers[:, 0] >= half) & (centers[:, 0] < h - half)
                & (centers[:, 1] >= half) & (centers[:, 1] < w - half))
    area = patch_size * patch_size
    if interior.any():
        idx = np.nonzero(interior)[0]
        cyx = centers[idx]
        offs = np.arange(patch_size) - half
        rows = (cyx[:, 0:1] + offs[None, :])
        cols = (cyx[:, 1:2] + offs[None, :])
        for col0, img in ((32, slice_img.astype(np.float64)), (38, kde_slice.astype(np.float64))):
            win = img[rows[:, :, None], cols[:, None, :]].reshape(len(idx), area)
            lab = sp_labels[rows[:, :, None], cols[:, None, :]].reshape(len(idx), area)
            inside = lab == sp_labels[cyx[:, 0], cyx[:, 1]][:, None]
            feats[idx, col0 + 0] = win.mean(axis=1)
            feats[idx, col0 + 2] = win.std(axis=1)
            swin = np.sort(win, axis=1)
            feats[idx, col0 + 1] = swin[:, (area - 1) // 2]
            cnt = inside.sum(axis=1)
            mean_p = (win * inside).sum(axis=1) / cnt
            feats[idx, col0 + 3] = mean_p
            var_p = (((win - mean_p[:, None]) ** 2) * inside).sum(axis=1) / cnt
            feats[idx, col0 + 5] = np.sqrt(var_p)
            masked = np.where(inside, win, np.inf)
            smask = np.sort(masked, axis=1)
            feats[idx, col0 + 4] = np.take_along_axis(
                smask, ((cnt - 1) // 2)[:, None], axis=1)[:, 0]
    for i in np.nonzero(~interior)[0]:
        feats[i] = patch_descriptor(slice_img, kde_slice, sp_labels,
                                    tuple(centers[i]), bbox, patch_size, _maps=maps)
    return centers, feats


# ---------------------------------------------------------------------------
# Feature matrix files: f32le raw + JSON header, labels in a separate u8 file.
# ---------------------------------------------------------------------------

def save_features(path, features: np.ndarray, labels: np.ndarray | None = None) -> None:
    base = Path(path)
    base = base.with_suffix("") if base.suffix in (".json", ".raw") else base
    base.parent.mkdir(parents=True, exist_ok=True)
    rows, cols = features.shape
    label_name = base.name + ".labels.u8" if labels is not None else None
    header = {"rows": int(rows), "cols": int(cols), "dtype": "f32le", "label_col": label_name}
    base.with_suffix(".json").write_text(json.dumps(header, sort_keys=True))
    np.ascontiguousarray(features, dtype="<f4").tofile(base.with_suffix(".raw"))
    if labels is not None:
        if len(labels) != rows:
            raise ValueError("labels length must match feature rows")
        np.ascontiguousarray(labels, dtype="u1").tofile(base.parent / label_name)


def load_features(path):
    base = Path(path)
    base = base.with_suffix("") if base.suffix in (".json", ".raw") else base
    header = json.loads(base.with_suffix(".json").read_text())
    rows, cols = header["rows"], header["cols"]
    X = np.fromfile(base.with_suffix(".raw"), dtype="<f4").reshape(rows, cols)
    y = None
    if header.get("label_col"):
        y = np.fromfile(base.parent / header["label_col"], dtype="u1")
        if len(y) != rows:
            raise ValueError("label file length mismatch")
    return X, y
