"""Dense per-voxel probability maps from strided classifier evaluation with
nearest-neighbor fill, optionally restricted to candidate regions.

Fills are exact: squared integer voxel distances with ties resolved to the
evaluated point of lowest linear index.
"""

from __future__ import annotations

import logging

import numpy as np

from .cnn import ConvNetModel, extract_25d_patch, forward_batch
from .forest import ForestModel, predict_proba
from .patchfeat import KdeLookup, extract_grid_descriptors, kde_response_map
from .superpixel import SuperpixelMap
from .volume import ProbabilityVolume, SegmentationMask, Volume3D

logger = logging.getLogger(__name__)

_CHUNK = 1 << 22  # pairwise-distance entries per chunk


def nearest_fill(points: np.ndarray, centers: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Value of the nearest center for every point (exact, ties to the first
    center). Points and centers are integer index rows of equal width."""
    if len(centers) == 0:
        raise ValueError("no evaluated centers to fill from")
    out = np.empty(len(points), dtype=values.dtype)
    chunk = max(1, _CHUNK // max(1, len(centers)))
    pts = points.astype(np.int64)
    ctr = centers.astype(np.int64)
    for i in range(0, len(pts), chunk):
        d2 = ((pts[i:i + chunk, None, :] - ctr[None, :, :]) ** 2).sum(axis=2)
        out[i:i + chunk] = values[np.argmin(d2, axis=1)]  # first min = lowest index
    return out


def rf_slice_descriptors(v: Volume3D, body: SegmentationMask, lut: KdeLookup,
                         sp: SuperpixelMap, stride: int = 3,
                         patch_size: int = 25) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-slice (centers, 46-dim descriptors) at the in-body stride grid."""
    kde_map = kde_response_map(v, lut)
    out = []
    for z in range(v.values.shape[0]):
        out.append(extract_grid_descriptors(
            v.values[z], kde_map.values[z], sp.labels[z], body.values[z],
            stride=stride, patch_size=patch_size))
    return out


def rf_map_from_probs(v: Volume3D, body: SegmentationMask,
                      per_slice: list[tuple[np.ndarray, np.ndarray]]) -> ProbabilityVolume:
    """Assemble the dense map from per-slice (centers, probabilities)."""
    out = np.zeros(v.values.shape, dtype=np.float32)
    for z, (centers, probs) in enumerate(per_slice):
        body_slice = body.values[z]
        if not body_slice.any():
            continue
        if len(centers) == 0:
            logger.debug("slice %d: body present but no grid centers", z)
            continue
        pts = np.column_stack(np.nonzero(body_slice))
        out[z][pts[:, 0], pts[:, 1]] = nearest_fill(pts, centers, probs.astype(np.float32))
    return ProbabilityVolume(values=out, provenance="RF", spacing_mm=v.spacing_mm)


def label_dense_rf(v: Volume3D, body: SegmentationMask, lut: KdeLookup,
                   sp: SuperpixelMap, model: ForestModel, stride: int = 3,
                   patch_size: int = 25) -> ProbabilityVolume:
    """Patch-descriptor forest evaluated on the in-body stride grid of every
    axial slice; remaining in-body voxels copy their nearest evaluated point
    (per slice). Out-of-body voxels are 0."""
    if model.n_features != 46:
        raise ValueError(f"patch labeler expects 46-dim descriptors, model has {model.n_features}")
    descs = rf_slice_descriptors(v, body, lut, sp, stride=stride, patch_size=patch_size)
    scored = [(centers, predict_proba(model, feats) if len(centers) else np.empty(0))
              for centers, feats in descs]
    return rf_map_from_probs(v, body, scored)


def label_dense_cnn(v: Volume3D, candidates: SegmentationMask, model: ConvNetModel,
                    stride: int = 4, batch: int = 256) -> ProbabilityVolume:
    """2.5D convnet evaluated at candidate voxels on the in-plane stride grid
    (every slice); candidate voxels copy their nearest evaluated point in 3D.
    Non-candidate voxels are 0."""
    out = np.zeros(v.values.shape, dtype=np.float32)
    cand = candidates.values.astype(bool)
    if not cand.any():
        return ProbabilityVolume(values=out, provenance="CNN", spacing_mm=v.spacing_mm)
    grid = np.zeros_like(cand)
    grid[:, ::stride, ::stride] = True
    centers = np.column_stack(np.nonzero(cand & grid))  # (k, 3) raster order
    if len(centers) == 0:
        # degenerate: no grid point hits the candidates; evaluate them all
        centers = np.column_stack(np.nonzero(cand))
    s = model.input_size
    probs = np.empty(len(centers), dtype=np.float32)
    for i in range(0, len(centers), batch):
        block = centers[i:i + batch]
        patches = np.stack([extract_25d_patch(v, tuple(c), s).planes for c in block])
        probs[i:i + batch] = forward_batch(model, patches)[:, 1]
    pts = np.column_stack(np.nonzero(cand))
    out[pts[:, 0], pts[:, 1], pts[:, 2]] = nearest_fill(pts, centers, probs)
    return ProbabilityVolume(values=out, provenance="CNN", spacing_mm=v.spacing_mm)
