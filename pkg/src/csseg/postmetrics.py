"""Connected-component post-processing and segmentation overlap metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import SegmentationMask


def largest_cc(mask: SegmentationMask, connectivity: int = 26) -> SegmentationMask:
    """Keep the largest 3D connected component (ties: lowest first voxel)."""
    if connectivity not in (6, 26):
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    structure = (ndimage.generate_binary_structure(3, 1) if connectivity == 6
                 else np.ones((3, 3, 3), dtype=bool))
    labels, n = ndimage.label(mask.values, structure=structure)
    if n <= 1:
        return mask
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    # scipy labels components in raster order, so the first maximum is the
    # component containing the lowest linear-index voxel.
    keep = np.argmax(sizes)
    return SegmentationMask(values=(labels == keep).astype(np.uint8), spacing_mm=mask.spacing_mm)


def compute_metrics(pred: SegmentationMask, gt: SegmentationMask) -> dict:
    """Dice (SI), Jaccard (JI), precision and recall of pred (A) vs gt (B).

    Conventions: both empty -> all metrics 1; an empty side makes the ratios
    with |A| or |B| in the denominator default to 1 (flagged via 'degenerate').
    """
    if pred.values.shape != gt.values.shape:
        raise ValueError(f"dim mismatch: {pred.values.shape} vs {gt.values.shape}")
    a = int(pred.values.sum())
    b = int(gt.values.sum())
    inter = int((pred.values & gt.values).sum())
    union = a + b - inter
    dice = 1.0 if a + b == 0 else 2.0 * inter / (a + b)
    jaccard = 1.0 if union == 0 else inter / union
    precision = 1.0 if a == 0 else inter / a
    recall = 1.0 if b == 0 else inter / b
    return {
        "dice": dice,
        "jaccard": jaccard,
        "precision": precision,
        "recall": recall,
        "degenerate": (a == 0) != (b == 0),
    }


@dataclass
class MetricsReport:
    """Per-volume metric rows plus mean/std/min/max aggregates."""

    rows: list[dict]

    METRICS = ("dice", "jaccard", "precision", "recall")

    def aggregates(self) -> dict:
        agg = {}
        for m in self.METRICS:
            vals = np.array([r[m] for r in self.rows], dtype=np.float64)
            agg[m] = {
                "mean": float(vals.mean()),
                "std": float(vals.std()),
                "min": float(vals.min()),
                "max": float(vals.max()),
            }
        return agg

    def to_json(self) -> str:
        return json.dumps({"volumes": self.rows, "aggregates": self.aggregates()},
                          sort_keys=True, indent=2)

    def to_csv(self) -> str:
        keys = ["id"] + [m for m in self.METRICS]
        lines = [",".join(keys)]
        for r in self.rows:
            lines.append(",".join(str(r.get(k, "")) for k in keys))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(rows=json.loads(text)["volumes"])


def _boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one 6-connected background neighbor.

    Neighbors outside the volume count as background.
    """
    core = ndimage.binary_erosion(mask.astype(bool),
                                  structure=ndimage.generate_binary_structure(3, 1),
                                  border_value=0)
    return mask.astype(bool) & ~core


def surface_distance_map(pred: SegmentationMask, gt: SegmentationMask,
                         spacing_mm: tuple[float, float, float] | None = None) -> np.ndarray:
    """Exact distance (mm) from each gt boundary voxel to the nearest pred
    boundary voxel; returned as rows of (z, y, x, distance)."""
    if pred.values.shape != gt.values.shape:
        raise ValueError("dim mismatch")
    if not pred.values.any() or not gt.values.any():
        raise ValueError("surface distance requires two non-empty masks")
    sx, sy, sz = spacing_mm if spacing_mm is not None else gt.spacing_mm
    scale = np.array([sz, sy, sx], dtype=np.float64)  # index order (z, y, x)
    gt_pts = np.argwhere(_boundary_voxels(gt.values)).astype(np.float64)
    pr_pts = np.argwhere(_boundary_voxels(pred.values)).astype(np.float64)
    gm = gt_pts * scale
    pm = pr_pts * scale
    dists = np.empty(len(gm))
    chunk = max(1, int(2e7) // max(1, len(pm)))
    for i in range(0, len(gm), chunk):
        d2 = ((gm[i:i + chunk, None, :] - pm[None, :, :]) ** 2).sum(axis=2)
        dists[i:i + chunk] = np.sqrt(d2.min(axis=1))
    return np.column_stack([gt_pts, dists])
