"""SLIC over-segmentation of axial slices, superpixel ground-truth labeling,
oracle segmentation bound and boundary-recall evaluation.

Superpixels are strictly 2D (per axial slice); a superpixel instance is
identified by a global id = slice offset + per-slice label.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import SegmentationMask, Volume3D, read_raw, write_raw

POSITIVE, NEGATIVE, AMBIGUOUS = 1, 0, -1
_CLASS_NAMES = {POSITIVE: "positive", NEGATIVE: "negative", AMBIGUOUS: "ambiguous"}
_CLASS_CODES = {v: k for k, v in _CLASS_NAMES.items()}

_STRUCT4 = ndimage.generate_binary_structure(2, 1)


def initial_seeds(shape: tuple[int, int], k: int) -> np.ndarray:
    """Evenly spaced lattice of ~k seeds as float (y, x) rows.

    Cell centers of a round(h/S) x round(w/S) grid, S = sqrt(h*w/k). On a
    uniform image this lattice is a fixed point of the SLIC iterations, so
    the final regions are its Voronoi cells.
    """
    h, w = shape
    s = np.sqrt(h * w / k)
    n_rows = max(1, round(h / s))
    n_cols = max(1, round(w / s))
    ys = (np.arange(n_rows) + 0.5) * h / n_rows
    xs = (np.arange(n_cols) + 0.5) * w / n_cols
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.column_stack([gy.ravel(), gx.ravel()])


def _gradient_map(img: np.ndarray) -> np.ndarray:
    p = np.pad(img.astype(np.float64), 1, mode="edge")
    gx = p[1:-1, 2:] - p[1:-1, :-2]
    gy = p[2:, 1:-1] - p[:-2, 1:-1]
    return gx * gx + gy * gy


def _perturb_seeds(seeds: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Move each seed to the strictly lowest-gradient pixel in its 3x3 block."""
    h, w = grad.shape
    out = seeds.copy()
    for i, (y, x) in enumerate(seeds):
        cy = min(max(int(round(y)), 0), h - 1)
        cx = min(max(int(round(x)), 0), w - 1)
        best = grad[cy, cx]
        by, bx = cy, cx
        for ny in range(max(cy - 1, 0), min(cy + 2, h)):
            for nx in range(max(cx - 1, 0), min(cx + 2, w)):
                if grad[ny, nx] < best:
                    best = grad[ny, nx]
                    by, bx = ny, nx
        out[i] = (by, bx)
    return out


def slic_slice(slice_img: np.ndarray, k: int, compactness: float = 10.0,
               iters: int = 10, intensity_scale: float = 40.0,
               min_size: int | None = None) -> np.ndarray:
    """SLIC labels for one 2D intensity grid.

    Distance is sqrt(d_int^2 + (d_xy/S)^2 * m^2) with the intensity term in
    raw units divided by intensity_scale. Pixel-to-seed ties go to the lowest
    seed index. Connectivity is enforced afterwards.
    """
    img = np.asarray(slice_img, dtype=np.float64)
    h, w = img.shape
    if h * w == 0:
        raise ValueError("empty slice")
    if k < 1 or k > h * w:
        raise ValueError(f"k={k} out of range for {h}x{w} slice")

    s = np.sqrt(h * w / k)
    seeds = _perturb_seeds(initial_seeds((h, w), k), _gradient_map(img))
    n = len(seeds)
    centers = seeds.copy()  # (n, 2) float (y, x)
    means = img[seeds[:, 0].astype(int), seeds[:, 1].astype(int)].astype(np.float64)

    yy, xx = np.mgrid[0:h, 0:w]
    inv_scale = 1.0 / intensity_scale
    m_over_s = compactness / s
    r = int(np.ceil(s)) + 1

    labels = np.full((h, w), -1, dtype=np.int32)
    for _ in range(iters):
        best = np.full((h, w), np.inf)
        labels.fill(-1)
        for i in range(n):
            cy, cx = centers[i]
            y0, y1 = max(int(cy - r), 0), min(int(cy + r) + 2, h)
            x0, x1 = max(int(cx - r), 0), min(int(cx + r) + 2, w)
            if y0 >= y1 or x0 >= x1:
                continue
            d_int = (img[y0:y1, x0:x1] - means[i]) * inv_scale
            d_sp2 = (yy[y0:y1, x0:x1] - cy) ** 2 + (xx[y0:y1, x0:x1] - cx) ** 2
            d = d_int * d_int + d_sp2 * (m_over_s * m_over_s)
            win = d < best[y0:y1, x0:x1]  # strict: earlier (lower) index keeps ties
            best[y0:y1, x0:x1][win] = d[win]
            labels[y0:y1, x0:x1][win] = i
        # Stragglers outside every search window: nearest center, lowest index wins.
        miss = labels < 0
        if miss.any():
            my, mx = np.nonzero(miss)
            d2 = (my[:, None] - centers[None, :, 0]) ** 2 + (mx[:, None] - centers[None, :, 1]) ** 2
            labels[my, mx] = np.argmin(d2, axis=1)
        # Update centers; empty clusters keep their previous state.
        flat = labels.ravel()
        counts = np.bincount(flat, minlength=n).astype(np.float64)
        nonempty = counts > 0
        sum_y = np.bincount(flat, weights=yy.ravel(), minlength=n)
        sum_x = np.bincount(flat, weights=xx.ravel(), minlength=n)
        sum_i = np.bincount(flat, weights=img.ravel(), minlength=n)
        centers[nonempty, 0] = sum_y[nonempty] / counts[nonempty]
        centers[nonempty, 1] = sum_x[nonempty] / counts[nonempty]
        means[nonempty] = sum_i[nonempty] / counts[nonempty]

    if min_size is None:
        min_size = _auto_min_size(labels, k, default=max(1, int(s * s / 4)))
    return enforce_connectivity(labels, min_size)


def _fragment_sizes(labels: np.ndarray) -> np.ndarray:
    sizes = []
    for val in np.unique(labels):
        sub, ns = ndimage.label(labels == val, structure=_STRUCT4)
        sizes.extend(np.bincount(sub.ravel())[1:])
    return np.array(sizes)


def _auto_min_size(labels: np.ndarray, k: int, default: int) -> int:
    """Pick the absorption threshold so the surviving-region count lands in
    [k/2, 2k]. Fragments >= min_size survive absorption, so the count is
    known in advance from the fragment size distribution."""
    sizes = _fragment_sizes(labels)
    lo, hi = max(1, k // 2), 2 * k
    count = int((sizes >= default).sum())
    if lo <= count <= hi:
        return default
    best = (True, abs(count - k), default)
    for ms in np.unique(sizes):
        c = int((sizes >= ms).sum())
        key = (not lo <= c <= hi, abs(c - k), int(ms))
        if key < best:
            best = key
    return int(best[2])


def enforce_connectivity(labels: np.ndarray, min_size: int) -> np.ndarray:
    """Split disconnected labels; absorb fragments smaller than min_size into
    the neighboring region sharing the longest boundary.

    Per input label the largest fragment survives (if it reaches min_size),
    as does any other fragment of at least min_size; everything else is
    absorbed. Output labels are consecutive from 0 in raster order.
    """
    h, w = labels.shape
    # scipy.ndimage.label only handles binary grids, so segment per label value.
    comp = np.zeros((h, w), dtype=np.int32)
    n_comp = 0
    for val in np.unique(labels):
        m = labels == val
        sub, ns = ndimage.label(m, structure=_STRUCT4)
        comp[m] = sub[m] + n_comp
        n_comp += ns

    order = np.arange(h * w)
    sizes = np.bincount(comp.ravel(), minlength=n_comp + 1)
    first_pix = np.full(n_comp + 1, h * w, dtype=np.int64)
    np.minimum.at(first_pix, comp.ravel(), order)

    finalized = np.zeros(n_comp + 1, dtype=bool)
    for val in np.unique(labels):
        ids = np.unique(comp[labels == val])
        for cid in ids:
            if sizes[cid] >= min_size:
                finalized[cid] = True
    pending = sorted((c for c in range(1, n_comp + 1) if sizes[c] > 0 and not finalized[c]),
                     key=lambda c: first_pix[c])
    if not finalized.any() and pending:
        finalized[pending[0]] = True  # degenerate: keep one region to absorb into
        pending = pending[1:]

    while pending:
        progressed = False
        stuck = []
        for cid in pending:
            m = comp == cid
            border = ndimage.binary_dilation(m, structure=_STRUCT4) & ~m
            neigh = comp[border]
            neigh = neigh[(neigh > 0) & finalized[neigh]]
            if neigh.size == 0:
                stuck.append(cid)
                continue
            counts = np.bincount(neigh)
            target = int(np.argmax(counts))  # longest shared boundary, ties -> lowest id
            comp[m] = target
            sizes[target] += sizes[cid]
            sizes[cid] = 0
            progressed = True
        if not progressed and stuck:
            finalized[stuck[0]] = True  # surrounded by fragments only: keep it
            stuck = stuck[1:]
        pending = sorted(stuck, key=lambda c: first_pix[c])

    # Renumber surviving components consecutively in raster order.
    flat = comp.ravel()
    first = np.full(int(comp.max()) + 1, h * w, dtype=np.int64)
    np.minimum.at(first, flat, order)
    present = np.unique(flat)
    present = present[np.argsort(first[present], kind="stable")]
    remap = np.zeros(int(comp.max()) + 1, dtype=np.int32)
    remap[present] = np.arange(len(present), dtype=np.int32)
    return remap[comp]


@dataclass(frozen=True)
class SuperpixelMap:
    """Per-slice superpixel label grids with global id bookkeeping."""

    labels: np.ndarray  # (nz, ny, nx) int32, per-slice labels starting at 0
    slice_counts: tuple[int, ...]
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        offsets = np.concatenate([[0], np.cumsum(self.slice_counts)]).astype(np.int64)
        object.__setattr__(self, "slice_counts", tuple(int(c) for c in self.slice_counts))
        object.__setattr__(self, "_offsets", offsets)

    @property
    def n_superpixels(self) -> int:
        return int(self._offsets[-1])

    def offsets(self) -> np.ndarray:
        return self._offsets

    def global_labels(self) -> np.ndarray:
        """(nz, ny, nx) grid of global superpixel ids."""
        return self.labels + self._offsets[:-1][:, None, None].astype(np.int32)

    def slice_of(self, global_id: int) -> int:
        return int(np.searchsorted(self._offsets, global_id, side="right") - 1)


def build_superpixel_map(v: Volume3D, cell_area: float = 27.0, k_min: int = 100,
                         k_max: int = 200, compactness: float = 10.0, iters: int = 10,
                         intensity_scale: float = 40.0) -> SuperpixelMap:
    """SLIC over every axial slice; per-slice k = clamp(area/cell_area)."""
    nz, ny, nx = v.values.shape
    k = int(np.clip(ny * nx // cell_area, k_min, k_max))
    grids = np.empty((nz, ny, nx), dtype=np.int32)
    counts = []
    for z in range(nz):
        g = slic_slice(v.values[z], k, compactness=compactness, iters=iters,
                       intensity_scale=intensity_scale)
        grids[z] = g
        counts.append(int(g.max()) + 1)
    return SuperpixelMap(labels=grids, slice_counts=tuple(counts), spacing_mm=v.spacing_mm)


def save_superpixels(sp: SuperpixelMap, path) -> None:
    write_raw(path, sp.labels, "i32le", sp.spacing_mm,
              extra={"superpixel": True, "slice_counts": list(sp.slice_counts)})


def load_superpixels(path) -> SuperpixelMap:
    arr, header = read_raw(path, expect_dtype="i32le")
    if not header.get("superpixel"):
        raise ValueError(f"{path}: not a superpixel map")
    return SuperpixelMap(labels=arr.astype(np.int32),
                         slice_counts=tuple(header["slice_counts"]),
                         spacing_mm=tuple(header["spacing_mm"]))


def overlap_ratio(sp: SuperpixelMap, gt: SegmentationMask) -> np.ndarray:
    """Fraction of each superpixel's pixels inside gt, as a global-id array."""
    if sp.labels.shape != gt.values.shape:
        raise ValueError("dim mismatch between superpixels and mask")
    ids = sp.global_labels().ravel()
    total = np.bincount(ids, minlength=sp.n_superpixels)
    inside = np.bincount(ids, weights=gt.values.ravel().astype(np.float64),
                         minlength=sp.n_superpixels)
    return inside / total


@dataclass(frozen=True)
class SuperpixelLabeling:
    """Per-superpixel overlap ratio and class (positive/negative/ambiguous)."""

    ratios: np.ndarray  # float64, by global id
    classes: np.ndarray  # int8 codes: POSITIVE/NEGATIVE/AMBIGUOUS
    tau_pos: float
    tau_neg: float


def assign_labels(ratios: np.ndarray, tau_pos: float = 0.5, tau_neg: float = 0.2) -> SuperpixelLabeling:
    """positive iff r >= tau_pos, negative iff r <= tau_neg, else ambiguous."""
    if not 0.0 <= tau_neg < tau_pos <= 1.0:
        raise ValueError(f"need 0 <= tau_neg < tau_pos <= 1, got {tau_neg}, {tau_pos}")
    ratios = np.asarray(ratios, dtype=np.float64)
    classes = np.full(ratios.shape, AMBIGUOUS, dtype=np.int8)
    classes[ratios >= tau_pos] = POSITIVE
    classes[ratios <= tau_neg] = NEGATIVE
    return SuperpixelLabeling(ratios=ratios, classes=classes, tau_pos=tau_pos, tau_neg=tau_neg)


def save_labeling(lab: SuperpixelLabeling, sp: SuperpixelMap, path) -> None:
    rows = [{"id": i, "slice": sp.slice_of(i), "r": float(lab.ratios[i]),
             "class": _CLASS_NAMES[int(lab.classes[i])]}
            for i in range(len(lab.ratios))]
    with open(path, "w") as f:
        json.dump(rows, f, sort_keys=True)


def load_labeling(path) -> SuperpixelLabeling:
    rows = json.loads(open(path).read())
    n = len(rows)
    ratios = np.zeros(n)
    classes = np.zeros(n, dtype=np.int8)
    for row in rows:
        ratios[row["id"]] = row["r"]
        classes[row["id"]] = _CLASS_CODES[row["class"]]
    return SuperpixelLabeling(ratios=ratios, classes=classes, tau_pos=0.5, tau_neg=0.2)


def mask_from_superpixels(sp: SuperpixelMap, accepted: np.ndarray) -> SegmentationMask:
    """Union of the accepted superpixels (boolean array indexed by global id)."""
    values = accepted[sp.global_labels()].astype(np.uint8)
    return SegmentationMask(values=values, spacing_mm=sp.spacing_mm)


def oracle_segmentation(sp: SuperpixelMap, gt: SegmentationMask, tau: float = 0.5) -> SegmentationMask:
    """Union of superpixels with overlap ratio strictly above tau: the upper
    bound any superpixel-labeling method can reach on this decomposition."""
    r = overlap_ratio(sp, gt)
    return mask_from_superpixels(sp, r > tau)


def _label_boundaries_2d(labels: np.ndarray) -> np.ndarray:
    b = np.zeros(labels.shape, dtype=bool)
    b[:-1, :] |= labels[:-1, :] != labels[1:, :]
    b[1:, :] |= labels[:-1, :] != labels[1:, :]
    b[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    b[:, 1:] |= labels[:, :-1] != labels[:, 1:]
    return b


def _mask_boundary_2d(mask: np.ndarray) -> np.ndarray:
    m = mask.astype(bool)
    core = ndimage.binary_erosion(m, structure=_STRUCT4, border_value=0)
    return m & ~core


def boundary_recall(sp: SuperpixelMap, gt: SegmentationMask, distance_mm: float) -> float:
    """Fraction of gt boundary pixels within distance_mm of a superpixel
    boundary, per slice, averaged over slices containing gt."""
    if distance_mm < 0:
        raise ValueError("distance must be non-negative")
    sx, sy, _ = gt.spacing_mm
    recalls = []
    for z in range(gt.values.shape[0]):
        gb = _mask_boundary_2d(gt.values[z])
        if not gb.any():
            continue
        sb = _label_boundaries_2d(sp.labels[z])
        if not sb.any():
            recalls.append(0.0)
            continue
        dist = ndimage.distance_transform_edt(~sb, sampling=(sy, sx))
        recalls.append(float((dist[gb] <= distance_mm).mean()))
    return float(np.mean(recalls)) if recalls else 1.0
