"""Superpixel-level feature pooling and the two-tier cascaded classification:
framework F-1 chains the shared stage-1 forest into a stage-2 forest on
(intensity, RF-map) features; F-2 swaps the second channel for the convnet
map. Includes hard-negative mining, stage-1 operating-point selection and
final-threshold grid search.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass

import numpy as np

from .cnn import ConvNetModel
from .densemap import label_dense_cnn, label_dense_rf
from .forest import (ForestConfig, ForestModel, deserialize_forest, predict_proba,
                     serialize_forest, train_forest)
from .patchfeat import KdeLookup
from .postmetrics import compute_metrics, largest_cc
from .superpixel import (NEGATIVE, POSITIVE, SuperpixelLabeling, SuperpixelMap,
                         build_superpixel_map, mask_from_superpixels)
from .volume import ProbabilityVolume, SegmentationMask, Volume3D, body_mask

logger = logging.getLogger(__name__)

MAGIC = b"CSCD"
VERSION = 1

PERCENTILES = (20, 30, 40, 50, 60, 70, 80, 90)
FEATURES_PER_CHANNEL = 4 + len(PERCENTILES)  # mean, std, skew, kurt + percentiles

CHANNELS = {"f1": ("intensity", "rf"), "f2": ("intensity", "cnn")}


class CascadeFormatError(ValueError):
    pass


def pool_channel(sp: SuperpixelMap, values: np.ndarray) -> np.ndarray:
    """12 order statistics of each superpixel's voxel-value multiset: four
    standardized moments and the 20..90 nearest-rank percentiles.

    Moments are population (n-denominator); skewness and kurtosis are the
    standardized 3rd/4th central moments (kurtosis non-excess) and 0 by
    convention for constant superpixels.
    """
    if sp.labels.shape != values.shape:
        raise ValueError("dim mismatch between superpixels and channel")
    n = sp.n_superpixels
    ids = sp.global_labels().ravel()
    vals = values.ravel().astype(np.float64)
    order = np.lexsort((vals, ids))
    vals_s = vals[order]
    counts = np.bincount(ids, minlength=n)
    if (counts == 0).any():
        raise ValueError("empty superpixel encountered")
    start = np.concatenate([[0], np.cumsum(counts[:-1])])

    mean = np.add.reduceat(vals_s, start) / counts
    centered = vals_s - np.repeat(mean, counts)
    c2 = np.add.reduceat(centered ** 2, start) / counts
    c3 = np.add.reduceat(centered ** 3, start) / counts
    c4 = np.add.reduceat(centered ** 4, start) / counts
    std = np.sqrt(c2)
    live = std > 0
    skew = np.zeros(n)
    kurt = np.zeros(n)
    skew[live] = c3[live] / std[live] ** 3
    kurt[live] = c4[live] / std[live] ** 4

    out = np.empty((n, FEATURES_PER_CHANNEL))
    out[:, 0], out[:, 1], out[:, 2], out[:, 3] = mean, std, skew, kurt
    for j, p in enumerate(PERCENTILES):
        rank = -((-p * counts) // 100)  # ceil(p*n/100), exact in integers
        out[:, 4 + j] = vals_s[start + rank - 1]
    return out


def pool_features(sp: SuperpixelMap, intensity: Volume3D, prob: ProbabilityVolume) -> np.ndarray:
    """24 features per superpixel: 12 from the intensity channel, 12 from the
    probability channel."""
    return np.hstack([pool_channel(sp, intensity.values),
                      pool_channel(sp, prob.values)]).astype(np.float32)


def train_stage1(features: np.ndarray, labeling: SuperpixelLabeling,
                 config: ForestConfig = ForestConfig(),
                 recall_target: float = 0.99) -> tuple[ForestModel, float]:
    """Stage-1 forest on all labeled superpixels (ambiguous excluded) plus its
    pruning threshold: the largest score keeping training recall at or above
    recall_target."""
    pos = labeling.classes == POSITIVE
    neg = labeling.classes == NEGATIVE
    mask = pos | neg
    if not pos.any() or not neg.any():
        raise ValueError("need labeled positives and negatives for stage 1")
    model = train_forest(features[mask], pos[mask].astype(np.int8), config)
    pos_scores = np.sort(predict_proba(model, features[pos]))[::-1]
    if recall_target > 1.0:
        logger.warning("recall target %.3f unattainable; theta1 = 0", recall_target)
        return model, 0.0
    k = int(np.clip(np.ceil(recall_target * len(pos_scores)), 1, len(pos_scores)))
    return model, float(pos_scores[k - 1])


def mine_hard_negatives(model: ForestModel, theta1: float, features: np.ndarray,
                        labeling: SuperpixelLabeling) -> np.ndarray:
    """Global ids of labeled negatives that stage 1 fails to prune."""
    neg = np.nonzero(labeling.classes == NEGATIVE)[0]
    scores = predict_proba(model, features[neg])
    return neg[scores >= theta1]


def stage2_training_ids(labeling: SuperpixelLabeling, hard_negatives: np.ndarray,
                        neg_scores_by_id: np.ndarray | None = None) -> np.ndarray:
    """All positives plus the mined hard negatives.

    An empty hard-negative set is degenerate: stage 2 falls back to the
    highest-scoring negatives (a resampled floor) and logs a warning.
    """
    pos = np.nonzero(labeling.classes == POSITIVE)[0]
    hard = np.asarray(hard_negatives, dtype=np.int64)
    if hard.size == 0:
        neg = np.nonzero(labeling.classes == NEGATIVE)[0]
        k = min(len(neg), max(10, len(pos)))
        if neg_scores_by_id is not None:
            order = np.argsort(neg_scores_by_id[neg], kind="stable")[::-1]
            hard = neg[order[:k]]
        else:
            hard = neg[:k]
        logger.warning("no hard negatives; falling back to %d top negatives", len(hard))
    return np.sort(np.concatenate([pos, hard]))


def train_stage2(features: np.ndarray, labeling: SuperpixelLabeling,
                 training_ids: np.ndarray, config: ForestConfig = ForestConfig()) -> ForestModel:
    """Stage-2 forest on hard negatives plus positives, in the channel set
    selected by the framework (the caller supplies the pooled features)."""
    y = (labeling.classes[training_ids] == POSITIVE).astype(np.int8)
    if y.min() == y.max():
        raise ValueError("stage-2 training set lost one of the classes")
    return train_forest(features[training_ids], y, config)


def default_theta_grid() -> np.ndarray:
    return np.array([round(0.05 * i, 2) for i in range(1, 20)])


def calibrate_threshold(per_volume: list[tuple[SuperpixelMap, np.ndarray, SegmentationMask]],
                        grid: np.ndarray | None = None, connectivity: int = 26) -> float:
    """Grid-search the stage-2 threshold maximizing mean Dice of the full
    pipeline (largest connected component included) over training volumes.
    Stage-1 rejections carry score -1. Ties resolve to the lowest theta."""
    grid = default_theta_grid() if grid is None else np.asarray(grid)
    best_theta, best_dice = float(grid[0]), -1.0
    for theta in grid:
        dices = []
        for sp, scores, gt in per_volume:
            mask = largest_cc(mask_from_superpixels(sp, scores >= theta), connectivity)
            dices.append(compute_metrics(mask, gt)["dice"])
        mean = float(np.mean(dices))
        if mean > best_dice:
            best_theta, best_dice = float(theta), mean
    return best_theta


@dataclass
class CascadeModel:
    """Stage-1 forest with pruning threshold plus the framework's stage-2
    forest with its calibrated final threshold."""

    framework: str  # "f1" | "f2"
    stage1: ForestModel
    theta1: float
    stage2: ForestModel
    theta2: float
    three_channel: bool = False  # optional 36-feature stage-2 variant

    def __post_init__(self):
        if self.framework not in CHANNELS:
            raise ValueError(f"unknown framework {self.framework!r}")
        if not (0.0 <= self.theta1 <= 1.0 and 0.0 <= self.theta2 <= 1.0):
            raise ValueError("thresholds must be in [0, 1]")
        expect = 36 if self.three_channel else 24
        if self.stage2.n_features != expect:
            raise ValueError(f"stage-2 forest has {self.stage2.n_features} features, "
                             f"expected {expect}")

    @property
    def channels(self) -> tuple[str, ...]:
        base = CHANNELS[self.framework]
        return ("intensity", "rf", "cnn") if self.three_channel else base


def serialize_cascade(model: CascadeModel) -> bytes:
    doc = {"framework": model.framework, "theta1": model.theta1, "theta2": model.theta2,
           "three_channel": model.three_channel, "channels": list(model.channels)}
    blob = json.dumps(doc, sort_keys=True).encode()
    s1 = serialize_forest(model.stage1)
    s2 = serialize_forest(model.stage2)
    return b"".join([MAGIC, struct.pack("<II", VERSION, len(blob)), blob,
                     struct.pack("<I", len(s1)), s1,
                     struct.pack("<I", len(s2)), s2])


def deserialize_cascade(data: bytes) -> CascadeModel:
    if len(data) < 12 or data[:4] != MAGIC:
        raise CascadeFormatError("bad magic: not a cascade model")
    version, blob_len = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CascadeFormatError(f"unsupported version {version}")
    off = 12
    doc = json.loads(data[off:off + blob_len])
    off += blob_len
    forests = []
    for _ in range(2):
        if off + 4 > len(data):
            raise CascadeFormatError("truncated forest blob")
        (ln,) = struct.unpack_from("<I", data, off)
        off += 4
        if off + ln > len(data):
            raise CascadeFormatError("truncated forest blob")
        forests.append(deserialize_forest(data[off:off + ln]))
        off += ln
    if off != len(data):
        raise CascadeFormatError("trailing bytes")
    return CascadeModel(framework=doc["framework"], stage1=forests[0], theta1=doc["theta1"],
                        stage2=forests[1], theta2=doc["theta2"],
                        three_channel=doc.get("three_channel", False))


def save_cascade(model: CascadeModel, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize_cascade(model))


def load_cascade(path) -> CascadeModel:
    with open(path, "rb") as f:
        return deserialize_cascade(f.read())


def segment(v: Volume3D, cascade: CascadeModel, patch_rf: ForestModel, kde_lut: KdeLookup,
            cnn_model: ConvNetModel | None = None, *, air_threshold: int = 500,
            sp_kwargs: dict | None = None, rf_stride: int = 3, patch_size: int = 25,
            cnn_stride: int = 4, connectivity: int = 26,
            details: dict | None = None) -> SegmentationMask:
    """Full pipeline: body mask, superpixels, RF map, stage-1 pruning,
    (F-2: convnet map on survivors), stage-2 thresholding, stacking the
    accepted superpixels and keeping the largest 3D connected component.

    Pass a dict as `details` to receive the intermediates.
    """
    try:
        body = body_mask(v, air_threshold)
        sp = build_superpixel_map(v, **(sp_kwargs or {}))
        prf = label_dense_rf(v, body, kde_lut, sp, patch_rf,
                             stride=rf_stride, patch_size=patch_size)
        feats1 = pool_features(sp, v, prf)
        s1 = predict_proba(cascade.stage1, feats1)
        survivors = s1 >= cascade.theta1
    except Exception as e:
        raise type(e)(f"[stage 1] {e}") from e
    try:
        if cascade.framework == "f2":
            if cnn_model is None:
                raise ValueError("framework f2 needs a convnet model")
            candidates = mask_from_superpixels(sp, survivors)
            pcnn = label_dense_cnn(v, candidates, cnn_model, stride=cnn_stride)
            feats2 = pool_features(sp, v, pcnn)
            if cascade.three_channel:
                feats2 = np.hstack([feats1, feats2[:, FEATURES_PER_CHANNEL:]])
        else:
            pcnn = None
            feats2 = feats1
        scores = np.full(sp.n_superpixels, -1.0)
        if survivors.any():
            scores[survivors] = predict_proba(cascade.stage2, feats2[survivors])
        accepted = scores >= cascade.theta2
        mask = largest_cc(mask_from_superpixels(sp, accepted), connectivity)
    except Exception as e:
        raise type(e)(f"[stage 2] {e}") from e
    if details is not None:
        details.update(body=body, superpixels=sp, rf_map=prf, cnn_map=pcnn,
                       stage1_scores=s1, survivors=survivors, stage2_scores=scores)
    return mask
