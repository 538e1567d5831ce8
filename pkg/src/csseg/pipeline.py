"""Orchestration: corpus generation, fold planning, stagewise training,
segmentation, evaluation and overlay rendering. Every stage derives its seed
from the master seed, the stage name and the fold index, so composing the
stage commands reproduces a crossval run byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import cascade as casc
from . import cnn as cnnmod
from . import densemap, patchfeat, superpixel
from .config import PipelineConfig
from .forest import ForestConfig, predict_proba, serialize_forest, train_forest
from .postmetrics import MetricsReport, compute_metrics
from .volume import (PhantomSpec, SegmentationMask, Volume3D, body_mask,
                     generate_phantom, load_mask, load_volume, save_mask, save_volume)

logger = logging.getLogger(__name__)


class MissingInputError(FileNotFoundError):
    """An expected stage input (file or directory) is absent."""


def derive_seed(master: int, stage: str, fold: int = 0) -> int:
    """Stable per-stage seed: hash of master seed, stage name and fold."""
    digest = hashlib.sha256(f"{master}:{stage}:{fold}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def atomic_write_bytes(path, data: bytes) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_name(p.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(p)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


# ---------------------------------------------------------------------------
# Fold planning.
# ---------------------------------------------------------------------------

@dataclass
class FoldPlan:
    folds: list[dict]  # [{"train": [...], "test": [...]}]

    def to_json(self) -> str:
        return json.dumps({"folds": self.folds}, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        return cls(folds=json.loads(text)["folds"])


def make_fold_plan(ids: list[str], n_folds: int, seed: int) -> FoldPlan:
    """Patient-level split: shuffled ids partitioned into n_folds test sets."""
    ids = sorted(ids)
    if n_folds < 2 or n_folds > len(ids):
        raise ValueError(f"fold count {n_folds} invalid for {len(ids)} volumes")
    rng = np.random.default_rng(derive_seed(seed, "folds"))
    perm = rng.permutation(len(ids))
    chunks = np.array_split(perm, n_folds)
    folds = []
    for chunk in chunks:
        test = sorted(ids[i] for i in chunk)
        train = sorted(set(ids) - set(test))
        folds.append({"train": train, "test": test})
    return FoldPlan(folds=folds)


# ---------------------------------------------------------------------------
# Corpus management.
# ---------------------------------------------------------------------------

def generate_corpus(n: int, out_dir, seed: int, dims=(64, 64, 16),
                    spacing=(1.0, 1.0, 1.0)) -> list[str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(n):
        vid = f"{i:03d}"
        spec = PhantomSpec(dims=tuple(dims), spacing_mm=tuple(spacing),
                           seed=derive_seed(seed, "phantom", i))
        vol, gt = generate_phantom(spec)
        save_volume(vol, out / f"vol_{vid}")
        save_mask(gt, out / f"gt_{vid}")
        ids.append(vid)
    atomic_write_text(out / "corpus.json", json.dumps(
        {"ids": ids, "dims": list(dims), "spacing_mm": list(spacing), "seed": seed},
        sort_keys=True, indent=2))
    return ids


def corpus_ids(corpus_dir) -> list[str]:
    p = Path(corpus_dir) / "corpus.json"
    if not p.exists():
        raise MissingInputError(f"missing corpus index {p}")
    return json.loads(p.read_text())["ids"]


def load_corpus_volume(corpus_dir, vid: str) -> tuple[Volume3D, SegmentationMask]:
    base = Path(corpus_dir)
    if not (base / f"vol_{vid}.json").exists():
        raise MissingInputError(f"missing volume vol_{vid} in {base}")
    return load_volume(base / f"vol_{vid}"), load_mask(base / f"gt_{vid}")


# ---------------------------------------------------------------------------
# Per-volume preparation (body mask, superpixels, descriptors).
# ---------------------------------------------------------------------------

def _sp_kwargs(cfg: PipelineConfig) -> dict:
    sp = cfg.superpixel
    return dict(cell_area=sp.cell_area, k_min=sp.k_min, k_max=sp.k_max,
                compactness=sp.compactness, iters=sp.iters,
                intensity_scale=sp.intensity_scale)


@dataclass
class PreparedVolume:
    vid: str
    volume: Volume3D
    gt: SegmentationMask
    body: SegmentationMask
    sp: superpixel.SuperpixelMap


def _prepare_one(args) -> "PreparedVolume":
    corpus_dir, vid, cfg = args
    vol, gt = load_corpus_volume(corpus_dir, vid)
    body = body_mask(vol, cfg.air_threshold)
    sp = superpixel.build_superpixel_map(vol, **_sp_kwargs(cfg))
    return PreparedVolume(vid=vid, volume=vol, gt=gt, body=body, sp=sp)


def prepare_volumes(corpus_dir, ids, cfg: PipelineConfig) -> dict[str, PreparedVolume]:
    items = [(corpus_dir, vid, cfg) for vid in ids]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            prepared = list(ex.map(_prepare_one, items))
    else:
        prepared = [_prepare_one(it) for it in items]
    return {p.vid: p for p in prepared}


# ---------------------------------------------------------------------------
# Fold training.
# ---------------------------------------------------------------------------

@dataclass
class FoldArtifacts:
    fold: int
    kde: patchfeat.KdeLookup
    patch_rf: object  # ForestModel
    stage1: object    # ForestModel
    theta1: float
    hard_negative_info: dict
    cascade_model: casc.CascadeModel
    cnn_model: object | None
    stats: dict


def fit_fold_kde(prepared, train_ids, cfg: PipelineConfig, fold: int) -> patchfeat.KdeLookup:
    rng = np.random.default_rng(derive_seed(cfg.seed, "kde", fold))
    pos_parts, neg_parts = [], []
    for vid in train_ids:
        p = prepared[vid]
        pos, neg = patchfeat.kde_training_samples(
            p.volume, p.gt.values, p.body.values, cfg.kde.neg_fraction, rng)
        pos_parts.append(pos)
        neg_parts.append(neg)
    return patchfeat.fit_kde(np.concatenate(pos_parts), np.concatenate(neg_parts),
                             cfg.kde.bandwidth)


def train_fold_patch_rf(prepared, train_ids, lut, cfg: PipelineConfig, fold: int):
    """Patch labeler trained on all in-body grid patches of the training
    volumes, labeled by their center voxel's ground-truth class."""
    feats, labels, descs = [], [], {}
    for vid in train_ids:
        p = prepared[vid]
        per_slice = densemap.rf_slice_descriptors(
            p.volume, p.body, lut, p.sp, stride=cfg.patch.stride, patch_size=cfg.patch.size)
        descs[vid] = per_slice
        for z, (centers, f) in enumerate(per_slice):
            if len(centers) == 0:
                continue
            feats.append(f)
            labels.append(p.gt.values[z][centers[:, 0], centers[:, 1]])
    X = np.vstack(feats)
    y = np.concatenate(labels).astype(np.int8)
    model = train_forest(X, y, ForestConfig(
        n_trees=cfg.forest.trees, seed=derive_seed(cfg.seed, "patch_rf", fold)))
    return model, descs


def fold_rf_maps(prepared, ids, lut, patch_rf, cfg: PipelineConfig, descs=None) -> dict:
    maps = {}
    for vid in ids:
        p = prepared[vid]
        per_slice = (descs or {}).get(vid)
        if per_slice is None:
            per_slice = densemap.rf_slice_descriptors(
                p.volume, p.body, lut, p.sp, stride=cfg.patch.stride,
                patch_size=cfg.patch.size)
        scored = [(c, predict_proba(patch_rf, f)) for c, f in per_slice]
        maps[vid] = densemap.rf_map_from_probs(p.volume, p.body, scored)
    return maps


def _cnn_training_patches(prepared, train_ids, chosen_by_vid, cfg: PipelineConfig):
    """2.5D patches sampled on the in-plane grid inside the chosen (hard
    negative + positive) superpixels, labeled by their center voxel."""
    s = cnnmod.ARCH_PRESETS[cfg.cnn.preset]["input_size"]
    patches, labels = [], []
    step = cfg.cnn.train_stride
    for vid in train_ids:
        p = prepared[vid]
        chosen = chosen_by_vid[vid]
        voxmask = chosen[p.sp.global_labels()]
        grid = np.zeros_like(voxmask)
        grid[:, ::step, ::step] = True
        pts = np.column_stack(np.nonzero(voxmask & grid))
        for z, y, x in pts:
            patches.append(cnnmod.extract_25d_patch(p.volume, (z, y, x), s).planes)
            labels.append(int(p.gt.values[z, y, x]))
    return np.stack(patches), np.asarray(labels, dtype=np.int64)


def _forest_cfg(cfg: PipelineConfig, stage: str, fold: int) -> ForestConfig:
    return ForestConfig(n_trees=cfg.forest.trees, seed=derive_seed(cfg.seed, stage, fold))


@dataclass
class FoldCore:
    """Everything up to and including the shared stage-1 classifier."""

    train_ids: list[str]
    lut: patchfeat.KdeLookup
    patch_rf: object
    feats1: np.ndarray
    labeling: superpixel.SuperpixelLabeling
    vol_slices: dict
    stage1: object
    theta1: float
    s1_scores: np.ndarray
    hard: np.ndarray
    training_ids: np.ndarray
    stats: dict


def fold_core(prepared, plan: FoldPlan, fold: int, cfg: PipelineConfig,
              lut=None, patch_rf=None) -> FoldCore:
    train_ids = plan.folds[fold]["train"]
    descs = None
    if lut is None:
        lut = fit_fold_kde(prepared, train_ids, cfg, fold)
    if patch_rf is None:
        patch_rf, descs = train_fold_patch_rf(prepared, train_ids, lut, cfg, fold)
    rf_maps = fold_rf_maps(prepared, train_ids, lut, patch_rf, cfg, descs)

    feats1, classes, vol_slices = [], [], {}
    offset = 0
    for vid in train_ids:
        p = prepared[vid]
        feats1.append(casc.pool_features(p.sp, p.volume, rf_maps[vid]))
        r = superpixel.overlap_ratio(p.sp, p.gt)
        lab = superpixel.assign_labels(r, cfg.labeling_tau_pos, cfg.labeling_tau_neg)
        classes.append(lab.classes)
        vol_slices[vid] = slice(offset, offset + len(r))
        offset += len(r)
    feats1 = np.vstack(feats1)
    labeling = superpixel.SuperpixelLabeling(
        ratios=np.zeros(len(feats1)), classes=np.concatenate(classes),
        tau_pos=cfg.labeling_tau_pos, tau_neg=cfg.labeling_tau_neg)

    stage1, theta1 = casc.train_stage1(feats1, labeling, _forest_cfg(cfg, "stage1", fold),
                                       cfg.cascade.recall_target)
    s1_scores = predict_proba(stage1, feats1)
    hard = casc.mine_hard_negatives(stage1, theta1, feats1, labeling)
    training_ids = casc.stage2_training_ids(labeling, hard, s1_scores)

    pos = labeling.classes == superpixel.POSITIVE
    neg = labeling.classes == superpixel.NEGATIVE
    stats = {
        "fold": fold,
        "n_train_superpixels": int(len(feats1)),
        "n_positive": int(pos.sum()),
        "n_negative": int(neg.sum()),
        "theta1": theta1,
        "stage1_recall": float((s1_scores[pos] >= theta1).mean()),
        "stage1_prune_fraction": float((s1_scores[neg] < theta1).mean()),
        "n_hard_negatives": int(len(hard)),
    }
    return FoldCore(train_ids=train_ids, lut=lut, patch_rf=patch_rf, feats1=feats1,
                    labeling=labeling, vol_slices=vol_slices, stage1=stage1,
                    theta1=theta1, s1_scores=s1_scores, hard=hard,
                    training_ids=training_ids, stats=stats)


def train_fold_cnn(prepared, core: FoldCore, cfg: PipelineConfig, fold: int):
    chosen_rows = np.zeros(len(core.feats1), dtype=bool)
    chosen_rows[core.training_ids] = True
    chosen_by_vid = {vid: chosen_rows[core.vol_slices[vid]] for vid in core.train_ids}
    X, y = _cnn_training_patches(prepared, core.train_ids, chosen_by_vid, cfg)
    model = cnnmod.train_cnn(X, y, cnnmod.CnnHyper(
        lr=cfg.cnn.lr, momentum=cfg.cnn.momentum, batch=cfg.cnn.batch,
        epochs=cfg.cnn.epochs, seed=derive_seed(cfg.seed, "cnn", fold)), arch=cfg.cnn.preset)
    return model, int(len(X))


def train_fold(prepared, plan: FoldPlan, fold: int, cfg: PipelineConfig,
               framework: str, out_dir=None, lut=None, patch_rf=None,
               cnn_model=None) -> FoldArtifacts:
    """All models for one fold; artifacts are written when out_dir is given."""
    core = fold_core(prepared, plan, fold, cfg, lut=lut, patch_rf=patch_rf)
    stats = core.stats
    if framework == "f2":
        if cnn_model is None:
            cnn_model, n_patches = train_fold_cnn(prepared, core, cfg, fold)
            stats["n_cnn_patches"] = n_patches
        # candidate voxels at training time: survivors plus all positives, so
        # every stage-2 training row has convnet features under its mask
        feats2_parts = []
        for vid in core.train_ids:
            p = prepared[vid]
            rows = core.vol_slices[vid]
            cand_rows = ((core.s1_scores[rows] >= core.theta1)
                         | (core.labeling.classes[rows] == superpixel.POSITIVE))
            cand = superpixel.mask_from_superpixels(p.sp, cand_rows)
            pcnn = densemap.label_dense_cnn(p.volume, cand, cnn_model, stride=cfg.cnn.stride)
            feats2_parts.append(casc.pool_features(p.sp, p.volume, pcnn))
        feats2 = np.vstack(feats2_parts)
        if cfg.cascade.three_channel:
            feats2 = np.hstack([core.feats1, feats2[:, casc.FEATURES_PER_CHANNEL:]])
        stage2 = casc.train_stage2(feats2, core.labeling, core.training_ids,
                                   _forest_cfg(cfg, "stage2", fold))
        score_feats = feats2
    else:
        cnn_model = None
        stage2 = casc.train_stage2(core.feats1, core.labeling, core.training_ids,
                                   _forest_cfg(cfg, "stage2", fold))
        score_feats = core.feats1

    # calibrate theta2 on the training volumes with the full pipeline rule
    survivors_rows = core.s1_scores >= core.theta1
    s2_scores = np.full(len(core.feats1), -1.0)
    if survivors_rows.any():
        s2_scores[survivors_rows] = predict_proba(stage2, score_feats[survivors_rows])
    per_volume = [(prepared[vid].sp, s2_scores[core.vol_slices[vid]], prepared[vid].gt)
                  for vid in core.train_ids]
    theta2 = casc.calibrate_threshold(per_volume, cfg.theta_grid(),
                                      cfg.cascade.connectivity)
    stats["theta2"] = theta2

    model = casc.CascadeModel(framework=framework, stage1=core.stage1, theta1=core.theta1,
                              stage2=stage2, theta2=theta2,
                              three_channel=cfg.cascade.three_channel and framework == "f2")
    art = FoldArtifacts(fold=fold, kde=core.lut, patch_rf=core.patch_rf, stage1=core.stage1,
                        theta1=core.theta1, hard_negative_info={"ids": core.hard.tolist()},
                        cascade_model=model, cnn_model=cnn_model, stats=stats)
    if out_dir is not None:
        write_fold_artifacts(art, cfg, framework, out_dir)
    return art


def write_fold_artifacts(art: FoldArtifacts, cfg: PipelineConfig, framework: str, out_dir) -> None:
    fold_dir = Path(out_dir) / f"fold_{art.fold}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    patchfeat.save_kde(art.kde, fold_dir / "kde.json")
    atomic_write_bytes(fold_dir / "patch_rf.csrf", serialize_forest(art.patch_rf))
    atomic_write_bytes(fold_dir / "stage1.csrf", serialize_forest(art.stage1))
    atomic_write_text(fold_dir / "stage1.json", json.dumps(
        {"theta1": art.theta1, "hard_negatives": art.hard_negative_info["ids"],
         "stats": art.stats}, sort_keys=True, indent=2))
    atomic_write_bytes(fold_dir / f"cascade_{framework}.cscd",
                       casc.serialize_cascade(art.cascade_model))
    if art.cnn_model is not None:
        atomic_write_bytes(fold_dir / "cnn.csnn", cnnmod.serialize_cnn(art.cnn_model))


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"missing {what}: {p}")
    return p


def load_fold_patch_stage(fold_dir):
    from .forest import load_forest
    lut = patchfeat.load_kde(_require(Path(fold_dir) / "kde.json", "KDE table"))
    patch_rf = load_forest(_require(Path(fold_dir) / "patch_rf.csrf", "patch labeler"))
    return lut, patch_rf


# ---------------------------------------------------------------------------
# Stage-command runners (the CLI subcommands delegate here).
# ---------------------------------------------------------------------------

def run_oversegment(corpus_dir, ids, cfg: PipelineConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prepared = prepare_volumes(corpus_dir, ids, cfg)
    for vid in ids:
        superpixel.save_superpixels(prepared[vid].sp, out / f"sp_{vid}")


def run_train_patch_rf(corpus_dir, plan: FoldPlan, fold: int, cfg: PipelineConfig, out_dir) -> None:
    train_ids = plan.folds[fold]["train"]
    prepared = prepare_volumes(corpus_dir, train_ids, cfg)
    lut = fit_fold_kde(prepared, train_ids, cfg, fold)
    patch_rf, _ = train_fold_patch_rf(prepared, train_ids, lut, cfg, fold)
    fold_dir = Path(out_dir) / f"fold_{fold}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    patchfeat.save_kde(lut, fold_dir / "kde.json")
    atomic_write_bytes(fold_dir / "patch_rf.csrf", serialize_forest(patch_rf))


def run_label(corpus_dir, fold_dir, ids, cfg: PipelineConfig, out_dir) -> None:
    lut, patch_rf = load_fold_patch_stage(fold_dir)
    prepared = prepare_volumes(corpus_dir, ids, cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    from .volume import save_probability
    for vid in ids:
        p = prepared[vid]
        pm = densemap.label_dense_rf(p.volume, p.body, lut, p.sp, patch_rf,
                                     stride=cfg.patch.stride, patch_size=cfg.patch.size)
        save_probability(pm, out / f"prf_{vid}")


def run_train_cnn(corpus_dir, plan: FoldPlan, fold: int, cfg: PipelineConfig, out_dir) -> None:
    fold_dir = Path(out_dir) / f"fold_{fold}"
    lut, patch_rf = load_fold_patch_stage(fold_dir)
    train_ids = plan.folds[fold]["train"]
    prepared = prepare_volumes(corpus_dir, train_ids, cfg)
    core = fold_core(prepared, plan, fold, cfg, lut=lut, patch_rf=patch_rf)
    model, n_patches = train_fold_cnn(prepared, core, cfg, fold)
    atomic_write_bytes(fold_dir / "stage1.csrf", serialize_forest(core.stage1))
    atomic_write_text(fold_dir / "stage1.json", json.dumps(
        {"theta1": core.theta1, "hard_negatives": core.hard.tolist(),
         "stats": {**core.stats, "n_cnn_patches": n_patches}}, sort_keys=True, indent=2))
    atomic_write_bytes(fold_dir / "cnn.csnn", cnnmod.serialize_cnn(model))


def run_train_cascade(corpus_dir, plan: FoldPlan, fold: int, cfg: PipelineConfig,
                      framework: str, out_dir) -> None:
    fold_dir = Path(out_dir) / f"fold_{fold}"
    lut, patch_rf = load_fold_patch_stage(fold_dir)
    cnn_model = None
    if framework == "f2":
        cnn_model = cnnmod.load_cnn(_require(fold_dir / "cnn.csnn",
                                             "convnet model (run train-cnn first)"))
    train_ids = plan.folds[fold]["train"]
    prepared = prepare_volumes(corpus_dir, train_ids, cfg)
    train_fold(prepared, plan, fold, cfg, framework, out_dir=out_dir,
               lut=lut, patch_rf=patch_rf, cnn_model=cnn_model)


def load_fold_for_segmentation(fold_dir, framework: str):
    lut, patch_rf = load_fold_patch_stage(fold_dir)
    model = casc.load_cascade(_require(Path(fold_dir) / f"cascade_{framework}.cscd",
                                       f"cascade model for {framework}"))
    cnn_model = None
    if framework == "f2":
        cnn_model = cnnmod.load_cnn(_require(Path(fold_dir) / "cnn.csnn", "convnet model"))
    return lut, patch_rf, model, cnn_model


def run_segment(corpus_dir, fold_dir, framework: str, ids, cfg: PipelineConfig, out_dir) -> None:
    lut, patch_rf, model, cnn_model = load_fold_for_segmentation(fold_dir, framework)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for vid in ids:
        vol = load_volume(_require(Path(corpus_dir) / f"vol_{vid}.json", f"volume {vid}").with_suffix(""))
        pred = segment_volume(vol, model, patch_rf, lut, cnn_model, cfg)
        save_mask(pred, out / f"seg_{vid}")


def run_evaluate(pred_dir, gt_dir, ids, out_path, csv_path=None) -> MetricsReport:
    rows = []
    for vid in ids:
        pred = load_mask(_require(Path(pred_dir) / f"seg_{vid}.json", f"prediction {vid}").with_suffix(""))
        gt = load_mask(_require(Path(gt_dir) / f"gt_{vid}.json", f"ground truth {vid}").with_suffix(""))
        m = compute_metrics(pred, gt)
        rows.append({"id": vid, "dice": m["dice"], "jaccard": m["jaccard"],
                     "precision": m["precision"], "recall": m["recall"]})
    rows.sort(key=lambda r: r["id"])
    report = MetricsReport(rows=rows)
    if out_path is not None:
        atomic_write_text(out_path, report.to_json())
    if csv_path is not None:
        atomic_write_text(csv_path, report.to_csv())
    return report


def segment_volume(vol: Volume3D, cascade_model, patch_rf, lut, cnn_model,
                   cfg: PipelineConfig) -> SegmentationMask:
    return casc.segment(
        vol, cascade_model, patch_rf, lut, cnn_model,
        air_threshold=cfg.air_threshold, sp_kwargs=_sp_kwargs(cfg),
        rf_stride=cfg.patch.stride, patch_size=cfg.patch.size,
        cnn_stride=cfg.cnn.stride, connectivity=cfg.cascade.connectivity)


# ---------------------------------------------------------------------------
# Cross-validation.
# ---------------------------------------------------------------------------

def run_crossval(corpus_dir, out_dir, cfg: PipelineConfig, framework: str) -> dict:
    ids = corpus_ids(corpus_dir)
    plan = make_fold_plan(ids, cfg.cv.folds, cfg.seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "folds.json", plan.to_json())

    prepared = prepare_volumes(corpus_dir, ids, cfg)
    rows = []
    fold_stats = []
    for fold in range(len(plan.folds)):
        art = train_fold(prepared, plan, fold, cfg, framework, out_dir=out)
        fold_stats.append(art.stats)
        for vid in plan.folds[fold]["test"]:
            p = prepared[vid]
            pred = segment_volume(p.volume, art.cascade_model, art.patch_rf,
                                  art.kde, art.cnn_model, cfg)
            save_mask(pred, out / f"seg_{vid}")
            m = compute_metrics(pred, p.gt)
            rows.append({"id": vid, "fold": fold, "dice": m["dice"],
                         "jaccard": m["jaccard"], "precision": m["precision"],
                         "recall": m["recall"]})
    rows.sort(key=lambda r: r["id"])
    report = MetricsReport(rows=rows)
    doc = {
        "framework": framework,
        "volumes": rows,
        "aggregates": report.aggregates(),
        "folds": fold_stats,
        "seed": cfg.seed,
    }
    text = json.dumps(doc, sort_keys=True, indent=2)
    atomic_write_text(out / "metrics.json", text)
    atomic_write_text(out / "metrics.csv", report.to_csv())
    return doc


# ---------------------------------------------------------------------------
# Overlay rendering.
# ---------------------------------------------------------------------------

def render_overlay(vol_slice: np.ndarray, gt_slice: np.ndarray | None,
                   pred_slice: np.ndarray | None, scale: int = 4) -> np.ndarray:
    """8-bit RGB: grayscale base, gt contour in yellow, prediction in red."""
    base = np.clip(vol_slice.astype(np.float64) / 16.0, 0, 255).astype(np.uint8)
    img = np.stack([base] * 3, axis=-1)
    if gt_slice is not None and gt_slice.any():
        img[superpixel._mask_boundary_2d(gt_slice)] = (255, 255, 0)
    if pred_slice is not None and pred_slice.any():
        img[superpixel._mask_boundary_2d(pred_slice)] = (255, 0, 0)
    if scale != 1:
        img = np.kron(img, np.ones((scale, scale, 1), dtype=np.uint8))
    return img


def write_overlays(vol: Volume3D, pred: SegmentationMask | None,
                   gt: SegmentationMask | None, slices, out_dir, scale: int = 4) -> list[Path]:
    from PIL import Image
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    nz = vol.values.shape[0]
    if slices == "all":
        slices = range(nz)
    else:
        slices = [int(slices)]
    dice_tag = ""
    if pred is not None and gt is not None:
        dice_tag = f"_dice{compute_metrics(pred, gt)['dice']:.3f}"
    written = []
    for z in slices:
        if not 0 <= z < nz:
            raise ValueError(f"slice {z} out of range [0, {nz})")
        img = render_overlay(vol.values[z],
                             None if gt is None else gt.values[z],
                             None if pred is None else pred.values[z], scale)
        path = out / f"slice{z:03d}{dice_tag}.png"
        Image.fromarray(img).save(path)
        written.append(path)
    return written
