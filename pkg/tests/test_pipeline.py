import json

import numpy as np
import pytest

from csseg.config import PipelineConfig
from csseg.pipeline import (FoldPlan, derive_seed, generate_corpus, corpus_ids,
                            load_corpus_volume, make_fold_plan, render_overlay,
                            write_overlays)
from csseg.superpixel import _mask_boundary_2d
from csseg.volume import PhantomSpec, generate_phantom, load_volume, save_mask


def test_derive_seed_stable_and_distinct():
    a = derive_seed(0, "stage1", 0)
    assert a == derive_seed(0, "stage1", 0)
    assert a != derive_seed(0, "stage1", 1)
    assert a != derive_seed(0, "stage2", 0)
    assert a != derive_seed(1, "stage1", 0)


def test_fold_plan_partition_property():
    ids = [f"{i:03d}" for i in range(12)]
    plan = make_fold_plan(ids, 3, seed=5)
    assert len(plan.folds) == 3
    all_test = [vid for f in plan.folds for vid in f["test"]]
    assert sorted(all_test) == ids  # folds partition the corpus
    for f in plan.folds:
        assert not set(f["train"]) & set(f["test"])
        assert sorted(f["train"] + f["test"]) == ids


def test_fold_plan_roundtrip_and_determinism():
    ids = [f"{i:03d}" for i in range(7)]
    p1 = make_fold_plan(ids, 3, seed=9)
    p2 = make_fold_plan(ids, 3, seed=9)
    assert p1.to_json() == p2.to_json()
    assert FoldPlan.from_json(p1.to_json()).folds == p1.folds
    p3 = make_fold_plan(ids, 3, seed=10)
    assert p3.to_json() != p1.to_json()


def test_fold_plan_bad_count():
    with pytest.raises(ValueError):
        make_fold_plan(["a", "b"], 3, seed=0)


def test_generate_corpus_and_load(tmp_path):
    ids = generate_corpus(3, tmp_path, seed=1, dims=(32, 32, 8))
    assert ids == ["000", "001", "002"]
    assert corpus_ids(tmp_path) == ids
    vol, gt = load_corpus_volume(tmp_path, "001")
    assert vol.dims == (32, 32, 8)
    assert gt.count() > 0
    # regenerate: identical bytes (idempotent stage outputs)
    before = (tmp_path / "vol_001.raw").read_bytes()
    generate_corpus(3, tmp_path, seed=1, dims=(32, 32, 8))
    assert (tmp_path / "vol_001.raw").read_bytes() == before


def test_overlay_contours_exact(tmp_path):
    vol, gt = generate_phantom(PhantomSpec(seed=3, dims=(32, 32, 8)))
    z = int(np.argmax(gt.values.sum(axis=(1, 2))))
    pred = gt  # coinciding masks: red contour drawn over yellow
    img = render_overlay(vol.values[z], gt.values[z], pred.values[z], scale=1)
    boundary = _mask_boundary_2d(gt.values[z])
    red = (img == np.array([255, 0, 0])).all(axis=2)
    assert np.array_equal(red, boundary)  # contour = exactly the boundary pixels
    # prediction empty: only the gt contour remains
    img2 = render_overlay(vol.values[z], gt.values[z], np.zeros_like(gt.values[z]), scale=1)
    yellow = (img2 == np.array([255, 255, 0])).all(axis=2)
    assert np.array_equal(yellow, boundary)
    assert not ((img2 == np.array([255, 0, 0])).all(axis=2)).any()


def test_overlay_scale_and_files(tmp_path):
    vol, gt = generate_phantom(PhantomSpec(seed=4, dims=(32, 32, 8)))
    img = render_overlay(vol.values[0], gt.values[0], None, scale=4)
    assert img.shape == (128, 128, 3)
    save_mask(gt, tmp_path / "pred")
    written = write_overlays(vol, gt, gt, 3, tmp_path / "ov", scale=2)
    assert len(written) == 1
    assert "dice1.000" in written[0].name
    with pytest.raises(ValueError):
        write_overlays(vol, gt, gt, 99, tmp_path / "ov2")
    all_slices = write_overlays(vol, None, gt, "all", tmp_path / "ov3")
    assert len(all_slices) == 8
