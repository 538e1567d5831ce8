import numpy as np
import pytest

from csseg.patchfeat import (
    DESCRIPTOR_LEN, KdeLookup, body_bbox_slice, dsift, extract_grid_descriptors,
    fit_kde, grid_centers, kde_response_map, load_features, load_kde,
    patch_descriptor, relative_position, save_features, save_kde,
)
from csseg.volume import Volume3D


def test_dsift_constant_patch_is_zero():
    img = np.full((40, 40), 777, dtype=np.int16)
    d = dsift(img, (20, 20))
    assert d.shape == (32,)
    assert (d == 0).all()


def test_dsift_vertical_step_edge_orientation():
    # Intensity rises along x: gradient is horizontal (orientation bin 0),
    # vertical-gradient bins (2 and 6) must be exactly zero.
    img = np.zeros((40, 40), dtype=np.int16)
    img[:, 20:] = 2000
    d = dsift(img, (20, 20))
    assert d[0::8].sum() > 0
    assert (d[2::8] == 0).all()
    assert (d[6::8] == 0).all()


def test_dsift_horizontal_step_edge_orientation():
    img = np.zeros((40, 40), dtype=np.int16)
    img[20:, :] = 2000
    d = dsift(img, (20, 20))
    assert d[2::8].sum() > 0
    assert (d[0::8] == 0).all()
    assert (d[4::8] == 0).all()


def test_dsift_norm_at_most_one():
    rng = np.random.default_rng(4)
    img = rng.integers(0, 4096, size=(64, 64)).astype(np.int16)
    for _ in range(20):
        c = tuple(rng.integers(0, 64, size=2))
        d = dsift(img, c)
        assert np.linalg.norm(d) <= 1.0 + 1e-9


def test_dsift_translation_covariance():
    rng = np.random.default_rng(5)
    tile = rng.integers(0, 4096, size=(30, 30)).astype(np.int16)
    img1 = np.zeros((60, 60), dtype=np.int16)
    img2 = np.zeros((60, 60), dtype=np.int16)
    img1[10:40, 10:40] = tile
    img2[15:45, 13:43] = tile
    d1 = dsift(img1, (25, 25))
    d2 = dsift(img2, (30, 28))
    assert np.allclose(d1, d2, atol=1e-12)


def test_kde_symmetric_inputs_exactly_half():
    samples = np.array([5, 100, 100, 2047, 4000])
    lut = fit_kde(samples, samples.copy())
    assert (lut.table == 0.5).all()


def test_kde_separated_modes():
    lut = fit_kde(np.array([100]), np.array([4000]))
    assert lut.table[100] > 0.999
    assert lut.table[4000] < 0.001


def test_kde_table_bounds_random():
    rng = np.random.default_rng(6)
    lut = fit_kde(rng.integers(0, 4096, 500), rng.integers(0, 4096, 800))
    assert lut.table.min() >= 0.0 and lut.table.max() <= 1.0


def test_kde_matches_direct_evaluation():
    # brute-force per-sample Gaussian sums at 100 random intensities
    rng = np.random.default_rng(7)
    pos = rng.integers(900, 1400, 60)
    neg = rng.integers(0, 4096, 150)
    bw = 3.039
    lut = fit_kde(pos, neg, bw)
    hs = rng.integers(0, 4096, 100)
    norm = 1.0 / (bw * np.sqrt(2 * np.pi))
    for h in hs:
        fp = np.mean([norm * np.exp(-((h - x) ** 2) / (2 * bw * bw)) for x in pos])
        fn = np.mean([norm * np.exp(-((h - x) ** 2) / (2 * bw * bw)) for x in neg])
        expect = 0.5 if fp + fn == 0 else fp / (fp + fn)
        assert lut.table[h] == pytest.approx(expect, abs=1e-9)


def test_kde_empty_samples_rejected():
    with pytest.raises(ValueError):
        fit_kde(np.array([]), np.array([1]))
    with pytest.raises(ValueError):
        fit_kde(np.array([1]), np.array([]))


def test_kde_response_map_constant_and_monotone():
    lut = KdeLookup(table=np.linspace(0, 1, 4096), bandwidth=3.039, n_pos=1, n_neg=1)
    v = Volume3D(values=np.full((2, 3, 3), 1000, dtype=np.int16))
    m = kde_response_map(v, lut)
    assert np.allclose(m.values, np.float32(lut.table[1000]))
    assert m.provenance == "KDE"
    # monotone table preserves voxel ordering
    rng = np.random.default_rng(8)
    vals = rng.integers(0, 4096, size=(2, 4, 4)).astype(np.int16)
    m2 = kde_response_map(Volume3D(values=vals), lut).values
    a, b = vals.ravel(), m2.ravel()
    order = np.argsort(a, kind="stable")
    assert (np.diff(b[order]) >= 0).all()


def test_kde_response_matches_brute_force_volume():
    rng = np.random.default_rng(9)
    lut = fit_kde(rng.integers(0, 4096, 40), rng.integers(0, 4096, 40))
    vals = rng.integers(0, 4096, size=(2, 8, 8)).astype(np.int16)
    m = kde_response_map(Volume3D(values=vals), lut)
    for z in range(2):
        for y in range(8):
            for x in range(8):
                assert m.values[z, y, x] == np.float32(lut.table[vals[z, y, x]])


def test_kde_roundtrip(tmp_path):
    rng = np.random.default_rng(10)
    lut = fit_kde(rng.integers(0, 4096, 30), rng.integers(0, 4096, 50))
    save_kde(lut, tmp_path / "kde.json")
    back = load_kde(tmp_path / "kde.json")
    assert np.array_equal(back.table, lut.table)
    assert back.n_pos == lut.n_pos and back.bandwidth == lut.bandwidth


def test_relative_position_cases():
    bbox = (10, 30, 5, 25)  # xmin, xmax, ymin, ymax
    assert relative_position((5, 10), bbox) == (0.0, 0.0)
    assert relative_position((15, 20), bbox) == (0.5, 0.5)
    # outside the bbox: clamped
    assert relative_position((0, 0), bbox) == (0.0, 0.0)
    assert relative_position((40, 50), bbox) == (1.0, 1.0)
    # empty body slice: flagged center value
    assert relative_position((3, 3), None) == (0.5, 0.5)


def test_body_bbox_slice():
    b = np.zeros((10, 10), dtype=np.uint8)
    assert body_bbox_slice(b) is None
    b[2:5, 3:8] = 1
    assert body_bbox_slice(b) == (3, 7, 2, 4)


def test_patch_descriptor_constant_single_superpixel():
    img = np.full((40, 40), 1200, dtype=np.int16)
    kde = np.full((40, 40), 0.25, dtype=np.float32)
    sp = np.zeros((40, 40), dtype=np.int32)
    d = patch_descriptor(img, kde, sp, (20, 20), (0, 39, 0, 39))
    assert len(d) == DESCRIPTOR_LEN
    assert np.allclose(d[:32], 0)          # no gradients
    assert d[32] == 1200 and d[33] == 1200 and d[34] == 0   # P intensity stats
    assert d[35] == 1200 and d[36] == 1200 and d[37] == 0   # P' == P
    assert d[38] == np.float32(0.25) and d[40] == 0
    assert np.allclose(d[32:35], d[35:38])
    assert np.allclose(d[38:41], d[41:44])


def test_patch_descriptor_half_window_oracle():
    # Hand-built 25x25 window: left 10 columns at 400, rest at 900; the
    # center superpixel covers the right 15 columns. All 12 stats checked
    # against direct enumeration.
    img = np.full((25, 25), 900, dtype=np.int16)
    img[:, :10] = 400
    kde = np.where(img == 400, 0.1, 0.8).astype(np.float32)
    sp = np.full((25, 25), 3, dtype=np.int32)
    sp[:, :10] = 7
    center = (12, 12)

    d = patch_descriptor(img, kde, sp, center, (0, 24, 0, 24))

    def stats(vals):
        v = np.sort(vals.astype(np.float64).ravel())
        return v.mean(), v[(len(v) - 1) // 2], v.std()

    win_i = img.astype(np.float64)
    win_k = kde.astype(np.float64)
    inside = sp == sp[center]
    for offset, expect in ((32, stats(win_i)), (35, stats(win_i[inside])),
                           (38, stats(win_k)), (41, stats(win_k[inside]))):
        assert np.allclose(d[offset:offset + 3], np.float32(expect), rtol=1e-6)
    # P' median: 15*25 = 375 values of 900 -> 900; P median: index 312 of
    # 625 sorted (250 x 400 then 375 x 900) -> 900
    assert d[33] == 900 and d[36] == 900
    assert d[44] == 0.5 and d[45] == 0.5


def test_patch_descriptor_outside_slice():
    img = np.zeros((10, 10), dtype=np.int16)
    with pytest.raises(ValueError):
        patch_descriptor(img, img.astype(np.float32), np.zeros((10, 10), np.int32), (10, 3))


def test_grid_centers_raster_order_in_body():
    body = np.zeros((12, 12), dtype=np.uint8)
    body[3:9, 3:9] = 1
    pts = grid_centers(body, 3)
    assert [tuple(p) for p in pts] == [(3, 3), (3, 6), (6, 3), (6, 6)]


def test_extract_grid_matches_scalar_path():
    # batch interior path and truncated border path must agree with the
    # one-center reference implementation
    rng = np.random.default_rng(11)
    img = rng.integers(0, 3000, size=(30, 34)).astype(np.int16)
    kde = rng.random((30, 34)).astype(np.float32)
    sp = (rng.integers(0, 5, size=(30, 34))).astype(np.int32)
    body = np.ones((30, 34), dtype=np.uint8)
    body[0, :] = 0
    centers, feats = extract_grid_descriptors(img, kde, sp, body, stride=5)
    bbox = body_bbox_slice(body)
    assert len(centers) > 0
    for c, f in zip(centers, feats):
        ref = patch_descriptor(img, kde, sp, tuple(c), bbox)
        assert np.allclose(f, ref, atol=1e-5), tuple(c)


def test_feature_matrix_roundtrip(tmp_path):
    rng = np.random.default_rng(12)
    X = rng.random((17, 46)).astype(np.float32)
    y = (rng.random(17) < 0.5).astype(np.uint8)
    save_features(tmp_path / "f", X, y)
    X2, y2 = load_features(tmp_path / "f")
    assert np.array_equal(X, X2)
    assert np.array_equal(y, y2)
    save_features(tmp_path / "g", X)
    X3, y3 = load_features(tmp_path / "g")
    assert y3 is None and np.array_equal(X, X3)
