import numpy as np
import pytest

from csseg.cnn import (
    ARCH_PRESETS, CnnFormatError, CnnHyper, NumericError, Patch25D, build_model,
    deserialize_cnn, extract_25d_patch, forward, forward_batch, gradient_check,
    model_to_float64, numeric_gradient, serialize_cnn, train_cnn, training_accuracy,
)
from csseg.volume import Volume3D


def _separable_set(rng, n=64, s=32):
    half = n // 2
    dark = rng.uniform(0.1, 0.3, size=(half, 3, s, s)).astype(np.float32)
    bright = rng.uniform(0.7, 0.9, size=(half, 3, s, s)).astype(np.float32)
    return np.concatenate([dark, bright]), np.repeat([0, 1], half)


def test_forward_outputs_sum_to_one():
    rng = np.random.default_rng(0)
    m = build_model("desk", seed=1)
    x = rng.random((5, 3, 32, 32)).astype(np.float32)
    p = forward_batch(m, x)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert (p > 0).all()


def test_zero_final_fc_gives_half():
    m = build_model("desk", seed=2)
    m.layers[-1].w[...] = 0
    m.layers[-1].b[...] = 0
    p = forward(m, np.random.default_rng(1).random((3, 32, 32)).astype(np.float32))
    assert p[0] == 0.5 and p[1] == 0.5


def test_eval_forward_deterministic():
    rng = np.random.default_rng(3)
    m = build_model("desk", seed=4)
    x = rng.random((3, 32, 32)).astype(np.float32)
    assert np.array_equal(forward(m, x), forward(m, x))


def test_shape_validation():
    with pytest.raises(ValueError):
        build_model({"input_size": 4, "layers": [{"type": "conv", "filters": 2, "kernel": 5},
                                                 {"type": "fc", "units": 2}]})
    with pytest.raises(ValueError):
        build_model({"input_size": 32, "layers": [{"type": "fc", "units": 3}]})
    with pytest.raises(ValueError):
        build_model("no-such-preset")


def test_forward_shape_mismatch():
    m = build_model("desk", seed=0)
    with pytest.raises(ValueError):
        forward(m, np.zeros((3, 16, 16), dtype=np.float32))


def test_extract_25d_patch_constant_and_center():
    vals = np.full((12, 20, 20), 2047, dtype=np.int16)
    v = Volume3D(values=vals)
    p = extract_25d_patch(v, (6, 10, 10), s=8)
    assert p.planes.shape == (3, 8, 8)
    assert np.allclose(p.planes, 2047 / 4095)
    assert not p.clamped

    rng = np.random.default_rng(5)
    vals = rng.integers(0, 4096, size=(12, 20, 20)).astype(np.int16)
    v = Volume3D(values=vals)
    z, y, x = 6, 9, 11
    p = extract_25d_patch(v, (z, y, x), s=8)
    c = 8 // 2
    expect = np.float32(vals[z, y, x] / 4095)
    assert p.planes[0, c, c] == expect
    assert p.planes[1, c, c] == expect
    assert p.planes[2, c, c] == expect


def test_extract_25d_patch_corner_matches_padded_oracle():
    rng = np.random.default_rng(6)
    vals = rng.integers(0, 4096, size=(6, 10, 10)).astype(np.int16)
    v = Volume3D(values=vals)
    s = 8
    p = extract_25d_patch(v, (0, 0, 9), s=s)
    assert p.clamped
    # pad-then-crop oracle with edge mode
    half = s // 2
    pad = np.pad(vals, half, mode="edge").astype(np.float32) / 4095
    z, y, x = 0 + half, 0 + half, 9 + half
    axial = pad[z, y - half:y + half, x - half:x + half]
    coronal = pad[z - half:z + half, y, x - half:x + half]
    sagittal = pad[z - half:z + half, y - half:y + half, x]
    assert np.allclose(p.planes[0], axial)
    assert np.allclose(p.planes[1], coronal)
    assert np.allclose(p.planes[2], sagittal)


def test_extract_25d_patch_outside():
    v = Volume3D(values=np.zeros((4, 4, 4), dtype=np.int16))
    with pytest.raises(ValueError):
        extract_25d_patch(v, (4, 0, 0), s=4)


def test_train_separable_reaches_full_accuracy():
    rng = np.random.default_rng(7)
    X, y = _separable_set(rng)
    m = train_cnn(X, y, CnnHyper(epochs=20, seed=0))
    assert training_accuracy(m, X, y) == 1.0
    assert len(m.loss_history) == 20


def test_lr_zero_keeps_params_and_gives_ln2_loss():
    # class-uninformative patches: expected initial cross-entropy is ln 2
    rng = np.random.default_rng(8)
    X = rng.random((64, 3, 32, 32)).astype(np.float32)
    y = np.repeat([0, 1], 32)
    m = train_cnn(X, y, CnnHyper(lr=0.0, epochs=2, seed=9))
    fresh = build_model("desk", seed=9)
    for la, lb in zip(m.layers, fresh.layers):
        for pa, pb in zip(la.params, lb.params):
            assert np.array_equal(pa, pb)
    # zero-init head: the untrained net outputs (0.5, 0.5) exactly
    assert m.loss_history[0] == pytest.approx(np.log(2), abs=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reported_with_epoch():
    rng = np.random.default_rng(10)
    X, y = _separable_set(rng, n=16)
    with pytest.raises(NumericError, match="epoch"):
        train_cnn(X, y, CnnHyper(lr=1e30, epochs=3, seed=0))


def test_gradient_check_composed_desk():
    rng = np.random.default_rng(11)
    m = build_model("desk", seed=12)
    patch = rng.random((3, 32, 32)).astype(np.float32)
    res = gradient_check(m, patch, 1, eps=1e-4, samples_per_layer=200, seed=0)
    assert res["max_relative_error"] < 1e-4


@pytest.mark.parametrize("layers", [
    [{"type": "fc", "units": 2}],
    [{"type": "conv", "filters": 4, "kernel": 3}, {"type": "fc", "units": 2}],
    [{"type": "conv", "filters": 4, "kernel": 3}, {"type": "tanh"}, {"type": "fc", "units": 2}],
    [{"type": "conv", "filters": 4, "kernel": 3}, {"type": "pool", "size": 2}, {"type": "fc", "units": 2}],
    [{"type": "conv", "filters": 4, "kernel": 3}, {"type": "dropout", "rate": 0.5}, {"type": "fc", "units": 2}],
])
def test_gradient_check_each_layer_type(layers):
    # the upstream conv gradient routes through the layer under test
    rng = np.random.default_rng(13)
    m = build_model({"input_size": 12, "layers": layers}, seed=14)
    patch = rng.random((3, 12, 12)).astype(np.float32)
    res = gradient_check(m, patch, 0, eps=1e-4, samples_per_layer=200, seed=1)
    assert res["max_relative_error"] < 1e-4


def test_gradient_check_zero_input_bias_path():
    m = build_model("desk", seed=15)
    patch = np.zeros((3, 32, 32), dtype=np.float32)
    res = gradient_check(m, patch, 1, eps=1e-4, samples_per_layer=100, seed=2)
    assert res["max_relative_error"] < 1e-4


def test_gradient_fault_injection_detected():
    rng = np.random.default_rng(16)
    arch = {"input_size": 10, "layers": [{"type": "conv", "filters": 2, "kernel": 3},
                                         {"type": "tanh"}, {"type": "fc", "units": 2}]}
    m64 = model_to_float64(build_model(arch, seed=17))
    x = rng.random((1, 3, 10, 10))
    from csseg.cnn import _backward_batch
    probs = forward_batch(m64, x)
    _backward_batch(m64, probs, np.array([1]))
    g = m64.layers[2].grads[0]
    flat = int(np.argmax(np.abs(g)))
    a_true = g.flat[flat]
    assert abs(a_true) > 1e-3
    n = numeric_gradient(m64, x, 1, 2, 0, flat, 1e-4)
    err_true = abs(a_true - n) / max(abs(a_true), abs(n), 1e-8)
    assert err_true < 1e-4
    a_bad = a_true * 1.05  # 5% perturbation must be detected
    err_bad = abs(a_bad - n) / max(abs(a_bad), abs(n), 1e-8)
    assert err_bad > 1e-2


def test_inverted_dropout_expectation():
    # averaging train-mode forwards approximates the eval-mode output
    arch = {"input_size": 8, "layers": [{"type": "conv", "filters": 2, "kernel": 3},
                                        {"type": "tanh"}, {"type": "pool", "size": 2},
                                        {"type": "dropout", "rate": 0.5},
                                        {"type": "fc", "units": 2}]}
    m = build_model(arch, seed=18)
    rng = np.random.default_rng(19)
    x = rng.random((1, 3, 8, 8)).astype(np.float32)
    ref = forward_batch(m, x)[0]
    draws = 10000
    chunk = np.repeat(x, 1000, axis=0)
    acc = np.zeros(2)
    for _ in range(draws // 1000):
        acc += forward_batch(m, chunk, train_mode=True, rng=rng).sum(axis=0)
    mean = acc / draws
    assert np.abs(mean - ref).max() < 0.02


def test_train_requires_both_classes():
    X = np.zeros((4, 3, 32, 32), dtype=np.float32)
    with pytest.raises(ValueError):
        train_cnn(X, [1, 1, 1, 1], CnnHyper(epochs=1))


def test_serialization_roundtrip():
    rng = np.random.default_rng(20)
    X, y = _separable_set(rng, n=16)
    m = train_cnn(X, y, CnnHyper(epochs=2, seed=21))
    blob = serialize_cnn(m)
    back = deserialize_cnn(blob)
    probe = rng.random((4, 3, 32, 32)).astype(np.float32)
    assert np.array_equal(forward_batch(m, probe), forward_batch(back, probe))
    assert serialize_cnn(back) == blob
    assert back.loss_history == m.loss_history


def test_deserialize_errors():
    with pytest.raises(CnnFormatError):
        deserialize_cnn(b"")
    with pytest.raises(CnnFormatError):
        deserialize_cnn(b"ZZZZ" + bytes(16))
    m = build_model("desk", seed=22)
    blob = serialize_cnn(m)
    with pytest.raises(CnnFormatError):
        deserialize_cnn(blob[:-4])
    with pytest.raises(CnnFormatError):
        deserialize_cnn(blob + b"\x00\x00\x00\x00")


def test_paper_preset_shape_chain():
    m = build_model("paper", seed=23)
    x = np.random.default_rng(24).random((2, 3, 64, 64)).astype(np.float32)
    p = forward_batch(m, x)
    assert p.shape == (2, 2)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)
    n_conv = sum(1 for l in ARCH_PRESETS["paper"]["layers"] if l["type"] == "conv")
    n_fc = sum(1 for l in ARCH_PRESETS["paper"]["layers"] if l["type"] == "fc")
    assert n_conv == 5 and n_fc == 2
