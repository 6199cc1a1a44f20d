import numpy as np
import pytest

from oracles import gradient_check, naive_conv1d
from tcseizure.costmodel import count_static
from tcseizure.tcresnet import (
    QConfig,
    ShapeMismatch,
    UnfittedBatchNorm,
    _calibrate_ranges,
    build_tcresnet4,
    conv1d,
    fold_batchnorm,
    layer_specs,
    load_model,
    load_quantized,
    quantize_model,
    save_model,
    save_quantized,
)


def fitted_model(seed=0, n=64, **kw):
    model = build_tcresnet4(seed, **kw)
    rng = np.random.default_rng(seed + 100)
    for _ in range(5):
        model.forward(rng.uniform(-1, 1, (n, 16, 128)), train=True, rng=rng)
    return model


def fake_quant_twin(folded, data, bits):
    twin = folded.copy()
    twin.qconfig = QConfig(bits)
    twin.observers = _calibrate_ranges(folded, data)
    return twin


def test_parameter_counts():
    model = build_tcresnet4()
    convs = [s.params for s in model.layers if s.params]
    assert convs == [768, 3456, 5184, 384, 48]
    assert model.param_count() == 9840
    assert 16 * 24 * 9 == 3456 and 24 * 2 == 48


def test_mac_total_and_per_layer():
    macs = [s.macs for s in layer_specs() if s.macs]
    assert macs[0] == 768 * 64 == 49152
    assert sum(macs) == 337968


def test_shape_trace():
    model = build_tcresnet4()
    model.forward(np.random.default_rng(0).uniform(-1, 1, (16, 128)))
    s = model.last_shapes
    assert [s["input"], s["conv0"], s["block.main1"], s["block.main2"], s["block.out"],
            s["pool"], s["logits"]] == [(16, 128), (16, 64), (24, 32), (24, 32), (24, 32),
                                        (24, 1), (2,)]


def test_strict_63_mode_shapes():
    specs = {s.name: s for s in layer_specs(strict_63=True)}
    assert specs["conv0"].out_shape == (16, 63)
    assert specs["block.conv1"].out_shape == (24, 32)
    model = build_tcresnet4(strict_63=True)
    assert model.forward(np.zeros((3, 16, 128))).shape == (3, 2)
    assert model.param_count() == 9840


def test_zero_input_gives_zero_logits():
    model = build_tcresnet4(3)
    assert np.array_equal(model.forward(np.zeros((16, 128))), [0.0, 0.0])


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        build_tcresnet4().forward(np.zeros((15, 128)))


def test_conv_matches_hand_computation():
    x = np.array([[1.0, 2.0, 3.0, 4.0], [0.5, -1.0, 0.0, 2.0]])
    w = np.array([[[1.0, 0.0, -1.0], [2.0, 1.0, 0.0]]])
    y, _ = conv1d(x[None], w, np.array([0.5]))
    # window 0: (1 - 3) + (2*0.5 - 1) + 0.5 ; window 1: (2 - 4) + (-2 + 0) + 0.5
    assert y[0].tolist() == [[-1.5, -3.5]]


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (2, 4), (1, 4)])
def test_conv_matches_nested_loops(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x, w, b = rng.normal(size=(3, 20)), rng.normal(size=(4, 3, 9 if padding == 4 else 3)), rng.normal(size=4)
    y, _ = conv1d(x[None], w, b, stride, padding)
    np.testing.assert_allclose(y[0], naive_conv1d(x, w, b, stride, padding), atol=1e-12)


def test_forward_is_deterministic_at_inference():
    model = fitted_model()
    x = np.random.default_rng(1).uniform(-1, 1, (4, 16, 128))
    assert np.array_equal(model.forward(x), model.forward(x))
    model.dropout = 0.9
    assert np.array_equal(model.forward(x), model.forward(x))


def test_float_gradients_match_finite_differences():
    model = build_tcresnet4(2, dropout=0.0)
    x = np.random.default_rng(5).uniform(-1, 1, (6, 16, 128)) * 0.5
    worst, checked, skipped, _ = gradient_check(model, x)
    assert checked >= 40 and worst < 1e-4, (worst, checked, skipped)


def test_eval_mode_batchnorm_gradients_are_affine():
    model = fitted_model(4, dropout=0.0)
    x = np.random.default_rng(2).uniform(-1, 1, (3, 16, 128))
    model.forward(x, train=False, record=True)
    coef = np.ones((3, 2))
    g = model.backward(coef)
    # with running statistics the BN output is gamma * xhat + beta, so d/dbeta = sum of
    # upstream gradients and matches the finite difference of beta exactly (piecewise linear)
    for bn in ("block.bn1", "block.bn2", "block.bn_sc"):
        beta = model.params[bn + ".beta"]
        base = model.forward(x).sum()
        beta[0] += 1e-6
        moved = model.forward(x).sum()
        beta[0] -= 1e-6
        assert g[bn + ".beta"][0] == pytest.approx((moved - base) / 1e-6, rel=1e-4, abs=1e-7)


def test_zero_loss_gradient_gives_zero_parameter_gradients():
    model = build_tcresnet4(dropout=0.0)
    model.forward(np.random.default_rng(0).uniform(-1, 1, (2, 16, 128)), train=True,
                  rng=np.random.default_rng(0))
    assert all(not g.any() for g in model.backward(np.zeros((2, 2))).values())


def test_qat_fc_gradient_is_straight_through():
    # in fake-quant mode the loss is piecewise constant in the weights; what must hold is
    # that backward equals the straight-through surrogate, which we check on the fc layer
    model = fitted_model(6, dropout=0.0)
    folded = fold_batchnorm(model)
    data = np.random.default_rng(3).uniform(-1, 1, (8, 16, 128))
    twin = fake_quant_twin(folded, data, 8)
    twin.forward(data, record=True)
    coef = np.random.default_rng(4).normal(size=(8, 2))
    g = twin.backward(coef)
    gd = twin._cache["gd"]
    np.testing.assert_allclose(g["fc.weight"], (coef.T @ gd) * twin._cache["mfc"])


def test_fold_identity_bn_leaves_weights():
    model = build_tcresnet4(1)
    for bn in ("block.bn1", "block.bn2", "block.bn_sc"):
        model.buffers[bn + ".fitted"] = np.ones(1)
        model.buffers[bn + ".running_var"] = np.full(24, 1 - 1e-5)
    folded = fold_batchnorm(model)
    for conv in ("block.conv1", "block.conv2", "block.conv_sc"):
        np.testing.assert_allclose(folded.params[conv + ".weight"], model.params[conv + ".weight"],
                                   rtol=1e-12)
        assert not folded.params[conv + ".bias"].any()


def test_fold_preserves_outputs():
    model = fitted_model(7)
    rng = np.random.default_rng(8)
    for bn in ("block.bn1", "block.bn2", "block.bn_sc"):
        model.params[bn + ".gamma"] = rng.uniform(0.5, 2, 24)
        model.params[bn + ".beta"] = rng.normal(0, 0.3, 24)
    x = rng.uniform(-1, 1, (20, 16, 128))
    folded = fold_batchnorm(model)
    assert np.max(np.abs(folded.forward(x) - model.forward(x))) < 1e-5
    with pytest.raises(ValueError):
        fold_batchnorm(folded)
    with pytest.raises(UnfittedBatchNorm):
        fold_batchnorm(build_tcresnet4())


@pytest.mark.parametrize("bits", [2, 4, 6, 8, 10])
def test_integer_path_is_bit_identical_to_fake_quant(bits):
    model = fitted_model(bits)
    folded = fold_batchnorm(model)
    rng = np.random.default_rng(bits)
    data = rng.uniform(-1, 1, (100, 16, 128))
    q = quantize_model(folded, QConfig(bits), calibration=data)
    twin = fake_quant_twin(folded, data, bits)
    ints = q.logits(data)
    fake = twin.forward(data)
    assert np.array_equal(ints, fake)
    assert np.array_equal(ints.argmax(1), fake.argmax(1))


def test_integer_zero_input_and_mac_count():
    folded = fold_batchnorm(fitted_model(1))
    data = np.random.default_rng(0).uniform(-1, 1, (10, 16, 128))
    q = quantize_model(folded, QConfig(4), calibration=data)
    q.mac_count = 0
    out = q.forward(q.quantize_input(np.zeros((16, 128))))
    assert q.mac_count == count_static().total_macs == 337968
    # zero input still picks up biases, so only the bias-free path is exactly zero
    nb = quantize_model(folded, QConfig(4), calibration=data)
    nb.biases.clear()
    assert not nb.forward(nb.quantize_input(np.zeros((16, 128)))).any()
    assert out.dtype == np.int64


def test_quantize_requires_folding_and_ranges():
    with pytest.raises(ValueError):
        quantize_model(fitted_model(), QConfig(4))
    with pytest.raises(UnfittedBatchNorm):
        quantize_model(fold_batchnorm(fitted_model()), QConfig(4))


def test_float_checkpoint_round_trip(tmp_path):
    model = fitted_model(9)
    model.qconfig = QConfig(4)
    model.observers = {"input": 1.0}
    save_model(model, tmp_path / "m", extra={"note": 1})
    back = load_model(tmp_path / "m")
    assert back.qconfig == model.qconfig and back.observers == model.observers
    for k, v in model.params.items():
        assert np.array_equal(back.params[k], v)
    for k, v in model.buffers.items():
        assert np.array_equal(back.buffers[k], v)


@pytest.mark.parametrize("bits", [4, 10])
def test_quantized_checkpoint_round_trip(tmp_path, bits):
    folded = fold_batchnorm(fitted_model(2))
    data = np.random.default_rng(0).uniform(-1, 1, (10, 16, 128))
    q = quantize_model(folded, QConfig(bits), calibration=data)
    save_quantized(q, tmp_path / "q")
    back = load_quantized(tmp_path / "q")
    assert np.array_equal(back.logits(data), q.logits(data))
    assert back.features == q.features
