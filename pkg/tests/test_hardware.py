import numpy as np
import pytest

from convqec.hardware import (
    E4M3_TABLE,
    ROOFLINES,
    BlockCostSpec,
    RooflineSpec,
    buffer_sizing,
    fold_batchnorm,
    fold_model,
    folded_forward,
    folded_to_decoder,
    fp8_decode,
    fp8_encode,
    fp8_roundtrip,
    fp8_scale,
    mac_count,
    quantize_fp8,
    roofline_latency,
    roofline_report,
    unpack_folded,
)
from convqec.nn import Decoder, ModelConfig, load_checkpoint, save_checkpoint
from convqec.sim import NoiseModel, build_memory_circuit, sample

SI = dict(n=6840, H=256, b=4, K=27)


def test_mac_counts_exact():
    conv = mac_count(BlockCostSpec(**SI, variant="conv"))
    assert conv.spatial == 756_449_280 and conv.per_block == 980_582_400
    assert conv.spatial_fraction == pytest.approx(0.7714, abs=1e-4)
    dw = mac_count(BlockCostSpec(**SI, variant="depthwise"))
    la = mac_count(BlockCostSpec(**SI, variant="local_attention"))
    fa = mac_count(BlockCostSpec(**SI, variant="full_attention"))
    assert conv.total / dw.total == pytest.approx(4.156, abs=1e-3)
    assert la.total / conv.total == pytest.approx(0.3263, abs=1e-4)
    assert fa.total / conv.total == pytest.approx(3.368, abs=1e-3)
    for m in (conv, dw, la, fa):
        assert m.per_block == m.pointwise + m.spatial + m.attn_proj
    assert dw.attn_proj == 0 and la.attn_proj == 3 * 6840 * 64 * 64


def test_spec_validation():
    with pytest.raises(ValueError):
        BlockCostSpec(n=10, H=30, b=4)
    with pytest.raises(ValueError):
        BlockCostSpec(n=10, H=32, variant="mlp")
    with pytest.raises(ValueError):
        RooflineSpec("x", 0)


def test_roofline_d19():
    spec = BlockCostSpec(n=361, H=256, b=4, K=27, L=19)
    t = roofline_latency(spec, ROOFLINES["versal"])
    assert t == pytest.approx(19 * 361 * (27 * 64 * 64 + 2 * 256 * 256 // 4) / 133e12, rel=1e-12)
    assert t == pytest.approx(7.393e-6, abs=1e-9)
    assert roofline_latency(spec, ROOFLINES["tpu_v1"]) / t == pytest.approx(133 / 92, rel=1e-12)
    assert roofline_latency(spec, ROOFLINES["edge"]) / t == pytest.approx(33.25, rel=1e-12)
    assert roofline_latency(spec, ROOFLINES["versal"], L=38) == pytest.approx(2 * t, rel=1e-12)


def test_roofline_report_prints_both_conventions():
    r = roofline_report(19)
    assert r["per_round_n"] == 361 and r["full_volume_n"] == 6840
    assert r["latency_per_round_s"] == pytest.approx(7.393e-6, abs=1e-9)
    assert 5e-6 <= r["latency_full_volume_per_round_s"] <= 12e-6


def test_buffer_sizing():
    r = buffer_sizing(361, 128, 19)
    assert r["residual_per_block"] == 46_208 and r["residual_total"] == 877_952
    assert r["weights_per_layer"] == 35_840 and r["weights_total"] == 680_960
    d = buffer_sizing(361, 128, 19, variant="depthwise")
    assert d["weights_per_layer"] == 9_056 and d["weights_total"] == 172_064


def test_fold_identity_and_hand_arithmetic():
    w = np.random.default_rng(0).normal(size=(3, 4))
    eps = 1e-5
    wf, bf = fold_batchnorm(w, np.zeros(3), np.ones(3), np.zeros(3), np.zeros(3), np.full(3, 1 - eps), eps)
    np.testing.assert_array_equal(wf, w)
    assert not bf.any()
    wf, bf = fold_batchnorm(w, np.zeros(3), np.full(3, 2.0), np.full(3, 5.0), np.ones(3), np.full(3, 3.0), 1.0)
    np.testing.assert_array_equal(wf, w)
    np.testing.assert_array_equal(bf, np.full(3, 4.0))


def _randomize_bn(model, rng):
    for k in model.params:
        if ".bn" in k:
            model.params[k] = (model.params[k] + rng.normal(0, 0.3, model.params[k].shape)).astype(model.dtype)
    for k in model.buffers:
        if k.endswith("mean"):
            model.buffers[k] = rng.normal(0, 0.5, model.buffers[k].shape).astype(model.dtype)
        else:
            model.buffers[k] = rng.uniform(0.3, 2.0, model.buffers[k].shape).astype(model.dtype)
    return model


@pytest.mark.parametrize("fixture,variant", [("surface3", "standard"), ("surface3", "depthwise"), ("bb72", "standard")])
def test_folded_forward_matches_eval(request, fixture, variant):
    code = request.getfixturevalue(fixture)
    rng = np.random.default_rng(1)
    model = _randomize_bn(Decoder(code, ModelConfig(H=8, L=2, b=2, variant=variant), seed=2, dtype=np.float64), rng)
    batch = sample(build_memory_circuit(code, 2, "Z", NoiseModel("data_level", 0.05)), 64, 3)
    ref = model.forward(batch.detections, "Z")
    got = folded_forward(model, fold_model(model), batch.detections, "Z")
    assert np.abs(got - ref).max() <= 1e-5 * max(1.0, np.abs(ref).max())


def test_fold_roundtrips_through_checkpoint(surface3, tmp_path):
    rng = np.random.default_rng(5)
    model = _randomize_bn(Decoder(surface3, ModelConfig(H=8, L=2, b=2), seed=1), rng)
    packed = folded_to_decoder(model, fold_model(model))
    save_checkpoint(tmp_path / "f.ckpt", packed, {"folded": True})
    back = load_checkpoint(tmp_path / "f.ckpt")
    batch = sample(build_memory_circuit(surface3, 1, "Z", NoiseModel("data_level", 0.1)), 128, 0)
    ref = model.astype(np.float64).forward(batch.detections, "Z")
    # ordinary eval forward of the packed model and folded forward of its unpacked params
    np.testing.assert_allclose(back.astype(np.float64).forward(batch.detections, "Z"), ref, atol=1e-4)
    np.testing.assert_allclose(folded_forward(back, unpack_folded(back), batch.detections, "Z"), ref, atol=1e-4)


# --- FP8 -------------------------------------------------------------------------------


def test_e4m3_table_matches_reference_format():
    ml_dtypes = pytest.importorskip("ml_dtypes")
    ref = np.arange(256, dtype=np.uint8).view(ml_dtypes.float8_e4m3fn).astype(np.float64)
    np.testing.assert_array_equal(np.isnan(E4M3_TABLE), np.isnan(ref))
    ok = ~np.isnan(ref)
    np.testing.assert_array_equal(E4M3_TABLE[ok], ref[ok])
    assert np.nanmax(E4M3_TABLE) == 448


def test_encode_matches_reference_rounding():
    ml_dtypes = pytest.importorskip("ml_dtypes")
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(0, 30, 20000), rng.normal(0, 0.01, 5000)])
    # midpoints between neighbouring codes exercise ties-to-even
    pos = np.sort(E4M3_TABLE[:0x7F])
    x = np.concatenate([x, (pos[1:] + pos[:-1]) / 2, -(pos[1:] + pos[:-1]) / 2])
    x = x[np.abs(x) <= 448]
    ref = x.astype(ml_dtypes.float8_e4m3fn)
    np.testing.assert_array_equal(fp8_encode(x), ref.view(np.uint8))


def test_codec_exact_and_involution():
    vals = np.array([0.0, 0.5, 1.0, -2.0, 448.0, 2.0**-9])
    np.testing.assert_array_equal(fp8_decode(fp8_encode(vals)), vals)
    codes = np.arange(256, dtype=np.uint8)
    finite = ~np.isnan(E4M3_TABLE)
    again = fp8_encode(fp8_decode(codes[finite]))
    # +0 and -0 share a value; every other code is its own fixed point
    np.testing.assert_array_equal(again[codes[finite] != 0x80], codes[finite][codes[finite] != 0x80])


def test_relative_error_bound():
    x = np.random.default_rng(3).normal(size=100_000)
    s = fp8_scale(x)
    q = fp8_roundtrip(x, s)
    normal = np.abs(x / s) >= 2.0**-6
    rel = np.abs(q - x)[normal] / np.abs(x)[normal]
    assert rel.max() <= 2.0**-4 + 1e-12
    assert np.abs(q).max() == pytest.approx(np.abs(x).max())


def test_zero_tensor_scale():
    assert fp8_scale(np.zeros(5)) == 1.0
    assert not fp8_roundtrip(np.zeros(5)).any()


def test_quantize_keeps_biases(surface3):
    model = Decoder(surface3, ModelConfig(H=8, L=1, b=2), seed=0)
    f = fold_model(model)
    q, scales = quantize_fp8(f)
    assert set(scales) == {k for k in f if k.endswith(".weight") or k == "embed"}
    np.testing.assert_array_equal(q["mlp1.bias"], f["mlp1.bias"])
    for k, s in scales.items():
        codes = fp8_encode(q[k] / s)
        np.testing.assert_allclose(fp8_decode(codes) * s, q[k], rtol=1e-12)
