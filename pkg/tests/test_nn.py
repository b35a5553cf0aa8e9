import numpy as np
import pytest

from convqec.codes import relation_index
from convqec.nn import (
    Decoder,
    ModelConfig,
    backward,
    batchnorm,
    forward,
    geometry,
    load_checkpoint,
    relational_conv,
    relational_conv_backward,
    save_checkpoint,
)


def _input(code, shots, rounds, seed=0, p=0.2):
    lay = code.layout
    shape = (lay.side, lay.side) if hasattr(lay, "side") else (2, lay.l, lay.m)
    return (np.random.default_rng(seed).random((shots, rounds) + shape) < p).astype(np.uint8)


def _labels(code, shots, seed=1):
    return np.random.default_rng(seed).integers(0, 2, (shots, code.logicals_z.rows))


def naive_conv(x, weight, tables, n_out, depthwise=False):
    shots = x.shape[0]
    c_out = weight.shape[-1] if depthwise else weight.shape[2]
    out = np.zeros((shots, n_out, c_out))
    for g, (targets, nbr) in enumerate(tables):
        for col, v in enumerate(targets):
            for r in range(nbr.shape[0]):
                u = nbr[r, col]
                if u < 0:
                    continue
                w = weight[g, r]
                out[:, v] += x[:, u] * w if depthwise else x[:, u] @ w.T
    return out


@pytest.mark.parametrize("name,graph,dts", [("surface3", "check_to_check", (-1, 0, 1)), ("bb72", "check_to_data", (0, -1)), ("bb72", "data_to_check", (0, 1))])
@pytest.mark.parametrize("depthwise", [False, True])
def test_relational_conv_matches_loop(request, name, graph, dts, depthwise):
    code = request.getfixturevalue({"surface3": "surface3", "bb72": "bb72"}[name])
    idx = relation_index(code, graph, dts)
    rounds = 2
    tables = idx.gather_tables(rounds)
    n_in = rounds * idx.nodes_per_round(idx.source_side)
    n_out = rounds * idx.nodes_per_round(idx.target_side)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, n_in, 3))
    k = tables[0][1].shape[0]
    w = rng.normal(size=(len(tables), k, 3) if depthwise else (len(tables), k, 4, 3))
    got, _ = relational_conv(x, w, tables, n_out, depthwise)
    np.testing.assert_allclose(got, naive_conv(x, w, tables, n_out, depthwise), atol=1e-12)


def test_relational_conv_backward_is_adjoint(surface3):
    idx = relation_index(surface3, "check_to_check", (-1, 0, 1))
    tables = idx.gather_tables(3)
    n = 3 * 16
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, n, 3))
    w = rng.normal(size=(1, 27, 3, 3))
    y, cache = relational_conv(x, w, tables, n)
    dy = rng.normal(size=y.shape)
    dx, dw = relational_conv_backward(dy, w, tables, cache, n)
    # <dy, conv(x)> is bilinear: gradients equal the other factor
    assert np.isclose((dy * y).sum(), (dx * x).sum())
    assert np.isclose((dy * y).sum(), (dw * w).sum())


def _finite_difference(model, x, y, basis, name, idx, eps=1e-6):
    p = model.params[name]
    old = p[idx]
    p[idx] = old + eps
    lp, _ = backward(model, x, y, basis)
    p[idx] = old - eps
    lm, _ = backward(model, x, y, basis)
    p[idx] = old
    return (lp - lm) / (2 * eps)


@pytest.mark.parametrize("fixture", ["surface3", "bb72"])
@pytest.mark.parametrize("variant", ["standard", "depthwise"])
def test_gradients_match_finite_differences(request, fixture, variant):
    code = request.getfixturevalue(fixture)
    model = Decoder(code, ModelConfig(H=8, L=2, b=2, variant=variant), seed=4, dtype=np.float64)
    x = _input(code, 6, 3)
    y = _labels(code, 6)
    basis = "X" if fixture == "surface3" else "Z"
    _, grads = backward(model, x, y, basis)
    rng = np.random.default_rng(5)
    worst = 0.0
    for name, g in grads.items():
        flat = [tuple(int(v) for v in np.unravel_index(i, g.shape)) for i in rng.choice(g.size, min(4, g.size), replace=False)]
        for idx in flat:
            num = _finite_difference(model, x, y, basis, name, idx)
            # absolute floor covers biases feeding batch norm (true gradient 0)
            err = abs(num - g[idx]) / max(1e-5, abs(num) + abs(g[idx]))
            worst = max(worst, err)
            assert err < 1e-4, (name, idx, num, g[idx])
    assert worst < 1e-4


def test_torus_shift_equivariance(bb72):
    model = Decoder(bb72, ModelConfig(H=8, L=2, b=2), seed=0, dtype=np.float64)
    x = _input(bb72, 3, 2)
    lay = bb72.layout
    h, _ = model.features(x)
    h = h.reshape(3, 2, 2, lay.l, lay.m, -1)
    for dx, dy in [(1, 0), (0, 1), (2, 3), (5, 5)]:
        xs = np.roll(x, (dx, dy), axis=(3, 4))
        hs, _ = model.features(xs)
        hs = hs.reshape(h.shape)
        np.testing.assert_allclose(hs, np.roll(h, (dx, dy), axis=(3, 4)), atol=1e-10)


def test_receptive_field_is_local(surface5):
    # eval mode removes the cross-shot coupling through batch statistics
    model = Decoder(surface5, ModelConfig(H=8, L=1, b=2), seed=0, dtype=np.float64)
    x = np.zeros((1, 3, 6, 6), np.uint8)
    h0, _ = model.features(x)
    x[0, 1, 0, 2] = 1
    h1, _ = model.features(x)
    diff = np.abs(h1 - h0).reshape(3, 6, 6, -1).max(axis=-1) > 1e-12
    t, i, j = np.nonzero(diff)
    assert diff[1, 0, 2]
    assert np.abs(t - 1).max() <= 1 and np.abs(i - 0).max() <= 1 and np.abs(j - 2).max() <= 1


def test_padding_cells_embed_to_zero(surface3):
    model = Decoder(surface3, ModelConfig(H=8, L=1, b=2))
    geo = geometry(surface3, 2)
    bits = np.ones((1, geo.positions), np.uint8)
    h = model.embed(bits, geo)
    pad = geo.input_mask == 0
    assert pad.any() and not h[:, pad].any()


def test_batchnorm_modes():
    rng = np.random.default_rng(0)
    x = rng.normal(3.0, 2.0, size=(64, 10, 4))
    state = {"mean": np.zeros(4), "var": np.ones(4)}
    y, _ = batchnorm(x, np.ones(4), np.zeros(4), state, True, 0.1, 1e-5)
    np.testing.assert_allclose(y.mean(axis=(0, 1)), 0, atol=1e-10)
    np.testing.assert_allclose(y.var(axis=(0, 1)), 1, atol=1e-4)
    np.testing.assert_allclose(state["mean"], 0.1 * x.mean(axis=(0, 1)))
    np.testing.assert_allclose(state["var"], 0.9 + 0.1 * x.var(axis=(0, 1)))
    ye, _ = batchnorm(x, np.ones(4), np.zeros(4), dict(state), False, 0.1, 1e-5)
    np.testing.assert_allclose(ye, (x - state["mean"]) / np.sqrt(state["var"] + 1e-5))


def test_eval_is_per_shot(bb72):
    model = Decoder(bb72, ModelConfig(H=8, L=2, b=2), seed=1)
    x = _input(bb72, 4, 2)
    full = forward(model, x, "eval")
    single = np.concatenate([forward(model, x[i : i + 1], "eval") for i in range(4)])
    np.testing.assert_allclose(full, single, rtol=1e-5, atol=1e-6)
    assert full.shape == (4, 12)


def test_outputs_finite_on_extreme_inputs(surface3):
    model = Decoder(surface3, ModelConfig(H=16, L=3, b=4), seed=2)
    for fill in (0, 1):
        x = np.full((4, 5, 4, 4), fill, np.uint8)
        assert np.isfinite(forward(model, x, "train")).all()
        assert np.isfinite(forward(model, x, "eval")).all()


def test_raw_detections_accepted(surface3):
    from convqec.sim import SyndromeBatch, syndrome_to_tensor

    model = Decoder(surface3, ModelConfig(H=8, L=1, b=2))
    det = (np.random.default_rng(0).random((3, 2, 8)) < 0.3).astype(np.uint8)
    tensor = syndrome_to_tensor(SyndromeBatch(det, np.zeros((3, 1), np.uint8)), surface3)
    np.testing.assert_allclose(forward(model, det), forward(model, tensor))
    with pytest.raises(ValueError):
        forward(model, np.zeros((3, 2, 5, 5)))


def test_checkpoint_roundtrip(tmp_path, gross):
    model = Decoder(gross, ModelConfig(H=8, L=1, b=2, variant="depthwise"), seed=7)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    back = load_checkpoint(path)
    assert back.cfg == model.cfg and back.code.n == 144
    for k in model.params:
        np.testing.assert_array_equal(back.params[k], model.params[k])
    x = _input(gross, 2, 2)
    np.testing.assert_array_equal(forward(back, x), forward(model, x))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(H=10, b=4)
    with pytest.raises(ValueError):
        ModelConfig(variant="wide")
