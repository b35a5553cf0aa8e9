import itertools

import numpy as np
import pytest

from convqec.codes import CssCode, build_bb_code
from convqec.decoders import (
    BPDecoder,
    ExactML,
    LookupDecoder,
    SyndromeNotFound,
    bp_decode,
    decode_batch,
    decode_predictions,
    encode_predictions,
    exact_ml_decode,
    make_decoder,
)
from convqec.sim import NoiseModel, build_memory_circuit, sample


def brute_force_joint(code, p):
    """Direct 4^n enumeration of (syndrome, class) probabilities."""
    n = code.n
    hx, hz = code.hx.to_dense().astype(int), code.hz.to_dense().astype(int)
    lx, lz = code.logicals_x.to_dense().astype(int), code.logicals_z.to_dense().astype(int)
    table = {}
    for ex in itertools.product((0, 1), repeat=n):
        ex = np.array(ex)
        for ez in itertools.product((0, 1), repeat=n):
            ez = np.array(ez)
            w = int((ex | ez).sum())
            pr = (1 - p) ** (n - w) * (p / 3) ** w
            key = (tuple(hx @ ez % 2) + tuple(hz @ ex % 2), tuple(lz @ ex % 2) + tuple(lx @ ez % 2))
            table[key] = table.get(key, 0.0) + pr
    return table


@pytest.fixture(scope="module")
def tiny_code():
    # [[4,2,2]]: small enough for direct 4^n enumeration
    hx = np.array([[1, 1, 1, 1]])
    hz = np.array([[1, 1, 1, 1]])
    from convqec.gf2 import BinaryMatrix

    return CssCode(4, BinaryMatrix.from_dense(hx), BinaryMatrix.from_dense(hz), None, d=2)


def test_ml_joint_matches_direct_enumeration(tiny_code):
    p = 0.13
    ml = ExactML(tiny_code, p)
    direct = brute_force_joint(tiny_code, p)
    ns, no = ml.n_synd, ml.n_obs
    for (s, c), v in direct.items():
        si = sum(b << i for i, b in enumerate(s))
        ci = sum(b << i for i, b in enumerate(c))
        assert ml.joint[si, ci] == pytest.approx(v, abs=1e-15)
    assert ml.joint.sum() == pytest.approx(1.0)
    assert ns == 2 and no == 4


def test_zero_syndrome_decodes_to_identity(surface3):
    r = exact_ml_decode(surface3, 0.01, np.zeros(8, np.uint8))
    assert not r.flips.any() and r.posterior > 0.5


def test_weight_one_errors_corrected(surface3):
    ml = ExactML(surface3, 0.05)
    hx, hz = surface3.hx.to_dense(), surface3.hz.to_dense()
    lx, lz = surface3.logicals_x.to_dense(), surface3.logicals_z.to_dense()
    for q in range(9):
        for fx, fz in ((1, 0), (1, 1), (0, 1)):
            ex = np.zeros(9, np.uint8)
            ez = np.zeros(9, np.uint8)
            ex[q], ez[q] = fx, fz
            synd = np.concatenate([hx @ ez % 2, hz @ ex % 2])
            truth = np.concatenate([lz @ ex % 2, lx @ ez % 2])
            np.testing.assert_array_equal(ml.decode(synd).flips, truth)


def test_ml_rate_matches_monte_carlo(surface3):
    """Exhaustive weighted rate vs 10^6 sampled shots, within 3 sigma."""
    p = 0.1
    ml = ExactML(surface3, p, basis="Z")
    circuit = build_memory_circuit(surface3, 1, "Z", NoiseModel("data_level", p))
    batch = sample(circuit, 1_000_000, 11)
    flips, _ = decode_batch(ml, batch)
    rate = (flips != batch.labels).any(axis=1).mean()
    exact = ml.logical_error_rate()
    sigma = np.sqrt(exact * (1 - exact) / 1_000_000)
    assert abs(rate - exact) < 3 * sigma


def test_basis_mode_is_marginal_of_full(surface3):
    p = 0.08
    full = ExactML(surface3, p)
    zonly = ExactML(surface3, p, basis="Z")
    # marginalize the full table over X-check syndromes and X-logical classes
    # little-endian packing: syndrome = xs + 16 zs, class = lz + 2 lx
    j = full.joint.reshape(16, 16, 2, 2)  # (zs, xs, lx, lz)
    marg = j.sum(axis=(1, 2))
    np.testing.assert_allclose(marg, zonly.joint, atol=1e-14)


def test_ml_rejects_large_codes(bb72):
    with pytest.raises(ValueError):
        ExactML(bb72, 0.01)


def test_lookup_matches_ml_on_single_errors(surface3):
    lk = LookupDecoder(surface3, "Z")
    ml = ExactML(surface3, 0.001, "Z")
    h = surface3.hz.to_dense()
    for q in range(9):
        e = np.zeros(9, np.uint8)
        e[q] = 1
        s = h @ e % 2
        np.testing.assert_array_equal(lk.decode(s).flips, ml.decode(s).flips)
    assert not lk.decode(np.zeros(4, np.uint8)).flips.any()


def test_lookup_cutoff_incomplete(surface3):
    lk = LookupDecoder(surface3, "Z", cutoff=1)
    h = surface3.hz.to_dense()
    missing = 0
    for a, b in itertools.combinations(range(9), 2):
        e = np.zeros(9, np.uint8)
        e[[a, b]] = 1
        try:
            lk.decode(h @ e % 2)
        except SyndromeNotFound:
            missing += 1
    assert missing > 0


def test_lookup_is_minimum_weight(surface5):
    lk = LookupDecoder(surface5, "Z", cutoff=4)
    h = surface5.hz.to_dense().astype(int)
    rng = np.random.default_rng(0)
    for _ in range(40):
        e = (rng.random(25) < 0.06).astype(np.uint8)
        s = h @ e % 2
        r = lk.decode(s)
        assert np.array_equal(h @ r.correction % 2, s)
        assert r.correction.sum() <= e.sum()


def test_ml_beats_other_decoders_exhaustively(surface3):
    p = 0.1
    q = 2 * p / 3
    ml = ExactML(surface3, p, "Z")
    lk = LookupDecoder(surface3, "Z")
    bp = BPDecoder(surface3, p, "Z")
    h, lz = surface3.hz.to_dense(), surface3.logicals_z.to_dense()
    errors = np.array(list(itertools.product((0, 1), repeat=9)), np.uint8)
    probs = q ** errors.sum(1) * (1 - q) ** (9 - errors.sum(1))
    synd = errors @ h.T % 2
    truth = errors @ lz.T % 2
    rates = {}
    for name, dec in (("ml", ml), ("lookup", lk), ("bp", bp)):
        pred, _ = dec.decode_many(synd)
        rates[name] = float(probs[(pred != truth).any(axis=1)].sum())
    assert rates["ml"] == pytest.approx(ml.logical_error_rate(), abs=1e-12)
    assert rates["ml"] <= rates["lookup"] + 1e-15
    assert rates["ml"] <= rates["bp"] + 1e-15


def exact_marginals(h, prior, s):
    n = h.shape[1]
    num = np.zeros(n)
    tot = 0.0
    for e in itertools.product((0, 1), repeat=n):
        e = np.array(e)
        if np.array_equal(h @ e % 2, s):
            w = np.prod(np.where(e, prior, 1 - prior))
            tot += w
            num += w * e
    return num / tot


def test_bp_exact_on_tree():
    # acyclic Tanner graph: checks share at most one variable and no cycles
    h = np.array(
        [
            [1, 1, 1, 0, 0, 0, 0],
            [0, 0, 1, 1, 1, 0, 0],
            [0, 0, 0, 0, 1, 1, 1],
        ],
        np.uint8,
    )
    prior = np.array([0.1, 0.2, 0.05, 0.15, 0.1, 0.3, 0.08])
    for s in itertools.product((0, 1), repeat=3):
        s = np.array(s, np.uint8)
        # run past the tree diameter without stopping at convergence
        llr = _bp_fixed_iterations(h, prior, s, 6)
        marg = 1 / (1 + np.exp(llr))
        np.testing.assert_allclose(marg, exact_marginals(h, prior, s), atol=1e-10)


def _bp_fixed_iterations(h, prior, s, iters):
    # an empty check row with syndrome 1 can never be satisfied, so BP runs all
    # iterations; it has no edges and leaves the messages untouched
    h2 = np.vstack([h, np.zeros((1, h.shape[1]), np.uint8)])
    s2 = np.concatenate([s, [1]]).astype(np.uint8)
    _, post, conv, it = bp_decode(h2, prior, s2, max_iters=iters)
    assert not conv[0] and it[0] == iters
    return post[0]


def test_bp_zero_syndrome_converges_immediately(bb72):
    bp = BPDecoder(bb72, 0.01, "Z")
    r = bp.decode(np.zeros(bb72.n_checks, np.uint8))
    assert r.converged and r.iterations == 0 and not r.correction.any()


def test_bp_converged_corrections_reproduce_syndrome(bb72):
    h = bb72.hz.to_dense().astype(int)
    rng = np.random.default_rng(4)
    e = (rng.random((300, 72)) < 0.01).astype(np.uint8)
    s = (e @ h.T % 2).astype(np.uint8)
    corr, _, conv, _ = bp_decode(h, 0.01, s)
    assert conv.mean() > 0.5
    np.testing.assert_array_equal((corr[conv].astype(int) @ h.T) % 2, s[conv])


def test_predictions_roundtrip():
    rng = np.random.default_rng(0)
    flips = rng.integers(0, 2, (37, 12)).astype(np.uint8)
    probs = rng.random((37, 12)).astype(np.float32)
    f, p = decode_predictions(encode_predictions(flips, probs))
    np.testing.assert_array_equal(f, flips)
    np.testing.assert_array_equal(p, probs)
    f, p = decode_predictions(encode_predictions(flips))
    assert p is None and np.array_equal(f, flips)


def test_make_decoder_multi_round(surface3):
    circuit = build_memory_circuit(surface3, 3, "Z", NoiseModel("data_level", 0.03))
    batch = sample(circuit, 20000, 2)
    for name in ("ml", "lookup", "bp"):
        dec = make_decoder(name, surface3, 0.03, "Z", rounds=3)
        flips, _ = decode_batch(dec, batch)
        rate = (flips != batch.labels).any(axis=1).mean()
        assert rate < batch.labels.mean() + 1e-9 or rate < 0.05


def test_bb_code_decoders_construct():
    code = build_bb_code(3, 3, [(1, 0), (0, 1), (0, 2)], [(0, 1), (1, 0), (2, 0)])
    if code.k:
        BPDecoder(code, 0.01, "Z")
        LookupDecoder(code, "Z", cutoff=2)
