import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convqec.sim import (
    Circuit,
    Instruction,
    NoiseModel,
    SyndromeBatch,
    build_memory_circuit,
    decode_batch,
    encode_batch,
    fault_signatures,
    run_deterministic,
    sample,
    syndrome_to_tensor,
)

NOISELESS = NoiseModel("data_level", 0.0)


@pytest.mark.parametrize("kind", ["data_level", "phenomenological", "circuit_level"])
@pytest.mark.parametrize("basis", ["X", "Z"])
def test_noiseless_is_silent(surface3, kind, basis):
    circ = build_memory_circuit(surface3, 3, basis, NoiseModel(kind, 0.0))
    for seed in (0, 1):
        batch = sample(circ, 500, seed)
        assert batch.detections.shape == (500, 3, 8)
        assert not batch.detections.any() and not batch.labels.any()


def test_noiseless_bb(gross):
    circ = build_memory_circuit(gross, 2, "Z", NoiseModel("circuit_level", 0.0))
    batch = sample(circ, 8, 0)
    assert not batch.detections.any() and not batch.labels.any()


def test_gross_observable_count(gross):
    circ = build_memory_circuit(gross, 12, "Z", NoiseModel("phenomenological", 0.001))
    assert len(circ.observables()) == 12
    assert circ.rounds == 12


def test_rejects_zero_rounds(surface3):
    with pytest.raises(ValueError):
        build_memory_circuit(surface3, 0, "Z", NOISELESS)


def test_bulk_x_error_hand_trace(surface3):
    """An X on the centre qubit between rounds 1 and 2 lights its two Z plaquettes in round 2."""
    circ = build_memory_circuit(surface3, 3, "Z", NOISELESS)
    circ = circ.insert_after_tick(1, Instruction("X_ERROR", (4,), 1.0))
    batch = run_deterministic(circ)
    fired = {(r, c) for r, c in zip(*np.nonzero(batch.detections[0]))}
    z_checks_on_4 = {
        int(g) for g in surface3.check_indices("Z") if surface3.hz.to_dense()[g - surface3.n_x_checks, 4]
    }
    assert len(z_checks_on_4) == 2
    assert fired == {(1, g) for g in z_checks_on_4}
    assert batch.labels[0, 0] == surface3.logicals_z.to_dense()[0, 4]


def test_determinism(surface3):
    circ = build_memory_circuit(surface3, 3, "Z", NoiseModel("circuit_level", 0.01))
    a, b = sample(circ, 3000, 11), sample(circ, 3000, 11)
    assert np.array_equal(a.detections, b.detections) and np.array_equal(a.labels, b.labels)
    c = sample(circ, 3000, 12)
    assert not np.array_equal(a.detections, c.detections)


def test_prefix_stability_across_chunks(surface3):
    """Shot s is the same whether sampled alone in a batch or as part of a larger one."""
    circ = build_memory_circuit(surface3, 2, "Z", NoiseModel("data_level", 0.05))
    small, large = sample(circ, 100, 3), sample(circ, 70000, 3)
    assert np.array_equal(small.detections, large.detections[:100])


def test_detector_marginals_match_closed_form(surface3):
    """Data-level depolarizing p: a Z check fires iff an odd number of its qubits carry X or Y."""
    p = 0.1
    shots = 1_000_000
    circ = build_memory_circuit(surface3, 1, "Z", NoiseModel("data_level", p))
    batch = sample(circ, shots, 5)
    q = 2 * p / 3
    for row, g in enumerate(surface3.check_indices("Z")):
        w = surface3.hz.to_dense()[row].sum()
        expect = (1 - (1 - 2 * q) ** w) / 2
        rate = batch.detections[:, 0, g].mean()
        sigma = np.sqrt(expect * (1 - expect) / shots)
        assert abs(rate - expect) < 3 * sigma
    # first-round X checks are not deterministic in a Z memory and stay silent
    assert not batch.detections[:, 0, surface3.check_indices("X")].any()


def _injected(code, placements, rounds=3):
    circ = build_memory_circuit(code, rounds, "Z", NOISELESS)
    ticks = circ.round_markers
    ins = list(circ.instructions)
    for r, name, q in sorted(placements, key=lambda t: -t[0]):
        ins.insert(ticks[r] + 1, Instruction(name, (q,), 1.0))
    out = circ.copy()
    out.instructions = ins
    return run_deterministic(out)


@given(st.lists(st.tuples(st.integers(0, 2), st.sampled_from(["X_ERROR", "Z_ERROR"]), st.integers(0, 8)), min_size=2, max_size=2))
@settings(max_examples=40, deadline=None)
def test_frame_linearity(pair):
    from convqec.codes import build_rotated_surface_code

    code = build_rotated_surface_code(3)
    a = _injected(code, [pair[0]])
    b = _injected(code, [pair[1]])
    ab = _injected(code, pair)
    assert np.array_equal(ab.detections, a.detections ^ b.detections)
    assert np.array_equal(ab.labels, a.labels ^ b.labels)


@pytest.mark.parametrize("r", [0, 1, 2])
def test_causality_of_data_errors(surface3, r):
    for q in range(9):
        det = _injected(surface3, [(r, "X_ERROR", q)]).detections[0]
        assert not det[:r].any()


def test_tensor_shapes(surface3, gross):
    batch = sample(build_memory_circuit(surface3, 3, "Z", NoiseModel("data_level", 0.1)), 10, 0)
    t = syndrome_to_tensor(batch, surface3)
    assert t.shape == (10, 3, 4, 4)
    assert t.sum() == batch.detections.sum()
    populated = {(i, j) for i, j, _ in surface3.layout.check_position}
    assert len(populated) == 8
    zero = SyndromeBatch(np.zeros((2, 3, 8), np.uint8), np.zeros((2, 1), np.uint8))
    assert not syndrome_to_tensor(zero, surface3).any()
    bb = SyndromeBatch(np.ones((1, 4, 144), np.uint8), np.zeros((1, 12), np.uint8))
    tt = syndrome_to_tensor(bb, gross)
    assert tt.shape == (1, 4, 2, 12, 6) and tt[0, 0].sum() == 144
    with pytest.raises(ValueError):
        syndrome_to_tensor(bb, surface3)


def test_batch_file_roundtrip(surface3, tmp_path):
    batch = sample(build_memory_circuit(surface3, 3, "X", NoiseModel("phenomenological", 0.05)), 77, 2)
    raw = encode_batch(batch)
    back = decode_batch(raw)
    assert np.array_equal(back.detections, batch.detections) and np.array_equal(back.labels, batch.labels)
    assert back.basis == "X"
    assert raw[:3] == b"SYN"
    path = tmp_path / "b.bin"
    batch.save(path)
    assert np.array_equal(SyndromeBatch.load(path).detections, batch.detections)


def test_text_roundtrip(surface3):
    circ = build_memory_circuit(surface3, 2, "Z", NoiseModel("circuit_level", 0.003))
    text = circ.to_text()
    back = Circuit.from_text(text)
    assert back.to_text() == text
    assert back.rounds == 2 and back.n_checks == 8
    assert np.array_equal(sample(back, 200, 4).detections, sample(circ, 200, 4).detections)


def test_noise_parse():
    assert NoiseModel.parse("circuit:0.002") == NoiseModel("circuit_level", 0.002)
    assert NoiseModel.parse("phenom:0.01:0.02").q == 0.02
    with pytest.raises(ValueError):
        NoiseModel("data_level", 1.5)


@pytest.mark.parametrize("d", [3])
def test_circuit_level_fault_distance(d):
    """No single fault flips the logical silently, and no two faults with equal
    detector footprints disagree on the logical: circuit distance >= 3."""
    from convqec.codes import build_rotated_surface_code

    code = build_rotated_surface_code(d)
    for basis in "XZ":
        circ = build_memory_circuit(code, d, basis, NoiseModel("circuit_level", 0.001))
        _, dets, obs = fault_signatures(circ)
        silent = ~dets.any(axis=1)
        assert not obs[silent].any()
        seen = {}
        for row, o in zip(map(bytes, dets.astype(np.uint8)), obs[:, 0]):
            assert seen.setdefault(row, o) == o


def test_matches_stim_marginals(surface3):
    stim = pytest.importorskip("stim")
    circ = build_memory_circuit(surface3, 3, "Z", NoiseModel("circuit_level", 0.01))
    theirs_det, theirs_obs = stim.Circuit(circ.to_stim_text()).compile_detector_sampler(seed=1).sample(
        200_000, separate_observables=True
    )
    mine = sample(circ, 200_000, 1)
    order = [ins.coords for ins in circ.detectors()]
    mine_rates = np.array([mine.detections[:, r, c].mean() for r, c in order])
    theirs_rates = theirs_det.mean(axis=0)
    sigma = np.sqrt(theirs_rates * (1 - theirs_rates) / 200_000) * np.sqrt(2)
    assert np.all(np.abs(mine_rates - theirs_rates) < 5 * sigma + 1e-9)
    assert abs(mine.labels.mean() - theirs_obs.mean()) < 5 * np.sqrt(0.25 / 100_000)
