import json
import math

import numpy as np
import pytest

from convqec.nn import ModelConfig, load_checkpoint
from convqec.train import (
    NS_COEFFS,
    CurriculumSpec,
    ScheduleSpec,
    TrainConfig,
    as_matrices,
    curriculum_noise,
    ema_update,
    from_matrices,
    lion_step,
    lr_at,
    muon_step,
    newton_schulz5,
    train,
    uses_muon,
)


def test_newton_schulz_orthogonal_input_is_near_fixed_point():
    # stated bound: identity input reproduced within 1e-2 elementwise
    out = newton_schulz5(np.eye(6))
    assert np.abs(out - np.eye(6)).max() <= 1e-2


def test_newton_schulz_singular_values():
    # stated bounds: singular values in [0.7, 1.3] and |U^T U - I|_max <= 0.3 over 100 seeds
    for seed in range(100):
        g = np.random.default_rng(seed).normal(size=(16, 8))
        u = newton_schulz5(g)
        sv = np.linalg.svd(u, compute_uv=False)
        assert sv.min() >= 0.7 and sv.max() <= 1.3
        assert np.abs(u.T @ u - np.eye(8)).max() <= 0.3


def quintic_band(lo=0.05, hi=1.0, steps=5):
    a, b, c = NS_COEFFS
    s = np.linspace(lo, hi, 20001)
    for _ in range(steps):
        s = a * s + b * s**3 + c * s**5
    return s.min(), s.max()


def test_newton_schulz_singular_values_follow_scalar_map():
    # each singular value evolves independently under the quintic, so the
    # output band is the image of the normalized input range
    lo, hi = quintic_band()
    assert lo == pytest.approx(0.6818, abs=1e-3) and hi == pytest.approx(1.1344, abs=1e-3)
    for seed in range(100):
        g = np.random.default_rng(seed).normal(size=(16, 8))
        sv_in = np.linalg.svd(g, compute_uv=False) / np.linalg.norm(g)
        sv = np.linalg.svd(newton_schulz5(g), compute_uv=False)
        expect = sv_in
        for _ in range(5):
            expect = NS_COEFFS[0] * expect + NS_COEFFS[1] * expect**3 + NS_COEFFS[2] * expect**5
        np.testing.assert_allclose(np.sort(sv), np.sort(expect), atol=1e-9)
        assert lo - 1e-9 <= sv.min() and sv.max() <= hi + 1e-9


def test_newton_schulz_matches_polar_direction():
    g = np.random.default_rng(1).normal(size=(8, 5))
    u, _, vt = np.linalg.svd(g, full_matrices=False)
    cos = np.sum(newton_schulz5(g) * (u @ vt)) / (np.linalg.norm(newton_schulz5(g)) * np.linalg.norm(u @ vt))
    assert cos > 0.95


def test_muon_zero_grad_only_decays():
    p = np.ones((4, 3))
    out, m = muon_step(p, np.zeros((4, 3)), np.zeros((4, 3)), 0.1, 0.5)
    np.testing.assert_allclose(out, 0.95 * p)
    assert not m.any()


def test_muon_rejects_vectors():
    with pytest.raises(ValueError):
        muon_step(np.ones(3), np.ones(3), np.zeros(3), 0.1, 0.0)


def test_lion_sign_semantics():
    p = np.zeros(5)
    out, m = lion_step(p, np.full(5, 0.3), np.zeros(5), 0.01, 0.0)
    np.testing.assert_allclose(out, -0.01)
    np.testing.assert_allclose(m, 0.01 * 0.3)
    out, m = lion_step(np.ones(2), np.zeros(2), np.zeros(2), 0.1, 0.2)
    np.testing.assert_allclose(out, 0.98)


def test_lion_two_step_recurrence():
    g = np.array([0.5, -2.0])
    p, m = np.array([1.0, 1.0]), np.zeros(2)
    lr, wd = 0.05, 0.1
    p1, m1 = lion_step(p, g, m, lr, wd)
    p2, m2 = lion_step(p1, g, m1, lr, wd)
    # hand-unrolled: sign(0.9*m + 0.1*g) is sign(g) both times
    e1 = p * (1 - lr * wd) - lr * np.sign(g)
    e2 = e1 * (1 - lr * wd) - lr * np.sign(g)
    np.testing.assert_allclose(p2, e2)
    np.testing.assert_allclose(m2, 0.99 * 0.01 * g + 0.01 * g)


def test_lr_schedule_points():
    s = ScheduleSpec(peak_lr_matrix=3e-3, warmup_steps=100, total_steps=1100)
    assert lr_at(0, s) == 0
    assert lr_at(100, s) == pytest.approx(3e-3)
    assert lr_at(1100, s) == pytest.approx(3e-4)
    assert lr_at(5000, s) == pytest.approx(3e-4)
    mid = (100 + 1100) // 2
    assert lr_at(mid, s) == pytest.approx(3e-4 + (3e-3 - 3e-4) * 0.5 * (1 + math.cos(math.pi * 0.5)))
    assert lr_at(50, s, 2e-4) == pytest.approx(1e-4)


def test_lr_schedule_continuity():
    s = ScheduleSpec(warmup_steps=1000, total_steps=20000)
    vals = np.array([lr_at(i, s) for i in range(21000)])
    assert np.abs(np.diff(vals)).max() <= s.peak_lr_matrix * max(math.pi / s.total_steps, 1 / s.warmup_steps) + 1e-15


def test_schedule_validation():
    with pytest.raises(ValueError):
        ScheduleSpec(warmup_steps=10, total_steps=5)
    with pytest.raises(ValueError):
        ScheduleSpec(floor_fraction=0)


def test_ema_recurrence():
    shadow = {"w": np.array([0.0])}
    for v in (1.0, 2.0, 3.0):
        shadow = ema_update(shadow, {"w": np.array([v])}, 0.5)
    assert shadow["w"][0] == pytest.approx(((0 * 0.5 + 0.5) * 0.5 + 1.0) * 0.5 + 1.5)
    assert ema_update({"w": np.ones(2)}, {"w": np.zeros(2)}, 0.0)["w"].sum() == 0


def test_curriculum():
    c = CurriculumSpec(p1=0.01, p2=0.1, stage1_steps=100, anneal_steps=200)
    assert curriculum_noise(0, c) == 0.01
    assert curriculum_noise(300, c) == pytest.approx(0.1)
    assert curriculum_noise(200, c) == pytest.approx(0.055)
    assert curriculum_noise(10**6, c) == pytest.approx(0.1)


def test_routing():
    assert uses_muon("blocks.0.conv0.weight")
    assert uses_muon("blocks.2.down.weight") and uses_muon("scatter.weight")
    for name in ("embed", "mlp1.weight", "mlp2.weight", "blocks.0.bn1.gamma", "blocks.0.conv.bias"):
        assert not uses_muon(name)


@pytest.mark.parametrize("shape", [(5, 7), (2, 27, 8, 8), (1, 12, 4, 4), (2, 12, 6)])
def test_matrix_views_roundtrip(shape):
    a = np.random.default_rng(0).normal(size=shape)
    np.testing.assert_array_equal(from_matrices(as_matrices(a), shape), a)


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"steps": 1, "lr": 3})
    cfg = TrainConfig.from_dict({"steps": 3, "schedule": {"warmup_steps": 1, "total_steps": 3}, "curriculum": {"p1": 0.01, "p2": 0.1}})
    assert cfg.schedule.total_steps == 3 and cfg.curriculum.p2 == 0.1


def _small(steps, seed=0, **kw):
    sched = ScheduleSpec(warmup_steps=2, total_steps=max(steps, 3))
    return TrainConfig(steps=steps, batch=32, seed=seed, schedule=sched, bases="XZ", **kw)


def test_zero_steps_checkpoint_is_initialization(surface3, tmp_path):
    from convqec.nn import Decoder

    res = train(surface3, ModelConfig(H=8, L=1, b=2), _small(0), out_dir=tmp_path)
    init = Decoder(surface3, ModelConfig(H=8, L=1, b=2), seed=0)
    back = load_checkpoint(tmp_path / "ema.ckpt")
    for k, v in init.params.items():
        np.testing.assert_array_equal(back.params[k], v)
    assert res.metrics == []


def test_training_is_deterministic(surface3, tmp_path):
    runs = [train(surface3, ModelConfig(H=8, L=2, b=2), _small(6), out_dir=tmp_path / str(i)) for i in range(2)]
    assert [m["loss"] for m in runs[0].metrics] == [m["loss"] for m in runs[1].metrics]
    for name in ("model.ckpt", "ema.ckpt", "metrics.ndjson"):
        assert (tmp_path / "0" / name).read_bytes() == (tmp_path / "1" / name).read_bytes()
    lines = (tmp_path / "0" / "metrics.ndjson").read_text().splitlines()
    rec = json.loads(lines[0])
    assert set(rec) == {"step", "loss", "lr", "p", "grad_norm"} and len(lines) == 6


def test_prefetch_does_not_change_batches(surface3):
    a = train(surface3, ModelConfig(H=8, L=1, b=2), _small(4, prefetch=0))
    b = train(surface3, ModelConfig(H=8, L=1, b=2), _small(4, prefetch=2))
    assert [m["loss"] for m in a.metrics] == [m["loss"] for m in b.metrics]


def test_curriculum_used_in_training(surface3):
    cfg = _small(4, curriculum=CurriculumSpec(p1=0.01, p2=0.1, stage1_steps=2, anneal_steps=2))
    res = train(surface3, ModelConfig(H=8, L=1, b=2), cfg)
    assert [m["p"] for m in res.metrics] == pytest.approx([0.01, 0.01, 0.01, 0.055])


def test_training_reduces_loss(surface3):
    cfg = TrainConfig(steps=200, batch=128, seed=3, noise="data:0.05", schedule=ScheduleSpec(warmup_steps=20, total_steps=200))
    res = train(surface3, ModelConfig(H=16, L=2, b=4), cfg)
    losses = [m["loss"] for m in res.metrics]
    assert np.mean(losses[-40:]) < np.mean(losses[:40])
    assert np.mean(losses[-40:]) < math.log(2)
