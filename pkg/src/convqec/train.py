"""Optimizers, schedules and the on-the-fly training loop."""

from __future__ import annotations

import json
import math
import queue
import threading
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from convqec.codes import CssCode
from convqec.nn import Decoder, ModelConfig, bce_with_logits, save_checkpoint
from convqec.sim import NoiseModel, build_memory_circuit, sample

NS_COEFFS = (3.4445, -4.7750, 2.0315)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ScheduleSpec:
    peak_lr_matrix: float = 3e-3
    peak_lr_scalar: float = 2e-4
    warmup_steps: int = 1000
    total_steps: int = 50000
    floor_fraction: float = 0.1
    weight_decay: float = 3e-3

    def __post_init__(self):
        if not 0 < self.floor_fraction <= 1:
            raise ValueError("floor_fraction must lie in (0, 1]")
        if self.total_steps > 0 and self.warmup_steps >= self.total_steps:
            raise ValueError("warmup must be shorter than the run")


@dataclass(frozen=True)
class CurriculumSpec:
    p1: float = 0.0
    p2: float = 0.0
    stage1_steps: int = 0
    anneal_steps: int = 0


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch: int = 256
    seed: int = 0
    rounds: int = 1
    noise: str = "data:0.1"
    bases: str = "Z"  # observable bases cycled step by step, e.g. "XZ"
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    curriculum: CurriculumSpec | None = None
    grad_clip: float = 1.0
    muon_momentum: float = 0.95
    ns_steps: int = 5
    ns_coeffs: tuple = NS_COEFFS
    lion_betas: tuple = (0.9, 0.99)
    ema_decay: float = 0.9998
    ema_warmup: bool = True
    prefetch: int = 2
    checkpoint_every: int = 0
    log_every: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "schedule" in d:
            d["schedule"] = ScheduleSpec(**d["schedule"])
        if d.get("curriculum") is not None:
            d["curriculum"] = CurriculumSpec(**d["curriculum"])
        for k in ("ns_coeffs", "lion_betas"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# --- optimizer primitives --------------------------------------------------------


def newton_schulz5(g: np.ndarray, steps: int = 5, coeffs=NS_COEFFS, eps: float = 1e-7) -> np.ndarray:
    """Approximate orthogonal polar factor of g by the quintic Newton-Schulz iteration."""
    a, b, c = coeffs
    x = np.asarray(g, dtype=np.float64)
    tall = x.shape[0] > x.shape[1]
    if tall:
        x = x.T
    x = x / (np.linalg.norm(x) + eps)
    for _ in range(steps):
        A = x @ x.T
        B = b * A + c * A @ A
        x = a * x + B @ x
    return x.T if tall else x


def muon_step(param, grad, momentum, lr, weight_decay, mu=0.95, ns_steps=5, coeffs=NS_COEFFS):
    """One Muon update on a 2-D parameter; returns (param, momentum)."""
    if param.ndim != 2:
        raise ValueError(f"muon expects a matrix, got shape {param.shape}")
    momentum = mu * momentum + grad
    rows, cols = param.shape
    direction = newton_schulz5(momentum, ns_steps, coeffs) * math.sqrt(max(1.0, rows / cols))
    param = param * (1 - lr * weight_decay) - lr * direction
    return param.astype(grad.dtype), momentum


def lion_step(param, grad, momentum, lr, weight_decay, betas=(0.9, 0.99)):
    b1, b2 = betas
    update = np.sign(b1 * momentum + (1 - b1) * grad)
    param = param * (1 - lr * weight_decay) - lr * update
    momentum = b2 * momentum + (1 - b2) * grad
    return param.astype(grad.dtype), momentum


def lr_at(step: int, spec: ScheduleSpec, peak: float | None = None) -> float:
    peak = spec.peak_lr_matrix if peak is None else peak
    if step < spec.warmup_steps:
        return peak * step / spec.warmup_steps
    if step >= spec.total_steps:
        return peak * spec.floor_fraction
    frac = (step - spec.warmup_steps) / (spec.total_steps - spec.warmup_steps)
    floor = peak * spec.floor_fraction
    return floor + (peak - floor) * 0.5 * (1 + math.cos(math.pi * frac))


def ema_update(shadow: dict, params: dict, decay: float) -> dict:
    return {k: decay * shadow[k] + (1 - decay) * params[k] for k in shadow}


def curriculum_noise(step: int, spec: CurriculumSpec) -> float:
    if step < spec.stage1_steps:
        return spec.p1
    t = step - spec.stage1_steps
    if t >= spec.anneal_steps:
        return spec.p2
    return spec.p1 + (spec.p2 - spec.p1) * t / spec.anneal_steps


# --- parameter routing -----------------------------------------------------------

MUON_SUFFIXES = (".down.weight", ".up.weight", "scatter.weight")


def uses_muon(name: str) -> bool:
    """Convolution-type weights (spatial kernels, pointwise projections, scatter) go to Muon."""
    return name.endswith(MUON_SUFFIXES) or (".conv" in name and name.endswith(".weight"))


def as_matrices(arr: np.ndarray) -> list[np.ndarray]:
    """2-D views of a weight: one (out, K*in) matrix per target kind for relational kernels."""
    if arr.ndim == 2:
        return [arr]
    if arr.ndim == 4:  # (kinds, K, out, in)
        return [w.transpose(1, 0, 2).reshape(w.shape[1], -1) for w in arr]
    if arr.ndim == 3:  # depthwise (kinds, K, C)
        return [w.T for w in arr]
    raise ValueError(f"cannot view shape {arr.shape} as matrices")


def from_matrices(mats: list[np.ndarray], shape) -> np.ndarray:
    if len(shape) == 2:
        return mats[0]
    if len(shape) == 4:
        kinds, k, out, inp = shape
        return np.stack([m.reshape(out, k, inp).transpose(1, 0, 2) for m in mats])
    return np.stack([m.T for m in mats])


class Optimizer:
    """Muon for convolution-type weights, Lion for everything else."""

    def __init__(self, params: dict, cfg: TrainConfig):
        self.cfg = cfg
        self.state = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, params: dict, grads: dict, lr_matrix: float, lr_scalar: float) -> dict:
        cfg = self.cfg
        wd = cfg.schedule.weight_decay
        out = {}
        for name, p in params.items():
            g = grads[name]
            if uses_muon(name):
                ps, gs, ms = as_matrices(p), as_matrices(g), as_matrices(self.state[name])
                res = [muon_step(a, b, c, lr_matrix, wd, cfg.muon_momentum, cfg.ns_steps, cfg.ns_coeffs) for a, b, c in zip(ps, gs, ms)]
                out[name] = from_matrices([r[0] for r in res], p.shape)
                self.state[name] = from_matrices([r[1] for r in res], p.shape)
            else:
                out[name], self.state[name] = lion_step(p, g, self.state[name], lr_scalar, wd, cfg.lion_betas)
        self.step_count += 1
        return out


def clip_gradients(grads: dict, threshold: float) -> tuple[dict, float]:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if threshold and norm > threshold:
        scale = threshold / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


# --- data ----------------------------------------------------------------------------


def step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1, np.uint64)[0] >> np.uint64(1))


class BatchSource:
    """Deterministic per-step batches, optionally produced ahead by a worker thread."""

    def __init__(self, code: CssCode, cfg: TrainConfig, start: int = 0):
        self.code = code
        self.cfg = cfg
        self.noise = NoiseModel.parse(cfg.noise)
        self._circuits: dict = {}
        self.start = start

    def noise_at(self, step: int) -> float:
        if self.cfg.curriculum is None:
            return self.noise.p
        return curriculum_noise(step, self.cfg.curriculum)

    def circuit(self, basis: str, p: float):
        key = (basis, round(p, 12))
        if key not in self._circuits:
            self._circuits[key] = build_memory_circuit(self.code, self.cfg.rounds, basis, self.noise.with_p(p))
        return self._circuits[key]

    def make(self, step: int):
        basis = self.cfg.bases[step % len(self.cfg.bases)]
        p = self.noise_at(step)
        batch = sample(self.circuit(basis, p), self.cfg.batch, step_seed(self.cfg.seed, step))
        return step, basis, p, batch

    def __iter__(self):
        if self.cfg.prefetch <= 0:
            for s in range(self.start, self.cfg.steps):
                yield self.make(s)
            return
        q: queue.Queue = queue.Queue(maxsize=self.cfg.prefetch)
        stop = threading.Event()

        def worker():
            try:
                for s in range(self.start, self.cfg.steps):
                    if stop.is_set():
                        return
                    q.put(self.make(s))
            except Exception as exc:  # surfaced in the consumer
                q.put(exc)
            q.put(None)

        t = threading.Thread(target=worker, daemon=True)
        t.start()
        try:
            while True:
                item = q.get()
                if item is None:
                    break
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            stop.set()
            while t.is_alive():
                try:
                    q.get_nowait()
                except queue.Empty:
                    t.join(0.01)


# --- loop ------------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Decoder
    ema: Decoder
    metrics: list


def ema_decay_at(step: int, cfg: TrainConfig) -> float:
    # short runs would otherwise keep most of the initialization in the shadow
    if cfg.ema_warmup:
        return min(cfg.ema_decay, (1 + step) / (10 + step))
    return cfg.ema_decay


def train(code: CssCode, model_cfg: ModelConfig, cfg: TrainConfig, out_dir=None, model: Decoder | None = None, verbose: bool = False) -> TrainResult:
    model = model or Decoder(code, model_cfg, seed=cfg.seed)
    shadow = {k: v.copy() for k, v in model.params.items()}
    opt = Optimizer(model.params, cfg)
    out = Path(out_dir) if out_dir else None
    log = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        log = open(out / "metrics.ndjson", "w")
    metrics = []

    def ema_model():
        return Decoder(code, model.cfg, {k: v.astype(np.float32) for k, v in shadow.items()}, {k: v.copy() for k, v in model.buffers.items()})

    def checkpoint(step):
        if out:
            extra = {"step": step, "train": cfg.to_dict()}
            save_checkpoint(out / "model.ckpt", model, extra)
            save_checkpoint(out / "ema.ckpt", ema_model(), extra)

    try:
        for step, basis, p, batch in BatchSource(code, cfg):
            logits = model.forward(batch.detections, basis, train=True)
            loss, dlogits = bce_with_logits(logits, batch.labels)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step}")
            grads = model.backward(dlogits)
            grads, gnorm = clip_gradients(grads, cfg.grad_clip)
            lr_m = lr_at(step, cfg.schedule, cfg.schedule.peak_lr_matrix)
            lr_s = lr_at(step, cfg.schedule, cfg.schedule.peak_lr_scalar)
            model.params = opt.step(model.params, grads, lr_m, lr_s)
            shadow = ema_update(shadow, model.params, ema_decay_at(step, cfg))
            rec = {"step": step, "loss": loss, "lr": lr_m, "p": p, "grad_norm": gnorm}
            metrics.append(rec)
            if log and step % cfg.log_every == 0:
                log.write(json.dumps(rec) + "\n")
            if verbose and step % 500 == 0:
                print(f"step {step} loss {loss:.4f} p {p:g} lr {lr_m:.2e}", flush=True)
            if cfg.checkpoint_every and step and step % cfg.checkpoint_every == 0:
                checkpoint(step)
    finally:
        if log:
            log.close()
    checkpoint(cfg.steps)
    return TrainResult(model, ema_model(), metrics)


def evaluate(model: Decoder, code: CssCode, noise: str, rounds: int, shots: int, seed: int, basis: str = "Z", batch: int = 8192):
    """Block failures of the model (any observable wrong) over freshly sampled shots."""
    circuit = build_memory_circuit(code, rounds, basis, NoiseModel.parse(noise))
    data = sample(circuit, shots, seed)
    preds = predict(model, data.detections, basis, batch)
    failures = int((preds != data.labels).any(axis=1).sum())
    return failures, shots


def predict(model: Decoder, detections, basis: str = "Z", batch: int = 8192) -> np.ndarray:
    out = []
    for s in range(0, len(detections), batch):
        out.append(model.forward(detections[s : s + batch], basis, train=False) > 0)
    return np.concatenate(out).astype(np.uint8)
