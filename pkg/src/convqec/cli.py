"""convqec command line: code, sample, train, decode, analyze, hw, nn, run, report.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
The default output root for `run` is $CONVQEC_OUT (else ./runs).
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import sys
import traceback
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

ENV_OUT = "CONVQEC_OUT"
EXIT_CONFIG, EXIT_STAGE = 2, 3


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage, self.cause = stage, cause


# --- helpers ---------------------------------------------------------------------------


def canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def config_hash(obj) -> str:
    return hashlib.sha256(canonical(obj)).hexdigest()


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, np.uint32)[0])


def _finite(obj):
    """NaN/inf are not JSON; empty bins and undefined rates become null."""
    if isinstance(obj, float):
        return obj if np.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def dumps(obj) -> str:
    return json.dumps(_finite(obj), indent=2, sort_keys=True, allow_nan=False)


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dumps(obj) + "\n")


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None


def load_code(spec):
    """A code JSON path, a preset name (surface5, surface:5, bb144) or {"preset"/"path": ...}."""
    from convqec.codes import CssCode, build_preset

    if isinstance(spec, dict):
        spec = spec.get("path") or spec.get("preset")
    if spec is None:
        raise ConfigError("code needs a preset or a path")
    if Path(str(spec)).is_file():
        return CssCode.load(spec)
    try:
        return build_preset(str(spec))
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _emit(obj, out=None) -> None:
    text = dumps(obj)
    if out:
        write_json(out, obj)
    print(text)


# --- run configuration ------------------------------------------------------------------


def _train_defaults() -> dict:
    from convqec.train import TrainConfig

    d = TrainConfig().to_dict()
    for k in ("seed", "noise"):
        d.pop(k)
    d["ns_coeffs"] = list(d["ns_coeffs"])
    d["lion_betas"] = list(d["lion_betas"])
    return d


def _model_defaults() -> dict:
    from convqec.nn import ModelConfig

    return {**asdict(ModelConfig()), "checkpoint": None, "use_ema": True}


SECTION_DEFAULTS = {
    "code": lambda: {"preset": "surface3", "path": None},
    "noise": lambda: {"kind": "data", "p": 0.1},
    "model": _model_defaults,
    "train": _train_defaults,
    "eval": lambda: {"decoders": ["nn", "ml"], "p": None, "shots": 10000, "rounds": 1, "basis": "Z", "save_batches": True},
    "analysis": lambda: {
        "lambda": None,
        "waterfall": {"decoder": "nn"},
        "census": {"decoder": "ml", "wmax": 3, "p": 0.005},
        "calibration": {"decoder": "nn", "bins": 15, "thresholds": [0.0, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 0.999]},
    },
    "hardware": lambda: {
        "macs": {"n": 6840, "H": 256, "b": 4, "K": 27},
        "roofline": {"d": 19, "H": 256, "b": 4, "K": 27, "L": 19, "preset": "versal"},
        "buffers": {"n": 361, "H": 128, "L": 19, "b": 4, "K": 27, "bytes_per_value": 1},
        "fold": True,
        "fp8": {"shots": 20000},
    },
}
# optional sub-sections: null disables, a dict is merged over these defaults
SUBSECTION_DEFAULTS = {
    ("analysis", "lambda"): {"presets": ["surface3", "surface5", "surface7"], "decoder": "bp", "p": 0.02, "shots": 20000, "rounds": 1},
    ("analysis", "waterfall"): {"decoder": "nn"},
    ("analysis", "census"): {"decoder": "ml", "wmax": 3, "p": 0.005},
    ("analysis", "calibration"): {"decoder": "nn", "bins": 15, "thresholds": [0.0, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 0.999]},
    ("hardware", "macs"): {"n": 6840, "H": 256, "b": 4, "K": 27},
    ("hardware", "roofline"): {"d": 19, "H": 256, "b": 4, "K": 27, "L": 19, "preset": "versal"},
    ("hardware", "buffers"): {"n": 361, "H": 128, "L": 19, "b": 4, "K": 27, "bytes_per_value": 1},
    ("hardware", "fp8"): {"shots": 20000},
    ("train", "curriculum"): {"p1": 0.01, "p2": 0.1, "stage1_steps": 0, "anneal_steps": 0},
}
TOP_KEYS = {"seed", "report"} | set(SECTION_DEFAULTS)


def _merge(path, default, given):
    if given is None:
        return None
    if not isinstance(default, dict):
        return given
    if not isinstance(given, dict):
        raise ConfigError(f"{'.'.join(path)} must be an object")
    unknown = set(given) - set(default)
    if unknown:
        raise ConfigError(f"unknown keys in {'.'.join(path) or 'config'}: {sorted(unknown)}")
    out = {}
    for k, dv in default.items():
        sub = SUBSECTION_DEFAULTS.get(tuple(path) + (k,), dv)
        if k not in given:
            out[k] = copy.deepcopy(dv)
        elif isinstance(sub, dict) and given[k] is not None:
            out[k] = _merge(path + [k], sub, given[k])
        else:
            out[k] = given[k]
    return out


def resolve_run_config(raw: dict) -> dict:
    """Fill defaults for every present section; absent sections are null (stage not run)."""
    if not isinstance(raw, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    if not isinstance(raw.get("seed"), int) or isinstance(raw.get("seed"), bool):
        raise ConfigError("seed is mandatory and must be an integer")
    cfg = {"seed": raw["seed"], "report": bool(raw.get("report", True))}
    for name, make in SECTION_DEFAULTS.items():
        default = make()
        if name == "train":
            from convqec.train import ScheduleSpec

            default["schedule"] = asdict(ScheduleSpec())
        cfg[name] = _merge([name], default, raw[name]) if name in raw else None
    needs_code = any(cfg[s] is not None for s in ("train", "eval")) or (cfg["analysis"] is not None)
    if needs_code:
        cfg["code"] = cfg["code"] or SECTION_DEFAULTS["code"]()
        cfg["noise"] = cfg["noise"] or SECTION_DEFAULTS["noise"]()
        if cfg["model"] is None and (cfg["train"] is not None or _uses_nn(cfg)):
            cfg["model"] = _model_defaults()
    if cfg["eval"] is not None and cfg["eval"]["p"] is None:
        cfg["eval"]["p"] = [cfg["noise"]["p"]]
    if cfg["train"] is not None and cfg["train"].get("curriculum") is not None:
        c = cfg["train"]["curriculum"]
        if not c.get("stage1_steps") and not c.get("anneal_steps"):
            cfg["train"]["curriculum"] = None
    _validate(cfg)
    return cfg


def _uses_nn(cfg) -> bool:
    ev = cfg.get("eval") or {}
    return "nn" in (ev.get("decoders") or [])


def _validate(cfg):
    from convqec.nn import ModelConfig
    from convqec.train import TrainConfig

    try:
        if cfg["model"] is not None:
            m = {k: v for k, v in cfg["model"].items() if k not in ("checkpoint", "use_ema")}
            ModelConfig(**m)
        if cfg["train"] is not None:
            TrainConfig.from_dict({**cfg["train"], "noise": noise_string(cfg["noise"])})
        if cfg["noise"] is not None:
            from convqec.sim import NoiseModel

            NoiseModel.parse(noise_string(cfg["noise"]))
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    if _uses_nn(cfg) and cfg["train"] is None and not (cfg["model"] or {}).get("checkpoint"):
        raise ConfigError("eval with the nn decoder needs a train section or model.checkpoint")
    if cfg["eval"] is not None:
        bad = set(cfg["eval"]["decoders"]) - {"nn", "ml", "lookup", "bp"}
        if bad:
            raise ConfigError(f"unknown decoders {sorted(bad)}")


def noise_string(noise: dict, p: float | None = None) -> str:
    return f"{noise['kind']}:{noise['p'] if p is None else p!r}"


# --- pipeline ---------------------------------------------------------------------------


class Pipeline:
    """Stage runner with a content-addressed manifest.

    A stage whose key (its config section, the seed and its upstream keys)
    and output hashes match the manifest on disk is skipped.
    """

    STAGES = ("code", "train", "eval", "analysis", "hardware")

    def __init__(self, cfg: dict, out: Path, log=print):
        self.cfg, self.out, self.log = cfg, Path(out), log
        self.hash = config_hash(cfg)
        self.seed = cfg["seed"]
        self.keys: dict[str, str] = {}
        self.state: dict = {}
        old = self.out / "manifest.json"
        self.previous = json.loads(old.read_text()) if old.exists() else {}
        self.stages: dict = {}
        self.files: dict[str, dict] = {}

    def _stage_key(self, name, upstream):
        sections = {"code": ["code"], "train": ["code", "noise", "model", "train"], "eval": ["code", "noise", "model", "eval"], "analysis": ["code", "noise", "analysis"], "hardware": ["hardware", "model"]}[name]
        return config_hash({"stage": name, "seed": self.seed, "cfg": {s: self.cfg[s] for s in sections}, "up": [self.keys.get(u) for u in upstream]})

    def _up_to_date(self, name, key) -> bool:
        prev = self.previous.get("stages", {}).get(name)
        if not prev or prev["key"] != key:
            return False
        for f in prev["files"]:
            p = self.out / f["path"]
            if not p.exists() or file_sha256(p) != f["sha256"]:
                return False
        return True

    def _record(self, name, key, paths):
        entries = []
        for p in paths:
            rel = str(Path(p).relative_to(self.out))
            e = {"path": rel, "sha256": file_sha256(p), "stage": name, "config_hash": self.hash, "seed": self.seed}
            entries.append(e)
            self.files[rel] = e
        self.stages[name] = {"key": key, "files": entries}

    def _carry(self, name, key):
        prev = self.previous["stages"][name]
        for e in prev["files"]:
            self.files[e["path"]] = {**e, "config_hash": self.hash}
        self.stages[name] = {"key": key, "files": [{**e, "config_hash": self.hash} for e in prev["files"]]}

    def write_manifest(self):
        manifest = {
            "config_hash": self.hash,
            "seed": self.seed,
            "stages": self.stages,
            "files": [self.files[k] for k in sorted(self.files)],
        }
        write_json(self.out / "manifest.json", manifest)

    def run(self) -> dict:
        self.out.mkdir(parents=True, exist_ok=True)
        write_json(self.out / "config.json", self.cfg)
        upstream = {"code": [], "train": ["code"], "eval": ["code", "train"], "analysis": ["code", "eval"], "hardware": ["train"]}
        for name in self.STAGES:
            if not self._active(name):
                continue
            key = self._stage_key(name, upstream[name])
            self.keys[name] = key
            if self._up_to_date(name, key):
                self.log(f"[{name}] up to date, skipped")
                self._carry(name, key)
                continue
            self.log(f"[{name}] running")
            try:
                paths = getattr(self, f"stage_{name}")()
            except ConfigError:
                raise
            except Exception as e:  # stage failure: machine-readable record, then halt
                write_json(self.out / "error.json", {"stage": name, "type": type(e).__name__, "message": str(e), "config_hash": self.hash})
                self.write_manifest()
                raise StageError(name, e) from e
            self._record(name, key, paths)
        self.write_manifest()
        err = self.out / "error.json"
        if err.exists():
            err.unlink()
        return {"out": str(self.out), "config_hash": self.hash, "stages": sorted(self.stages)}

    def _active(self, name) -> bool:
        c = self.cfg
        if name == "code":
            return c["code"] is not None
        if name == "train":
            return c["train"] is not None and not (c["model"] or {}).get("checkpoint")
        return c[name] is not None

    # -- shared state

    def code(self):
        if "code" not in self.state:
            self.state["code"] = load_code(self.cfg["code"])
        return self.state["code"]

    def model(self):
        from convqec.nn import load_checkpoint

        if "model" not in self.state:
            ck = (self.cfg["model"] or {}).get("checkpoint")
            if ck is None:
                name = "ema.ckpt" if self.cfg["model"]["use_ema"] else "model.ckpt"
                ck = self.out / "train" / name
            if not Path(ck).exists():
                raise FileNotFoundError(f"model checkpoint {ck} missing")
            self.state["model"] = load_checkpoint(ck)
        return self.state["model"]

    def model_config(self):
        from convqec.nn import ModelConfig

        return ModelConfig(**{k: v for k, v in self.cfg["model"].items() if k not in ("checkpoint", "use_ema")})

    # -- stages

    def stage_code(self):
        path = self.out / "code.json"
        self.code().save(path)
        return [path]

    def stage_train(self):
        from convqec.train import TrainConfig, train

        tc = TrainConfig.from_dict({**self.cfg["train"], "seed": derive_seed(self.seed, 1), "noise": noise_string(self.cfg["noise"])})
        res = train(self.code(), self.model_config(), tc, out_dir=self.out / "train")
        self.state["model"] = res.ema if self.cfg["model"]["use_ema"] else res.model
        return [self.out / "train" / n for n in ("metrics.ndjson", "model.ckpt", "ema.ckpt")]

    def _eval_batches(self):
        """One sampled batch per p, shared by every decoder (paired comparison)."""
        from convqec.sim import NoiseModel, build_memory_circuit, sample

        ev = self.cfg["eval"]
        if "batches" not in self.state:
            out = {}
            for i, p in enumerate(ev["p"]):
                circ = build_memory_circuit(self.code(), ev["rounds"], ev["basis"], NoiseModel.parse(noise_string(self.cfg["noise"], p)))
                out[p] = sample(circ, ev["shots"], derive_seed(self.seed, 2, i))
            self.state["batches"] = out
        return self.state["batches"]

    def _predict(self, name, p, batch):
        from convqec.decoders import decode_batch, make_decoder
        from convqec.nn import probabilities

        ev = self.cfg["eval"]
        if name == "nn":
            probs = probabilities(self.model(), batch.detections, ev["basis"])
            return (probs > 0.5).astype(np.uint8), probs.astype(np.float32)
        if self.cfg["noise"]["kind"] != "data":
            raise ValueError(f"decoder {name} only handles data-level batches")
        dec = make_decoder(name, self.code(), p, ev["basis"], ev["rounds"])
        flips, marg = decode_batch(dec, batch)
        return flips, marg

    def stage_eval(self):
        from convqec.analysis import make_point, write_curve_csv
        from convqec.decoders import save_predictions

        ev, code = self.cfg["eval"], self.code()
        paths = []
        (self.out / "curves").mkdir(exist_ok=True)
        (self.out / "preds").mkdir(exist_ok=True)
        self.state["preds"] = {}
        batches = self._eval_batches()
        if ev["save_batches"]:
            (self.out / "batches").mkdir(exist_ok=True)
            for p, b in batches.items():
                path = self.out / "batches" / f"eval_p{p:g}.bin"
                b.save(path)
                paths.append(path)
        for name in ev["decoders"]:
            pts = []
            for p, batch in batches.items():
                flips, probs = self._predict(name, p, batch)
                self.state["preds"][(name, p)] = (flips, probs, batch)
                path = self.out / "preds" / f"{name}_p{p:g}.bin"
                save_predictions(path, flips, probs)
                paths.append(path)
                failures = int((flips != batch.labels).any(axis=1).sum())
                pts.append(make_point(p, failures, batch.shots, k=code.k, rounds=ev["rounds"], d=code.d))
            path = self.out / "curves" / f"{name}.csv"
            write_curve_csv(path, pts)
            paths.append(path)
        return paths

    def _preds(self, name):
        from convqec.decoders import load_predictions
        from convqec.sim import SyndromeBatch

        out = []
        for p in self.cfg["eval"]["p"]:
            if (name, p) in self.state.get("preds", {}):
                out.append(self.state["preds"][(name, p)])
                continue
            flips, probs = load_predictions(self.out / "preds" / f"{name}_p{p:g}.bin")
            out.append((flips, probs, SyndromeBatch.load(self.out / "batches" / f"eval_p{p:g}.bin")))
        return out

    def stage_analysis(self):
        from convqec import analysis as an

        a, code = self.cfg["analysis"], self.code()
        paths, fits = [], {}
        if a.get("lambda"):
            lam = a["lambda"]
            pts = self._lambda_points(lam)
            path = self.out / "curves" / "lambda.csv"
            path.parent.mkdir(exist_ok=True)
            an.write_curve_csv(path, pts)
            paths.append(path)
            fits["lambda"] = an.fit_lambda(pts, p_th_from=lam["p"]).to_json() if all(q.failures > 0 for q in pts) else {"skipped": "zero failures at some distance"}
        if a.get("waterfall") and self.cfg["eval"] is not None:
            name = a["waterfall"]["decoder"]
            curve = self.out / "curves" / f"{name}.csv"
            pts = [q for q in an.read_curve_csv(curve) if q.failures > 0] if curve.exists() else []
            ps = [q.p for q in pts]
            if len(pts) >= 4 and max(ps) / min(ps) >= 10:
                fits["waterfall"] = an.fit_two_powerlaw(pts).to_json()
            else:
                fits["waterfall"] = {"skipped": "needs >= 4 points with failures spanning a decade in p"}
            fits["suppression"] = an.fit_suppression_exponent(pts).to_json() if len(pts) >= 2 else {"skipped": "needs >= 2 points"}
        if fits:
            write_json(self.out / "fits.json", fits)
            paths.append(self.out / "fits.json")
        if a.get("census"):
            c = a["census"]
            if code.n > 16 and c["decoder"] == "ml":
                census = {"skipped": f"exact ML needs n <= 16 (n = {code.n})"}
            else:
                res = an.failure_census(code, c["decoder"], c["p"], c["wmax"], self.cfg["eval"]["basis"] if self.cfg["eval"] else "Z")
                census = {**res.to_json(), "p": c["p"], "predicted": an.predicted_pl(res, c["p"])}
            if "skipped" not in census:
                write_json(self.out / "census.json", census)
                paths.append(self.out / "census.json")
        if a.get("calibration") and self.cfg["eval"] is not None and a["calibration"]["decoder"] in self.cfg["eval"]["decoders"]:
            cal = a["calibration"]
            got = [x for x in self._preds(cal["decoder"]) if x[1] is not None]
            if got:
                probs = np.concatenate([g[1] for g in got])
                labels = np.concatenate([g[2].labels for g in got])
                rep = an.reliability(probs, labels, cal["bins"])
                write_json(self.out / "calibration.json", rep.to_json())
                rows = an.post_select(probs, labels, cal["thresholds"])
                with open(self.out / "postselect.csv", "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(["tau", "acceptance", "error", "discard_per_cycle"])
                    for tau, acc, err in rows:
                        w.writerow([repr(tau), repr(acc), repr(err), repr(an.discard_rate_per_cycle(acc, self.cfg["eval"]["rounds"]))])
                paths += [self.out / "calibration.json", self.out / "postselect.csv"]
        return paths

    def _lambda_points(self, lam):
        from convqec.analysis import make_point
        from convqec.decoders import decode_batch, make_decoder
        from convqec.sim import NoiseModel, build_memory_circuit, sample

        pts = []
        for i, preset in enumerate(lam["presets"]):
            code = load_code(preset)
            circ = build_memory_circuit(code, lam["rounds"], "Z", NoiseModel("data_level", lam["p"]))
            batch = sample(circ, lam["shots"], derive_seed(self.seed, 3, i))
            dec = make_decoder(lam["decoder"], code, lam["p"], "Z", lam["rounds"])
            flips, _ = decode_batch(dec, batch)
            failures = int((flips != batch.labels).any(axis=1).sum())
            pts.append(make_point(lam["p"], failures, batch.shots, k=code.k, rounds=lam["rounds"], d=code.d))
        return pts

    def stage_hardware(self):
        from convqec import hardware as hw

        h = self.cfg["hardware"]
        rep: dict = {}
        if h.get("macs"):
            m = h["macs"]
            conv = hw.mac_count(hw.BlockCostSpec(m["n"], m["H"], m["b"], m["K"], variant="conv"))
            rep["macs"] = {}
            for v in hw.VARIANTS:
                mb = hw.mac_count(hw.BlockCostSpec(m["n"], m["H"], m["b"], m["K"], variant=v))
                rep["macs"][v] = {**mb.to_json(), "ratio_to_conv": mb.total / conv.total}
        if h.get("roofline"):
            r = h["roofline"]
            rep["roofline"] = hw.roofline_report(r["d"], r["H"], r["b"], r["K"], r["L"], r["preset"])
        if h.get("buffers"):
            b = h["buffers"]
            rep["buffers"] = {v: hw.buffer_sizing(b["n"], b["H"], b["L"], b["b"], b["K"], v, b["bytes_per_value"]) for v in ("conv", "depthwise")}
        has_model = self.cfg["model"] is not None and (self.cfg["train"] is not None or self.cfg["model"].get("checkpoint"))
        if has_model and (h.get("fold") or h.get("fp8")):
            rep.update(self._fold_and_quantize(h))
        write_json(self.out / "hardware.json", rep)
        (self.out / "hardware.md").write_text(hardware_markdown(rep))
        return [self.out / "hardware.json", self.out / "hardware.md"]

    def _fold_and_quantize(self, h):
        from convqec import hardware as hw
        from convqec.sim import NoiseModel, build_memory_circuit, sample

        model = self.model()
        code = model.code
        basis = self.cfg["eval"]["basis"] if self.cfg["eval"] else "Z"
        rounds = self.cfg["eval"]["rounds"] if self.cfg["eval"] else 1
        shots = h["fp8"]["shots"] if h.get("fp8") else 2048
        circ = build_memory_circuit(code, rounds, basis, NoiseModel.parse(noise_string(self.cfg["noise"])))
        batch = sample(circ, shots, derive_seed(self.seed, 4))
        folded = hw.fold_model(model)
        out = {}
        ref = model.astype(np.float64).forward(batch.detections[:2048], basis)
        got = hw.folded_forward(model, folded, batch.detections[:2048], basis)
        out["fold"] = {"max_abs_diff": float(np.abs(got - ref).max()), "max_abs_logit": float(np.abs(ref).max())}
        if h.get("fp8"):
            q, _ = hw.quantize_fp8(folded)
            p32 = hw.folded_probabilities(model, folded, batch.detections, basis)
            p8 = hw.folded_probabilities(model, q, batch.detections, basis, fp8_activations=True)
            r32 = float(((p32 > 0.5) != batch.labels).any(axis=1).mean())
            r8 = float(((p8 > 0.5) != batch.labels).any(axis=1).mean())
            sigma = float(np.sqrt(max(r32 * (1 - r32), 1e-12) / shots))
            out["fp8"] = {"shots": shots, "rate_fp32": r32, "rate_fp8": r8, "sigma": sigma, "within_2sigma": abs(r8 - r32) <= 2 * sigma}
        return out


def hardware_markdown(rep: dict) -> str:
    lines = ["# Hardware cost report", ""]
    if "macs" in rep:
        lines += ["| variant | pointwise | spatial | attn_proj | per block | spatial fraction | vs conv |", "|---|---|---|---|---|---|---|"]
        for v, m in rep["macs"].items():
            lines.append(f"| {v} | {m['pointwise']:,} | {m['spatial']:,} | {m['attn_proj']:,} | {m['per_block']:,} | {m['spatial_fraction']:.4f} | {m['ratio_to_conv']:.4f} |")
        lines.append("")
    if "roofline" in rep:
        r = rep["roofline"]
        lines += [
            f"Roofline {r['preset']}: per-round n={r['per_round_n']} -> {r['latency_per_round_s'] * 1e6:.3f} us/round; "
            f"full volume n={r['full_volume_n']} -> {r['latency_full_volume_per_round_s'] * 1e6:.3f} us/round",
            "",
        ]
    if "buffers" in rep:
        lines += ["| variant | residual/block B | residual total B | weights/layer B | weights total B |", "|---|---|---|---|---|"]
        for v, b in rep["buffers"].items():
            lines.append(f"| {v} | {b['residual_per_block']:,} | {b['residual_total']:,} | {b['weights_per_layer']:,} | {b['weights_total']:,} |")
        lines.append("")
    return "\n".join(lines)


# --- subcommands ------------------------------------------------------------------------


def cmd_code(args):
    if args.action == "build":
        code = load_code(args.preset)
        if args.out:
            code.save(args.out)
        _emit({"n": code.n, "k": code.k, "d": code.d, "x_checks": code.n_x_checks, "z_checks": code.n_z_checks, "preset": code.preset})
    else:
        code = load_code(args.path)
        _emit({"n": code.n, "k": code.k, "d": code.d, "x_checks": code.n_x_checks, "z_checks": code.n_z_checks, "preset": code.preset, "layout": type(code.layout).__name__})
    return 0


def cmd_sample(args):
    from convqec.sim import NoiseModel, build_memory_circuit, sample

    code = load_code(args.code)
    try:
        noise = NoiseModel.parse(args.noise)
    except (ValueError, IndexError) as e:
        raise ConfigError(f"bad --noise {args.noise!r}: {e}") from None
    batch = sample(build_memory_circuit(code, args.rounds, args.basis, noise), args.shots, args.seed)
    batch.save(args.out)
    _emit({"out": args.out, "shots": batch.shots, "rounds": batch.rounds, "checks": batch.checks_per_round, "observables": batch.num_observables, "sha256": file_sha256(args.out)})
    return 0


def cmd_train(args):
    from convqec.nn import ModelConfig
    from convqec.train import TrainConfig, train

    raw = read_json(args.config)
    unknown = set(raw) - {"code", "model", "train"}
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    try:
        tc = TrainConfig.from_dict(raw.get("train", {}))
        mc = ModelConfig(**raw.get("model", {}))
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    code = load_code(raw.get("code", "surface3"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", {"code": raw.get("code", "surface3"), "model": asdict(mc), "train": tc.to_dict()})
    res = train(code, mc, tc, out_dir=out, verbose=args.verbose)
    last = res.metrics[-1]["loss"] if res.metrics else None
    _emit({"out": str(out), "steps": len(res.metrics), "final_loss": last})
    return 0


def cmd_decode(args):
    from convqec.decoders import decode_batch, make_decoder, save_predictions
    from convqec.sim import SyndromeBatch

    code = load_code(args.code)
    batch = SyndromeBatch.load(args.batch)
    if args.decoder == "nn":
        from convqec.nn import load_checkpoint, probabilities

        if not args.model:
            raise ConfigError("--model is required for the nn decoder")
        model = load_checkpoint(args.model)
        probs = probabilities(model, batch.detections, batch.basis)
        flips = (probs > 0.5).astype(np.uint8)
        probs = probs.astype(np.float32)
    else:
        if args.p is None and args.decoder in ("ml", "bp"):
            raise ConfigError(f"--p is required for the {args.decoder} decoder")
        dec = make_decoder(args.decoder, code, args.p or 0.0, batch.basis, batch.rounds)
        flips, probs = decode_batch(dec, batch)
    save_predictions(args.out, flips, probs)
    failures = int((flips != batch.labels).any(axis=1).sum())
    _emit({"out": args.out, "shots": batch.shots, "failures": failures, "block_error_rate": failures / batch.shots, "sha256": file_sha256(args.out)})
    return 0


def cmd_analyze(args):
    from convqec import analysis as an

    if args.what == "lambda":
        pts = [q for f in args.inputs for q in an.read_curve_csv(f)]
        by_p: dict = {}
        for q in pts:
            by_p.setdefault(q.p, []).append(q)
        try:
            res = {repr(p): an.fit_lambda(v).to_json() for p, v in sorted(by_p.items())}
        except ValueError as e:
            raise ConfigError(str(e)) from None
        _emit(res, args.out)
    elif args.what == "waterfall":
        pts = [q for f in args.inputs for q in an.read_curve_csv(f) if q.failures > 0]
        try:
            res = {"two_powerlaw": an.fit_two_powerlaw(pts).to_json(), "single_powerlaw": an.fit_suppression_exponent(pts).to_json()}
        except ValueError as e:
            raise ConfigError(str(e)) from None
        _emit(res, args.out)
    elif args.what == "census":
        code = load_code(args.code)
        res = an.failure_census(code, args.decoder, args.p, args.wmax, args.basis)
        _emit({**res.to_json(), "p": args.p, "predicted": an.predicted_pl(res, args.p)}, args.out)
    elif args.what == "calibrate":
        from convqec.decoders import load_predictions
        from convqec.sim import SyndromeBatch

        flips, probs = load_predictions(args.preds)
        if probs is None:
            raise ConfigError("predictions file carries no probabilities")
        batch = SyndromeBatch.load(args.batch)
        rep = an.reliability(probs, batch.labels, args.bins)
        rows = an.post_select(probs, batch.labels, args.thresholds)
        _emit({**rep.to_json(), "postselect": [{"tau": t, "acceptance": a, "error": e} for t, a, e in rows]}, args.out)
    return 0


def cmd_hw(args):
    from convqec import hardware as hw

    if args.what == "macs":
        variants = hw.VARIANTS if args.variant == "all" else (args.variant,)
        conv = hw.mac_count(hw.BlockCostSpec(args.n, args.H, args.b, args.K, args.L, "conv"))
        res = {}
        for v in variants:
            m = hw.mac_count(hw.BlockCostSpec(args.n, args.H, args.b, args.K, args.L, v))
            res[v] = {**m.to_json(), "ratio_to_conv": m.total / conv.total}
        _emit(res, args.out)
    elif args.what == "roofline":
        family, _, size = args.code.partition(":")
        if family == "surface":
            d = int(size)
            res = hw.roofline_report(d, args.H, args.b, args.K, args.L, args.preset)
        else:
            code = load_code(args.code)
            n = hw.round_positions("bb", n_data=code.n)
            L = args.L or code.d
            res = {"preset": args.preset, "per_round_n": n, "L": L, "latency_per_round_s": hw.roofline_latency(hw.BlockCostSpec(n, args.H, args.b, args.K, L), hw.ROOFLINES[args.preset])}
        _emit(res, args.out)
    elif args.what == "buffers":
        _emit({v: hw.buffer_sizing(args.n, args.H, args.L, args.b, args.K, v) for v in ("conv", "depthwise")}, args.out)
    elif args.what == "fold":
        from convqec.nn import load_checkpoint, read_checkpoint_header, save_checkpoint

        if read_checkpoint_header(args.model)["extra"].get("folded"):
            raise ConfigError("model is already folded")
        model = load_checkpoint(args.model)
        packed = hw.folded_to_decoder(model, hw.fold_model(model))
        save_checkpoint(args.out, packed, {"folded": True})
        _emit({"out": args.out, "sha256": file_sha256(args.out)})
    elif args.what == "quantize":
        from convqec.nn import load_checkpoint, read_checkpoint_header, save_checkpoint

        if not read_checkpoint_header(args.model)["extra"].get("folded"):
            raise ConfigError("quantize expects a folded checkpoint (run `hw fold` first)")
        model = load_checkpoint(args.model)
        q, scales = hw.quantize_fp8(hw.unpack_folded(model))
        save_checkpoint(args.out, hw.folded_to_decoder(model, q), {"folded": True, "fp8": {"format": "e4m3", "scales": scales}})
        _emit({"out": args.out, "tensors": len(scales), "sha256": file_sha256(args.out)})
    return 0


def cmd_nn(args):
    from convqec.nn import Decoder, ModelConfig, check_gradients
    from convqec.sim import NoiseModel, build_memory_circuit, sample

    raw = read_json(args.config)
    allowed = {"code", "model", "seed", "shots", "rounds", "p", "eps", "tol", "per_tensor", "basis"}
    if set(raw) - allowed:
        raise ConfigError(f"unknown keys: {sorted(set(raw) - allowed)}")
    if "seed" not in raw:
        raise ConfigError("seed is mandatory")
    code = load_code(raw.get("code", "surface3"))
    try:
        mc = ModelConfig(**raw.get("model", {"H": 8, "L": 2, "b": 2}))
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    basis = raw.get("basis", "Z")
    circ = build_memory_circuit(code, raw.get("rounds", 3), basis, NoiseModel("data_level", raw.get("p", 0.1)))
    batch = sample(circ, raw.get("shots", 32), raw["seed"])
    model = Decoder(code, mc, seed=raw["seed"])
    errs = check_gradients(model, batch.detections, batch.labels, basis, raw.get("eps", 1e-3), raw.get("per_tensor", 4), raw["seed"])
    tol = raw.get("tol", 1e-3)
    worst = max(errs.values())
    _emit({"worst": worst, "tol": tol, "passed": worst <= tol, "errors": errs})
    return 0 if worst <= tol else EXIT_STAGE


def cmd_run(args):
    from convqec.report import build_report

    cfg = resolve_run_config(read_json(args.config))
    out = Path(args.out) if args.out else Path(os.environ.get(ENV_OUT, "runs")) / config_hash(cfg)[:12]
    res = Pipeline(cfg, out, log=lambda s: print(s, file=sys.stderr)).run()
    if cfg["report"]:
        build_report(out)
    _emit(res)
    return 0


def cmd_report(args):
    from convqec.report import build_report

    res = build_report(args.dir)
    _emit(res)
    return 0


# --- entry point ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="convqec", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread limit (1 = bitwise deterministic)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("code", help="build or inspect codes")
    csub = p.add_subparsers(dest="action", required=True)
    b = csub.add_parser("build")
    b.add_argument("--preset", required=True)
    b.add_argument("--out")
    i = csub.add_parser("info")
    i.add_argument("path")
    p.set_defaults(func=cmd_code)

    p = sub.add_parser("sample", help="sample a memory experiment")
    p.add_argument("--code", required=True)
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--noise", default="data:0.1")
    p.add_argument("--basis", choices=("X", "Z"), default="Z")
    p.add_argument("--shots", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="train a decoder")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="decode a batch")
    p.add_argument("--decoder", choices=("ml", "lookup", "bp", "nn"), required=True)
    p.add_argument("--code", required=True)
    p.add_argument("--batch", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--p", type=float, help="physical error rate for the decoder prior")
    p.add_argument("--model", help="checkpoint for the nn decoder")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("analyze", help="fits, census and calibration")
    asub = p.add_subparsers(dest="what", required=True)
    for name in ("lambda", "waterfall"):
        x = asub.add_parser(name)
        x.add_argument("--in", dest="inputs", nargs="+", required=True)
        x.add_argument("--out")
    x = asub.add_parser("census")
    x.add_argument("--code", required=True)
    x.add_argument("--decoder", choices=("ml", "lookup", "bp", "identity"), default="ml")
    x.add_argument("--wmax", type=int, default=3)
    x.add_argument("--p", type=float, default=0.005)
    x.add_argument("--basis", choices=("X", "Z"), default="Z")
    x.add_argument("--out")
    x = asub.add_parser("calibrate")
    x.add_argument("--preds", required=True)
    x.add_argument("--batch", required=True)
    x.add_argument("--bins", type=int, default=15)
    x.add_argument("--thresholds", type=float, nargs="+", default=[0.0, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99])
    x.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("hw", help="hardware cost models, folding and FP8")
    hsub = p.add_subparsers(dest="what", required=True)
    x = hsub.add_parser("macs")
    x.add_argument("--n", type=int, default=6840)
    x.add_argument("--H", type=int, default=256)
    x.add_argument("--b", type=int, default=4)
    x.add_argument("--K", type=int, default=27)
    x.add_argument("--L", type=int, default=1)
    x.add_argument("--variant", choices=("all",) + ("conv", "depthwise", "local_attention", "full_attention"), default="all")
    x.add_argument("--out")
    x = hsub.add_parser("roofline")
    x.add_argument("--preset", choices=("versal", "tpu_v1", "edge"), default="versal")
    x.add_argument("--code", default="surface:19")
    x.add_argument("--H", type=int, default=256)
    x.add_argument("--b", type=int, default=4)
    x.add_argument("--K", type=int, default=27)
    x.add_argument("--L", type=int, default=None)
    x.add_argument("--out")
    x = hsub.add_parser("buffers")
    x.add_argument("--n", type=int, default=361)
    x.add_argument("--H", type=int, default=128)
    x.add_argument("--L", type=int, default=19)
    x.add_argument("--b", type=int, default=4)
    x.add_argument("--K", type=int, default=27)
    x.add_argument("--out")
    for name in ("fold", "quantize"):
        x = hsub.add_parser(name)
        x.add_argument("--model", required=True)
        x.add_argument("--out", required=True)
    p.set_defaults(func=cmd_hw)

    p = sub.add_parser("nn", help="network utilities")
    nsub = p.add_subparsers(dest="what", required=True)
    x = nsub.add_parser("check-gradients")
    x.add_argument("--config", required=True)
    p.set_defaults(func=cmd_nn)

    p = sub.add_parser("run", help="run a pipeline from a RunConfig JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help=f"artifact directory (default ${ENV_OUT}/<config hash>)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="render report.md, summary.csv and figures for a run directory")
    p.add_argument("dir")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from threadpoolctl import threadpool_limits

    try:
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as e:  # any other failure inside a command is a stage failure
        traceback.print_exc()
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
