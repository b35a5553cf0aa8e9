"""Hardware cost arithmetic, batch-norm folding and FP8 (E4M3) inference simulation."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from convqec.nn import Decoder, geometry, linear, relational_conv, silu

VARIANTS = ("conv", "depthwise", "local_attention", "full_attention")


# --- MAC model -------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockCostSpec:
    n: int
    H: int
    b: int = 4
    K: int = 27
    L: int = 1
    variant: str = "conv"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant}")
        if min(self.n, self.H, self.b, self.K, self.L) < 1:
            raise ValueError("all counts must be positive")
        if self.H % self.b:
            raise ValueError("b must divide H")


@dataclass(frozen=True)
class MacBreakdown:
    pointwise: int
    spatial: int
    attn_proj: int
    L: int

    @property
    def per_block(self) -> int:
        return self.pointwise + self.spatial + self.attn_proj

    @property
    def total(self) -> int:
        return self.per_block * self.L

    @property
    def spatial_fraction(self) -> float:
        return self.spatial / self.per_block

    def to_json(self) -> dict:
        return {**asdict(self), "per_block": self.per_block, "total": self.total, "spatial_fraction": self.spatial_fraction}


def mac_count(spec: BlockCostSpec) -> MacBreakdown:
    n, H, b, K = spec.n, spec.H, spec.b, spec.K
    w = H // b
    pointwise = 2 * n * H * H // b
    if spec.variant == "conv":
        spatial = n * K * w * w
    elif spec.variant == "full_attention":
        spatial = n * n * w
    else:
        spatial = n * K * w
    proj = 3 * n * w * w if spec.variant.endswith("attention") else 0
    return MacBreakdown(pointwise, spatial, proj, spec.L)


@dataclass(frozen=True)
class RooflineSpec:
    name: str
    throughput: float  # MACs per second ("TOPS" read as tera-MACs/s)

    def __post_init__(self):
        if self.throughput <= 0:
            raise ValueError("throughput must be positive")


ROOFLINES = {
    "versal": RooflineSpec("versal", 133e12),
    "tpu_v1": RooflineSpec("tpu_v1", 92e12),
    "edge": RooflineSpec("edge", 4e12),
}


def roofline_latency(spec: BlockCostSpec, roofline: RooflineSpec, L: int | None = None) -> float:
    """Compute-bound seconds: L blocks of spec's MACs at the peak rate."""
    L = spec.L if L is None else L
    return L * mac_count(spec).per_block / roofline.throughput


def round_positions(family: str, d: int | None = None, n_data: int | None = None) -> int:
    """Per-round n: d^2 for surface codes, physical qubits (data + checks) for BB codes."""
    if family == "surface":
        return d * d
    if family == "bb":
        return 2 * n_data
    raise ValueError(f"unknown family {family}")


def full_volume_positions(d: int, rounds: int | None = None) -> int:
    """Spacetime detector count d^2 - 1 checks per round over R (= d) rounds."""
    return (d * d - 1) * (d if rounds is None else rounds)


def roofline_report(d: int, H: int = 256, b: int = 4, K: int = 27, L: int | None = None, preset: str = "versal") -> dict:
    """Per-round latency under both n conventions (per-round d^2, full volume / R)."""
    L = d if L is None else L
    roof = ROOFLINES[preset]
    per_round = roofline_latency(BlockCostSpec(round_positions("surface", d), H, b, K, L), roof)
    volume = roofline_latency(BlockCostSpec(full_volume_positions(d), H, b, K, L), roof)
    return {
        "preset": preset,
        "throughput": roof.throughput,
        "d": d,
        "L": L,
        "per_round_n": round_positions("surface", d),
        "latency_per_round_s": per_round,
        "full_volume_n": full_volume_positions(d),
        "latency_full_volume_s": volume,
        "latency_full_volume_per_round_s": volume / d,
        "latency_scaling": {k: roof.throughput / v.throughput for k, v in ROOFLINES.items()},
    }


def buffer_sizing(n: int, H: int, L: int, b: int = 4, K: int = 27, variant: str = "conv", bytes_per_value: int = 1) -> dict:
    if variant not in ("conv", "depthwise"):
        raise ValueError("buffer sizing covers conv and depthwise blocks")
    w = H // b
    spatial = K * w * w if variant == "conv" else K * w
    per_layer = (spatial + 2 * H * H // b) * bytes_per_value
    resid = n * H * bytes_per_value
    return {
        "residual_per_block": resid,
        "residual_total": resid * L,
        "weights_per_layer": per_layer,
        "weights_total": per_layer * L,
    }


# --- batch-norm folding ----------------------------------------------------------------


def bn_scale_shift(gamma, beta, mean, var, eps):
    s = gamma / np.sqrt(var + eps)
    return s, beta - s * mean


def fold_batchnorm(w, b, gamma, beta, mean, var, eps: float = 1e-5, out_axis: int = 0):
    """Absorb an eval-mode batch norm that follows a linear map into its weights.

    out_axis names the output-channel axis of w.
    """
    s = gamma / np.sqrt(var + eps)
    shape = [1] * np.ndim(w)
    shape[out_axis] = -1
    return w * s.reshape(shape), s * (b - mean) + beta


def _conv_out_axis(weight, depthwise):
    return weight.ndim - 1 if depthwise else 2


def fold_model(model: Decoder) -> dict:
    """Folded inference parameters (float64).

    BN2 folds into the down projection and BN3 into the last conv step plus the
    shared conv bias. BN1 sits on the residual stream ahead of a nonlinearity
    and stays as a per-channel affine.
    """
    P, B, cfg = model.params, model.buffers, model.cfg
    dw = cfg.variant == "depthwise"
    f = {k: np.asarray(v, np.float64) for k, v in P.items() if ".bn" not in k}
    steps = len([k for k in P if k.startswith("blocks.0.conv") and k.endswith(".weight")])
    for i in range(cfg.L):
        p = f"blocks.{i}"

        def stats(name):
            return (np.asarray(x, np.float64) for x in (P[f"{p}.{name}.gamma"], P[f"{p}.{name}.beta"], B[f"{p}.{name}.mean"], B[f"{p}.{name}.var"]))

        g1, b1, m1, v1 = stats("bn1")
        f[f"{p}.affine.scale"], f[f"{p}.affine.shift"] = bn_scale_shift(g1, b1, m1, v1, cfg.bn_eps)
        f[f"{p}.down.weight"], f[f"{p}.down.bias"] = fold_batchnorm(f[f"{p}.down.weight"], f[f"{p}.down.bias"], *stats("bn2"), cfg.bn_eps, 0)
        last = f"{p}.conv{steps - 1}.weight"
        f[last], f[f"{p}.conv.bias"] = fold_batchnorm(f[last], f[f"{p}.conv.bias"], *stats("bn3"), cfg.bn_eps, _conv_out_axis(f[last], dw))
    return f


# --- FP8 E4M3 codec ----------------------------------------------------------------------

E4M3_MAX = 448.0


def _e4m3_table() -> np.ndarray:
    """Value of each of the 256 codes (sign | 4-bit exponent, bias 7 | 3-bit mantissa); NaN at S.1111.111."""
    codes = np.arange(256)
    sign = np.where(codes & 0x80, -1.0, 1.0)
    e = (codes >> 3) & 0xF
    m = codes & 0x7
    mag = np.where(e == 0, m / 8.0 * 2.0**-6, (1 + m / 8.0) * 2.0 ** (e - 7))
    vals = sign * mag
    vals[(codes & 0x7F) == 0x7F] = np.nan
    return vals


E4M3_TABLE = _e4m3_table()
_POS = E4M3_TABLE[:0x7F]  # codes 0..126, ascending from 0 to 448


def fp8_encode(x) -> np.ndarray:
    """Round to nearest E4M3 code, ties to even mantissa; saturates at +-448."""
    x = np.asarray(x, dtype=np.float64)
    a = np.minimum(np.abs(x), E4M3_MAX)
    hi = np.clip(np.searchsorted(_POS, a, side="left"), 0, len(_POS) - 1)
    lo = np.maximum(hi - 1, 0)
    dlo, dhi = a - _POS[lo], _POS[hi] - a
    # positive codes are monotone in value, so an even code has an even mantissa
    pick_hi = (dhi < dlo) | ((dhi == dlo) & (hi % 2 == 0))
    code = np.where(pick_hi, hi, lo).astype(np.uint8)
    code = np.where(np.isnan(x), 0x7F, code).astype(np.uint8)
    return code | np.where(np.signbit(x), 0x80, 0).astype(np.uint8)


def fp8_decode(codes) -> np.ndarray:
    return E4M3_TABLE[np.asarray(codes, dtype=np.uint8)]


def fp8_scale(x) -> float:
    m = float(np.max(np.abs(x))) if np.size(x) else 0.0
    return m / E4M3_MAX if m > 0 else 1.0


def fp8_roundtrip(x, scale: float | None = None):
    """Per-tensor symmetric quantize then dequantize."""
    s = fp8_scale(x) if scale is None else scale
    return fp8_decode(fp8_encode(np.asarray(x, np.float64) / s)) * s


def fp8_roundtrip_rows(x):
    """Per-shot (leading axis) dynamic scaling for activations."""
    x = np.asarray(x, np.float64)
    m = np.abs(x).reshape(len(x), -1).max(axis=1)
    s = np.where(m > 0, m / E4M3_MAX, 1.0).reshape((-1,) + (1,) * (x.ndim - 1))
    return fp8_decode(fp8_encode(x / s)) * s


def quantize_fp8(folded: dict) -> tuple[dict, dict]:
    """Weights of a folded model through the FP8 codec; biases and BN1 affine kept in full precision.

    Returns (dequantized params, per-tensor scales).
    """
    out, scales = {}, {}
    for k, v in folded.items():
        if k.endswith(".weight") or k == "embed":
            scales[k] = fp8_scale(v)
            out[k] = fp8_roundtrip(v, scales[k])
        else:
            out[k] = v
    return out, scales


def folded_forward(model: Decoder, folded: dict, syndrome, basis: str = "Z", fp8_activations: bool = False) -> np.ndarray:
    """Eval-mode logits from folded parameters (float64).

    With fp8_activations the residual stream is quantized at every block
    boundary with a per-shot scale.
    """
    cfg = model.cfg
    dw = cfg.variant == "depthwise"
    q = fp8_roundtrip_rows if fp8_activations else (lambda a: a)
    bits = model._flatten_input(syndrome)
    geo = geometry(model.code, bits.shape[1] // model._check_nodes())
    e = folded["embed"]
    h = np.where(bits[..., None].astype(bool), e[1], e[0]) * geo.input_mask[None, :, None]
    h = q(h)
    scale = 1.0 / np.sqrt(2 * cfg.L)
    for i in range(cfg.L):
        p = f"blocks.{i}"
        a = silu(h * folded[f"{p}.affine.scale"] + folded[f"{p}.affine.shift"])[0]
        a = silu(linear(a, folded[f"{p}.down.weight"], folded[f"{p}.down.bias"]))[0]
        for s, (tables, n_out) in enumerate(geo.backbone):
            a = relational_conv(a, folded[f"{p}.conv{s}.weight"], tables, n_out, dw)[0]
        a = silu(a + folded[f"{p}.conv.bias"])[0]
        h = q(h * scale + linear(a, folded[f"{p}.up.weight"], folded[f"{p}.up.bias"]))
    tables, n_out = geo.scatter
    f = relational_conv(h, folded["scatter.weight"], tables, n_out)[0] + folded["scatter.bias"]
    fm = f.reshape(len(h), geo.rounds, geo.data_nodes, -1).mean(axis=1)
    pooled = np.einsum("od,bdh->boh", geo.supports[basis], fm)
    z = silu(linear(pooled, folded["mlp1.weight"], folded["mlp1.bias"]))[0]
    return linear(z, folded["mlp2.weight"], folded["mlp2.bias"])[..., 0]


def folded_probabilities(model, folded, syndrome, basis="Z", fp8_activations=False, batch=4096) -> np.ndarray:
    out = []
    for s in range(0, len(syndrome), batch):
        z = folded_forward(model, folded, syndrome[s : s + batch], basis, fp8_activations)
        out.append(1.0 / (1.0 + np.exp(-z)))
    return np.concatenate(out)


def folded_to_decoder(model: Decoder, folded: dict) -> Decoder:
    """Pack folded parameters into a Decoder whose BN2/BN3 are exact identities.

    BN1 carries the affine as gamma=scale, beta=shift, mean 0, var 1-eps; the
    result loads with the ordinary checkpoint reader.
    """
    cfg = model.cfg
    params, buffers = {}, {}
    for k, v in model.params.items():
        if ".bn" in k:
            continue
        params[k] = folded[k].astype(np.float32)
    for i in range(cfg.L):
        p = f"blocks.{i}"
        for name in ("bn1", "bn2", "bn3"):
            ch = model.params[f"{p}.{name}.gamma"].shape
            gamma, beta = (folded[f"{p}.affine.scale"], folded[f"{p}.affine.shift"]) if name == "bn1" else (np.ones(ch), np.zeros(ch))
            params[f"{p}.{name}.gamma"] = np.asarray(gamma, np.float32)
            params[f"{p}.{name}.beta"] = np.asarray(beta, np.float32)
            buffers[f"{p}.{name}.mean"] = np.zeros(ch, np.float32)
            buffers[f"{p}.{name}.var"] = np.full(ch, 1.0 - cfg.bn_eps, np.float32)
    params = {k: params[k] for k in model.params}
    buffers = {k: buffers[k] for k in model.buffers}
    return Decoder(model.code, cfg, params, buffers)


def unpack_folded(model: Decoder) -> dict:
    """Inverse of folded_to_decoder."""
    f = {k: np.asarray(v, np.float64) for k, v in model.params.items() if ".bn" not in k}
    for i in range(model.cfg.L):
        p = f"blocks.{i}"
        f[f"{p}.affine.scale"] = np.asarray(model.params[f"{p}.bn1.gamma"], np.float64)
        f[f"{p}.affine.shift"] = np.asarray(model.params[f"{p}.bn1.beta"], np.float64)
    return f
