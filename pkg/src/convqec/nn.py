"""Convolutional decoder network with hand-written reverse-mode gradients.

Hidden states are (shots, positions, channels) arrays. Positions enumerate
spacetime nodes round-major, matching the flattened syndrome tensor, so a
relational convolution is a gather over precomputed neighbour tables
followed by one matrix product per target kind.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from convqec.codes import CssCode, GridLayout, relation_index
from convqec.sim import check_mask


@dataclass(frozen=True)
class ModelConfig:
    H: int = 32
    L: int = 4
    b: int = 4
    variant: str = "standard"  # standard | depthwise
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    embed_std: float = 1.0

    def __post_init__(self):
        if self.H % self.b:
            raise ValueError(f"bottleneck factor b={self.b} must divide H={self.H}")
        if self.variant not in ("standard", "depthwise"):
            raise ValueError(f"unknown variant {self.variant}")

    @property
    def width(self) -> int:
        return self.H // self.b


# --- geometry ----------------------------------------------------------------


@dataclass
class Geometry:
    """Neighbour tables and pooling masks for one (code, rounds) pair."""

    code: CssCode
    rounds: int
    check_nodes: int  # per round
    data_nodes: int  # per round
    backbone: list  # list of (tables, n_out) steps; one step for grids, two for tori
    scatter: tuple  # (tables, n_out)
    input_mask: np.ndarray  # (rounds * check_nodes,) 1 on real checks
    supports: dict = field(default_factory=dict)  # basis -> (n_obs, data_nodes) averaging matrix

    @property
    def is_grid(self) -> bool:
        return isinstance(self.code.layout, GridLayout)

    @property
    def positions(self) -> int:
        return self.rounds * self.check_nodes


def _tables(index, rounds):
    n_in = rounds * index.nodes_per_round(index.source_side)
    return prepare_tables(index.gather_tables(rounds), n_in)


def _build_geometry(code: CssCode, rounds: int) -> Geometry:
    grid = isinstance(code.layout, GridLayout)
    if grid:
        side = code.layout.side
        check_nodes = side * side
        c2c = relation_index(code, "check_to_check", (-1, 0, 1))
        backbone = [(_tables(c2c, rounds), rounds * check_nodes)]
        sc = relation_index(code, "check_to_data", (-1, 0, 1))
    else:
        check_nodes = code.n_checks
        c2d = relation_index(code, "check_to_data", (0, -1))
        d2c = relation_index(code, "data_to_check", (0, 1))
        backbone = [(_tables(c2d, rounds), rounds * code.n), (_tables(d2c, rounds), rounds * check_nodes)]
        sc = c2d
    mask = np.tile(check_mask(code).ravel(), rounds).astype(np.float64)
    geo = Geometry(code, rounds, check_nodes, code.n, backbone, (_tables(sc, rounds), rounds * code.n), mask)
    for basis, logicals in (("Z", code.logicals_z), ("X", code.logicals_x)):
        m = logicals.to_dense().astype(np.float64)
        if m.shape[0] and (m.sum(axis=1) == 0).any():
            raise ValueError("observable support is empty")
        geo.supports[basis] = m / np.maximum(m.sum(axis=1, keepdims=True), 1)
    return geo


@lru_cache(maxsize=32)
def _geometry_cached(code_key: int, rounds: int):
    return _build_geometry(_CODES[code_key], rounds)


_CODES: dict[int, CssCode] = {}


def geometry(code: CssCode, rounds: int) -> Geometry:
    _CODES[id(code)] = code
    return _geometry_cached(id(code), rounds)


def kernel_shapes(code: CssCode) -> list[tuple[int, int]]:
    """(target kinds, relations per kind) for each backbone conv step."""
    if isinstance(code.layout, GridLayout):
        return [(1, 27)]
    return [(2, 12), (2, 12)]


def scatter_shape(code: CssCode) -> tuple[int, int]:
    return (1, 12) if isinstance(code.layout, GridLayout) else (2, 12)


# --- primitive layers (forward returns cache, backward consumes it) -------------


def silu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s


def silu_backward(dy, x, s):
    return dy * s * (1 + x * (1 - s))


def linear(x, w, b):
    return x @ w.T + b


def linear_backward(dy, x, w):
    flat_x = x.reshape(-1, x.shape[-1])
    flat_dy = dy.reshape(-1, dy.shape[-1])
    return dy @ w, flat_dy.T @ flat_x, flat_dy.sum(axis=0)


def _colsum(x):
    return x.reshape(-1, x.shape[-1]).sum(axis=0)


def _coldot(a, b):
    c = a.shape[-1]
    return np.einsum("ij,ij->j", a.reshape(-1, c), b.reshape(-1, c))


def batchnorm(x, gamma, beta, state, train, momentum, eps):
    if train:
        m = x.shape[0] * x.shape[1]
        mu = _colsum(x) / m
        xc = x - mu
        var = _coldot(xc, xc) / m
        state["mean"] = (1 - momentum) * state["mean"] + momentum * mu
        state["var"] = (1 - momentum) * state["var"] + momentum * var
    else:
        mu, var = state["mean"], state["var"]
        xc = x - mu
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return gamma * xhat + beta, (xhat, inv, train)


def batchnorm_backward(dy, gamma, cache):
    xhat, inv, train = cache
    dgamma = _coldot(dy, xhat)
    dbeta = _colsum(dy)
    dxhat = dy * gamma
    if not train:
        return dxhat * inv, dgamma, dbeta
    m = dy.shape[0] * dy.shape[1]
    dx = inv / m * (m * dxhat - _colsum(dxhat) - xhat * _coldot(dxhat, xhat))
    return dx, dgamma, dbeta


class ConvTable:
    """One target kind's gather table, trimmed to relations that touch real nodes.

    A relation whose every source is padding (e.g. temporal offsets when
    R=1) contributes nothing and is skipped; its weight gradient is zero.
    """

    def __init__(self, targets, nbr, n_in):
        nbr = np.asarray(nbr)
        self.targets = np.asarray(targets)
        self.active = np.flatnonzero((nbr >= 0).any(axis=1))
        nb = nbr[self.active]  # (k, P)
        self.n_in = n_in
        self.index = np.where(nb < 0, n_in, nb).T.copy()  # (P, k); n_in is the zero row
        k, p = nb.shape
        # inverse table: slot (target, relation) reading each source; p*k is the zero slot.
        # Each relation maps targets injectively, so one slot per (source, relation).
        self.inverse = np.full((k, n_in), p * k, dtype=np.int64)
        for r in range(k):
            ok = nb[r] >= 0
            self.inverse[r, nb[r][ok]] = np.flatnonzero(ok) * k + r


def prepare_tables(tables, n_in):
    return [t if isinstance(t, ConvTable) else ConvTable(t[0], t[1], n_in) for t in tables]


def relational_conv(x, weight, tables, n_out, depthwise=False):
    """h'_v = sum over relations r of W[kind(v), r] h_{nbr_r(v)} (zero where padded).

    weight: (kinds, K, out, in) or (kinds, K, channels) when depthwise.
    """
    shots, n_in, c_in = x.shape
    tables = prepare_tables(tables, n_in)
    c_out = weight.shape[-1] if depthwise else weight.shape[2]
    xp = np.concatenate([x, np.zeros((shots, 1, c_in), x.dtype)], axis=1)
    out = np.zeros((shots, n_out, c_out), dtype=x.dtype)
    gathered = []
    for g, tab in enumerate(tables):
        xg = np.take(xp, tab.index, axis=1)  # (shots, P, k, in)
        w = weight[g][tab.active]
        p, k = tab.index.shape
        if depthwise:
            y = np.einsum("bpkc,kc->bpc", xg, w)
        else:
            y = (xg.reshape(shots * p, k * c_in) @ w.transpose(0, 2, 1).reshape(k * c_in, c_out)).reshape(shots, p, c_out)
        out[:, tab.targets] = y
        gathered.append(xg)
    return out, (tables, gathered)


def relational_conv_backward(dy, weight, tables, cache, n_in, depthwise=False):
    tables, gathered = cache
    shots = dy.shape[0]
    c_in = gathered[0].shape[-1]
    dx = np.zeros((shots, n_in, c_in), dtype=dy.dtype)
    dw = np.zeros_like(weight)
    for g, tab in enumerate(tables):
        xg = gathered[g]
        dyg = dy[:, tab.targets]  # (shots, P, out)
        p, k = tab.index.shape
        w = weight[g][tab.active]
        if depthwise:
            dw[g][tab.active] = np.einsum("bpkc,bpc->kc", xg, dyg)
            dxg = dyg[:, :, None, :] * w[None, None]
        else:
            c_out = dyg.shape[-1]
            flat = xg.reshape(shots * p, k * c_in)
            dflat = dyg.reshape(shots * p, c_out)
            dw[g][tab.active] = (flat.T @ dflat).reshape(k, c_in, c_out).transpose(0, 2, 1)
            dxg = (dflat @ w.transpose(0, 2, 1).reshape(k * c_in, c_out).T).reshape(shots, p, k, c_in)
        # sum every (target, relation) slot back onto its source node
        slots = np.concatenate([dxg.reshape(shots, p * k, c_in), np.zeros((shots, 1, c_in), dy.dtype)], axis=1)
        dx += np.take(slots, tab.inverse, axis=1).sum(axis=1)
    return dx, dw


# --- the model ---------------------------------------------------------------------


def init_params(code: CssCode, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    H, C = cfg.H, cfg.width
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}

    def gauss(shape, fan_in):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)

    def bn(name, ch):
        params[f"{name}.gamma"] = np.ones(ch)
        params[f"{name}.beta"] = np.zeros(ch)
        buffers[f"{name}.mean"] = np.zeros(ch)
        buffers[f"{name}.var"] = np.ones(ch)

    params["embed"] = rng.normal(0.0, cfg.embed_std, size=(2, H))
    for i in range(cfg.L):
        p = f"blocks.{i}"
        bn(f"{p}.bn1", H)
        params[f"{p}.down.weight"] = gauss((C, H), H)
        params[f"{p}.down.bias"] = np.zeros(C)
        bn(f"{p}.bn2", C)
        for s, (kinds, k) in enumerate(kernel_shapes(code)):
            if cfg.variant == "depthwise":
                params[f"{p}.conv{s}.weight"] = gauss((kinds, k, C), k)
            else:
                params[f"{p}.conv{s}.weight"] = gauss((kinds, k, C, C), k * C)
        params[f"{p}.conv.bias"] = np.zeros(C)
        bn(f"{p}.bn3", C)
        params[f"{p}.up.weight"] = gauss((H, C), C)
        params[f"{p}.up.bias"] = np.zeros(H)
    kinds, k = scatter_shape(code)
    params["scatter.weight"] = gauss((kinds, k, H, H), k * H)
    params["scatter.bias"] = np.zeros(H)
    params["mlp1.weight"] = gauss((2 * H, H), H)
    params["mlp1.bias"] = np.zeros(2 * H)
    params["mlp2.weight"] = gauss((1, 2 * H), 2 * H)
    params["mlp2.bias"] = np.zeros(1)
    cast = lambda d: {k: v.astype(dtype) for k, v in d.items()}  # noqa: E731
    return cast(params), cast(buffers)


class Decoder:
    """Embedding, L bottleneck blocks and the scatter/pool/MLP readout."""

    def __init__(self, code: CssCode, cfg: ModelConfig, params=None, buffers=None, seed: int = 0, dtype=np.float32):
        self.code = code
        self.cfg = cfg
        if params is None:
            params, buffers = init_params(code, cfg, seed, dtype)
        self.params = params
        self.buffers = buffers
        self._cache = None

    @property
    def dtype(self):
        return self.params["embed"].dtype

    def astype(self, dtype) -> "Decoder":
        return Decoder(
            self.code,
            self.cfg,
            {k: v.astype(dtype) for k, v in self.params.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )

    def copy(self) -> "Decoder":
        return self.astype(self.dtype)

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    # -- input handling

    def _flatten_input(self, syndrome: np.ndarray) -> np.ndarray:
        """Accept dense syndrome tensors or raw (shots, rounds, checks) detections."""
        syndrome = np.asarray(syndrome)
        lay = self.code.layout
        if syndrome.ndim == 3 and syndrome.shape[2] == self.code.n_checks and not (
            isinstance(lay, GridLayout) and syndrome.shape[2] == lay.side
        ):
            from convqec.sim import SyndromeBatch, syndrome_to_tensor

            fake = SyndromeBatch(syndrome.astype(np.uint8), np.zeros((syndrome.shape[0], 0), np.uint8))
            syndrome = syndrome_to_tensor(fake, self.code)
        expected = (lay.side, lay.side) if isinstance(lay, GridLayout) else (2, lay.l, lay.m)
        if tuple(syndrome.shape[2:]) != expected:
            raise ValueError(f"syndrome shape {syndrome.shape} does not match code geometry {expected}")
        return syndrome.reshape(syndrome.shape[0], syndrome.shape[1], -1).reshape(syndrome.shape[0], -1)

    # -- forward pieces

    def embed(self, bits: np.ndarray, geo: Geometry) -> np.ndarray:
        e = self.params["embed"]
        h = np.where(bits[..., None].astype(bool), e[1], e[0])
        return h * geo.input_mask.astype(self.dtype)[None, :, None]

    def _conv(self, i, a, geo, train):
        p, dw = f"blocks.{i}", self.cfg.variant == "depthwise"
        caches = []
        h = a
        n_in = a.shape[1]
        for s, (tables, n_out) in enumerate(geo.backbone):
            h_new, gathered = relational_conv(h, self.params[f"{p}.conv{s}.weight"], tables, n_out, dw)
            caches.append((gathered, h.shape[1]))
            h = h_new
        del n_in
        return h + self.params[f"{p}.conv.bias"], caches

    def block(self, i: int, x: np.ndarray, geo: Geometry, train: bool):
        cfg, P, B = self.cfg, self.params, self.buffers
        p = f"blocks.{i}"
        scale = 1.0 / np.sqrt(2 * cfg.L)
        c = {}

        def bn(name, v):
            st = {"mean": B[f"{p}.{name}.mean"], "var": B[f"{p}.{name}.var"]}
            y, cache = batchnorm(v, P[f"{p}.{name}.gamma"], P[f"{p}.{name}.beta"], st, train, cfg.bn_momentum, cfg.bn_eps)
            if train:
                B[f"{p}.{name}.mean"] = st["mean"].astype(self.dtype)
                B[f"{p}.{name}.var"] = st["var"].astype(self.dtype)
            return y, cache

        n1, c["bn1"] = bn("bn1", x)
        a1, c["s1"] = silu(n1)
        c["n1"], c["a1"] = n1, a1
        d = linear(a1, P[f"{p}.down.weight"], P[f"{p}.down.bias"])
        n2, c["bn2"] = bn("bn2", d)
        a2, c["s2"] = silu(n2)
        c["n2"], c["a2"] = n2, a2
        conv, c["conv"] = self._conv(i, a2, geo, train)
        n3, c["bn3"] = bn("bn3", conv)
        a3, c["s3"] = silu(n3)
        c["n3"], c["a3"] = n3, a3
        u = linear(a3, P[f"{p}.up.weight"], P[f"{p}.up.bias"])
        return x * scale + u, c

    def block_backward(self, i, dout, geo, c, grads):
        P = self.params
        p = f"blocks.{i}"
        dw = self.cfg.variant == "depthwise"
        scale = 1.0 / np.sqrt(2 * self.cfg.L)
        da3, grads[f"{p}.up.weight"], grads[f"{p}.up.bias"] = linear_backward(dout, c["a3"], P[f"{p}.up.weight"])
        dn3 = silu_backward(da3, c["n3"], c["s3"])
        dconv, grads[f"{p}.bn3.gamma"], grads[f"{p}.bn3.beta"] = batchnorm_backward(dn3, P[f"{p}.bn3.gamma"], c["bn3"])
        grads[f"{p}.conv.bias"] = _colsum(dconv)
        dh = dconv
        for s in reversed(range(len(geo.backbone))):
            tables, _ = geo.backbone[s]
            gathered, n_in = c["conv"][s]
            dh, grads[f"{p}.conv{s}.weight"] = relational_conv_backward(dh, P[f"{p}.conv{s}.weight"], tables, gathered, n_in, dw)
        dn2 = silu_backward(dh, c["n2"], c["s2"])
        dd, grads[f"{p}.bn2.gamma"], grads[f"{p}.bn2.beta"] = batchnorm_backward(dn2, P[f"{p}.bn2.gamma"], c["bn2"])
        da1, grads[f"{p}.down.weight"], grads[f"{p}.down.bias"] = linear_backward(dd, c["a1"], P[f"{p}.down.weight"])
        dn1 = silu_backward(da1, c["n1"], c["s1"])
        dx, grads[f"{p}.bn1.gamma"], grads[f"{p}.bn1.beta"] = batchnorm_backward(dn1, P[f"{p}.bn1.gamma"], c["bn1"])
        return dx + dout * scale

    def features(self, syndrome, train: bool = False):
        """Backbone output (shots, positions, H) before the readout."""
        bits = self._flatten_input(syndrome)
        rounds = bits.shape[1] // self._check_nodes()
        geo = geometry(self.code, rounds)
        h = self.embed(bits, geo)
        caches = []
        for i in range(self.cfg.L):
            h, c = self.block(i, h, geo, train)
            caches.append(c)
        return h, (bits, geo, caches)

    def _check_nodes(self) -> int:
        lay = self.code.layout
        return lay.side**2 if isinstance(lay, GridLayout) else self.code.n_checks

    def readout(self, h, geo: Geometry, basis: str):
        P = self.params
        tables, n_out = geo.scatter
        f, gathered = relational_conv(h, P["scatter.weight"], tables, n_out)
        f = f + P["scatter.bias"]
        shots = h.shape[0]
        fm = f.reshape(shots, geo.rounds, geo.data_nodes, -1).mean(axis=1)
        pool = geo.supports[basis].astype(self.dtype)
        pooled = np.einsum("od,bdh->boh", pool, fm)
        z1 = linear(pooled, P["mlp1.weight"], P["mlp1.bias"])
        a1, s1 = silu(z1)
        logits = linear(a1, P["mlp2.weight"], P["mlp2.bias"])[..., 0]
        return logits, (gathered, h.shape[1], pool, pooled, z1, s1, a1)

    def readout_backward(self, dlogits, geo, cache, grads):
        P = self.params
        gathered, n_in, pool, pooled, z1, s1, a1 = cache
        da1, grads["mlp2.weight"], grads["mlp2.bias"] = linear_backward(dlogits[..., None], a1, P["mlp2.weight"])
        dz1 = silu_backward(da1, z1, s1)
        dpooled, grads["mlp1.weight"], grads["mlp1.bias"] = linear_backward(dz1, pooled, P["mlp1.weight"])
        dfm = np.einsum("od,boh->bdh", pool, dpooled)
        shots = dfm.shape[0]
        df = np.broadcast_to(dfm[:, None] / geo.rounds, (shots, geo.rounds) + dfm.shape[1:]).reshape(shots, geo.rounds * geo.data_nodes, -1)
        grads["scatter.bias"] = _colsum(df)
        dh, grads["scatter.weight"] = relational_conv_backward(df, P["scatter.weight"], geo.scatter[0], gathered, n_in)
        return dh

    def forward(self, syndrome, basis: str = "Z", train: bool = False) -> np.ndarray:
        h, (bits, geo, caches) = self.features(syndrome, train)
        logits, rcache = self.readout(h, geo, basis)
        self._cache = (bits, geo, caches, rcache)
        return logits

    def backward(self, dlogits: np.ndarray) -> dict:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        bits, geo, caches, rcache = self._cache
        grads: dict[str, np.ndarray] = {}
        dh = self.readout_backward(dlogits.astype(self.dtype), geo, rcache, grads)
        for i in reversed(range(self.cfg.L)):
            dh = self.block_backward(i, dh, geo, caches[i], grads)
        dh = dh * geo.input_mask.astype(self.dtype)[None, :, None]
        on = bits.astype(bool)[..., None]
        grads["embed"] = np.stack([np.where(on, 0, dh).sum(axis=(0, 1)), np.where(on, dh, 0).sum(axis=(0, 1))])
        self._cache = None
        return {k: grads[k].astype(self.dtype) for k in self.params}

    # -- persistence

    def save(self, path) -> None:
        save_checkpoint(path, self)

    @classmethod
    def load(cls, path) -> "Decoder":
        return load_checkpoint(path)


def bce_with_logits(logits, labels):
    """Mean binary cross-entropy and its gradient w.r.t. the logits."""
    z = logits.astype(np.float64)
    y = labels.astype(np.float64)
    loss = np.mean(np.logaddexp(0.0, z) - y * z)
    grad = (1.0 / (1.0 + np.exp(-z)) - y) / z.size
    return float(loss), grad


def forward(model: Decoder, syndrome, mode: str = "eval", basis: str = "Z") -> np.ndarray:
    if mode not in ("train", "eval"):
        raise ValueError("mode must be train or eval")
    return model.forward(syndrome, basis, train=mode == "train")


def backward(model: Decoder, syndrome, labels, basis: str = "Z", mode: str = "train"):
    """Loss and exact parameter gradients for one batch (train-mode batch norm)."""
    if mode != "train":
        raise ValueError("backward requires train mode")
    logits = model.forward(syndrome, basis, train=True)
    loss, dlogits = bce_with_logits(logits, np.asarray(labels))
    return loss, model.backward(dlogits)


def probabilities(model: Decoder, syndrome, basis: str = "Z", batch: int = 4096) -> np.ndarray:
    out = []
    for s in range(0, len(syndrome), batch):
        z = model.forward(syndrome[s : s + batch], basis, train=False).astype(np.float64)
        out.append(1.0 / (1.0 + np.exp(-z)))
    return np.concatenate(out)


def check_gradients(model: Decoder, syndrome, labels, basis: str = "Z", eps: float = 1e-3, per_tensor: int = 4, seed: int = 0, floor: float = 1e-5) -> dict:
    """Central finite differences against backward() for sampled entries of every tensor.

    Returns {param name: worst relative error}, with error
    |num - ana| / max(floor, |num| + |ana|). The floor covers biases feeding
    straight into batch norm, whose exact gradient is 0.
    """
    work = model.astype(np.float64)
    _, grads = backward(work, syndrome, labels, basis)
    rng = np.random.default_rng(seed)
    out = {}
    for name, g in grads.items():
        p = work.params[name]
        worst = 0.0
        for i in rng.choice(g.size, min(per_tensor, g.size), replace=False):
            idx = np.unravel_index(i, g.shape)
            old = p[idx]
            p[idx] = old + eps
            lp, _ = backward(work, syndrome, labels, basis)
            p[idx] = old - eps
            lm, _ = backward(work, syndrome, labels, basis)
            p[idx] = old
            num = (lp - lm) / (2 * eps)
            worst = max(worst, abs(num - g[idx]) / max(floor, abs(num) + abs(g[idx])))
        out[name] = float(worst)
    return out


# --- checkpoints ---------------------------------------------------------------------

CKPT_MAGIC = b"CQCK"


def save_checkpoint(path, model: Decoder, extra: dict | None = None) -> None:
    """JSON header (config, tensor manifest) followed by little-endian float32 payload."""
    manifest = []
    blobs = []
    offset = 0
    for group, tensors in (("params", model.params), ("buffers", model.buffers)):
        for name, arr in tensors.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            manifest.append({"name": name, "group": group, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
    header = {"config": asdict(model.cfg), "code": model.code.to_json(), "tensors": manifest, "extra": extra or {}}
    head = json.dumps(header, sort_keys=True).encode()
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs))


def read_checkpoint_header(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    (n,) = struct.unpack_from("<Q", buf, 4)
    return json.loads(buf[12 : 12 + n])


def load_checkpoint(path) -> Decoder:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    (n,) = struct.unpack_from("<Q", buf, 4)
    header = json.loads(buf[12 : 12 + n])
    base = 12 + n
    groups: dict[str, dict] = {"params": {}, "buffers": {}}
    for t in header["tensors"]:
        arr = np.frombuffer(buf, "<f4", int(np.prod(t["shape"], dtype=np.int64)), base + t["offset"])
        groups[t["group"]][t["name"]] = arr.reshape(t["shape"]).astype(np.float32)
    code = CssCode.from_json(header["code"])
    return Decoder(code, ModelConfig(**header["config"]), groups["params"], groups["buffers"])
