"""Reference decoders: exact maximum likelihood, minimum-weight lookup, product-sum BP.

Syndromes follow the global check order (X checks first). In a single-basis
mode only the checks that see errors of the relevant type are read: a Z-basis
memory experiment is decoded from Z checks (which detect X-type errors) and
predicts flips of the Z logical observables.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse

from convqec.codes import CssCode
from convqec.gf2 import rank

MAX_ML_BITS = 24  # 2**24 joint states is the enumeration budget


class SyndromeNotFound(KeyError):
    pass


@dataclass
class DecodeResult:
    flips: np.ndarray  # predicted observable flips (uint8)
    confidence: np.ndarray | None = None  # per-observable P(flip | syndrome)
    posterior: float | None = None  # probability of the returned class (ML only)
    converged: bool | None = None  # BP only
    iterations: int = 0
    correction: np.ndarray | None = None


def _bits_to_int(bits: np.ndarray) -> np.ndarray:
    bits = np.atleast_2d(np.asarray(bits, dtype=np.int64))
    return (bits << np.arange(bits.shape[1], dtype=np.int64)).sum(axis=1)


def _int_to_bits(values, width: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.int64)
    return ((values[..., None] >> np.arange(width)) & 1).astype(np.uint8)


def basis_parts(code: CssCode, basis: str):
    """(check matrix seeing the relevant errors, observable supports, global check rows)."""
    if basis == "Z":
        return code.hz.to_dense(), code.logicals_z.to_dense(), code.check_indices("Z")
    if basis == "X":
        return code.hx.to_dense(), code.logicals_x.to_dense(), code.check_indices("X")
    raise ValueError(f"basis must be X or Z, got {basis}")


def basis_syndrome(code: CssCode, basis: str, syndrome) -> np.ndarray:
    s = np.atleast_2d(np.asarray(syndrome, dtype=np.uint8))
    rows = basis_parts(code, basis)[2]
    if s.shape[1] == code.n_checks:
        return s[:, rows]
    if s.shape[1] == len(rows):
        return s
    raise ValueError(f"syndrome length {s.shape[1]} matches neither {code.n_checks} nor {len(rows)} checks")


class ExactML:
    """Exact maximum-likelihood decoding of single-round data-level noise.

    The joint distribution of (syndrome, logical class) is accumulated by a
    dynamic program over qubits: each qubit's Pauli XORs a fixed bit pattern
    into the state, so summing over all 4^n (or 2^n) errors costs
    n * 4 * 2^bits instead.

    channel: "depolarizing" (X, Y, Z each p/3) or "bitflip" (single basis, flip
    probability p). basis=None decodes the full Pauli class; "X"/"Z" reads one
    check type and predicts that basis's observables.
    """

    def __init__(self, code: CssCode, p: float, basis: str | None = None, channel: str = "depolarizing"):
        if channel not in ("depolarizing", "bitflip"):
            raise ValueError(f"unknown channel {channel}")
        if channel == "bitflip" and basis is None:
            raise ValueError("bitflip channel needs a basis")
        if code.n > 16:
            raise ValueError(f"exact ML enumeration supports n <= 16, got n={code.n}")
        self.code, self.p, self.basis, self.channel = code, p, basis, channel
        n = code.n
        if basis is None:
            hz, lz = code.hz.to_dense(), code.logicals_z.to_dense()
            hx, lx = code.hx.to_dense(), code.logicals_x.to_dense()
            # global syndrome order is X checks then Z checks; X checks see Z errors
            x_pattern = np.vstack([np.zeros_like(hx), hz, lz, np.zeros_like(lx)])
            z_pattern = np.vstack([hx, np.zeros_like(hz), np.zeros_like(lz), lx])
            self.n_synd = code.n_checks
            self.n_obs = 2 * code.k
            paulis = [(1, 0, p / 3), (1, 1, p / 3), (0, 1, p / 3)]
        else:
            h, lo, _ = basis_parts(code, basis)
            x_pattern = np.vstack([h, lo])
            z_pattern = np.zeros_like(x_pattern)
            self.n_synd = h.shape[0]
            self.n_obs = lo.shape[0]
            q = p if channel == "bitflip" else 2 * p / 3  # X or Y flips a Z check
            paulis = [(1, 0, q)]
        bits = self.n_synd + self.n_obs
        if bits > MAX_ML_BITS:
            raise ValueError(f"state space 2^{bits} exceeds the enumeration budget")
        xcol = _bits_to_int(x_pattern.T)
        zcol = _bits_to_int(z_pattern.T)
        table = np.zeros(1 << bits)
        table[0] = 1.0
        idx = np.arange(1 << bits)
        for qb in range(n):
            stay = 1.0 - sum(pr for _, _, pr in paulis)
            new = stay * table
            for fx, fz, pr in paulis:
                mask = (xcol[qb] if fx else 0) ^ (zcol[qb] if fz else 0)
                new = new + pr * table[idx ^ mask]
            table = new
        self.joint = table.reshape(1 << self.n_obs, 1 << self.n_synd).T  # (syndrome, class)
        self.best = self.joint.argmax(axis=1)
        tot = self.joint.sum(axis=1)
        self.syndrome_prob = tot
        with np.errstate(invalid="ignore", divide="ignore"):
            self.posterior = np.where(tot > 0, self.joint.max(axis=1) / tot, 1.0)
            classes = _int_to_bits(np.arange(1 << self.n_obs), self.n_obs).astype(float)
            self.marginal = np.where(tot[:, None] > 0, self.joint @ classes / tot[:, None], 0.0)

    def _index(self, syndromes):
        if self.basis is None:
            s = np.atleast_2d(np.asarray(syndromes, dtype=np.uint8))
        else:
            s = basis_syndrome(self.code, self.basis, syndromes)
        return _bits_to_int(s)

    def decode(self, syndrome) -> DecodeResult:
        i = int(self._index(syndrome)[0])
        return DecodeResult(
            _int_to_bits(self.best[i], self.n_obs),
            confidence=self.marginal[i],
            posterior=float(self.posterior[i]),
        )

    def decode_many(self, syndromes):
        i = self._index(syndromes)
        return _int_to_bits(self.best[i], self.n_obs), self.marginal[i]

    def logical_error_rate(self) -> float:
        """Exhaustively weighted block error rate: 1 - sum_s max_c P(s, c)."""
        return float(1.0 - self.joint.max(axis=1).sum())


def exact_ml_decode(code: CssCode, p: float, syndrome, basis: str | None = None) -> DecodeResult:
    return ExactML(code, p, basis).decode(syndrome)


class LookupDecoder:
    """Minimum-weight decoding of one error type from a BFS table up to a weight cutoff."""

    def __init__(self, code: CssCode, basis: str = "Z", cutoff: int | None = None):
        h, lo, _ = basis_parts(code, basis)
        self.code, self.basis = code, basis
        n = code.n
        cutoff = n if cutoff is None else cutoff
        self.n_obs = lo.shape[0]
        self.table: dict[int, tuple[int, tuple]] = {}
        target = 1 << rank(h)  # number of reachable syndromes
        hcols = _bits_to_int(h.T)
        lcols = _bits_to_int(lo.T) if self.n_obs else np.zeros(n, np.int64)
        for w in range(cutoff + 1):
            for sup in itertools.combinations(range(n), w):  # lexicographic within a weight
                s = 0
                c = 0
                for q in sup:
                    s ^= int(hcols[q])
                    c ^= int(lcols[q])
                if s not in self.table:
                    self.table[s] = (c, sup)
            if len(self.table) == target:
                break
        self.cutoff = cutoff

    def decode(self, syndrome) -> DecodeResult:
        s = int(_bits_to_int(basis_syndrome(self.code, self.basis, syndrome))[0])
        if s not in self.table:
            raise SyndromeNotFound(f"syndrome {s} not reachable within weight {self.cutoff}")
        c, sup = self.table[s]
        e = np.zeros(self.code.n, np.uint8)
        e[list(sup)] = 1
        return DecodeResult(_int_to_bits(c, self.n_obs), correction=e)

    def decode_many(self, syndromes):
        ints = _bits_to_int(basis_syndrome(self.code, self.basis, syndromes))
        out = np.zeros((len(ints), self.n_obs), np.uint8)
        for s in np.unique(ints):
            if int(s) not in self.table:
                raise SyndromeNotFound(f"syndrome {s} not reachable within weight {self.cutoff}")
            out[ints == s] = _int_to_bits(self.table[int(s)][0], self.n_obs)
        return out, None


def bp_decode(h, priors, syndrome, max_iters: int = 30):
    """Product-sum belief propagation on a binary parity-check matrix.

    Vectorized over shots. Returns (correction, posterior LLRs, converged,
    iterations). Iteration 0 is the hard decision on the priors alone.
    """
    h = np.asarray(h, dtype=np.uint8)
    s = np.atleast_2d(np.asarray(syndrome, dtype=np.uint8))
    shots = s.shape[0]
    m, n = h.shape
    rows, cols = np.nonzero(h)
    priors = np.broadcast_to(np.asarray(priors, dtype=np.float64), (n,))
    prior_llr = np.log((1 - priors) / priors)
    sign = 1.0 - 2.0 * s[:, rows]  # (shots, edges)

    def check_syndrome(e):
        return ((e.astype(np.int64) @ h.T.astype(np.int64)) & 1).astype(np.uint8)

    post = np.broadcast_to(prior_llr, (shots, n)).copy()
    e = (post < 0).astype(np.uint8)
    converged = np.all(check_syndrome(e) == s, axis=1)
    iters = np.zeros(shots, np.int64)
    v2c = np.broadcast_to(prior_llr[cols], (shots, len(rows))).copy()
    active = ~converged
    check_inc = sparse.csr_matrix((np.ones(len(rows)), (rows, np.arange(len(rows)))), shape=(m, len(rows)))
    var_inc = sparse.csr_matrix((np.ones(len(cols)), (cols, np.arange(len(cols)))), shape=(n, len(cols)))
    for it in range(1, max_iters + 1):
        if not active.any():
            break
        t = np.tanh(np.clip(v2c, -50, 50) / 2)
        # leave-one-out product over each check's edges, done in log-magnitude and sign parity
        logabs = np.log(np.maximum(np.abs(t), 1e-300))
        neg = (t < 0).astype(np.float64)
        sum_log = (check_inc @ logabs.T).T
        sum_neg = np.rint((check_inc @ neg.T).T).astype(np.int64)
        other_log = sum_log[:, rows] - logabs
        other_neg = (sum_neg[:, rows] - neg.astype(np.int64)) & 1
        val = np.clip(np.exp(other_log), 0, 1 - 1e-15) * (1 - 2 * other_neg) * sign
        c2v = 2 * np.arctanh(val)
        total = (var_inc @ c2v.T).T
        new_post = prior_llr + total
        new_v2c = new_post[:, cols] - c2v
        post = np.where(active[:, None], new_post, post)
        v2c = np.where(active[:, None], new_v2c, v2c)
        e = np.where(active[:, None], (post < 0).astype(np.uint8), e)
        ok = np.all(check_syndrome(e) == s, axis=1)
        iters = np.where(active, it, iters)
        converged = converged | (active & ok)
        active = active & ~ok
    return e, post, converged, iters


class BPDecoder:
    """Product-sum BP per error type with independent priors 2p/3 (depolarizing marginal)."""

    def __init__(self, code: CssCode, p: float, basis: str = "Z", max_iters: int = 30, channel: str = "depolarizing"):
        self.code, self.basis, self.max_iters = code, basis, max_iters
        self.h, self.lo, _ = basis_parts(code, basis)
        self.prior = 2 * p / 3 if channel == "depolarizing" else p

    def decode(self, syndrome) -> DecodeResult:
        s = basis_syndrome(self.code, self.basis, syndrome)
        e, post, conv, it = bp_decode(self.h, self.prior, s, self.max_iters)
        flips = ((self.lo.astype(np.int64) @ e[0].astype(np.int64)) & 1).astype(np.uint8)
        return DecodeResult(flips, converged=bool(conv[0]), iterations=int(it[0]), correction=e[0])

    def decode_many(self, syndromes):
        s = basis_syndrome(self.code, self.basis, syndromes)
        e, _, conv, _ = bp_decode(self.h, self.prior, s, self.max_iters)
        self.last_converged = conv
        return ((e.astype(np.int64) @ self.lo.T.astype(np.int64)) & 1).astype(np.uint8), None


# --- batch decoding ---------------------------------------------------------------


def effective_flip(q: float, rounds: int) -> float:
    """Probability that an odd number of R independent q-flips occur."""
    return (1 - (1 - 2 * q) ** rounds) / 2


def make_decoder(name: str, code: CssCode, p: float, basis: str = "Z", rounds: int = 1, **kw):
    """Single-basis decoder for data-level memory batches (syndrome = XOR over rounds)."""
    q = effective_flip(2 * p / 3, rounds)
    if name == "ml":
        return ExactML(code, q, basis, channel="bitflip")
    if name == "lookup":
        return LookupDecoder(code, basis, kw.get("cutoff"))
    if name == "bp":
        return BPDecoder(code, q, basis, kw.get("max_iters", 30), channel="bitflip")
    raise ValueError(f"unknown decoder {name}")


def accumulated_syndrome(detections: np.ndarray) -> np.ndarray:
    return np.bitwise_xor.reduce(np.asarray(detections, dtype=np.uint8), axis=1)


def decode_batch(decoder, batch, chunk: int = 1 << 16):
    """Predictions (shots, observables) and optional confidences for a SyndromeBatch."""
    synd = accumulated_syndrome(batch.detections)
    flips, conf = [], []
    for s in range(0, len(synd), chunk):
        f, c = decoder.decode_many(synd[s : s + chunk])
        flips.append(f)
        if c is not None:
            conf.append(c)
    return np.concatenate(flips), (np.concatenate(conf).astype(np.float32) if conf else None)


# --- predictions file ------------------------------------------------------------------

PRED_MAGIC = b"PRD"


def encode_predictions(flips: np.ndarray, probs: np.ndarray | None = None) -> bytes:
    """16-byte header, bit-packed flips, then optional float32 probabilities."""
    flips = np.asarray(flips, dtype=np.uint8)
    shots, obs = flips.shape
    head = struct.pack("<3sBIII", PRED_MAGIC, int(probs is not None), shots, obs, 0)
    body = np.packbits(flips, axis=None, bitorder="little").tobytes()
    if probs is not None:
        body += np.ascontiguousarray(probs, dtype="<f4").reshape(shots, obs).tobytes()
    return head + body


def decode_predictions(buf: bytes):
    magic, has_probs, shots, obs, _ = struct.unpack_from("<3sBIII", buf, 0)
    if magic != PRED_MAGIC:
        raise ValueError("not a predictions file")
    nbits = shots * obs
    nbytes = (nbits + 7) // 8
    flips = np.unpackbits(np.frombuffer(buf, np.uint8, nbytes, 16), count=nbits, bitorder="little").reshape(shots, obs)
    probs = None
    if has_probs:
        probs = np.frombuffer(buf, "<f4", nbits, 16 + nbytes).reshape(shots, obs).astype(np.float32)
    return flips, probs


def save_predictions(path, flips, probs=None) -> None:
    Path(path).write_bytes(encode_predictions(flips, probs))


def load_predictions(path):
    return decode_predictions(Path(path).read_bytes())
