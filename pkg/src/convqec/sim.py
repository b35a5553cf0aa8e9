"""Memory-experiment circuits and Pauli-frame sampling of detection events."""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from convqec.codes import CssCode, GridLayout, TorusLayout

GATES = {"R", "H", "CX", "M"}
NOISE = {"DEPOLARIZE1", "DEPOLARIZE2", "X_ERROR", "Z_ERROR", "MEASURE_NOISE"}
ANNOTATIONS = {"DETECTOR", "OBSERVABLE_INCLUDE", "TICK"}

CHUNK = 1 << 16  # shots per RNG stream; fixed so output never depends on threading


@dataclass(frozen=True)
class Instruction:
    name: str
    targets: tuple = ()
    arg: float | None = None  # noise probability, or observable id
    coords: tuple | None = None  # detector (round, check)

    def __post_init__(self):
        if self.name not in GATES | NOISE | ANNOTATIONS:
            raise ValueError(f"unknown instruction {self.name}")
        if self.name in NOISE and not (0.0 <= self.arg <= 1.0):
            raise ValueError(f"probability out of range in {self.name}: {self.arg}")


@dataclass(frozen=True)
class NoiseModel:
    kind: str  # data_level | phenomenological | circuit_level
    p: float
    q: float | None = None

    def __post_init__(self):
        if self.kind not in ("data_level", "phenomenological", "circuit_level"):
            raise ValueError(f"unknown noise kind {self.kind}")
        if not 0 <= self.p <= 1 or (self.q is not None and not 0 <= self.q <= 1):
            raise ValueError("noise probabilities must lie in [0, 1]")

    @property
    def measurement_flip(self) -> float:
        return self.p if self.q is None else self.q

    def with_p(self, p: float) -> "NoiseModel":
        return NoiseModel(self.kind, p, None if self.q is None else self.q * (p / self.p if self.p else 1))

    @classmethod
    def parse(cls, text: str) -> "NoiseModel":
        """'circuit:0.002', 'data:0.1', 'phenom:0.01' or 'phenom:0.01:0.02'."""
        parts = text.split(":")
        kinds = {"circuit": "circuit_level", "data": "data_level", "phenom": "phenomenological"}
        kind = kinds.get(parts[0], parts[0])
        q = float(parts[2]) if len(parts) > 2 else None
        return cls(kind, float(parts[1]), q)

    def __str__(self) -> str:
        short = {"circuit_level": "circuit", "data_level": "data", "phenomenological": "phenom"}[self.kind]
        return f"{short}:{self.p:g}" + (f":{self.q:g}" if self.q is not None else "")


@dataclass
class Circuit:
    instructions: list = field(default_factory=list)
    num_qubits: int = 0
    rounds: int = 0
    n_checks: int = 0
    basis: str = "Z"
    num_observables: int = 0

    @property
    def num_measurements(self) -> int:
        return sum(len(i.targets) for i in self.instructions if i.name == "M")

    @property
    def round_markers(self) -> list[int]:
        return [i for i, ins in enumerate(self.instructions) if ins.name == "TICK"]

    def detectors(self) -> list[Instruction]:
        return [i for i in self.instructions if i.name == "DETECTOR"]

    def observables(self) -> list[Instruction]:
        return [i for i in self.instructions if i.name == "OBSERVABLE_INCLUDE"]

    def copy(self) -> "Circuit":
        return Circuit(list(self.instructions), self.num_qubits, self.rounds, self.n_checks, self.basis, self.num_observables)

    def insert_after_tick(self, round_index: int, ins: Instruction) -> "Circuit":
        """Copy with `ins` placed at the start of round `round_index` (0-based)."""
        out = self.copy()
        pos = self.round_markers[round_index] + 1
        out.instructions.insert(pos, ins)
        return out

    def to_text(self) -> str:
        lines = [f"# convqec qubits={self.num_qubits} rounds={self.rounds} checks={self.n_checks} "
                 f"basis={self.basis} observables={self.num_observables}"]
        m_count = 0
        for ins in self.instructions:
            if ins.name == "DETECTOR":
                recs = " ".join(f"rec[{r - m_count}]" for r in ins.targets)
                lines.append(f"DETECTOR({ins.coords[0]}, {ins.coords[1]}) {recs}")
            elif ins.name == "OBSERVABLE_INCLUDE":
                recs = " ".join(f"rec[{r - m_count}]" for r in ins.targets)
                lines.append(f"OBSERVABLE_INCLUDE({int(ins.arg)}) {recs}")
            elif ins.name == "TICK":
                lines.append("TICK")
            else:
                t = " ".join(str(q) for q in ins.targets)
                lines.append(f"{ins.name} {t}" + (f" [{ins.arg!r}]" if ins.arg is not None else ""))
                if ins.name == "M":
                    m_count += len(ins.targets)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Circuit":
        circ = cls()
        m_count = 0
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for key, val in re.findall(r"(\w+)=(\w+)", line):
                    if key == "qubits":
                        circ.num_qubits = int(val)
                    elif key in ("rounds", "observables"):
                        setattr(circ, "rounds" if key == "rounds" else "num_observables", int(val))
                    elif key == "checks":
                        circ.n_checks = int(val)
                    elif key == "basis":
                        circ.basis = val
                continue
            mm = re.match(r"(\w+)(?:\(([^)]*)\))?\s*(.*)$", line)
            name, paren, rest = mm.group(1), mm.group(2), mm.group(3)
            if name in ("DETECTOR", "OBSERVABLE_INCLUDE"):
                recs = tuple(m_count + int(r) for r in re.findall(r"rec\[(-?\d+)\]", rest))
                if name == "DETECTOR":
                    coords = tuple(int(float(c)) for c in paren.split(","))
                    circ.instructions.append(Instruction(name, recs, coords=coords))
                else:
                    circ.instructions.append(Instruction(name, recs, arg=int(paren)))
                continue
            if name == "TICK":
                circ.instructions.append(Instruction("TICK"))
                continue
            arg = None
            pm = re.search(r"\[([^\]]+)\]", rest)
            if pm:
                arg = float(pm.group(1))
                rest = rest[: pm.start()]
            targets = tuple(int(t) for t in rest.split())
            circ.instructions.append(Instruction(name, targets, arg))
            if name == "M":
                m_count += len(targets)
        return circ

    def to_stim_text(self) -> str:
        """Translate into the stim circuit language (MEASURE_NOISE merges into M(p))."""
        out = []
        pending: dict[int, float] = {}
        m_count = 0
        for ins in self.instructions:
            if ins.name == "MEASURE_NOISE":
                for q in ins.targets:
                    pending[q] = ins.arg
            elif ins.name == "M":
                groups: dict = {}
                for q in ins.targets:
                    groups.setdefault(pending.pop(q, 0.0), []).append(q)
                # stim needs one M per probability; keep measurement order stable
                if len(groups) == 1:
                    (p, qs), = groups.items()
                    out.append(f"M({p!r}) " + " ".join(map(str, qs)) if p else "M " + " ".join(map(str, qs)))
                else:
                    for q in ins.targets:
                        p = next(pp for pp, qs in groups.items() if q in qs)
                        out.append(f"M({p!r}) {q}" if p else f"M {q}")
                m_count += len(ins.targets)
            elif ins.name == "DETECTOR":
                out.append(f"DETECTOR({ins.coords[0]}, {ins.coords[1]}) " + " ".join(f"rec[{r - m_count}]" for r in ins.targets))
            elif ins.name == "OBSERVABLE_INCLUDE":
                out.append(f"OBSERVABLE_INCLUDE({int(ins.arg)}) " + " ".join(f"rec[{r - m_count}]" for r in ins.targets))
            elif ins.name == "TICK":
                out.append("TICK")
            else:
                t = " ".join(map(str, ins.targets))
                out.append(f"{ins.name}({ins.arg!r}) {t}" if ins.arg is not None else f"{ins.name} {t}")
        return "\n".join(out) + "\n"


# --- circuit construction ----------------------------------------------------


def _surface_schedule(code: CssCode) -> list[list[tuple[int, int]]]:
    """Four CX layers of (check, data) pairs for the rotated surface code.

    X checks visit corners NW, NE, SW, SE and Z checks NW, SW, NE, SE, so
    each check's hook error runs perpendicular to the logical it could extend.
    """
    lay: GridLayout = code.layout
    d = lay.d
    x_order = [(-1, -1), (-1, 0), (0, -1), (0, 0)]
    z_order = [(-1, -1), (0, -1), (-1, 0), (0, 0)]
    layers = [[] for _ in range(4)]
    for g, (i, j, kind) in enumerate(lay.check_position):
        order = x_order if kind == "X" else z_order
        for step, (di, dj) in enumerate(order):
            r, c = i + di, j + dj
            if 0 <= r < d and 0 <= c < d:
                layers[step].append((g, r * d + c))
    return layers


def _colored_schedule(code: CssCode) -> list[list[tuple[int, int]]]:
    """Z checks first, then X checks; greedy edge coloring within each half."""
    layers_all = []
    for kind in ("Z", "X"):
        h = code.check_matrix(kind).to_dense()
        layers: list[list] = []
        busy: list[set] = []
        for row, g in enumerate(code.check_indices(kind)):
            for q in np.flatnonzero(h[row]):
                for li, used in enumerate(busy):
                    if g not in used and ("q", q) not in used:
                        break
                else:
                    layers.append([])
                    busy.append(set())
                    li = len(layers) - 1
                layers[li].append((int(g), int(q)))
                busy[li].update({g, ("q", q)})
        layers_all.extend(layers)
    return layers_all


def extraction_schedule(code: CssCode) -> list[list[tuple[int, int]]]:
    if isinstance(code.layout, GridLayout):
        return _surface_schedule(code)
    if isinstance(code.layout, TorusLayout):
        return _colored_schedule(code)
    raise ValueError("no extraction schedule for this layout")


def build_memory_circuit(code: CssCode, rounds: int, basis: str, noise: NoiseModel) -> Circuit:
    """R rounds of syndrome extraction followed by transversal data readout.

    Detector (r, c) compares check c between rounds r-1 and r; round 0 only
    has detectors for checks of the memory basis. The final data readout is
    folded into round R-1 so the syndrome has exactly R slices.
    """
    if rounds < 1:
        raise ValueError("need at least one round")
    if basis not in ("X", "Z"):
        raise ValueError("basis must be X or Z")
    n, nc = code.n, code.n_checks
    data = tuple(range(n))
    anc = tuple(range(n, n + nc))
    x_anc = tuple(n + g for g in code.check_indices("X"))
    kind_of = ["X"] * code.n_x_checks + ["Z"] * code.n_z_checks
    schedule = extraction_schedule(code)
    p = noise.p
    circuit_level = noise.kind == "circuit_level"
    ins: list[Instruction] = []

    def add(name, targets, arg=None):
        if targets:
            ins.append(Instruction(name, tuple(targets), arg))

    def noisy(name, targets, prob):
        if prob > 0 and targets:
            ins.append(Instruction(name, tuple(targets), prob))

    add("R", data)
    if basis == "X":
        add("H", data)
    if circuit_level:
        noisy("DEPOLARIZE1", data, p)
    m_index = 0
    last = {}
    for r in range(rounds):
        ins.append(Instruction("TICK"))
        if noise.kind in ("data_level", "phenomenological"):
            noisy("DEPOLARIZE1", data, p)
        add("R", anc)
        if circuit_level:
            noisy("DEPOLARIZE1", anc, p)
        add("H", x_anc)
        if circuit_level:
            noisy("DEPOLARIZE1", x_anc, p)
            noisy("DEPOLARIZE1", [q for q in data + anc if q not in set(x_anc)], p)
        for layer in schedule:
            pairs = []
            for g, q in layer:
                pairs += [n + g, q] if kind_of[g] == "X" else [q, n + g]
            add("CX", pairs)
            if circuit_level:
                noisy("DEPOLARIZE2", pairs, p)
                idle = sorted(set(data + anc) - set(pairs))
                noisy("DEPOLARIZE1", idle, p)
        add("H", x_anc)
        if circuit_level:
            noisy("DEPOLARIZE1", x_anc, p)
        if noise.kind in ("phenomenological", "circuit_level"):
            noisy("MEASURE_NOISE", anc, noise.measurement_flip)
        add("M", anc)
        current = {g: m_index + g for g in range(nc)}
        m_index += nc
        last_round = r == rounds - 1
        for g in range(nc):
            if last_round and kind_of[g] == basis:
                continue  # emitted after the data readout
            if r == 0:
                if kind_of[g] == basis:
                    ins.append(Instruction("DETECTOR", (current[g],), coords=(r, g)))
            else:
                ins.append(Instruction("DETECTOR", (last[g], current[g]), coords=(r, g)))
        prev, last = last, current
    if basis == "X":
        add("H", data)
        if circuit_level:
            noisy("DEPOLARIZE1", data, p)
    if noise.kind in ("phenomenological", "circuit_level"):
        noisy("MEASURE_NOISE", data, noise.measurement_flip)
    add("M", data)
    data_rec = m_index
    h = code.check_matrix(basis).to_dense()
    for row, g in enumerate(code.check_indices(basis)):
        recs = [data_rec + int(q) for q in np.flatnonzero(h[row])]
        if rounds > 1:
            recs.append(prev[g])
        ins.append(Instruction("DETECTOR", tuple(recs), coords=(rounds - 1, int(g))))
    logicals = (code.logicals_z if basis == "Z" else code.logicals_x).to_dense()
    for i, row in enumerate(logicals):
        ins.append(Instruction("OBSERVABLE_INCLUDE", tuple(data_rec + int(q) for q in np.flatnonzero(row)), arg=i))
    return Circuit(ins, n + nc, rounds, nc, basis, logicals.shape[0])


# --- sampling ----------------------------------------------------------------

_PAULI2 = np.array([[a, b] for a in range(4) for b in range(4)][1:], dtype=np.int64)  # 15 non-identity pairs
_HAS_X = np.array([0, 1, 1, 0], dtype=bool)  # I X Y Z
_HAS_Z = np.array([0, 0, 1, 1], dtype=bool)


@dataclass
class SyndromeBatch:
    """Detection events (shots, rounds, checks) and observable flips (shots, observables).

    Held as uint8 arrays in memory; bit-packed on disk.
    """

    detections: np.ndarray
    labels: np.ndarray
    basis: str = "Z"

    @property
    def shots(self) -> int:
        return self.detections.shape[0]

    @property
    def rounds(self) -> int:
        return self.detections.shape[1]

    @property
    def checks_per_round(self) -> int:
        return self.detections.shape[2]

    @property
    def num_observables(self) -> int:
        return self.labels.shape[1]

    def save(self, path) -> None:
        Path(path).write_bytes(encode_batch(self))

    @classmethod
    def load(cls, path) -> "SyndromeBatch":
        return decode_batch(Path(path).read_bytes())

    def final_syndrome(self) -> np.ndarray:
        """XOR of all rounds: the accumulated error's syndrome when readout is perfect."""
        return np.bitwise_xor.reduce(self.detections, axis=1)


BATCH_MAGIC = b"SYN"
_HEADER = struct.Struct("<3scIHIH")  # magic, basis, shots, rounds, checks, observables (16 bytes)


def encode_batch(batch: SyndromeBatch) -> bytes:
    head = _HEADER.pack(BATCH_MAGIC, batch.basis.encode(), batch.shots, batch.rounds, batch.checks_per_round, batch.num_observables)
    det = np.packbits(batch.detections.astype(np.uint8).ravel(), bitorder="little")
    lab = np.packbits(batch.labels.astype(np.uint8).ravel(), bitorder="little")
    return head + det.tobytes() + lab.tobytes()


def decode_batch(buf: bytes) -> SyndromeBatch:
    magic, basis, shots, rounds, checks, obs = _HEADER.unpack_from(buf)
    if magic != BATCH_MAGIC:
        raise ValueError("not a syndrome batch file")
    n_det = shots * rounds * checks
    off = _HEADER.size
    det_bytes = (n_det + 7) // 8
    det = np.unpackbits(np.frombuffer(buf, np.uint8, det_bytes, off), count=n_det, bitorder="little")
    lab = np.unpackbits(np.frombuffer(buf, np.uint8, (shots * obs + 7) // 8, off + det_bytes), count=shots * obs, bitorder="little")
    return SyndromeBatch(det.reshape(shots, rounds, checks), lab.reshape(shots, obs), basis.decode())


def _stream(seed: int, index: int, chunk: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed & (2**64 - 1), counter=[0, 0, index, chunk]))


def _random_faults(seed: int):
    """Fault source drawing from a counter-based stream keyed by (seed, instruction, chunk)."""

    def faults(i: int, ins: Instruction, shots: int, chunk: int):
        u = _stream(seed, i, chunk).random((shots, len(ins.targets) // (2 if ins.name == "DEPOLARIZE2" else 1)))
        hit = u < ins.arg
        if ins.name in ("X_ERROR", "Z_ERROR", "MEASURE_NOISE"):
            return hit
        if ins.name == "DEPOLARIZE1":
            which = np.where(hit, np.minimum((u * 3 / ins.arg).astype(np.int64), 2) + 1, 0)
            return which
        which = np.where(hit, np.minimum((u * 15 / ins.arg).astype(np.int64), 14), -1)
        return which

    return faults


def _propagate(circuit: Circuit, shots: int, fault_source, chunk: int = 0) -> np.ndarray:
    """Run the Pauli frame through the circuit; returns measurement flips (shots, M)."""
    nq = circuit.num_qubits
    x = np.zeros((shots, nq), dtype=bool)
    z = np.zeros((shots, nq), dtype=bool)
    pending = np.zeros((shots, nq), dtype=bool)
    records = []
    for i, ins in enumerate(circuit.instructions):
        name = ins.name
        if name in ANNOTATIONS:
            continue
        t = np.asarray(ins.targets, dtype=np.int64)
        if name == "R":
            x[:, t] = False
            z[:, t] = False
        elif name == "H":
            x[:, t], z[:, t] = z[:, t], x[:, t].copy()
        elif name == "CX":
            c, tg = t[0::2], t[1::2]
            x[:, tg] ^= x[:, c]
            z[:, c] ^= z[:, tg]
        elif name == "M":
            records.append(x[:, t] ^ pending[:, t])
            pending[:, t] = False
        else:
            f = fault_source(i, ins, shots, chunk)
            if f is None:
                continue
            if name == "X_ERROR":
                x[:, t] ^= f
            elif name == "Z_ERROR":
                z[:, t] ^= f
            elif name == "MEASURE_NOISE":
                pending[:, t] ^= f
            elif name == "DEPOLARIZE1":
                x[:, t] ^= _HAS_X[f]
                z[:, t] ^= _HAS_Z[f]
            else:
                a = np.where(f >= 0, _PAULI2[np.maximum(f, 0), 0], 0)
                b = np.where(f >= 0, _PAULI2[np.maximum(f, 0), 1], 0)
                x[:, t[0::2]] ^= _HAS_X[a]
                z[:, t[0::2]] ^= _HAS_Z[a]
                x[:, t[1::2]] ^= _HAS_X[b]
                z[:, t[1::2]] ^= _HAS_Z[b]
    if not records:
        return np.zeros((shots, 0), dtype=bool)
    return np.concatenate(records, axis=1)


def _collect(circuit: Circuit, meas: np.ndarray) -> SyndromeBatch:
    shots = meas.shape[0]
    det = np.zeros((shots, circuit.rounds, circuit.n_checks), dtype=np.uint8)
    for ins in circuit.detectors():
        r, c = ins.coords
        det[:, r, c] ^= np.bitwise_xor.reduce(meas[:, list(ins.targets)], axis=1)
    labels = np.zeros((shots, circuit.num_observables), dtype=np.uint8)
    for ins in circuit.observables():
        labels[:, int(ins.arg)] ^= np.bitwise_xor.reduce(meas[:, list(ins.targets)], axis=1)
    return SyndromeBatch(det, labels, circuit.basis)


def sample(circuit: Circuit, shots: int, seed: int) -> SyndromeBatch:
    """Sample detection events; bit-identical for equal (circuit, shots, seed)."""
    if shots < 1:
        raise ValueError("shots must be >= 1")
    faults = _random_faults(int(seed))
    parts = []
    for chunk, start in enumerate(range(0, shots, CHUNK)):
        size = min(CHUNK, shots - start)
        parts.append(_collect(circuit, _propagate(circuit, size, faults, chunk)))
    return SyndromeBatch(
        np.concatenate([p.detections for p in parts]),
        np.concatenate([p.labels for p in parts]),
        circuit.basis,
    )


def run_deterministic(circuit: Circuit) -> SyndromeBatch:
    """Single shot where every noise channel fires iff its probability is 1."""

    def faults(i, ins, shots, chunk):
        if ins.arg < 1.0:
            return None
        width = len(ins.targets) // (2 if ins.name == "DEPOLARIZE2" else 1)
        if ins.name in ("X_ERROR", "Z_ERROR", "MEASURE_NOISE"):
            return np.ones((shots, width), dtype=bool)
        raise ValueError("deterministic runs support X_ERROR/Z_ERROR/MEASURE_NOISE only")

    return _collect(circuit, _propagate(circuit, 1, faults))


def fault_signatures(circuit: Circuit):
    """Detector/observable effect of every single fault in the circuit.

    Yields one row per (noise instruction, target, Pauli) with the flattened
    detection pattern and observable flips; used to probe circuit distance.
    """
    plan = []
    for i, ins in enumerate(circuit.instructions):
        if ins.name not in NOISE or not ins.arg:
            continue
        width = len(ins.targets) // (2 if ins.name == "DEPOLARIZE2" else 1)
        choices = {"X_ERROR": [True], "Z_ERROR": [True], "MEASURE_NOISE": [True],
                   "DEPOLARIZE1": [1, 2, 3], "DEPOLARIZE2": list(range(15))}[ins.name]
        for j in range(width):
            for ch in choices:
                plan.append((i, j, ch))
    shots = len(plan)
    by_instr: dict[int, list] = {}
    for s, (i, j, ch) in enumerate(plan):
        by_instr.setdefault(i, []).append((s, j, ch))

    def faults(i, ins, n_shots, chunk):
        if i not in by_instr:
            return None
        width = len(ins.targets) // (2 if ins.name == "DEPOLARIZE2" else 1)
        if ins.name in ("X_ERROR", "Z_ERROR", "MEASURE_NOISE"):
            out = np.zeros((n_shots, width), dtype=bool)
            for s, j, _ in by_instr[i]:
                out[s, j] = True
        else:
            out = np.full((n_shots, width), 0 if ins.name == "DEPOLARIZE1" else -1, dtype=np.int64)
            for s, j, ch in by_instr[i]:
                out[s, j] = ch
        return out

    batch = _collect(circuit, _propagate(circuit, shots, faults))
    return plan, batch.detections.reshape(shots, -1), batch.labels


def syndrome_to_tensor(batch: SyndromeBatch, code: CssCode) -> np.ndarray:
    """Dense per-round layout: (shots, R, d+1, d+1) for grids, (shots, R, 2, l, m) for tori."""
    if batch.checks_per_round != code.n_checks:
        raise ValueError(f"batch has {batch.checks_per_round} checks, code has {code.n_checks}")
    lay = code.layout
    det = batch.detections
    if isinstance(lay, GridLayout):
        out = np.zeros((batch.shots, batch.rounds, lay.side, lay.side), dtype=np.uint8)
        pos = np.asarray([(i, j) for i, j, _ in lay.check_position])
        out[:, :, pos[:, 0], pos[:, 1]] = det
        return out
    out = np.zeros((batch.shots, batch.rounds, 2, lay.l, lay.m), dtype=np.uint8)
    pos = np.asarray([(0 if k == "X" else 1, x, y) for x, y, k in lay.check_position])
    out[:, :, pos[:, 0], pos[:, 1], pos[:, 2]] = det
    return out


def check_mask(code: CssCode) -> np.ndarray:
    """1 where a grid/torus cell holds a check, 0 on padding (one round)."""
    lay = code.layout
    if isinstance(lay, GridLayout):
        mask = np.zeros((lay.side, lay.side), dtype=np.uint8)
        for i, j, _ in lay.check_position:
            mask[i, j] = 1
        return mask
    return np.ones((2, lay.l, lay.m), dtype=np.uint8)
