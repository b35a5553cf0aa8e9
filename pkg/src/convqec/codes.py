"""CSS code construction: rotated surface codes and bivariate bicycle codes.

Besides the parity-check matrices, every code carries a geometric layout
(a padded grid for surface codes, a torus for BB codes) and can produce the
relation tables that the convolutional decoder uses for weight sharing.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from convqec.gf2 import BinaryMatrix, extend_basis, inverse, nullspace

# Monomials (i, j) stand for x^i y^j on Z_l x Z_m. Taken from the bivariate
# bicycle construction of Bravyi et al. (2024); the decoder work does not
# restate them.
BB_PRESETS = {
    "bb72": dict(l=6, m=6, a=[(3, 0), (0, 1), (0, 2)], b=[(0, 3), (1, 0), (2, 0)], d=6),
    "bb144": dict(l=12, m=6, a=[(3, 0), (0, 1), (0, 2)], b=[(0, 3), (1, 0), (2, 0)], d=12),
    "bb288": dict(l=12, m=12, a=[(3, 0), (0, 2), (0, 7)], b=[(0, 3), (1, 0), (2, 0)], d=18),
}


@dataclass(frozen=True)
class GridLayout:
    """Rotated surface code on a (d+1) x (d+1) grid of plaquette cells.

    Data qubit (r, c) sits at the shared corner of cells (r..r+1, c..c+1).
    """

    d: int
    check_position: tuple  # global check -> (row, col, "X"|"Z")
    boundary: tuple  # global check -> True for weight-2 boundary checks

    @property
    def side(self) -> int:
        return self.d + 1

    def data_position(self, q: int) -> tuple[int, int]:
        return divmod(q, self.d)

    def to_json(self) -> dict:
        return {
            "kind": "grid",
            "d": self.d,
            "check_position": [list(p) for p in self.check_position],
            "boundary": list(self.boundary),
        }


@dataclass(frozen=True)
class TorusLayout:
    l: int
    m: int
    check_position: tuple  # global check -> (x, y, "X"|"Z")
    data_position: tuple  # data qubit -> (x, y, "left"|"right")

    def to_json(self) -> dict:
        return {
            "kind": "torus",
            "l": self.l,
            "m": self.m,
            "check_position": [list(p) for p in self.check_position],
            "data_position": [list(p) for p in self.data_position],
        }


def _layout_from_json(obj: dict):
    if obj["kind"] == "grid":
        return GridLayout(obj["d"], tuple(tuple(p) for p in obj["check_position"]), tuple(obj["boundary"]))
    return TorusLayout(
        obj["l"],
        obj["m"],
        tuple(tuple(p) for p in obj["check_position"]),
        tuple(tuple(p) for p in obj["data_position"]),
    )


@dataclass(frozen=True, eq=False)
class CssCode:
    n: int
    hx: BinaryMatrix
    hz: BinaryMatrix
    layout: GridLayout | TorusLayout
    d: int | None = None
    preset: str | None = None
    logicals: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.hx.cols != self.n or self.hz.cols != self.n:
            raise ValueError("check matrices must have n columns")
        if not (self.hx @ self.hz.T).is_zero():
            raise ValueError("hx . hz^T != 0: checks do not commute")
        if self.logicals is None:
            object.__setattr__(self, "logicals", logical_operators(self))

    @cached_property
    def k(self) -> int:
        return self.n - self.hx.rank() - self.hz.rank()

    @property
    def logicals_x(self) -> BinaryMatrix:
        return self.logicals[0]

    @property
    def logicals_z(self) -> BinaryMatrix:
        return self.logicals[1]

    @property
    def n_x_checks(self) -> int:
        return self.hx.rows

    @property
    def n_z_checks(self) -> int:
        return self.hz.rows

    @property
    def n_checks(self) -> int:
        return self.hx.rows + self.hz.rows

    @property
    def name(self) -> str:
        return self.preset or f"[[{self.n},{self.k},{self.d}]]"

    def check_matrix(self, kind: str) -> BinaryMatrix:
        return self.hx if kind == "X" else self.hz

    def check_indices(self, kind: str) -> np.ndarray:
        """Global check indices of the given type (X checks come first)."""
        if kind == "X":
            return np.arange(self.hx.rows)
        return np.arange(self.hx.rows, self.n_checks)

    def to_json(self) -> dict:
        return {
            "preset": self.preset,
            "n": self.n,
            "k": self.k,
            "d": self.d,
            "hx": self.hx.supports(),
            "hz": self.hz.supports(),
            "logicals_x": self.logicals_x.supports(),
            "logicals_z": self.logicals_z.supports(),
            "layout": self.layout.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CssCode":
        n = obj["n"]
        logicals = None
        if "logicals_x" in obj:
            logicals = (
                BinaryMatrix.from_supports(obj["logicals_x"], n),
                BinaryMatrix.from_supports(obj["logicals_z"], n),
            )
        code = cls(
            n=n,
            hx=BinaryMatrix.from_supports(obj["hx"], n),
            hz=BinaryMatrix.from_supports(obj["hz"], n),
            layout=_layout_from_json(obj["layout"]),
            d=obj.get("d"),
            preset=obj.get("preset"),
            logicals=logicals,
        )
        if "k" in obj and obj["k"] != code.k:
            raise ValueError(f"stored k={obj['k']} disagrees with rank computation k={code.k}")
        return code

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "CssCode":
        return cls.from_json(json.loads(Path(path).read_text()))


def build_rotated_surface_code(d: int) -> CssCode:
    if d < 3 or d % 2 == 0:
        raise ValueError(f"rotated surface code needs odd d >= 3, got {d}")
    cells = {"X": [], "Z": []}
    for i in range(d + 1):
        for j in range(d + 1):
            kind = "X" if (i + j) % 2 == 0 else "Z"
            support = [
                r * d + c
                for r in (i - 1, i)
                for c in (j - 1, j)
                if 0 <= r < d and 0 <= c < d
            ]
            on_row_edge = i in (0, d)
            on_col_edge = j in (0, d)
            if on_row_edge and on_col_edge:
                continue
            if on_row_edge and kind != "X":
                continue
            if on_col_edge and kind != "Z":
                continue
            cells[kind].append(((i, j, kind), support, on_row_edge or on_col_edge))
    order = cells["X"] + cells["Z"]
    layout = GridLayout(d, tuple(p for p, _, _ in order), tuple(b for _, _, b in order))
    n = d * d
    hx = BinaryMatrix.from_supports([s for _, s, _ in cells["X"]], n)
    hz = BinaryMatrix.from_supports([s for _, s, _ in cells["Z"]], n)
    return CssCode(n=n, hx=hx, hz=hz, layout=layout, d=d, preset=f"surface{d}")


def _monomial_matrix(l: int, m: int, monomials) -> np.ndarray:
    """Sum of x^i y^j permutation matrices; row g has a 1 at column g + (i, j)."""
    out = np.zeros((l * m, l * m), dtype=np.uint8)
    for i, j in monomials:
        for x in range(l):
            for y in range(m):
                out[x * m + y, ((x + i) % l) * m + (y + j) % m] ^= 1
    return out


def build_bb_code(l: int, m: int, a_monomials, b_monomials, d: int | None = None, preset: str | None = None) -> CssCode:
    if not a_monomials or not b_monomials:
        raise ValueError("monomial lists must be nonempty")
    a_monomials = [(i % l, j % m) for i, j in a_monomials]
    b_monomials = [(i % l, j % m) for i, j in b_monomials]
    A = _monomial_matrix(l, m, a_monomials)
    B = _monomial_matrix(l, m, b_monomials)
    hx = BinaryMatrix.from_dense(np.hstack([A, B]))
    hz = BinaryMatrix.from_dense(np.hstack([B.T, A.T]))
    lm = l * m
    checks = [(x, y, "X") for x in range(l) for y in range(m)] + [(x, y, "Z") for x in range(l) for y in range(m)]
    data = [(x, y, "left") for x in range(l) for y in range(m)] + [(x, y, "right") for x in range(l) for y in range(m)]
    layout = TorusLayout(l, m, tuple(checks), tuple(data))
    code = CssCode(n=2 * lm, hx=hx, hz=hz, layout=layout, d=d, preset=preset)
    return code


def bb_preset(name: str) -> CssCode:
    try:
        p = BB_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown BB preset {name!r}; choose from {sorted(BB_PRESETS)}") from None
    return build_bb_code(p["l"], p["m"], p["a"], p["b"], d=p["d"], preset=name)


def build_preset(name: str) -> CssCode:
    """'surface5', 'surface:5' or one of the BB preset names."""
    if name.startswith("surface"):
        return build_rotated_surface_code(int(name[len("surface"):].lstrip(":")))
    return bb_preset(name)


# --- logical operators -----------------------------------------------------


def _quotient_basis(kernel_of: BinaryMatrix, modulo: BinaryMatrix, k: int) -> np.ndarray:
    ker = nullspace(kernel_of)
    idx = extend_basis(modulo, ker, count=k)
    if len(idx) != k:
        raise RuntimeError(f"found {len(idx)} logicals, expected {k}")
    return ker.to_dense()[idx] if k else np.zeros((0, kernel_of.cols), np.uint8)


def _coset_min_weight(vec: np.ndarray, stabilizers: BinaryMatrix) -> np.ndarray:
    red = stabilizers.to_dense()
    basis = red[np.flatnonzero(red.any(axis=1))]
    # keep an independent subset so the enumeration is exactly the coset
    basis = basis[extend_basis(BinaryMatrix.zeros(0, stabilizers.cols), BinaryMatrix.from_dense(basis))]
    coset = vec.reshape(1, -1).astype(np.uint8)
    for row in basis:
        coset = np.vstack([coset, coset ^ row])
    w = coset.sum(axis=1)
    return coset[int(np.argmin(w))]


def logical_operators(code: CssCode) -> tuple[BinaryMatrix, BinaryMatrix]:
    """Paired X and Z logical bases with LX . LZ^T = I (mod 2).

    Bases come from lowest-index pivoting; for codes with known d <= 5 each
    logical is then replaced by a minimum-weight member of its coset.
    """
    n = code.n
    k = code.n - code.hx.rank() - code.hz.rank()
    if k == 0:
        return BinaryMatrix.zeros(0, n), BinaryMatrix.zeros(0, n)
    lx = _quotient_basis(code.hz, code.hx, k)
    lz = _quotient_basis(code.hx, code.hz, k)
    gram = (lx.astype(np.int64) @ lz.T.astype(np.int64)) & 1
    lz = ((inverse(gram).T.astype(np.int64) @ lz.astype(np.int64)) & 1).astype(np.uint8)
    if k == 1 and code.d is not None and code.d <= 5:
        lx = _coset_min_weight(lx[0], code.hx).reshape(1, -1)
        lz = _coset_min_weight(lz[0], code.hz).reshape(1, -1)
    return BinaryMatrix.from_dense(lx), BinaryMatrix.from_dense(lz)


def min_logical_weight(code: CssCode, kind: str) -> int:
    """Brute-force minimum weight over every nontrivial logical class of a type.

    Exponential in the stabilizer rank; meant for tiny codes.
    """
    logicals = (code.logicals_x if kind == "X" else code.logicals_z).to_dense()
    stab = code.hx if kind == "X" else code.hz
    best = None
    k = logicals.shape[0]
    for mask in range(1, 2**k):
        v = np.zeros(code.n, np.uint8)
        for i in range(k):
            if mask >> i & 1:
                v ^= logicals[i]
        w = int(_coset_min_weight(v, stab).sum())
        best = w if best is None else min(best, w)
    return best


# --- relation indexing -------------------------------------------------------


@dataclass(frozen=True)
class Relation:
    target_kind: str
    source_kind: str
    offset: tuple  # spatial offset of the source relative to the target
    dt: int  # source round = target round + dt

    @property
    def is_self(self) -> bool:
        return self.target_kind == self.source_kind and self.dt == 0 and not any(self.offset)


@dataclass(frozen=True)
class RelationIndex:
    """Edge classes of a convolution graph, grouped by target node kind.

    Each target kind sees the same number of relations (the kernel size K).
    """

    graph: str
    geometry: str  # "grid" | "torus"
    shape: tuple  # (d,) for grid, (l, m) for torus
    relations: dict  # target kind -> tuple[Relation, ...]

    @property
    def kernel_size(self) -> int:
        sizes = {len(v) for v in self.relations.values()}
        if len(sizes) != 1:
            raise ValueError("relation counts differ between target kinds")
        return sizes.pop()

    @property
    def target_kinds(self) -> tuple:
        return tuple(self.relations)

    @property
    def spatial_neighbors(self) -> int:
        rels = next(iter(self.relations.values()))
        return len({(r.source_kind, r.offset) for r in rels})

    def all_relations(self) -> list[Relation]:
        return [r for rels in self.relations.values() for r in rels]

    # Node positions are flattened per round:
    #   grid cells  t*(d+1)^2 + i*(d+1) + j     grid data   t*d^2 + r*d + c
    #   torus nodes t*2lm + kind*lm + x*m + y   (kind 0 = X/left, 1 = Z/right)
    def nodes_per_round(self, side: str) -> int:
        if self.geometry == "grid":
            d = self.shape[0]
            return d * d if side == "data" else (d + 1) ** 2
        l, m = self.shape
        return 2 * l * m

    def source_side(self) -> str:
        return "data" if self.graph == "data_to_check" else "check"

    def target_side(self) -> str:
        return "data" if self.graph == "check_to_data" else "check"

    def gather_tables(self, rounds: int) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per target kind: (target positions, neighbor table of shape (K, P)).

        Neighbor entries of -1 mean zero padding (outside the grid or time).
        """
        return _gather_tables(self, rounds)


_KIND_SLOT = {"X": 0, "Z": 1, "left": 0, "right": 1, "cell": 0, "data": 0}


def _gather_tables(index: RelationIndex, rounds: int):
    tables = []
    if index.geometry == "grid":
        d = index.shape[0]
        side = d + 1
        if index.target_side() == "check":
            ti, tj = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
        else:
            ti, tj = np.meshgrid(np.arange(d), np.arange(d), indexing="ij")
        ti, tj = ti.ravel(), tj.ravel()
        per_round_t = ti.size
        src_dim = d if index.source_side() == "data" else side
        for kind, rels in index.relations.items():
            t = np.repeat(np.arange(rounds), per_round_t)
            i = np.tile(ti, rounds)
            j = np.tile(tj, rounds)
            targets = t * per_round_t + i * (side if index.target_side() == "check" else d) + j
            nbr = np.full((len(rels), targets.size), -1, dtype=np.int64)
            for r, rel in enumerate(rels):
                si, sj, st = i + rel.offset[0], j + rel.offset[1], t + rel.dt
                ok = (si >= 0) & (si < src_dim) & (sj >= 0) & (sj < src_dim) & (st >= 0) & (st < rounds)
                nbr[r, ok] = st[ok] * src_dim * src_dim + si[ok] * src_dim + sj[ok]
            tables.append((targets, nbr))
        return tables
    l, m = index.shape
    lm = l * m
    xs, ys = np.meshgrid(np.arange(l), np.arange(m), indexing="ij")
    xs, ys = xs.ravel(), ys.ravel()
    for kind, rels in index.relations.items():
        slot = _KIND_SLOT[kind]
        t = np.repeat(np.arange(rounds), lm)
        x = np.tile(xs, rounds)
        y = np.tile(ys, rounds)
        targets = t * 2 * lm + slot * lm + x * m + y
        nbr = np.full((len(rels), targets.size), -1, dtype=np.int64)
        for r, rel in enumerate(rels):
            sx = (x + rel.offset[0]) % l
            sy = (y + rel.offset[1]) % m
            st = t + rel.dt
            ok = (st >= 0) & (st < rounds)
            src = st * 2 * lm + _KIND_SLOT[rel.source_kind] * lm + sx * m + sy
            nbr[r, ok] = src[ok]
        tables.append((targets, nbr))
    return tables


def _torus_neighbor_offsets(code: CssCode):
    """Per check type and data sublattice: the list of spatial offsets to neighbors.

    Raises if two checks of the same type see different offset multisets.
    """
    lay: TorusLayout = code.layout
    l, m = lay.l, lay.m
    check_to_data: dict = {}
    for kind in ("X", "Z"):
        h = code.check_matrix(kind).to_dense()
        ref = None
        for row_idx, g in enumerate(code.check_indices(kind)):
            cx, cy, _ = lay.check_position[g]
            offs = Counter()
            for q in np.flatnonzero(h[row_idx]):
                qx, qy, sub = lay.data_position[q]
                offs[(sub, ((qx - cx) % l, (qy - cy) % m))] += 1
            if ref is None:
                ref = offs
            elif offs != ref:
                raise ValueError(f"translation symmetry broken for {kind} check {g}")
        check_to_data[kind] = sorted(ref)
    return check_to_data


def _signed(off, l, m):
    """Representative of a torus offset in (-l/2, l/2] x (-m/2, m/2] for stable ordering."""
    a, b = off
    a = a - l if a > l // 2 else a
    b = b - m if b > m // 2 else b
    return (a, b)


def relation_index(code: CssCode, graph: str, temporal_offsets=(0,)) -> RelationIndex:
    if graph not in ("check_to_check", "check_to_data", "data_to_check"):
        raise ValueError(f"unknown graph {graph!r}")
    dts = tuple(int(t) for t in temporal_offsets)
    lay = code.layout
    if isinstance(lay, GridLayout):
        if graph == "check_to_check":
            offs = [(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)]
            rels = {"cell": tuple(Relation("cell", "cell", o, dt) for dt in dts for o in offs)}
        elif graph == "check_to_data":
            offs = [(a, b) for a in (0, 1) for b in (0, 1)]
            rels = {"data": tuple(Relation("data", "cell", o, dt) for dt in dts for o in offs)}
        else:
            offs = [(a, b) for a in (-1, 0) for b in (-1, 0)]
            rels = {"cell": tuple(Relation("cell", "data", o, dt) for dt in dts for o in offs)}
        return RelationIndex(graph, "grid", (lay.d,), rels)

    l, m = lay.l, lay.m
    c2d = _torus_neighbor_offsets(code)
    neg = lambda o: ((-o[0]) % l, (-o[1]) % m)  # noqa: E731
    add = lambda o, p: ((o[0] + p[0]) % l, (o[1] + p[1]) % m)  # noqa: E731
    if graph == "data_to_check":
        spatial = {kind: [(sub, off) for sub, off in c2d[kind]] for kind in ("X", "Z")}
    elif graph == "check_to_data":
        spatial = {"left": [], "right": []}
        for kind in ("X", "Z"):
            for sub, off in c2d[kind]:
                spatial[sub].append((kind, neg(off)))
    else:
        spatial = {}
        for kind in ("X", "Z"):
            seen = set()
            for sub, off in c2d[kind]:
                for kind2 in ("X", "Z"):
                    for sub2, off2 in c2d[kind2]:
                        if sub2 == sub:
                            seen.add((kind2, add(off, neg(off2))))
            spatial[kind] = list(seen)
    rels = {}
    for tk, lst in spatial.items():
        lst = sorted(set(lst), key=lambda so: (so[0], _signed(so[1], l, m)))
        rels[tk] = tuple(Relation(tk, sk, off, dt) for dt in dts for sk, off in lst)
    return RelationIndex(graph, "torus", (l, m), rels)


def torus_shift_permutation(code: CssCode, dx: int, dy: int, side: str = "check") -> np.ndarray:
    """Permutation of global check (or data) indices induced by a torus shift."""
    lay: TorusLayout = code.layout
    l, m = lay.l, lay.m
    positions = lay.check_position if side == "check" else lay.data_position
    lookup = {p: i for i, p in enumerate(positions)}
    perm = np.empty(len(positions), dtype=np.int64)
    for i, (x, y, kind) in enumerate(positions):
        perm[i] = lookup[((x + dx) % l, (y + dy) % m, kind)]
    return perm
