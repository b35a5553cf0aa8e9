import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from convqec.gf2 import BinaryMatrix, inverse, nullspace, pack_rows, unpack_rows


def rank_oracle(m):
    """Plain dense elimination on Python ints, independent of the packed path."""
    rows = [int("".join(map(str, r[::-1])), 2) if len(r) else 0 for r in np.asarray(m, int)]
    rank = 0
    while rows:
        pivot = max(rows)
        rows.remove(pivot)
        if pivot == 0:
            continue
        rank += 1
        top = pivot.bit_length() - 1
        rows = [r ^ pivot if (r >> top) & 1 else r for r in rows]
    return rank


bit_matrices = st.tuples(st.integers(1, 12), st.integers(1, 140)).flatmap(
    lambda s: arrays(np.uint8, s, elements=st.integers(0, 1))
)


@given(bit_matrices)
@settings(max_examples=60, deadline=None)
def test_rank_matches_oracle(m):
    assert BinaryMatrix.from_dense(m).rank() == rank_oracle(m)


@given(bit_matrices)
@settings(max_examples=40, deadline=None)
def test_pack_roundtrip(m):
    assert np.array_equal(unpack_rows(pack_rows(m), m.shape[1]), m)


@given(bit_matrices)
@settings(max_examples=40, deadline=None)
def test_nullspace_is_kernel_with_full_dimension(m):
    bm = BinaryMatrix.from_dense(m)
    ker = nullspace(bm)
    assert ker.rows == m.shape[1] - bm.rank()
    if ker.rows:
        assert not ((m.astype(int) @ ker.to_dense().T.astype(int)) % 2).any()
        assert ker.rank() == ker.rows


def test_inverse():
    rng = np.random.default_rng(0)
    found = 0
    while found < 5:
        m = rng.integers(0, 2, (7, 7))
        if rank_oracle(m) < 7:
            continue
        inv = inverse(m)
        assert np.array_equal((m @ inv) % 2, np.eye(7, dtype=int))
        found += 1


def test_rank_bounded_by_shape():
    m = BinaryMatrix.from_dense(np.ones((3, 200), np.uint8))
    assert m.rank() == 1
