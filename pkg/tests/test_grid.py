"""Grid layout and attention-mask tests.

The mask tests compare against `brute_mask`, an independent scalar
re-derivation of the visibility rules (plain nested loops over cells),
plus hand-enumerated frozen matrices for two small cases.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diagar.grid import (
    DiagonalSchedule,
    MaskSpec,
    OrderMapping,
    TokenGrid,
    diagonal_partition,
    full_mask,
    inverse_reorder,
    mask_allows,
    mask_block,
    predecessors,
    reorder,
)


def brute_mask(kind: str, H: int, W: int, P: int) -> np.ndarray:
    """Oracle: scalar enumeration of the visibility rules, no shared code."""
    if kind == "raster":
        cells = [(p, q) for p in range(H) for q in range(W)]
        rank = {c: i for i, c in enumerate(cells)}
    else:
        cells = [
            (p, q)
            for t in range(H + W - 1)
            for p in range(H)
            for q in range(W)
            if p + q == t
        ]
        rank = {c: c[0] + c[1] for c in cells}
    n = P + H * W
    m = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            if i < P and j < P:
                m[i, j] = j <= i
            elif i < P:
                m[i, j] = False
            elif j < P:
                m[i, j] = True
            elif i == j:
                m[i, j] = True
            else:
                m[i, j] = rank[cells[j - P]] < rank[cells[i - P]]
    return m


def test_diagonal_partition_4x4():
    sched = diagonal_partition(4, 4)
    assert sched.num_diagonals == 7
    assert sched.sizes() == [1, 2, 3, 4, 3, 2, 1]
    assert sched.diagonals[0] == ((0, 0),)
    assert sched.diagonals[3] == ((0, 3), (1, 2), (2, 1), (3, 0))
    assert sched.diagonals[6] == ((3, 3),)


def test_diagonal_partition_rectangular():
    sched = diagonal_partition(2, 5)
    assert sched.num_diagonals == 6
    assert sched.sizes() == [1, 2, 2, 2, 2, 1]
    for t, diag in enumerate(sched.diagonals):
        for p, q in diag:
            assert p + q == t
        rows = [p for p, _ in diag]
        assert rows == sorted(rows)


@given(
    h=st.integers(min_value=1, max_value=32),
    w=st.integers(min_value=1, max_value=32),
)
@settings(max_examples=60, deadline=None)
def test_diagonal_partition_properties(h, w):
    sched = diagonal_partition(h, w)
    assert sched.num_diagonals == h + w - 1
    assert sum(sched.sizes()) == h * w
    for t, diag in enumerate(sched.diagonals):
        assert len(diag) == min(t, h - 1, w - 1, h + w - 2 - t) + 1
    seen = {cell for diag in sched.diagonals for cell in diag}
    assert len(seen) == h * w


def test_diagonal_partition_bad_dims():
    with pytest.raises(ValueError):
        diagonal_partition(0, 4)
    with pytest.raises(ValueError):
        diagonal_partition(4, -1)


def test_predecessors():
    assert predecessors(0, 0) == predecessors(0, 0)
    both = predecessors(2, 3)
    assert both.horizontal == (2, 2)
    assert both.vertical == (1, 3)
    top = predecessors(0, 5)
    assert top.horizontal == (0, 4)
    assert top.vertical is None
    left = predecessors(3, 0)
    assert left.horizontal is None
    assert left.vertical == (2, 0)
    corner = predecessors(0, 0)
    assert corner.horizontal is None and corner.vertical is None
    with pytest.raises(ValueError):
        predecessors(-1, 0)


def test_predecessors_live_on_previous_diagonal():
    for p in range(1, 6):
        for q in range(1, 6):
            pre = predecessors(p, q)
            assert sum(pre.horizontal) == p + q - 1
            assert sum(pre.vertical) == p + q - 1


def test_order_mappings_are_bijections():
    for kind in ("raster", "diagonal"):
        for h, w in [(1, 1), (3, 5), (4, 4), (7, 2)]:
            m = (
                OrderMapping.raster(h, w)
                if kind == "raster"
                else OrderMapping.diagonal(h, w)
            )
            assert m.coords.shape == (h * w, 2)
            # index inverts coords
            j = np.arange(h * w)
            assert np.array_equal(m.index[m.coords[:, 0], m.coords[:, 1]], j)


def test_raster_mapping_order():
    m = OrderMapping.raster(2, 3)
    assert m.coords.tolist() == [[0, 0], [0, 1], [0, 2], [1, 0], [1, 1], [1, 2]]


def test_diagonal_mapping_order():
    m = OrderMapping.diagonal(3, 3)
    expected = [(0, 0), (0, 1), (1, 0), (0, 2), (1, 1), (2, 0), (1, 2), (2, 1), (2, 2)]
    assert [tuple(c) for c in m.coords.tolist()] == expected


def test_reorder_roundtrip():
    rng = np.random.default_rng(0)
    grid = TokenGrid(3, 4, 16, rng.integers(0, 16, size=(3, 4)))
    for mapping in (OrderMapping.raster(3, 4), OrderMapping.diagonal(3, 4)):
        seq = reorder(grid, mapping)
        back = inverse_reorder(seq, mapping, 16)
        assert np.array_equal(back.tokens, grid.tokens)


def test_reorder_dimension_mismatch():
    grid = TokenGrid(2, 2, 4, np.zeros((2, 2), dtype=int))
    with pytest.raises(ValueError):
        reorder(grid, OrderMapping.raster(3, 3))
    with pytest.raises(ValueError):
        inverse_reorder(np.zeros(4, dtype=int), OrderMapping.raster(3, 3), 4)


def test_token_grid_validation():
    with pytest.raises(ValueError):
        TokenGrid(2, 2, 4, np.zeros((2, 3), dtype=int))
    with pytest.raises(ValueError):
        TokenGrid(2, 2, 4, np.full((2, 2), 7))
    with pytest.raises(ValueError):
        TokenGrid(2, 2, 4, np.full((2, 2), -1))
    with pytest.raises(ValueError):
        TokenGrid(2, 2, 4, np.zeros((2, 2), dtype=float))
    grid = TokenGrid(2, 2, 4, np.zeros((2, 2), dtype=int))
    with pytest.raises(ValueError):
        grid.tokens[0, 0] = 1  # frozen storage


# Frozen expectation, oracle: hand enumeration of the rules for a 3x3
# grid, prefix 1, diagonal layout [c,(0,0),(0,1),(1,0),(0,2),(1,1),(2,0),
# (1,2),(2,1),(2,2)].  Same-diagonal pairs are mutually invisible.
DIAG_3X3_P1 = [
    "1000000000",
    "1100000000",
    "1110000000",
    "1101000000",
    "1111100000",
    "1111010000",
    "1111001000",
    "1111111100",
    "1111111010",
    "1111111111",
]

# Frozen expectation, oracle: hand enumeration for a 2x2 grid, prefix 1,
# raster layout -- this is a plain causal mask.
RASTER_2X2_P1 = [
    "10000",
    "11000",
    "11100",
    "11110",
    "11111",
]


def _parse(rows):
    return np.array([[ch == "1" for ch in row] for row in rows])


def test_full_mask_matches_frozen_diagonal_3x3():
    spec = MaskSpec("diagonal", 3, 3, 1)
    assert np.array_equal(full_mask(spec), _parse(DIAG_3X3_P1))


def test_full_mask_matches_frozen_raster_2x2():
    spec = MaskSpec("raster", 2, 2, 1)
    assert np.array_equal(full_mask(spec), _parse(RASTER_2X2_P1))


@pytest.mark.parametrize("kind", ["raster", "diagonal"])
@pytest.mark.parametrize("h,w,p", [(4, 4, 1), (4, 4, 0), (3, 5, 2), (1, 4, 1), (4, 1, 3)])
def test_full_mask_matches_brute_force(kind, h, w, p):
    spec = MaskSpec(kind, h, w, p)
    assert np.array_equal(full_mask(spec), brute_mask(kind, h, w, p))


def test_mask_allows_agrees_with_full_mask():
    spec = MaskSpec("diagonal", 3, 4, 2)
    full = full_mask(spec)
    n = spec.seq_len
    for i in range(n):
        for j in range(n):
            assert mask_allows(spec, i, j) == full[i, j]


def test_mask_block_is_a_view_of_the_full_matrix():
    spec = MaskSpec("diagonal", 4, 4, 1)
    full = full_mask(spec)
    tile = mask_block(spec, 5, 9, 0, 12)
    assert np.array_equal(tile, full[5:9, 0:12])


def test_mask_bounds_checking():
    spec = MaskSpec("raster", 2, 2, 1)
    with pytest.raises(IndexError):
        mask_allows(spec, 5, 0)
    with pytest.raises(IndexError):
        mask_allows(spec, 0, -1)
    with pytest.raises(IndexError):
        mask_block(spec, 0, 6, 0, 2)


def test_mask_spec_validation():
    with pytest.raises(ValueError):
        MaskSpec("zigzag", 2, 2, 1)
    with pytest.raises(ValueError):
        MaskSpec("raster", 0, 2, 1)
    with pytest.raises(ValueError):
        MaskSpec("raster", 2, 2, -1)


@given(
    h=st.integers(min_value=1, max_value=6),
    w=st.integers(min_value=1, max_value=6),
    p=st.integers(min_value=0, max_value=3),
    kind=st.sampled_from(["raster", "diagonal"]),
)
@settings(max_examples=40, deadline=None)
def test_mask_properties(h, w, p, kind):
    spec = MaskSpec(kind, h, w, p)
    full = full_mask(spec)
    n = spec.seq_len
    # every position sees itself
    assert full.diagonal().all()
    # grid rows see the entire prefix; prefix rows see no grid keys
    if p:
        assert full[p:, :p].all()
        assert not full[:p, p:].any()
    # raster masks are exactly lower-triangular
    if kind == "raster":
        assert np.array_equal(full, np.tril(np.ones((n, n), dtype=bool)))
    # diagonal masks forbid same-diagonal neighbours
    if kind == "diagonal":
        mapping = spec.mapping()
        t = mapping.coords.sum(axis=1)
        for i in range(h * w):
            for j in range(h * w):
                if i != j and t[i] == t[j]:
                    assert not full[p + i, p + j]
