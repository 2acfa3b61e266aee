"""Grid coordinates, anti-diagonal partitioning, orderings, and attention masks.

Conventions used throughout the package:

  * A grid has H rows and W columns; a cell is addressed (p, q) with
    p the row and q the column, both 0-based.
  * Raster order walks rows top to bottom, each row left to right, so the
    flat raster index of (p, q) is p * W + q.
  * Anti-diagonal t collects every cell with p + q == t.  There are
    H + W - 1 of them, and |D_t| = min(t, H - 1, W - 1, H + W - 2 - t) + 1.
  * Within a diagonal, cells are ordered by ascending row index p.

Attention masks are defined over a token sequence of `prefix_len`
conditioning tokens followed by the H * W grid tokens laid out in either
raster or diagonal order (the mask kind fixes the layout).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MASK_KINDS = ("raster", "diagonal")


def _check_dims(height: int, width: int) -> None:
    if height < 1 or width < 1:
        raise ValueError(f"grid dims must be positive, got {height}x{width}")


@dataclass(frozen=True)
class TokenGrid:
    """An H x W array of integer tokens drawn from [0, vocab_size)."""

    height: int
    width: int
    vocab_size: int
    tokens: np.ndarray

    def __post_init__(self) -> None:
        _check_dims(self.height, self.width)
        if self.vocab_size < 1:
            raise ValueError(f"vocab_size must be positive, got {self.vocab_size}")
        arr = np.asarray(self.tokens)
        if arr.shape != (self.height, self.width):
            raise ValueError(
                f"token array shape {arr.shape} does not match "
                f"{self.height}x{self.width}"
            )
        if arr.dtype.kind not in "iu":
            raise ValueError(f"tokens must be integers, got dtype {arr.dtype}")
        if arr.size and (arr.min() < 0 or arr.max() >= self.vocab_size):
            raise ValueError(
                f"tokens out of range [0, {self.vocab_size}): "
                f"min={arr.min()}, max={arr.max()}"
            )
        arr = arr.astype(np.int64, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "tokens", arr)

    @property
    def num_cells(self) -> int:
        return self.height * self.width


@dataclass(frozen=True)
class DiagonalSchedule:
    """The anti-diagonal partition of an H x W grid, in decode order."""

    height: int
    width: int
    diagonals: tuple[tuple[tuple[int, int], ...], ...]

    @property
    def num_diagonals(self) -> int:
        return len(self.diagonals)

    def sizes(self) -> list[int]:
        return [len(d) for d in self.diagonals]


def diagonal_partition(height: int, width: int) -> DiagonalSchedule:
    """Partition the grid into anti-diagonals D_0 .. D_{H+W-2}.

    Cells within each diagonal appear in ascending row order, which is
    also the order samplers consume randomness in.
    """
    _check_dims(height, width)
    diagonals = []
    for t in range(height + width - 1):
        p_lo = max(0, t - width + 1)
        p_hi = min(t, height - 1)
        diagonals.append(tuple((p, t - p) for p in range(p_lo, p_hi + 1)))
    return DiagonalSchedule(height, width, tuple(diagonals))


@dataclass(frozen=True)
class Predecessors:
    """The two causal parents of a cell: left neighbour and top neighbour."""

    horizontal: tuple[int, int] | None
    vertical: tuple[int, int] | None


def predecessors(p: int, q: int) -> Predecessors:
    """Return (p, q-1) and (p-1, q), with None past the grid edge.

    Both parents of an interior cell lie on the previous anti-diagonal:
    (p + q - 1) in both cases, which is what makes one-diagonal-at-a-time
    decoding well-posed.
    """
    if p < 0 or q < 0:
        raise ValueError(f"cell ({p}, {q}) outside the grid")
    horizontal = (p, q - 1) if q > 0 else None
    vertical = (p - 1, q) if p > 0 else None
    return Predecessors(horizontal, vertical)


@dataclass(frozen=True)
class OrderMapping:
    """Bijection between flat sequence positions and grid coordinates.

    `coords[j]` gives the (p, q) cell occupying sequence slot j, and
    `index[p, q]` inverts it.  Two layouts exist: "raster" and "diagonal".
    """

    kind: str
    height: int
    width: int
    coords: np.ndarray = field(repr=False)  # (H*W, 2) int64
    index: np.ndarray = field(repr=False)  # (H, W) int64

    def __post_init__(self) -> None:
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown ordering kind {self.kind!r}")

    @classmethod
    def raster(cls, height: int, width: int) -> "OrderMapping":
        _check_dims(height, width)
        p, q = np.divmod(np.arange(height * width, dtype=np.int64), width)
        coords = np.stack([p, q], axis=1)
        index = np.arange(height * width, dtype=np.int64).reshape(height, width)
        return cls("raster", height, width, _frozen(coords), _frozen(index))

    @classmethod
    def diagonal(cls, height: int, width: int) -> "OrderMapping":
        sched = diagonal_partition(height, width)
        flat = [cell for diag in sched.diagonals for cell in diag]
        coords = np.asarray(flat, dtype=np.int64)
        index = np.empty((height, width), dtype=np.int64)
        index[coords[:, 0], coords[:, 1]] = np.arange(len(flat), dtype=np.int64)
        return cls("diagonal", height, width, _frozen(coords), _frozen(index))


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def reorder(grid: TokenGrid, mapping: OrderMapping) -> np.ndarray:
    """Flatten a grid into the mapping's sequence layout."""
    if (grid.height, grid.width) != (mapping.height, mapping.width):
        raise ValueError(
            f"grid {grid.height}x{grid.width} does not match "
            f"mapping {mapping.height}x{mapping.width}"
        )
    return grid.tokens[mapping.coords[:, 0], mapping.coords[:, 1]].copy()


def inverse_reorder(
    seq: np.ndarray, mapping: OrderMapping, vocab_size: int
) -> TokenGrid:
    """Rebuild the grid from a flat sequence in the mapping's layout."""
    seq = np.asarray(seq)
    if seq.shape != (mapping.height * mapping.width,):
        raise ValueError(
            f"sequence length {seq.shape} does not match "
            f"{mapping.height}x{mapping.width} grid"
        )
    tokens = np.empty((mapping.height, mapping.width), dtype=np.int64)
    tokens[mapping.coords[:, 0], mapping.coords[:, 1]] = seq
    return TokenGrid(mapping.height, mapping.width, vocab_size, tokens)


@dataclass(frozen=True)
class MaskSpec:
    """Attention visibility over [prefix tokens | grid tokens in layout order].

    Rules, for query position i and key position j in the flat sequence:

      * prefix -> prefix: causal, j <= i;
      * grid   -> prefix: always allowed;
      * prefix -> grid:   never allowed;
      * grid   -> grid:   self always allowed; otherwise the key's order
        rank must be strictly lower than the query's.  For the "raster"
        kind the rank is the raster index (plain causal mask); for the
        "diagonal" kind the rank is the key's diagonal t, so cells on the
        same diagonal never attend to one another.
    """

    kind: str
    height: int
    width: int
    prefix_len: int

    def __post_init__(self) -> None:
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}")
        _check_dims(self.height, self.width)
        if self.prefix_len < 0:
            raise ValueError(f"prefix_len must be >= 0, got {self.prefix_len}")

    @property
    def seq_len(self) -> int:
        return self.prefix_len + self.height * self.width

    def mapping(self) -> OrderMapping:
        if self.kind == "raster":
            return OrderMapping.raster(self.height, self.width)
        return OrderMapping.diagonal(self.height, self.width)

    def _ranks(self) -> np.ndarray:
        # Order rank per flat sequence position; prefix slots get -1 and
        # are never compared (the prefix cases short-circuit first).
        mapping = self.mapping()
        if self.kind == "raster":
            grid_rank = np.arange(self.height * self.width, dtype=np.int64)
        else:
            grid_rank = mapping.coords.sum(axis=1)
        ranks = np.concatenate(
            [np.full(self.prefix_len, -1, dtype=np.int64), grid_rank]
        )
        return ranks


def mask_allows(spec: MaskSpec, query: int, key: int) -> bool:
    """Scalar visibility predicate; see MaskSpec for the rules."""
    n = spec.seq_len
    if not (0 <= query < n and 0 <= key < n):
        raise IndexError(
            f"positions ({query}, {key}) outside sequence of length {n}"
        )
    return bool(mask_block(spec, query, query + 1, key, key + 1)[0, 0])


def mask_block(
    spec: MaskSpec, q_start: int, q_stop: int, k_start: int, k_stop: int
) -> np.ndarray:
    """Materialize the boolean visibility tile [q_start:q_stop, k_start:k_stop].

    This is what attention actually consumes: full training masks are the
    (0, n, 0, n) tile, and incremental decoding asks for the rows of the
    freshly appended positions against all filled keys.
    """
    n = spec.seq_len
    if not (0 <= q_start <= q_stop <= n and 0 <= k_start <= k_stop <= n):
        raise IndexError(
            f"tile [{q_start}:{q_stop}, {k_start}:{k_stop}] outside "
            f"sequence of length {n}"
        )
    pos_q = np.arange(q_start, q_stop, dtype=np.int64)
    pos_k = np.arange(k_start, k_stop, dtype=np.int64)
    ranks = spec._ranks()
    P = spec.prefix_len
    q_is_prefix = (pos_q < P)[:, None]
    k_is_prefix = (pos_k < P)[None, :]
    same = pos_q[:, None] == pos_k[None, :]
    causal_prefix = pos_k[None, :] <= pos_q[:, None]
    rank_lt = ranks[pos_k][None, :] < ranks[pos_q][:, None]
    allowed = q_is_prefix & k_is_prefix & causal_prefix
    allowed |= ~q_is_prefix & k_is_prefix
    allowed |= ~q_is_prefix & ~k_is_prefix & (rank_lt | same)
    return allowed


def full_mask(spec: MaskSpec) -> np.ndarray:
    """The complete (seq_len, seq_len) visibility matrix."""
    return mask_block(spec, 0, spec.seq_len, 0, spec.seq_len)
