"""Synthetic token-grid dataset, its file format, and quality metrics.

Pattern families are deterministic functions of (class, position, seed)
chosen so the target token is predictable from the class plus the two
causal neighbours -- which keeps both the rightward and downward
prediction problems learnable, and makes rule-match rate a meaningful
stand-in for perceptual quality metrics.

Noise replaces a cell's token with a uniform draw over the *other* V-1
tokens, so the corrupted fraction is exactly binomial in the noise rate.

Dataset file layout (little-endian), documented byte-exactly:

    offset  size       field
    0       4          magic b"DGDS"
    4       4          format version, uint32 (currently 1)
    8       4          grid height, uint32
    12      4          grid width, uint32
    16      4          vocab size, uint32
    20      4          class count, uint32
    24      8          sample count N, uint64
    32      2N         class ids, uint16 each
    32+2N   2*N*H*W    tokens, uint16, raster order per sample
    ...     4          crc32 of all preceding bytes, uint32
"""

from __future__ import annotations

import colorsys
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .grid import TokenGrid

MAGIC = b"DGDS"
VERSION = 1

PATTERN_FAMILIES = (
    "stripes_h",
    "stripes_v",
    "checker",
    "gradient_h",
    "gradient_v",
    "blocks",
)


@dataclass(frozen=True)
class SyntheticGridSpec:
    """One class's generative rule; `period` is the pattern cycle (band
    pair for stripes, cell edge for checkers/blocks, unused for
    gradients)."""

    class_id: int
    family: str
    height: int
    width: int
    vocab_size: int
    noise_rate: float
    seed: int
    period: int = 2

    def __post_init__(self) -> None:
        if self.family not in PATTERN_FAMILIES:
            raise ValueError(f"unknown pattern family {self.family!r}")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ValueError(f"noise_rate must be in [0, 1), got {self.noise_rate}")
        if self.family.startswith("stripes") and (
            self.period < 2 or self.period % 2
        ):
            raise ValueError("stripe period must be even and >= 2")
        if self.period < 1:
            raise ValueError(f"period must be >= 1, got {self.period}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")


def _class_palette(class_id: int, vocab_size: int) -> tuple[int, int]:
    """Two distinct tokens per class, spread over the vocabulary."""
    a = (11 * class_id + 3) % vocab_size
    b = (11 * class_id + 29) % vocab_size
    if a == b:
        b = (a + 1) % vocab_size
    return a, b


def pattern_grid(spec: SyntheticGridSpec) -> np.ndarray:
    """The noiseless (H, W) token grid for one class."""
    h, w, v = spec.height, spec.width, spec.vocab_size
    p = np.arange(h)[:, None]
    q = np.arange(w)[None, :]
    t0, t1 = _class_palette(spec.class_id, v)
    if spec.family == "stripes_h":
        band = spec.period // 2
        sel = (p // band) % 2
        grid = np.where(sel == 0, t0, t1) + np.zeros_like(q)
    elif spec.family == "stripes_v":
        band = spec.period // 2
        sel = (q // band) % 2
        grid = np.where(sel == 0, t0, t1) + np.zeros_like(p)
    elif spec.family == "checker":
        sel = (p // spec.period + q // spec.period) % 2
        grid = np.where(sel == 0, t0, t1)
    elif spec.family == "gradient_h":
        grid = (q * v) // w + np.zeros_like(p)
    elif spec.family == "gradient_v":
        grid = (p * v) // h + np.zeros_like(q)
    else:  # blocks: a fixed random tile, repeated
        rng = np.random.default_rng(np.random.SeedSequence((spec.seed, spec.class_id)))
        tile = rng.integers(0, v, size=(spec.period, spec.period))
        reps = (-(-h // spec.period), -(-w // spec.period))
        grid = np.tile(tile, reps)[:h, :w]
    return grid.astype(np.int64)


def default_pattern_specs(
    num_classes: int = 8,
    height: int = 16,
    width: int = 16,
    vocab_size: int = 64,
    noise_rate: float = 0.05,
    seed: int = 0,
) -> list[SyntheticGridSpec]:
    """The stock class set: stripes both ways at two scales, checkers at
    two scales, both gradients, and a blocky texture."""
    templates = [
        ("stripes_h", 2),
        ("stripes_v", 2),
        ("stripes_h", 4),
        ("checker", 1),
        ("checker", 2),
        ("gradient_h", 1),
        ("gradient_v", 1),
        ("blocks", 4),
    ]
    specs = []
    for c in range(num_classes):
        family, period = templates[c % len(templates)]
        if c >= len(templates) and family != "gradient_h" and family != "gradient_v":
            period += 2 * (c // len(templates))
        specs.append(
            SyntheticGridSpec(
                class_id=c,
                family=family,
                height=height,
                width=width,
                vocab_size=vocab_size,
                noise_rate=noise_rate,
                seed=seed,
                period=period,
            )
        )
    return specs


@dataclass
class Dataset:
    """In-memory dataset: class-labelled token grids."""

    height: int
    width: int
    vocab_size: int
    num_classes: int
    class_ids: np.ndarray  # (N,) int64
    tokens: np.ndarray  # (N, H, W) int64

    def __len__(self) -> int:
        return len(self.class_ids)

    def grid(self, i: int) -> TokenGrid:
        return TokenGrid(self.height, self.width, self.vocab_size, self.tokens[i])


def generate_dataset(
    specs: list[SyntheticGridSpec], count: int, seed: int
) -> Dataset:
    """`count` samples cycling through the classes; per-sample randomness
    comes from a (seed, index) substream, so generation is deterministic
    and order-independent."""
    if not specs:
        raise ValueError("no pattern specs given")
    dims = {(s.height, s.width, s.vocab_size) for s in specs}
    if len(dims) != 1:
        raise ValueError(f"inconsistent spec dims/vocab: {sorted(dims)}")
    ids = sorted(s.class_id for s in specs)
    if ids != list(range(len(specs))):
        raise ValueError(f"class ids must be 0..{len(specs) - 1}, got {ids}")
    by_class = {s.class_id: s for s in specs}
    h, w, v = specs[0].height, specs[0].width, specs[0].vocab_size
    bases = {c: pattern_grid(s) for c, s in by_class.items()}
    tokens = np.empty((count, h, w), dtype=np.int64)
    class_ids = np.empty(count, dtype=np.int64)
    for i in range(count):
        c = i % len(specs)
        spec = by_class[c]
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        grid = bases[c].copy()
        flips = rng.random((h, w)) < spec.noise_rate
        offsets = rng.integers(1, v, size=(h, w))
        grid[flips] = (grid[flips] + offsets[flips]) % v
        tokens[i] = grid
        class_ids[i] = c
    return Dataset(h, w, v, len(specs), class_ids, tokens)


def split_indices(
    count: int, val_fraction: float
) -> tuple[np.ndarray, np.ndarray]:
    """Train/val membership by hashing the sample index (stable across
    seeds and dataset regenerations of the same size)."""
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in [0, 1), got {val_fraction}")
    cut = int(val_fraction * 10_000)
    marks = np.array(
        [zlib.crc32(f"sample:{i}".encode()) % 10_000 < cut for i in range(count)]
    )
    idx = np.arange(count)
    return idx[~marks], idx[marks]


# ---------------------------------------------------------------------------
# file format


def save_dataset(dataset: Dataset, path) -> None:
    if dataset.tokens.min() < 0 or dataset.tokens.max() >= dataset.vocab_size:
        raise ValueError("tokens out of vocabulary range")
    header = MAGIC + struct.pack(
        "<IIIIIQ",
        VERSION,
        dataset.height,
        dataset.width,
        dataset.vocab_size,
        dataset.num_classes,
        len(dataset),
    )
    ids = dataset.class_ids.astype("<u2").tobytes()
    toks = dataset.tokens.astype("<u2").tobytes()
    body = header + ids + toks
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body)))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        body = f.read()
    if len(body) < 36 or body[:4] != MAGIC:
        raise ValueError(f"not a dataset file: {path}")
    version, h, w, v, k, n = struct.unpack("<IIIIIQ", body[4:32])
    if version != VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    expected = 32 + 2 * n + 2 * n * h * w + 4
    if len(body) != expected:
        raise ValueError(
            f"corrupt dataset file: {len(body)} bytes, expected {expected}"
        )
    (crc,) = struct.unpack("<I", body[-4:])
    if crc != zlib.crc32(body[:-4]):
        raise ValueError("corrupt dataset file: checksum mismatch")
    ids = np.frombuffer(body, dtype="<u2", count=n, offset=32).astype(np.int64)
    tokens = (
        np.frombuffer(body, dtype="<u2", count=n * h * w, offset=32 + 2 * n)
        .astype(np.int64)
        .reshape(n, h, w)
    )
    if n and tokens.max() >= v:
        raise ValueError("corrupt dataset file: token out of range")
    return Dataset(h, w, v, k, ids, tokens)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class EvalReport:
    """Teacher-forced quality numbers over one split."""

    nll: float
    accuracy: float
    count: int
    per_class: dict[int, dict[str, float]] = field(default_factory=dict)
    validity: float | None = None


def eval_nll(model, dataset: Dataset, indices, batch_size: int = 32) -> EvalReport:
    """Mean per-token NLL and greedy accuracy, teacher-forced.

    Dual-head models are scored on their fused logits under the diagonal
    mask; plain backbones on raster logits.  Each sample is conditioned
    on its own class."""
    from .adapter import DualHeadModel  # local import: adapter imports model
    from .grid import MaskSpec
    from .model import condition_rows

    cfg = model.config
    if (dataset.height, dataset.width) != (cfg.grid_height, cfg.grid_width):
        raise ValueError(
            f"dataset {dataset.height}x{dataset.width} does not match model "
            f"{cfg.grid_height}x{cfg.grid_width}"
        )
    if dataset.vocab_size != cfg.vocab_size:
        raise ValueError("dataset/model vocab mismatch")
    indices = np.asarray(indices)
    dual = isinstance(model, DualHeadModel)
    spec = MaskSpec("diagonal" if dual else "raster", cfg.grid_height, cfg.grid_width, cfg.prefix_len)
    mapping = spec.mapping()
    total_nll = 0.0
    total_correct = 0
    total_tokens = 0
    stats = {c: [0.0, 0, 0] for c in range(dataset.num_classes)}
    for at in range(0, len(indices), batch_size):
        batch_idx = indices[at : at + batch_size]
        grids = dataset.tokens[batch_idx]
        classes = dataset.class_ids[batch_idx]
        rows = condition_rows(cfg, classes)
        raster_targets = grids.reshape(len(batch_idx), -1)
        if dual:
            out = model.forward_train(grids, rows, spec)
            logits = out.fused.data  # already in raster target order
        else:
            seq = grids[:, mapping.coords[:, 0], mapping.coords[:, 1]]
            ids = np.concatenate([rows, seq], axis=1)
            res = model.forward_full(ids, spec)
            logits = res.logits.data[:, cfg.prefix_len - 1 : spec.seq_len - 1]
        m = logits.max(axis=-1, keepdims=True)
        lse = m[..., 0] + np.log(np.exp(logits - m).sum(axis=-1))
        picked = np.take_along_axis(
            logits, raster_targets[..., None], axis=-1
        )[..., 0]
        nll = lse - picked  # (B, HW)
        correct = logits.argmax(axis=-1) == raster_targets
        total_nll += nll.sum()
        total_correct += correct.sum()
        total_tokens += nll.size
        for b, c in enumerate(classes):
            s = stats[int(c)]
            s[0] += nll[b].sum()
            s[1] += int(correct[b].sum())
            s[2] += nll.shape[1]
    per_class = {
        c: {
            "nll": s[0] / s[2] if s[2] else float("nan"),
            "accuracy": s[1] / s[2] if s[2] else float("nan"),
            "count": s[2],
        }
        for c, s in stats.items()
        if s[2]
    }
    return EvalReport(
        nll=total_nll / total_tokens,
        accuracy=total_correct / total_tokens,
        count=len(indices),
        per_class=per_class,
    )


@dataclass
class ValidityReport:
    """How closely generated grids follow their class rules."""

    mean_validity: float
    valid_fraction: float
    per_grid: np.ndarray
    threshold: float = 0.95


def pattern_validity(
    grids: np.ndarray,
    class_ids: np.ndarray,
    specs: list[SyntheticGridSpec],
    threshold: float = 0.95,
) -> ValidityReport:
    """Per-grid fraction of cells matching the class's noiseless rule;
    a grid counts as valid at >= `threshold` matching cells."""
    grids = np.asarray(grids)
    class_ids = np.asarray(class_ids)
    by_class = {s.class_id: pattern_grid(s) for s in specs}
    scores = np.empty(len(grids), dtype=np.float64)
    for i, (grid, c) in enumerate(zip(grids, class_ids)):
        if int(c) not in by_class:
            raise ValueError(f"unknown class id {int(c)}")
        scores[i] = np.mean(grid == by_class[int(c)])
    return ValidityReport(
        mean_validity=float(scores.mean()) if len(scores) else 0.0,
        valid_fraction=float((scores >= threshold).mean()) if len(scores) else 0.0,
        per_grid=scores,
        threshold=threshold,
    )


# ---------------------------------------------------------------------------
# rendering


def default_palette(vocab_size: int) -> np.ndarray:
    """(V, 3) uint8 colors: hue wheel with alternating lightness, so
    neighbouring token ids stay visually distinct."""
    colors = np.empty((vocab_size, 3), dtype=np.uint8)
    for i in range(vocab_size):
        r, g, b = colorsys.hsv_to_rgb(
            i / vocab_size, 0.9 - 0.35 * (i % 2), 0.95 - 0.4 * ((i // 2) % 2)
        )
        colors[i] = (int(r * 255), int(g * 255), int(b * 255))
    return colors


def render_grid(grid, palette: np.ndarray, cell: int = 8) -> bytes:
    """Binary portable pixmap (P6) with one `cell`-pixel square per
    token; byte-exact for a given grid and palette."""
    tokens = grid.tokens if isinstance(grid, TokenGrid) else np.asarray(grid)
    palette = np.asarray(palette, dtype=np.uint8)
    if palette.ndim != 2 or palette.shape[1] != 3:
        raise ValueError("palette must be (V, 3) RGB")
    if tokens.max() >= palette.shape[0]:
        raise ValueError(
            f"palette too small: {palette.shape[0]} colors for "
            f"max token {tokens.max()}"
        )
    pixels = palette[tokens]  # (H, W, 3)
    pixels = np.repeat(np.repeat(pixels, cell, axis=0), cell, axis=1)
    header = f"P6\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode()
    return header + pixels.tobytes()
