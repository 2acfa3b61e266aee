"""The raster-order grid transformer backbone.

A pre-norm transformer over sequences of [condition prefix | grid
tokens].  Positions are encoded additively from three learned tables:
a row table, a column table (grid cells), and a dedicated prefix table,
so the same weights serve both the raster layout used for pretraining
and the diagonal layout used after branch adaptation -- a cell keeps its
(row, col) encoding wherever it lands in the sequence.

Two forward paths exist: `forward_full` over whole sequences for
training and evaluation, and `forward_incremental` for decoding, which
appends new positions to preallocated KV caches and must reproduce the
full forward's activations to float32 round-off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .grid import MaskSpec, OrderMapping, mask_block


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults give the desk-scale model."""

    num_layers: int = 8
    d_model: int = 256
    num_heads: int = 8
    ffn_dim: int = 512
    vocab_size: int = 64
    grid_height: int = 16
    grid_width: int = 16
    prefix_len: int = 1
    num_classes: int = 8
    norm_eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.num_layers < 2:
            raise ValueError(f"num_layers must be >= 2, got {self.num_layers}")
        if self.d_model % self.num_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by "
                f"num_heads {self.num_heads}"
            )
        if min(self.grid_height, self.grid_width) < 1:
            raise ValueError("grid dims must be positive")
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.prefix_len < 1:
            raise ValueError(f"prefix_len must be >= 1, got {self.prefix_len}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads

    @property
    def seq_len(self) -> int:
        return self.prefix_len + self.grid_height * self.grid_width

    @property
    def num_cells(self) -> int:
        return self.grid_height * self.grid_width

    # The embedding table holds image tokens, then one row per class
    # token, then the unconditional token.  Class/unconditional rows are
    # prefix-only: heads emit image-token logits and can never produce
    # them inside the grid.
    @property
    def embed_rows(self) -> int:
        return self.vocab_size + self.num_classes + 1

    @property
    def uncond_id(self) -> int:
        return self.vocab_size + self.num_classes

    def class_token_id(self, class_id: int) -> int:
        if not 0 <= class_id < self.num_classes:
            raise ValueError(
                f"class_id {class_id} outside [0, {self.num_classes})"
            )
        return self.vocab_size + class_id


@dataclass(frozen=True)
class ConditionPrefix:
    """What fills the prefix slots: a class label or nothing (uncond)."""

    class_id: int | None = None

    def token_rows(self, config: ModelConfig) -> np.ndarray:
        row = (
            config.uncond_id
            if self.class_id is None
            else config.class_token_id(self.class_id)
        )
        return np.full(config.prefix_len, row, dtype=np.int64)


def condition_rows(
    config: ModelConfig, class_ids: np.ndarray, drop: np.ndarray | None = None
) -> np.ndarray:
    """Batched prefix rows: (B, prefix_len), with dropped entries mapped
    to the unconditional token (classifier-free guidance training)."""
    class_ids = np.asarray(class_ids)
    rows = config.vocab_size + class_ids.astype(np.int64)
    if drop is not None:
        rows = np.where(np.asarray(drop, dtype=bool), config.uncond_id, rows)
    return np.repeat(rows[:, None], config.prefix_len, axis=1)


@dataclass
class LayerParams:
    """One transformer block's weights."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    w2: Tensor
    attn_gain: Tensor
    ffn_gain: Tensor

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [
            (f"{prefix}.wq", self.wq),
            (f"{prefix}.wk", self.wk),
            (f"{prefix}.wv", self.wv),
            (f"{prefix}.wo", self.wo),
            (f"{prefix}.w1", self.w1),
            (f"{prefix}.w2", self.w2),
            (f"{prefix}.attn_gain", self.attn_gain),
            (f"{prefix}.ffn_gain", self.ffn_gain),
        ]


def _param(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(
        (rng.standard_normal(shape) * std).astype(np.float32),
        requires_grad=True,
    )


def _gain(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


def init_layer(rng: np.random.Generator, config: ModelConfig) -> LayerParams:
    d, f = config.d_model, config.ffn_dim
    return LayerParams(
        wq=_param(rng, (d, d)),
        wk=_param(rng, (d, d)),
        wv=_param(rng, (d, d)),
        wo=_param(rng, (d, d)),
        w1=_param(rng, (d, f)),
        w2=_param(rng, (f, d)),
        attn_gain=_gain(d),
        ffn_gain=_gain(d),
    )


@dataclass
class ForwardResult:
    """Full-sequence forward: residual stream after every block, the
    final normalized states, and head logits."""

    hidden: list[Tensor]
    final: Tensor
    logits: Tensor


class KVCacheSet:
    """Preallocated per-layer key/value buffers with append-only fill.

    Buffers are grouped (a base model has one "trunk" group; the two-way
    model adds "horizontal" and "vertical" branch groups), each sized
    (batch, capacity, d_model) up front -- appends never allocate.  All
    layers of a group write the same span, then `advance` moves the fill
    pointer once; `aligned_length` asserts no group has drifted.
    """

    def __init__(
        self, batch: int, capacity: int, d_model: int, groups: dict[str, int]
    ):
        if batch < 1 or capacity < 1:
            raise ValueError("batch and capacity must be positive")
        self.batch = batch
        self.capacity = capacity
        self.d_model = d_model
        self._k: dict[str, list[np.ndarray]] = {}
        self._v: dict[str, list[np.ndarray]] = {}
        self._filled: dict[str, int] = {}
        for name, layers in groups.items():
            self._k[name] = [
                np.zeros((batch, capacity, d_model), dtype=np.float32)
                for _ in range(layers)
            ]
            self._v[name] = [
                np.zeros((batch, capacity, d_model), dtype=np.float32)
                for _ in range(layers)
            ]
            self._filled[name] = 0

    @property
    def groups(self) -> list[str]:
        return list(self._filled)

    def filled(self, group: str) -> int:
        return self._filled[group]

    def aligned_length(self) -> int:
        lengths = set(self._filled.values())
        if len(lengths) != 1:
            raise RuntimeError(f"cache groups have diverged: {self._filled}")
        return lengths.pop()

    def write(self, group: str, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        start = self._filled[group]
        n = k.shape[1]
        if k.shape != (self.batch, n, self.d_model) or v.shape != k.shape:
            raise ValueError(f"cache write shape mismatch: {k.shape}")
        if start + n > self.capacity:
            raise RuntimeError(
                f"cache overflow: {start} + {n} > capacity {self.capacity}"
            )
        self._k[group][layer][:, start : start + n] = k
        self._v[group][layer][:, start : start + n] = v

    def view(self, group: str, layer: int, upto: int) -> tuple[np.ndarray, np.ndarray]:
        return (
            self._k[group][layer][:, :upto],
            self._v[group][layer][:, :upto],
        )

    def advance(self, group: str, n: int) -> None:
        if self._filled[group] + n > self.capacity:
            raise RuntimeError("cache overflow on advance")
        self._filled[group] += n

    def reset(self) -> None:
        for name in self._filled:
            self._filled[name] = 0


@dataclass
class IncrementalResult:
    """States and logits for the freshly appended positions only."""

    hidden: list[Tensor]
    final: Tensor
    logits: Tensor


class Backbone:
    """The raster-order transformer: embeddings, blocks, final head."""

    def __init__(
        self,
        config: ModelConfig,
        embed_token: Tensor,
        embed_row: Tensor,
        embed_col: Tensor,
        embed_prefix: Tensor,
        layers: list[LayerParams],
        final_gain: Tensor,
        head: Tensor,
    ):
        self.config = config
        self.embed_token = embed_token
        self.embed_row = embed_row
        self.embed_col = embed_col
        self.embed_prefix = embed_prefix
        self.layers = layers
        self.final_gain = final_gain
        self.head = head

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator) -> "Backbone":
        d = config.d_model
        return cls(
            config=config,
            embed_token=_param(rng, (config.embed_rows, d)),
            embed_row=_param(rng, (config.grid_height, d)),
            embed_col=_param(rng, (config.grid_width, d)),
            embed_prefix=_param(rng, (config.prefix_len, d)),
            layers=[init_layer(rng, config) for _ in range(config.num_layers)],
            final_gain=_gain(d),
            head=_param(rng, (d, config.vocab_size)),
        )

    def astype(self, dtype) -> "Backbone":
        """A deep parameter copy in another float dtype (e.g. float64 for
        finite-difference gradient verification)."""

        def cast(t: Tensor) -> Tensor:
            return Tensor(t.data.astype(dtype), requires_grad=True)

        return Backbone(
            config=self.config,
            embed_token=cast(self.embed_token),
            embed_row=cast(self.embed_row),
            embed_col=cast(self.embed_col),
            embed_prefix=cast(self.embed_prefix),
            layers=[
                LayerParams(
                    **{
                        f.replace(f"layers.{i}.", ""): cast(t)
                        for f, t in lp.named(f"layers.{i}")
                    }
                )
                for i, lp in enumerate(self.layers)
            ],
            final_gain=cast(self.final_gain),
            head=cast(self.head),
        )

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = [
            ("embed.token", self.embed_token),
            ("embed.row", self.embed_row),
            ("embed.col", self.embed_col),
            ("embed.prefix", self.embed_prefix),
        ]
        for i, lp in enumerate(self.layers):
            named.extend(lp.named(f"layers.{i}"))
        named.append(("final_gain", self.final_gain))
        named.append(("head", self.head))
        return named

    # -- embedding ------------------------------------------------------

    def _position_tensor(self, mapping: OrderMapping) -> Tensor:
        """(seq_len, d) additive positional encodings for one layout."""
        pos_prefix = ad.embedding(
            self.embed_prefix, np.arange(self.config.prefix_len)
        )
        rows = mapping.coords[:, 0]
        cols = mapping.coords[:, 1]
        pos_grid = ad.add(
            ad.embedding(self.embed_row, rows),
            ad.embedding(self.embed_col, cols),
        )
        return ad.concat([pos_prefix, pos_grid], axis=0)

    def _embed_span(
        self, token_ids: np.ndarray, mapping: OrderMapping, start: int
    ) -> Tensor:
        """Embeddings for sequence positions [start, start + n)."""
        n = token_ids.shape[1]
        P = self.config.prefix_len
        tok = ad.embedding(self.embed_token, token_ids)
        parts = []
        span = np.arange(start, start + n)
        prefix_slots = span[span < P]
        grid_slots = span[span >= P]
        if prefix_slots.size:
            parts.append(ad.embedding(self.embed_prefix, prefix_slots))
        if grid_slots.size:
            coords = mapping.coords[grid_slots - P]
            parts.append(
                ad.add(
                    ad.embedding(self.embed_row, coords[:, 0]),
                    ad.embedding(self.embed_col, coords[:, 1]),
                )
            )
        pos = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
        return ad.add(tok, pos)

    # -- blocks ---------------------------------------------------------

    def _split_heads(self, x: Tensor, n: int) -> Tensor:
        cfg = self.config
        b = x.shape[0]
        return ad.transpose(
            ad.reshape(x, (b, n, cfg.num_heads, cfg.head_dim)), (0, 2, 1, 3)
        )

    def _merge_heads(self, x: Tensor, n: int) -> Tensor:
        cfg = self.config
        b = x.shape[0]
        return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, cfg.d_model))

    def block_full(self, x: Tensor, lp: LayerParams, allowed: np.ndarray) -> Tensor:
        """One pre-norm block over a full sequence with mask `allowed`."""
        cfg = self.config
        n = x.shape[1]
        h = ad.rms_norm(x, lp.attn_gain, eps=cfg.norm_eps)
        q = self._split_heads(ad.matmul(h, lp.wq), n)
        k = self._split_heads(ad.matmul(h, lp.wk), n)
        v = self._split_heads(ad.matmul(h, lp.wv), n)
        scores = ad.mul(
            ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
            1.0 / math.sqrt(cfg.head_dim),
        )
        probs = ad.masked_softmax(scores, allowed[None, None, :, :])
        ctx = self._merge_heads(ad.matmul(probs, v), n)
        x = ad.add(x, ad.matmul(ctx, lp.wo))
        h2 = ad.rms_norm(x, lp.ffn_gain, eps=cfg.norm_eps)
        return ad.add(x, ad.matmul(ad.silu(ad.matmul(h2, lp.w1)), lp.w2))

    def block_incremental(
        self,
        x: Tensor,
        lp: LayerParams,
        caches: KVCacheSet,
        group: str,
        layer: int,
        tile: np.ndarray,
        start: int,
    ) -> Tensor:
        """One block over appended positions; keys/values come from the
        cache buffers (history) plus this step's projections."""
        cfg = self.config
        n = x.shape[1]
        h = ad.rms_norm(x, lp.attn_gain, eps=cfg.norm_eps)
        q = self._split_heads(ad.matmul(h, lp.wq), n)
        k_new = ad.matmul(h, lp.wk)
        v_new = ad.matmul(h, lp.wv)
        caches.write(group, layer, k_new.data, v_new.data)
        k_all, v_all = caches.view(group, layer, start + n)
        b, total = k_all.shape[0], k_all.shape[1]
        k4 = (
            k_all.reshape(b, total, cfg.num_heads, cfg.head_dim)
            .transpose(0, 2, 1, 3)
        )
        v4 = (
            v_all.reshape(b, total, cfg.num_heads, cfg.head_dim)
            .transpose(0, 2, 1, 3)
        )
        scores = ad.mul(
            ad.matmul(q, k4.transpose(0, 1, 3, 2)),
            1.0 / math.sqrt(cfg.head_dim),
        )
        probs = ad.masked_softmax(scores, tile[None, None, :, :])
        ctx = self._merge_heads(ad.matmul(probs, v4), n)
        x = ad.add(x, ad.matmul(ctx, lp.wo))
        h2 = ad.rms_norm(x, lp.ffn_gain, eps=cfg.norm_eps)
        return ad.add(x, ad.matmul(ad.silu(ad.matmul(h2, lp.w1)), lp.w2))

    # -- forward paths --------------------------------------------------

    def forward_full(
        self,
        token_ids: np.ndarray,
        spec: MaskSpec,
        attn_mask: np.ndarray | None = None,
    ) -> ForwardResult:
        """Teacher-forced forward over complete sequences.

        `spec` fixes both the layout (which cell each position holds)
        and the visibility rules; `attn_mask` optionally overrides the
        visibility matrix, e.g. for ablation probes.
        """
        token_ids = np.asarray(token_ids)
        self._check_spec(spec)
        if token_ids.ndim != 2 or token_ids.shape[1] != spec.seq_len:
            raise ValueError(
                f"token_ids shape {token_ids.shape} does not match "
                f"sequence length {spec.seq_len}"
            )
        allowed = mask_block(spec, 0, spec.seq_len, 0, spec.seq_len)
        if attn_mask is not None:
            allowed = np.asarray(attn_mask, dtype=bool)
            if allowed.shape != (spec.seq_len, spec.seq_len):
                raise ValueError(f"attn_mask shape {allowed.shape} invalid")
        x = self._embed_span(token_ids, spec.mapping(), 0)
        hidden = []
        for lp in self.layers:
            x = self.block_full(x, lp, allowed)
            hidden.append(x)
        final = ad.rms_norm(x, self.final_gain, eps=self.config.norm_eps)
        logits = ad.matmul(final, self.head)
        return ForwardResult(hidden=hidden, final=final, logits=logits)

    def forward_incremental(
        self, new_ids: np.ndarray, caches: KVCacheSet, spec: MaskSpec
    ) -> IncrementalResult:
        """Append `new_ids` after the already-cached positions and return
        states/logits for the appended span only."""
        new_ids = np.asarray(new_ids)
        self._check_spec(spec)
        start = caches.filled("trunk")
        n = new_ids.shape[1]
        if start + n > spec.seq_len:
            raise RuntimeError(
                f"decode past end of sequence: {start} + {n} > {spec.seq_len}"
            )
        tile = mask_block(spec, start, start + n, 0, start + n)
        x = self._embed_span(new_ids, spec.mapping(), start)
        hidden = []
        for i, lp in enumerate(self.layers):
            x = self.block_incremental(x, lp, caches, "trunk", i, tile, start)
            hidden.append(x)
        caches.advance("trunk", n)
        final = ad.rms_norm(x, self.final_gain, eps=self.config.norm_eps)
        logits = ad.matmul(final, self.head)
        return IncrementalResult(hidden=hidden, final=final, logits=logits)

    def make_caches(self, batch: int) -> KVCacheSet:
        return KVCacheSet(
            batch,
            self.config.seq_len,
            self.config.d_model,
            {"trunk": self.config.num_layers},
        )

    def _check_spec(self, spec: MaskSpec) -> None:
        cfg = self.config
        if (spec.height, spec.width) != (cfg.grid_height, cfg.grid_width):
            raise ValueError(
                f"mask grid {spec.height}x{spec.width} does not match model "
                f"{cfg.grid_height}x{cfg.grid_width}"
            )
        if spec.prefix_len != cfg.prefix_len:
            raise ValueError(
                f"mask prefix_len {spec.prefix_len} does not match model "
                f"{cfg.prefix_len}"
            )
