"""Two-way post-training adapter: dual heads, fusion gate, freeze stages.

`DualHeadModel` wraps a pretrained raster backbone without copying the
shared weights: the trunk (layers 0..m-1), the horizontal top block
(layers m..L-1), the final norm and the output head are the *same*
Tensor objects as the base model's, so the horizontal pathway is the
base model, bit for bit.  The vertical pathway is a value-identical
clone of the top block, final norm, and head, made independently
trainable; a two-layer gate MLP (input 2d, hidden d, scalar sigmoid
output) mixes the two directional predictions.

For a target cell (p, q), the horizontal prediction comes from the
branch state at (p, q-1) (its head is trained to emit the right
neighbour) and the vertical prediction from (p-1, q) (below neighbour):

    g    = sigmoid(MLP([h_h(p, q-1) ; h_v(p-1, q)]))
    z    = g * z_h(p, q-1) + (1 - g) * z_v(p-1, q)

Boundary rules: first-row targets take z_h alone, first-column targets
z_v alone, and the corner (0,0) is predicted by the horizontal head from
the final prefix state -- exactly how the raster base model predicts its
first token, which is what keeps the pretrained prior intact.

The branch states consumed by the gate are the post-block,
post-normalization states (the same states the heads read); the gate's
output layer starts at zero so every gate opens at exactly 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .grid import MaskSpec, OrderMapping, mask_block
from .model import Backbone, ConditionPrefix, KVCacheSet, LayerParams, ModelConfig


@dataclass(frozen=True)
class BranchConfig:
    """Where the vertical pathway splits off: trunk = layers 0..m-1."""

    branch_point: int
    num_layers: int

    def __post_init__(self) -> None:
        if not 1 <= self.branch_point <= self.num_layers:
            raise ValueError(
                f"branch_point {self.branch_point} outside "
                f"[1, {self.num_layers}]"
            )

    @property
    def top_layers(self) -> int:
        """How many layers each branch owns (may be 0 for m = L)."""
        return self.num_layers - self.branch_point


@dataclass
class FusionGate:
    """sigma(w2 @ silu(w1 @ [h_h; h_v] + b1) + b2), strictly in (0, 1)."""

    w1: Tensor  # (2d, d)
    b1: Tensor  # (d,)
    w2: Tensor  # (d, 1)
    b2: Tensor  # (1,)

    @classmethod
    def initialize(cls, d_model: int, rng: np.random.Generator, dtype=np.float32):
        w1 = (rng.standard_normal((2 * d_model, d_model)) * 0.02).astype(dtype)
        return cls(
            w1=Tensor(w1, requires_grad=True),
            b1=Tensor(np.zeros(d_model, dtype=dtype), requires_grad=True),
            # zeroed output layer: every gate starts at sigmoid(0) = 0.5
            w2=Tensor(np.zeros((d_model, 1), dtype=dtype), requires_grad=True),
            b2=Tensor(np.zeros(1, dtype=dtype), requires_grad=True),
        )

    def named(self) -> list[tuple[str, Tensor]]:
        return [
            ("gate.w1", self.w1),
            ("gate.b1", self.b1),
            ("gate.w2", self.w2),
            ("gate.b2", self.b2),
        ]

    def apply(self, joint: Tensor) -> Tensor:
        """Gate values for (..., 2d) concatenated predecessor states."""
        hidden = ad.silu(ad.add(ad.matmul(joint, self.w1), self.b1))
        return ad.sigmoid(ad.add(ad.matmul(hidden, self.w2), self.b2))


def fuse_logits(gate, z_h, z_v):
    """Elementwise convex mix g * z_h + (1 - g) * z_v.

    Accepts Tensors or arrays; g = 1 returns z_h exactly and g = 0
    returns z_v exactly (multiplication by literal 1.0/0.0).
    """
    return ad.add(ad.mul(gate, z_h), ad.mul(ad.sub(1.0, gate), z_v))


@dataclass
class BranchState:
    """Per-position states/logits of one incremental dual forward."""

    trunk: np.ndarray  # (B, n, d)
    h_h: np.ndarray  # (B, n, d) horizontal branch state (post-norm)
    h_v: np.ndarray  # (B, n, d) vertical branch state (post-norm)
    z_h: np.ndarray  # (B, n, V)
    z_v: np.ndarray  # (B, n, V)


@dataclass
class TrainForwardOutput:
    """Teacher-forced dual-head forward over full sequences.

    `fused` is ordered by raster target index: row p*W + q holds the
    fused logits predicting cell (p, q).  `z_h`/`z_v` stay in sequence
    (diagonal) layout, one row per source position, prefix included.
    """

    fused: Tensor  # (B, H*W, V)
    z_h: Tensor  # (B, T, V)
    z_v: Tensor  # (B, T, V)
    gate_map: np.ndarray  # (B, H, W) effective mix (1 first row, 0 first col)
    spec: MaskSpec


@dataclass
class StagePartition:
    """Freeze/train split for one adaptation stage."""

    frozen: list[tuple[str, Tensor]]
    trainable: list[tuple[list[tuple[str, Tensor]], float]]  # (params, multiplier)


class DualHeadModel:
    """A pretrained backbone plus a cloned vertical branch and a gate."""

    def __init__(
        self,
        backbone: Backbone,
        branch: BranchConfig,
        vertical_layers: list[LayerParams],
        vertical_gain: Tensor,
        vertical_head: Tensor,
        gate: FusionGate,
    ):
        if branch.num_layers != backbone.config.num_layers:
            raise ValueError(
                f"branch config for {branch.num_layers} layers does not "
                f"match backbone with {backbone.config.num_layers}"
            )
        if len(vertical_layers) != branch.top_layers:
            raise ValueError(
                f"expected {branch.top_layers} vertical layers, "
                f"got {len(vertical_layers)}"
            )
        self.backbone = backbone
        self.branch = branch
        self.vertical_layers = vertical_layers
        self.vertical_gain = vertical_gain
        self.vertical_head = vertical_head
        self.gate = gate

    @property
    def config(self) -> ModelConfig:
        return self.backbone.config

    @classmethod
    def build_from_pretrained(
        cls, base: Backbone, m: int, rng: np.random.Generator
    ) -> "DualHeadModel":
        """Clone the top L-m layers, final norm, and head into a fresh
        vertical branch; initialize the gate at 0.5 everywhere.

        The horizontal pathway keeps the base model's Tensors, so its
        outputs are bit-identical to the base model's.
        """
        branch = BranchConfig(m, base.config.num_layers)

        def clone(t: Tensor) -> Tensor:
            return Tensor(t.data.copy(), requires_grad=True)

        vertical_layers = [
            LayerParams(
                wq=clone(lp.wq),
                wk=clone(lp.wk),
                wv=clone(lp.wv),
                wo=clone(lp.wo),
                w1=clone(lp.w1),
                w2=clone(lp.w2),
                attn_gain=clone(lp.attn_gain),
                ffn_gain=clone(lp.ffn_gain),
            )
            for lp in base.layers[m:]
        ]
        gate = FusionGate.initialize(
            base.config.d_model, rng, dtype=base.embed_token.dtype
        )
        return cls(
            backbone=base,
            branch=branch,
            vertical_layers=vertical_layers,
            vertical_gain=clone(base.final_gain),
            vertical_head=clone(base.head),
            gate=gate,
        )

    # -- parameter bookkeeping -----------------------------------------

    def shared_parameters(self) -> list[tuple[str, Tensor]]:
        """Everything inherited from the base model (trunk, horizontal
        block, original norm + head, embeddings)."""
        return self.backbone.named_parameters()

    def new_parameters(self) -> list[tuple[str, Tensor]]:
        """Vertical branch, vertical head, and gate."""
        named = []
        for j, lp in enumerate(self.vertical_layers):
            named.extend(lp.named(f"vertical.{j}"))
        named.append(("vertical_gain", self.vertical_gain))
        named.append(("vertical_head", self.vertical_head))
        named.extend(self.gate.named())
        return named

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self.shared_parameters() + self.new_parameters()

    def trainable_sets(self, stage: int) -> StagePartition:
        """Stage 1 trains only the new components; stage 2 trains
        everything, backbone at a 0.2 rate multiplier."""
        if stage == 1:
            return StagePartition(
                frozen=self.shared_parameters(),
                trainable=[(self.new_parameters(), 1.0)],
            )
        if stage == 2:
            return StagePartition(
                frozen=[],
                trainable=[
                    (self.shared_parameters(), 0.2),
                    (self.new_parameters(), 1.0),
                ],
            )
        raise ValueError(f"stage must be 1 or 2, got {stage}")

    # -- gate -----------------------------------------------------------

    def compute_gate(self, h_horiz_pred, h_vert_pred):
        """Gate value(s) for predecessor state pair(s) of width d.

        Accepts (d,) vectors (returns a float) or (..., d) stacks
        (returns an (..., ) array); always strictly inside (0, 1).
        """
        hh = np.asarray(h_horiz_pred)
        hv = np.asarray(h_vert_pred)
        d = self.config.d_model
        if hh.shape[-1] != d or hv.shape[-1] != d:
            raise ValueError(
                f"state width mismatch: {hh.shape[-1]}/{hv.shape[-1]} vs {d}"
            )
        if hh.shape != hv.shape:
            raise ValueError(f"state shapes differ: {hh.shape} vs {hv.shape}")
        scalar = hh.ndim == 1
        joint = np.concatenate([hh, hv], axis=-1)
        out = self.gate.apply(Tensor(joint[None] if scalar else joint)).data
        return float(out[0, 0]) if scalar else out[..., 0]

    # -- forward paths ---------------------------------------------------

    def _branch_blocks(
        self, x: Tensor, layers: list[LayerParams], allowed: np.ndarray
    ) -> Tensor:
        for lp in layers:
            x = self.backbone.block_full(x, lp, allowed)
        return x

    def forward_train(
        self,
        grids: np.ndarray,
        condition,
        spec: MaskSpec,
    ) -> TrainForwardOutput:
        """One full teacher-forced pass: trunk once, both branches on the
        trunk states, gate + fusion for every target cell.

        `grids`: (B, H, W) token array (or a TokenGrid); `condition`: a
        ConditionPrefix applied to the whole batch, or a (B, prefix_len)
        array of prefix embedding rows.
        """
        cfg = self.config
        if spec.kind != "diagonal":
            raise ValueError(
                f"forward_train requires the diagonal mask, got {spec.kind!r}"
            )
        self.backbone._check_spec(spec)
        grids = self._grid_batch(grids)
        b = grids.shape[0]
        prefix_rows = self._prefix_rows(condition, b)
        mapping = spec.mapping()
        seq_grid = grids[:, mapping.coords[:, 0], mapping.coords[:, 1]]
        ids = np.concatenate([prefix_rows, seq_grid], axis=1)
        allowed = mask_block(spec, 0, spec.seq_len, 0, spec.seq_len)
        x = self.backbone._embed_span(ids, mapping, 0)
        for lp in self.backbone.layers[: self.branch.branch_point]:
            x = self.backbone.block_full(x, lp, allowed)
        h_h = self._branch_blocks(x, self.backbone.layers[self.branch.branch_point :], allowed)
        h_v = self._branch_blocks(x, self.vertical_layers, allowed)
        h_h = ad.rms_norm(h_h, self.backbone.final_gain, eps=cfg.norm_eps)
        h_v = ad.rms_norm(h_v, self.vertical_gain, eps=cfg.norm_eps)
        z_h = ad.matmul(h_h, self.backbone.head)
        z_v = ad.matmul(h_v, self.vertical_head)
        fused, gate_map = self._assemble_fused(z_h, z_v, h_h, h_v, mapping, b)
        return TrainForwardOutput(
            fused=fused, z_h=z_h, z_v=z_v, gate_map=gate_map, spec=spec
        )

    def _assemble_fused(
        self,
        z_h: Tensor,
        z_v: Tensor,
        h_h: Tensor,
        h_v: Tensor,
        mapping: OrderMapping,
        batch: int,
    ) -> tuple[Tensor, np.ndarray]:
        """Route every target cell to its logit source and fuse interior
        targets through the gate; output ordered by raster target index."""
        cfg = self.config
        H, W, P = cfg.grid_height, cfg.grid_width, cfg.prefix_len
        dindex = mapping.index  # (H, W) -> sequence slot - P

        # group 1: corner (0,0), horizontal head on the last prefix state
        parts = [z_h[:, P - 1 : P]]
        target_raster = [0]
        # group 2: first row (0,q), q >= 1, from z_h at (0, q-1)
        if W > 1:
            src = P + dindex[0, : W - 1]
            parts.append(ad.index_select(z_h, 1, src))
            target_raster.extend(range(1, W))
        # group 3: first column (p,0), p >= 1, from z_v at (p-1, 0)
        if H > 1:
            src = P + dindex[: H - 1, 0]
            parts.append(ad.index_select(z_v, 1, src))
            target_raster.extend(p * W for p in range(1, H))
        # group 4: interior (p,q), gated fusion of both predecessors
        gate_interior = None
        if H > 1 and W > 1:
            h_src = (P + dindex[1:, : W - 1]).reshape(-1)  # (p, q-1)
            v_src = (P + dindex[: H - 1, 1:]).reshape(-1)  # (p-1, q)
            joint = ad.concat(
                [ad.index_select(h_h, 1, h_src), ad.index_select(h_v, 1, v_src)],
                axis=-1,
            )
            gate_interior = self.gate.apply(joint)  # (B, n_int, 1)
            fused_int = fuse_logits(
                gate_interior,
                ad.index_select(z_h, 1, h_src),
                ad.index_select(z_v, 1, v_src),
            )
            parts.append(fused_int)
            target_raster.extend(
                p * W + q for p in range(1, H) for q in range(1, W)
            )
        grouped = ad.concat(parts, axis=1)
        order = np.empty(H * W, dtype=np.int64)
        order[np.asarray(target_raster)] = np.arange(H * W)
        fused = ad.index_select(grouped, 1, order)

        gate_map = np.zeros((batch, H, W), dtype=np.float32)
        gate_map[:, 0, :] = 1.0  # first row and corner ride z_h
        gate_map[:, 1:, 0] = 0.0  # first column rides z_v
        if gate_interior is not None:
            gate_map[:, 1:, 1:] = gate_interior.data[..., 0].reshape(
                batch, H - 1, W - 1
            )
        return fused, gate_map

    def forward_incremental(
        self, new_ids: np.ndarray, caches: KVCacheSet, spec: MaskSpec
    ) -> BranchState:
        """Push appended positions through trunk and both branches,
        filling the trunk-shared and branch-specific caches."""
        if spec.kind != "diagonal":
            raise ValueError(
                f"dual-head decode requires the diagonal mask, got {spec.kind!r}"
            )
        self.backbone._check_spec(spec)
        bb = self.backbone
        cfg = self.config
        start = caches.aligned_length()
        n = np.asarray(new_ids).shape[1]
        tile = mask_block(spec, start, start + n, 0, start + n)
        x = bb._embed_span(np.asarray(new_ids), spec.mapping(), start)
        for i, lp in enumerate(bb.layers[: self.branch.branch_point]):
            x = bb.block_incremental(x, lp, caches, "trunk", i, tile, start)
        caches.advance("trunk", n)
        h_h = x
        for j, lp in enumerate(bb.layers[self.branch.branch_point :]):
            h_h = bb.block_incremental(h_h, lp, caches, "horizontal", j, tile, start)
        caches.advance("horizontal", n)
        h_v = x
        for j, lp in enumerate(self.vertical_layers):
            h_v = bb.block_incremental(h_v, lp, caches, "vertical", j, tile, start)
        caches.advance("vertical", n)
        h_h = ad.rms_norm(h_h, bb.final_gain, eps=cfg.norm_eps)
        h_v = ad.rms_norm(h_v, self.vertical_gain, eps=cfg.norm_eps)
        z_h = ad.matmul(h_h, bb.head)
        z_v = ad.matmul(h_v, self.vertical_head)
        return BranchState(
            trunk=x.data,
            h_h=h_h.data,
            h_v=h_v.data,
            z_h=z_h.data,
            z_v=z_v.data,
        )

    def make_caches(self, batch: int) -> KVCacheSet:
        m = self.branch.branch_point
        return KVCacheSet(
            batch,
            self.config.seq_len,
            self.config.d_model,
            {
                "trunk": m,
                "horizontal": self.config.num_layers - m,
                "vertical": self.config.num_layers - m,
            },
        )

    # -- helpers ---------------------------------------------------------

    def _grid_batch(self, grids) -> np.ndarray:
        cfg = self.config
        if hasattr(grids, "tokens"):  # TokenGrid
            grids = grids.tokens[None]
        grids = np.asarray(grids)
        if grids.ndim != 3 or grids.shape[1:] != (cfg.grid_height, cfg.grid_width):
            raise ValueError(
                f"grid batch shape {grids.shape} does not match "
                f"{cfg.grid_height}x{cfg.grid_width}"
            )
        return grids

    def _prefix_rows(self, condition, batch: int) -> np.ndarray:
        if isinstance(condition, ConditionPrefix):
            rows = condition.token_rows(self.config)
            return np.repeat(rows[None], batch, axis=0)
        rows = np.asarray(condition)
        if rows.shape != (batch, self.config.prefix_len):
            raise ValueError(
                f"prefix rows shape {rows.shape} does not match "
                f"({batch}, {self.config.prefix_len})"
            )
        return rows
