"""Training loops: raster pretraining, two-stage two-way adaptation, and
a linear probe over layer depth.

Adaptation minimizes

    total = L_fuse + aux * (L_H + L_V),

where L_fuse is cross-entropy of the fused logits against every grid
cell, and L_H / L_V are auxiliary losses keeping each branch honest on
its own direction: the horizontal states at (p, q) predict y[p, q+1]
(defined for q <= W-2), the vertical states at (p, q) predict y[p+1, q]
(p <= H-2).  Stage 1 trains only the new components (vertical branch,
vertical head, gate) with the inherited weights frozen; stage 2 trains
everything with the inherited weights on a reduced rate multiplier.
Both stages share one warmup + cosine schedule over the full run.

Metrics are line-delimited JSON records with a fixed schema:
{"step", "stage", "lr", "L_fuse", "L_H", "L_V", "total", "eval_nll"};
pretraining logs its single cross-entropy under L_fuse with stage 0 and
zero auxiliaries so one reader handles both phases.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .adapter import DualHeadModel, TrainForwardOutput
from .autodiff import Tape, Tensor
from .checkpoint import (
    Checkpoint,
    checkpoint_from_model,
    model_from_checkpoint,
    save_checkpoint,
)
from .data import Dataset, eval_nll, split_indices
from .grid import MaskSpec, TokenGrid
from .model import Backbone, ModelConfig, condition_rows
from .optim import AdamW, LRSchedule, ParamGroup


def substream(seed: int, name: str) -> np.random.Generator:
    """Named RNG stream fanned out from one master seed.

    Streams for different names are statistically independent and stable
    across runs, so every consumer (init, batching, sampling, ...) can
    be reseeded without coordinating offsets.
    """
    return np.random.default_rng(
        np.random.SeedSequence((int(seed), zlib.crc32(name.encode())))
    )


@dataclass(frozen=True)
class LossWeights:
    """`aux` scales the two directional auxiliary losses."""

    aux: float = 0.05

    def __post_init__(self) -> None:
        if self.aux < 0:
            raise ValueError(f"aux weight must be >= 0, got {self.aux}")


@dataclass(frozen=True)
class TrainSchedule:
    """Run length, batch size, learning-rate plan, and bookkeeping knobs
    shared by the pretraining and adaptation loops."""

    total_steps: int
    base_rate: float
    batch_size: int = 16
    warmup_steps: int = 0
    stage1_fraction: float = 0.2
    cond_dropout: float = 0.1
    eval_every: int = 50
    eval_samples: int = 128
    checkpoint_every: int = 0  # 0: save only the final checkpoint
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.stage1_fraction <= 1.0:
            raise ValueError(
                f"stage1_fraction must be in [0, 1], got {self.stage1_fraction}"
            )
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ValueError(
                f"cond_dropout must be in [0, 1], got {self.cond_dropout}"
            )
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    @property
    def stage_boundary(self) -> int:
        """First step of stage 2: floor(stage1_fraction * total_steps)."""
        return math.floor(self.stage1_fraction * self.total_steps)

    def rates(self) -> LRSchedule:
        return LRSchedule(self.base_rate, self.total_steps, self.warmup_steps)


def compute_losses(
    out: TrainForwardOutput, grids, weights: LossWeights
) -> dict[str, Tensor]:
    """The adaptation objective, decomposed.

    Returns scalar Tensors {"fuse", "h", "v", "total"} with
    total = fuse + aux * (h + v) built from the same graph, so the
    decomposition holds to float arithmetic, and aux = 0 makes total
    bit-identical to fuse.  Degenerate directions (W == 1 or H == 1)
    contribute a constant zero.
    """
    if isinstance(grids, TokenGrid):
        grids = grids.tokens[None]
    grids = np.asarray(grids)
    spec = out.spec
    H, W, P = spec.height, spec.width, spec.prefix_len
    if grids.ndim != 3 or grids.shape[1:] != (H, W):
        raise ValueError(
            f"targets shaped {grids.shape} do not match a (B, {H}, {W}) batch"
        )
    flat = grids.reshape(grids.shape[0], H * W)
    fuse = ad.mean(ad.cross_entropy(out.fused, flat))
    dindex = spec.mapping().index
    if W > 1:
        h_src = (P + dindex[:, :-1]).reshape(-1)
        h_tgt = grids[:, :, 1:].reshape(grids.shape[0], -1)
        h = ad.mean(
            ad.cross_entropy(ad.index_select(out.z_h, 1, h_src), h_tgt)
        )
    else:
        h = Tensor(np.float32(0.0))
    if H > 1:
        v_src = (P + dindex[:-1, :]).reshape(-1)
        v_tgt = grids[:, 1:, :].reshape(grids.shape[0], -1)
        v = ad.mean(
            ad.cross_entropy(ad.index_select(out.z_v, 1, v_src), v_tgt)
        )
    else:
        v = Tensor(np.float32(0.0))
    total = ad.add(fuse, ad.mul(weights.aux, ad.add(h, v)))
    return {"fuse": fuse, "h": h, "v": v, "total": total}


@dataclass
class TrainResult:
    """Final checkpoint plus the metric records the run produced."""

    checkpoint: Checkpoint
    records: list[dict] = field(default_factory=list)


class _MetricsLog:
    def __init__(self, path=None):
        self.records: list[dict] = []
        self._fh = open(path, "a", encoding="utf-8") if path else None

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _check_dataset(config: ModelConfig, dataset: Dataset) -> None:
    if (dataset.height, dataset.width) != (config.grid_height, config.grid_width):
        raise ValueError(
            f"dataset grids {dataset.height}x{dataset.width} do not match "
            f"model {config.grid_height}x{config.grid_width}"
        )
    if dataset.vocab_size != config.vocab_size:
        raise ValueError(
            f"dataset vocab {dataset.vocab_size} != model {config.vocab_size}"
        )
    if dataset.num_classes > config.num_classes:
        raise ValueError(
            f"dataset has {dataset.num_classes} classes, model embeds "
            f"{config.num_classes}"
        )


def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def _maybe_eval(model, dataset, val_idx, schedule, step) -> float | None:
    due = (step + 1) % schedule.eval_every == 0 or step + 1 == schedule.total_steps
    if not due or len(val_idx) == 0:
        return None
    take = val_idx[: schedule.eval_samples]
    return float(eval_nll(model, dataset, take).nll)


def pretrain_raster(
    config: ModelConfig,
    dataset: Dataset,
    schedule: TrainSchedule,
    *,
    log_path=None,
    checkpoint_dir=None,
    resume_from: Checkpoint | None = None,
) -> TrainResult:
    """Left-to-right pretraining: plain next-token cross-entropy over the
    raster order, with class prefixes dropped to the unconditional token
    at `cond_dropout` rate."""
    _check_dataset(config, dataset)
    train_idx, val_idx = split_indices(len(dataset), schedule.val_fraction)
    if len(train_idx) == 0:
        raise ValueError("training split is empty")
    if resume_from is not None:
        if resume_from.kind != "raster":
            raise ValueError(
                f"cannot resume raster pretraining from a "
                f"{resume_from.kind!r} checkpoint"
            )
        model = model_from_checkpoint(resume_from)
        start = resume_from.step
        rng = _restore_rng(resume_from.rng_state)
        opt_state = resume_from.opt_state
    else:
        model = Backbone.initialize(config, substream(schedule.seed, "init"))
        start = 0
        rng = substream(schedule.seed, "pretrain")
        opt_state = None
    params = model.named_parameters()
    tensors = [p for _, p in params]
    opt = AdamW([ParamGroup(params)], state=opt_state if opt_state else None)
    spec = MaskSpec(
        "raster", config.grid_height, config.grid_width, config.prefix_len
    )
    rates = schedule.rates()
    P, T = config.prefix_len, config.seq_len
    log = _MetricsLog(log_path)
    try:
        for s in range(start, schedule.total_steps):
            rate = rates.rate_at(s)
            batch = train_idx[rng.integers(0, len(train_idx), schedule.batch_size)]
            grids = dataset.tokens[batch]
            drop = rng.random(schedule.batch_size) < schedule.cond_dropout
            rows = condition_rows(config, dataset.class_ids[batch], drop)
            flat = grids.reshape(len(batch), -1)
            ids = np.concatenate([rows, flat], axis=1)
            with Tape() as tape:
                res = model.forward_full(ids, spec)
                loss = ad.mean(
                    ad.cross_entropy(res.logits[:, P - 1 : T - 1], flat)
                )
                tape.backward(loss, tensors)
            opt.step(rate)
            opt.zero_grad()
            value = float(loss.data)
            log.append(
                {
                    "step": s,
                    "stage": 0,
                    "lr": rate,
                    "L_fuse": value,
                    "L_H": 0.0,
                    "L_V": 0.0,
                    "total": value,
                    "eval_nll": _maybe_eval(model, dataset, val_idx, schedule, s),
                }
            )
            _maybe_save(model, opt, rng, s, schedule, checkpoint_dir)
    finally:
        log.close()
    ckpt = checkpoint_from_model(
        model,
        step=schedule.total_steps,
        rng_state=rng.bit_generator.state,
        optimizer=opt,
    )
    if checkpoint_dir is not None:
        save_checkpoint(ckpt, _ckpt_path(checkpoint_dir, "final.ckpt"))
    return TrainResult(ckpt, log.records)


def _ckpt_path(checkpoint_dir, name: str) -> Path:
    path = Path(checkpoint_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path / name


def _maybe_save(model, opt, rng, step, schedule, checkpoint_dir) -> None:
    every = schedule.checkpoint_every
    if checkpoint_dir is None or every == 0:
        return
    done = step + 1
    if done % every != 0 or done == schedule.total_steps:
        return
    ckpt = checkpoint_from_model(
        model, step=done, rng_state=rng.bit_generator.state, optimizer=opt
    )
    save_checkpoint(ckpt, _ckpt_path(checkpoint_dir, f"step{done:06d}.ckpt"))


def adapt(
    base: Checkpoint | None,
    branch_point: int,
    dataset: Dataset,
    schedule: TrainSchedule,
    weights: LossWeights = LossWeights(),
    *,
    log_path=None,
    checkpoint_dir=None,
    resume_from: Checkpoint | None = None,
) -> TrainResult:
    """Two-stage adaptation of a pretrained raster model into the
    two-way form.

    Steps [0, floor(stage1_fraction * total)) are stage 1: inherited
    weights frozen (no gradients computed through them), new components
    at the full rate.  The rest is stage 2: everything trains, inherited
    weights at a 0.2 rate multiplier.  One optimizer spans both stages;
    reconfiguring at the boundary keeps its moments.
    """
    if resume_from is not None:
        if resume_from.kind != "dual":
            raise ValueError(
                f"cannot resume adaptation from a {resume_from.kind!r} checkpoint"
            )
        if resume_from.branch_config.branch_point != branch_point:
            raise ValueError(
                f"resume checkpoint branches at "
                f"{resume_from.branch_config.branch_point}, not {branch_point}"
            )
        dual = model_from_checkpoint(resume_from)
        start = resume_from.step
        rng = _restore_rng(resume_from.rng_state)
        opt_state = resume_from.opt_state
    else:
        if base is None:
            raise ValueError("adaptation needs a base checkpoint or a resume")
        if base.kind != "raster":
            raise ValueError(
                f"adaptation starts from a raster checkpoint, got {base.kind!r}"
            )
        dual = DualHeadModel.build_from_pretrained(
            model_from_checkpoint(base),
            branch_point,
            substream(schedule.seed, "branch-init"),
        )
        start = 0
        rng = substream(schedule.seed, "adapt")
        opt_state = None
    config = dual.config
    _check_dataset(config, dataset)
    train_idx, val_idx = split_indices(len(dataset), schedule.val_fraction)
    if len(train_idx) == 0:
        raise ValueError("training split is empty")
    boundary = schedule.stage_boundary
    opt = AdamW([ParamGroup([])], state=opt_state if opt_state else None)
    spec = MaskSpec(
        "diagonal", config.grid_height, config.grid_width, config.prefix_len
    )
    rates = schedule.rates()
    log = _MetricsLog(log_path)
    stage = None
    trainable: list[Tensor] = []
    try:
        for s in range(start, schedule.total_steps):
            want = 1 if s < boundary else 2
            if want != stage:
                stage = want
                part = dual.trainable_sets(stage)
                # Frozen parameters drop out of the graph entirely, so
                # their gradients are exactly zero by construction.
                for _, p in part.frozen:
                    p.requires_grad = False
                    p.grad = None
                for group, _ in part.trainable:
                    for _, p in group:
                        p.requires_grad = True
                opt.reconfigure(
                    [ParamGroup(ps, mult) for ps, mult in part.trainable]
                )
                trainable = [p for ps, _ in part.trainable for _, p in ps]
            rate = rates.rate_at(s)
            batch = train_idx[rng.integers(0, len(train_idx), schedule.batch_size)]
            grids = dataset.tokens[batch]
            drop = rng.random(schedule.batch_size) < schedule.cond_dropout
            rows = condition_rows(config, dataset.class_ids[batch], drop)
            with Tape() as tape:
                out = dual.forward_train(grids, rows, spec)
                losses = compute_losses(out, grids, weights)
                tape.backward(losses["total"], trainable)
            opt.step(rate)
            opt.zero_grad()
            log.append(
                {
                    "step": s,
                    "stage": stage,
                    "lr": rate,
                    "L_fuse": float(losses["fuse"].data),
                    "L_H": float(losses["h"].data),
                    "L_V": float(losses["v"].data),
                    "total": float(losses["total"].data),
                    "eval_nll": _maybe_eval(dual, dataset, val_idx, schedule, s),
                }
            )
            _maybe_save(dual, opt, rng, s, schedule, checkpoint_dir)
    finally:
        log.close()
        for _, p in dual.named_parameters():
            p.requires_grad = True
    ckpt = checkpoint_from_model(
        dual,
        step=schedule.total_steps,
        rng_state=rng.bit_generator.state,
        optimizer=opt,
    )
    if checkpoint_dir is not None:
        save_checkpoint(ckpt, _ckpt_path(checkpoint_dir, "final.ckpt"))
    return TrainResult(ckpt, log.records)


def probe_budget(pretrain_steps: int) -> int:
    """The probe's training budget: 5% of the pretraining run."""
    return max(1, math.floor(0.05 * pretrain_steps))


@dataclass
class ProbeResult:
    """Which depths carry below-neighbor information.

    `weights` is the learned softmax mixture over layer outputs; the
    per-layer rows are independent probes, one linear head per depth.
    """

    weights: np.ndarray  # (L,) softmax over depth, sums to 1
    agg_nll: float
    agg_accuracy: float
    per_layer_nll: np.ndarray  # (L,)
    per_layer_accuracy: np.ndarray  # (L,)
    deepest_is_max: bool
    steps: int

    def to_json(self) -> dict:
        return {
            "weights": [float(w) for w in self.weights],
            "agg_nll": self.agg_nll,
            "agg_accuracy": self.agg_accuracy,
            "per_layer_nll": [float(x) for x in self.per_layer_nll],
            "per_layer_accuracy": [float(x) for x in self.per_layer_accuracy],
            "deepest_is_max": self.deepest_is_max,
            "steps": self.steps,
        }


def _probe_batch(model, dataset, idx, src):
    """Forward a batch through the frozen backbone; return the per-layer
    hidden states at the probed positions plus the below-neighbor targets."""
    config = model.config
    grids = dataset.tokens[idx]
    rows = condition_rows(config, dataset.class_ids[idx])
    ids = np.concatenate([rows, grids.reshape(len(idx), -1)], axis=1)
    spec = MaskSpec(
        "raster", config.grid_height, config.grid_width, config.prefix_len
    )
    res = model.forward_full(ids, spec)
    states = [ad.index_select(h, 1, src) for h in res.hidden]
    targets = grids[:, 1:, :].reshape(len(idx), -1)
    return states, targets


def linear_probe(
    base: Checkpoint,
    dataset: Dataset,
    steps: int,
    *,
    batch_size: int = 16,
    rate: float = 1e-2,
    seed: int = 0,
    eval_samples: int = 256,
) -> ProbeResult:
    """Train linear read-outs of the frozen backbone for the vertical
    (below-neighbor) task: states at (p, q) predict y[p+1, q].

    One probe mixes layer outputs with softmax weights initialized
    uniform (all-zero scores); L more read each layer alone.  The
    mixture weights reveal which depths the representation keeps
    column-structure in; `deepest_is_max` flags whether the last layer
    dominates.
    """
    if base.kind != "raster":
        raise ValueError(f"probe expects a raster checkpoint, got {base.kind!r}")
    model = model_from_checkpoint(base)
    _check_dataset(model.config, dataset)
    config = model.config
    H, W, P = config.grid_height, config.grid_width, config.prefix_len
    if H < 2:
        raise ValueError("below-neighbor probe needs grid_height >= 2")
    for _, p in model.named_parameters():
        p.requires_grad = False
    L, d, V = config.num_layers, config.d_model, config.vocab_size
    rng = substream(seed, "probe")
    theta = Tensor(np.zeros(L, dtype=np.float32), requires_grad=True)
    agg_head = Tensor(
        (0.02 * rng.standard_normal((d, V))).astype(np.float32),
        requires_grad=True,
    )
    layer_heads = [
        Tensor(
            (0.02 * rng.standard_normal((d, V))).astype(np.float32),
            requires_grad=True,
        )
        for _ in range(L)
    ]
    named = [("probe.theta", theta), ("probe.head", agg_head)]
    named += [(f"probe.layer{l}", h) for l, h in enumerate(layer_heads)]
    tensors = [p for _, p in named]
    opt = AdamW([ParamGroup(named)], weight_decay=0.0)
    rates = LRSchedule(rate, steps) if steps > 0 else None
    train_idx, val_idx = split_indices(len(dataset), 0.1)
    # probed source positions: every cell except the last row
    src = P + np.arange((H - 1) * W)
    inv_l = np.float32(1.0 / L)
    for s in range(steps):
        idx = train_idx[rng.integers(0, len(train_idx), batch_size)]
        with Tape() as tape:
            states, targets = _probe_batch(model, dataset, idx, src)
            w = ad.softmax(theta)
            mixed = None
            losses = []
            for l in range(L):
                term = ad.mul(states[l], w[l])
                mixed = term if mixed is None else ad.add(mixed, term)
                lvl = ad.mean(
                    ad.cross_entropy(ad.matmul(states[l], layer_heads[l]), targets)
                )
                losses.append(lvl)
            agg_loss = ad.mean(
                ad.cross_entropy(ad.matmul(mixed, agg_head), targets)
            )
            per_layer = losses[0]
            for lvl in losses[1:]:
                per_layer = ad.add(per_layer, lvl)
            loss = ad.add(agg_loss, ad.mul(inv_l, per_layer))
            tape.backward(loss, tensors)
        opt.step(rates.rate_at(s))
        opt.zero_grad()

    # held-out scoring, plain numpy
    weights = np.exp(theta.data - theta.data.max())
    weights = weights / weights.sum()
    take = val_idx[:eval_samples] if len(val_idx) else train_idx[:eval_samples]
    agg_nll = agg_hit = 0.0
    nll_l = np.zeros(L)
    hit_l = np.zeros(L)
    count = 0
    for lo in range(0, len(take), batch_size):
        idx = take[lo : lo + batch_size]
        states, targets = _probe_batch(model, dataset, idx, src)
        flat_t = targets.reshape(-1)
        mix = np.zeros_like(states[0].data)
        for l in range(L):
            h = states[l].data
            mix = mix + weights[l] * h
            nll_l[l] += _nll_sum(h @ layer_heads[l].data, flat_t)
            hit_l[l] += _hits(h @ layer_heads[l].data, flat_t)
        agg_nll += _nll_sum(mix @ agg_head.data, flat_t)
        agg_hit += _hits(mix @ agg_head.data, flat_t)
        count += flat_t.size
    if count == 0:
        raise ValueError("no samples to score the probe on")
    return ProbeResult(
        weights=weights,
        agg_nll=agg_nll / count,
        agg_accuracy=agg_hit / count,
        per_layer_nll=nll_l / count,
        per_layer_accuracy=hit_l / count,
        deepest_is_max=bool(np.argmax(weights) == L - 1),
        steps=steps,
    )


def _nll_sum(logits: np.ndarray, flat_targets: np.ndarray) -> float:
    z = logits.reshape(-1, logits.shape[-1]).astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(flat_targets)), flat_targets].sum())


def _hits(logits: np.ndarray, flat_targets: np.ndarray) -> float:
    pred = logits.reshape(-1, logits.shape[-1]).argmax(axis=1)
    return float((pred == flat_targets).sum())
