"""Command-line entry point.

Subcommands cover the whole workflow:

    gen-data   write a synthetic labelled-grid dataset file
    pretrain   raster-order pretraining into a checkpoint
    adapt      two-stage conversion to the two-way generator
    probe      depth probe of a pretrained backbone (below-neighbor task)
    sample     decode grids from a checkpoint (or a fresh random model)
    eval       teacher-forced NLL / accuracy on a dataset split
    bench      wall-clock raster vs two-way decode comparison

Every command accepts `--config FILE` (flat `key = value` lines) and
repeatable `--set key=value` overrides; precedence is defaults < file
< flags.  Commands that produce artifacts take `--run-dir` and lay it
out as config.resolved, metrics.log, checkpoints/, samples/, reports/.

Exit codes: 0 success, 2 usage/config errors, 3 missing files,
4 malformed inputs (corrupt files, mismatched checkpoints), 1 anything
else.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .adapter import DualHeadModel
from .checkpoint import (
    checkpoint_from_model,
    load_checkpoint,
    model_from_checkpoint,
)
from .config import ConfigError, RunConfig, derive_seed, dump_config, resolve_config
from .data import (
    Dataset,
    default_palette,
    default_pattern_specs,
    eval_nll,
    generate_dataset,
    load_dataset,
    pattern_validity,
    render_grid,
    save_dataset,
    split_indices,
)
from .decoding import CFGConfig, SamplerConfig, bench, decode_diagonal, decode_raster
from .model import Backbone
from .training import (
    LossWeights,
    TrainSchedule,
    adapt,
    linear_probe,
    pretrain_raster,
    probe_budget,
    substream,
)


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config field (repeatable)",
    )
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diagar",
        description="train and run two-way diagonal grid generators",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset file")
    _common_flags(p)
    p.add_argument("--out", required=True, help="dataset file to write")

    p = sub.add_parser("pretrain", help="raster-order pretraining")
    _common_flags(p)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--data", help="dataset file (default: generate from config)")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("adapt", help="two-stage two-way adaptation")
    _common_flags(p)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--base", help="pretrained raster checkpoint")
    p.add_argument("--data", help="dataset file (default: generate from config)")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("probe", help="layer-depth probe of a backbone")
    _common_flags(p)
    p.add_argument("--checkpoint", required=True, help="raster checkpoint")
    p.add_argument("--data", help="dataset file (default: generate from config)")
    p.add_argument("--run-dir", help="write reports/probe.json here")

    p = sub.add_parser("sample", help="decode grids from a checkpoint")
    _common_flags(p)
    p.add_argument(
        "--checkpoint",
        help="model checkpoint; omit to sample an untrained model",
    )
    p.add_argument("--run-dir", required=True)

    p = sub.add_parser("eval", help="teacher-forced NLL and accuracy")
    _common_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset file (default: generate from config)")
    p.add_argument("--run-dir", help="write reports/eval.json here")

    p = sub.add_parser("bench", help="raster vs two-way decode timing")
    _common_flags(p)
    p.add_argument(
        "--checkpoint",
        help="two-way checkpoint; omit to time an untrained model",
    )
    p.add_argument("--run-dir", help="write reports/bench.{json,txt} here")
    return parser


def _resolve(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return resolve_config(args.config, overrides)


def _prepare_run_dir(path, cfg: RunConfig) -> Path:
    run = Path(path)
    for sub_dir in ("checkpoints", "samples", "reports"):
        (run / sub_dir).mkdir(parents=True, exist_ok=True)
    (run / "config.resolved").write_text(dump_config(cfg), encoding="utf-8")
    return run


def _dataset(cfg: RunConfig, data_path) -> Dataset:
    if data_path is not None:
        return load_dataset(data_path)
    m = cfg.model
    specs = default_pattern_specs(
        m.num_classes,
        m.grid_height,
        m.grid_width,
        m.vocab_size,
        cfg.data.noise_rate,
        derive_seed(cfg.seed, "patterns"),
    )
    return generate_dataset(specs, cfg.data.count, derive_seed(cfg.seed, "data"))


def _schedule(cfg: RunConfig, phase) -> TrainSchedule:
    kwargs = dict(
        total_steps=phase.steps,
        base_rate=phase.base_rate,
        batch_size=phase.batch_size,
        warmup_steps=phase.warmup_steps,
        cond_dropout=phase.cond_dropout,
        eval_every=phase.eval_every,
        eval_samples=phase.eval_samples,
        checkpoint_every=phase.checkpoint_every,
        val_fraction=cfg.data.val_fraction,
        seed=cfg.seed,
    )
    if hasattr(phase, "stage1_fraction"):
        kwargs["stage1_fraction"] = phase.stage1_fraction
    return TrainSchedule(**kwargs)


def _cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    dataset = _dataset(cfg, None)
    save_dataset(dataset, args.out)
    print(
        f"wrote {len(dataset)} {dataset.height}x{dataset.width} grids "
        f"({dataset.num_classes} classes) to {args.out}"
    )
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _resolve(args)
    run = _prepare_run_dir(args.run_dir, cfg)
    dataset = _dataset(cfg, args.data)
    resume = load_checkpoint(args.resume) if args.resume else None
    result = pretrain_raster(
        cfg.model,
        dataset,
        _schedule(cfg, cfg.pretrain),
        log_path=run / "metrics.log",
        checkpoint_dir=run / "checkpoints",
        resume_from=resume,
    )
    last = result.records[-1] if result.records else {}
    print(
        f"pretrained {cfg.pretrain.steps} steps; final loss "
        f"{last.get('total', float('nan')):.4f}, eval nll "
        f"{last.get('eval_nll')}; checkpoint in {run / 'checkpoints'}"
    )
    return 0


def _cmd_adapt(args) -> int:
    cfg = _resolve(args)
    run = _prepare_run_dir(args.run_dir, cfg)
    dataset = _dataset(cfg, args.data)
    resume = load_checkpoint(args.resume) if args.resume else None
    if args.base is None and resume is None:
        raise ConfigError("adapt needs --base (or --resume)")
    base = load_checkpoint(args.base) if args.base else None
    result = adapt(
        base,
        cfg.adapt.branch_point,
        dataset,
        _schedule(cfg, cfg.adapt),
        LossWeights(cfg.adapt.aux_weight),
        log_path=run / "metrics.log",
        checkpoint_dir=run / "checkpoints",
        resume_from=resume,
    )
    last = result.records[-1] if result.records else {}
    print(
        f"adapted {cfg.adapt.steps} steps (branch at "
        f"{cfg.adapt.branch_point}); final fused loss "
        f"{last.get('L_fuse', float('nan')):.4f}, eval nll "
        f"{last.get('eval_nll')}; checkpoint in {run / 'checkpoints'}"
    )
    return 0


def _cmd_probe(args) -> int:
    cfg = _resolve(args)
    ckpt = load_checkpoint(args.checkpoint)
    dataset = _dataset(cfg, args.data)
    steps = cfg.probe.steps or probe_budget(cfg.pretrain.steps)
    result = linear_probe(
        ckpt,
        dataset,
        steps,
        batch_size=cfg.probe.batch_size,
        rate=cfg.probe.rate,
        seed=cfg.seed,
        eval_samples=cfg.probe.eval_samples,
    )
    weights = ", ".join(f"{w:.3f}" for w in result.weights)
    print(f"depth weights [{weights}] after {steps} steps")
    print(
        f"deepest layer {'dominates' if result.deepest_is_max else 'does not dominate'}; "
        f"mixture nll {result.agg_nll:.4f}"
    )
    if args.run_dir:
        run = _prepare_run_dir(args.run_dir, cfg)
        out = run / "reports" / "probe.json"
        out.write_text(json.dumps(result.to_json(), indent=2), encoding="utf-8")
        print(f"wrote {out}")
    return 0


def _sample_model(args, cfg: RunConfig):
    if args.checkpoint:
        return model_from_checkpoint(load_checkpoint(args.checkpoint))
    # fresh random weights: useful for smoke tests and layout previews
    base = Backbone.initialize(cfg.model, substream(cfg.seed, "init"))
    if cfg.sample.mode == "diagonal":
        return DualHeadModel.build_from_pretrained(
            base, cfg.adapt.branch_point, substream(cfg.seed, "branch-init")
        )
    return base


def _cmd_sample(args) -> int:
    cfg = _resolve(args)
    s = cfg.sample
    if s.mode not in ("diagonal", "raster"):
        raise ConfigError(f"sample.mode must be diagonal or raster, got {s.mode!r}")
    model = _sample_model(args, cfg)
    if s.mode == "diagonal" and not isinstance(model, DualHeadModel):
        raise ValueError(
            "diagonal sampling needs a two-way checkpoint; "
            "use sample.mode=raster for this one"
        )
    run = _prepare_run_dir(args.run_dir, cfg)
    num_classes = model.config.num_classes
    if s.unconditional:
        class_ids = None
        if s.guided:
            raise ConfigError(
                "unconditional sampling cannot be guided; set sample.guided=false"
            )
    elif s.class_id is not None:
        class_ids = np.full(s.num, s.class_id)
    else:
        class_ids = np.arange(s.num) % num_classes
    sampler = SamplerConfig(
        greedy=s.greedy,
        temperature=s.temperature,
        top_k=s.top_k,
        seed=cfg.seed,
    )
    guidance = CFGConfig(s.cfg_scale) if s.guided else None
    decode = decode_diagonal if s.mode == "diagonal" else decode_raster
    rng = substream(cfg.seed, "sample")
    palette = default_palette(model.config.vocab_size)
    grids = []
    traces = []
    for lo in range(0, s.num, s.chunk):
        ids = None if class_ids is None else class_ids[lo : lo + s.chunk]
        n = min(s.chunk, s.num - lo)
        res = decode(
            model,
            ids,
            batch_size=None if ids is not None else n,
            sampler=sampler,
            guidance=guidance,
            rng=rng,
        )
        grids.append(res.grids)
        traces.append(res.trace)
    grids = np.concatenate(grids, axis=0)
    sample_dir = run / "samples"
    for i in range(s.num):
        ppm = render_grid(
            grids[i].astype(np.int64), palette
        )
        (sample_dir / f"sample_{i:03d}.ppm").write_bytes(ppm)
    manifest = {
        "mode": s.mode,
        "num": s.num,
        "class_ids": None if class_ids is None else class_ids.tolist(),
        "steps_per_decode": traces[0].steps,
        "widths": traces[0].widths,
        "seconds": [t.total_seconds for t in traces],
        "sampler": {
            "greedy": s.greedy,
            "temperature": s.temperature,
            "top_k": s.top_k,
            "seed": cfg.seed,
        },
        "guidance_scale": s.cfg_scale if s.guided else None,
    }
    (sample_dir / "samples.json").write_text(
        json.dumps(manifest, indent=2), encoding="utf-8"
    )
    print(
        f"wrote {s.num} {s.mode} samples to {sample_dir} "
        f"({traces[0].steps} forwards per decode)"
    )
    return 0


def _cmd_eval(args) -> int:
    cfg = _resolve(args)
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    dataset = _dataset(cfg, args.data)
    _, val_idx = split_indices(len(dataset), cfg.data.val_fraction)
    if len(val_idx) == 0:
        raise ConfigError("validation split is empty; raise data.val_fraction")
    report = eval_nll(model, dataset, val_idx)
    kind = "fused two-way" if isinstance(model, DualHeadModel) else "raster"
    print(
        f"{kind} nll {report.nll:.4f}, accuracy {report.accuracy:.4f} "
        f"over {report.count} held-out grids"
    )
    if args.run_dir:
        run = _prepare_run_dir(args.run_dir, cfg)
        payload = {
            "kind": kind,
            "nll": float(report.nll),
            "accuracy": float(report.accuracy),
            "count": report.count,
            "per_class": {
                str(c): {k: float(v) for k, v in stats.items()}
                for c, stats in sorted(report.per_class.items())
            },
        }
        out = run / "reports" / "eval.json"
        out.write_text(json.dumps(payload, indent=2), encoding="utf-8")
        print(f"wrote {out}")
    return 0


def _cmd_bench(args) -> int:
    cfg = _resolve(args)
    if args.checkpoint:
        model = model_from_checkpoint(load_checkpoint(args.checkpoint))
        if not isinstance(model, DualHeadModel):
            raise ValueError("bench needs a two-way checkpoint")
    else:
        base = Backbone.initialize(cfg.model, substream(cfg.seed, "init"))
        model = DualHeadModel.build_from_pretrained(
            base, cfg.adapt.branch_point, substream(cfg.seed, "branch-init")
        )
    report = bench(
        model, repeats=cfg.bench.repeats, warmups=cfg.bench.warmups
    )
    print(report.format_text())
    if args.run_dir:
        run = _prepare_run_dir(args.run_dir, cfg)
        (run / "reports" / "bench.json").write_text(
            json.dumps(report.to_json(), indent=2), encoding="utf-8"
        )
        (run / "reports" / "bench.txt").write_text(
            report.format_text() + "\n", encoding="utf-8"
        )
        print(f"wrote {run / 'reports'}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "adapt": _cmd_adapt,
    "probe": _cmd_probe,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return 4
    except RuntimeError as e:
        print(f"failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
