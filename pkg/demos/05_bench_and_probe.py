"""Wall-clock benchmark and the layer-depth probe.

Two measurements, both answerable in minutes on a laptop core:

  * how much faster is diagonal decoding in practice?  The sequential
    step count drops 8.26x at 16x16, but each diagonal forward pushes
    more positions than a raster forward, so the measured speedup is
    smaller -- and still well past 2x.
  * which trunk depths carry information about the *below* neighbour?
    A frozen-backbone probe learns one linear head per layer plus a
    softmax mixture over depths; the mixture weights say where the
    vertical signal lives, which is why the vertical branch taps an
    intermediate layer instead of the top one.

Run:  python3 demos/05_bench_and_probe.py
"""

import numpy as np

from diagar import (
    Backbone,
    DualHeadModel,
    ModelConfig,
    TrainSchedule,
    bench,
    default_pattern_specs,
    generate_dataset,
    linear_probe,
    pretrain_raster,
    substream,
)

# --- 1. decode timing -----------------------------------------------------

cfg = ModelConfig(
    num_layers=4,
    d_model=64,
    num_heads=4,
    ffn_dim=128,
    vocab_size=16,
    grid_height=16,
    grid_width=16,
    prefix_len=1,
    num_classes=4,
)
base = Backbone.initialize(cfg, substream(0, "init"))
dual = DualHeadModel.build_from_pretrained(base, 3, substream(0, "branch-init"))
print("--- decode timing, 16x16, batch 1 (weights untrained; timing "
      "only depends on shapes) ---")
report = bench(dual, repeats=10, warmups=2)
print(report.format_text())

# --- 2. where does below-neighbour information live? ----------------------

print("\n--- depth probe on a briefly pretrained 4-layer model ---")
pcfg = ModelConfig(
    num_layers=4,
    d_model=32,
    num_heads=4,
    ffn_dim=64,
    vocab_size=8,
    grid_height=6,
    grid_width=6,
    prefix_len=1,
    num_classes=4,
)
specs = default_pattern_specs(4, 6, 6, 8, noise_rate=0.05, seed=3)
data = generate_dataset(specs, 1024, 7)
pre = pretrain_raster(
    pcfg,
    data,
    TrainSchedule(total_steps=300, base_rate=3e-3, batch_size=16,
                  warmup_steps=20, eval_every=10_000, seed=0),
)
probe = linear_probe(pre.checkpoint, data, steps=40, seed=0)
print("softmax weight per layer (how useful its features are for the "
      "below-neighbour task):")
for i, w in enumerate(probe.weights):
    bar = "#" * int(round(60 * float(w)))
    print(f"  layer {i}: {w:.3f} {bar}")
print(f"weights sum to {probe.weights.sum():.6f}")
if probe.deepest_is_max:
    print("deepest layer IS the heaviest on this run -- at demo scale "
          "the probe may not separate the top layers much; the "
          "per-layer numbers below tell the fuller story")
else:
    print("deepest layer is NOT the heaviest -- the top of the network "
          "specializes in right-neighbour prediction, which is why the "
          "vertical branch taps an intermediate depth")
print(f"mixture probe nll {probe.agg_nll:.4f}, "
      f"accuracy {probe.agg_accuracy:.2%}")
print("per-layer probe nll:",
      ", ".join(f"{x:.3f}" for x in probe.per_layer_nll))
