"""Reduced two-seed version of the mode ablation: train every mode on the
same batches, evaluate on the benchmark's test half, and pick the merge
weight on the held-out half.

The full five-seed protocol is `cirlab ablate` (or `pipeline.run_ablate`);
this narrative version keeps the runtime around two minutes.

    python demos/04_mode_ablation.py
"""

from cirlab.config import load_config
from cirlab.pipeline import run_ablate
import tempfile
from pathlib import Path

cfg = load_config(None, [
    "ablate.seeds=0,1",
    "ablate.steps=1500",
    "world.n_queries=400",
    "world.gallery_size=1200",
])

with tempfile.TemporaryDirectory() as tmp:
    summary = run_ablate(cfg, Path(tmp))

print(f"{'mode':<22}{'R@1':>8}{'R@5':>8}{'mAP@10':>9}{'gap':>7}")
for label, metrics in summary["means"].items():
    print(f"{label:<22}{metrics['r_at_1']:>8.3f}{metrics['r_at_5']:>8.3f}"
          f"{metrics['map_at_10']:>9.3f}{metrics['shortcut_gap']:>7.3f}")

print("\nper-seed merge weights chosen on the held-out split:",
      [summary["per_seed"][str(s)]["LRDM"]["alpha_star"] for s in summary["seeds"]])
print("note: interference damage compounds with training length; at this "
      "reduced step count the\nshared adapter may still sit above the "
      "endpoint-only baseline, while the full protocol\n(default ablate.steps) "
      "shows it falling well below.")
print("\nlayer-wise interference on the shared-adapter checkpoints "
      "(mean over seeds):")
for layer, gi in zip(summary["gi_layers"], summary["gi_mean"]):
    print(f"  {layer:<14} GI = {gi:+.3f}")
print(f"\ntotal {summary['timings']['total_seconds']:.0f}s")
