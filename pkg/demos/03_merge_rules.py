"""Compare merge rules on one pair of trained branches: coefficient
interpolation inside the shared basis versus generic task-vector rules, plus
the merge-weight sweep.

    python demos/03_merge_rules.py
"""

import numpy as np

from cirlab import AttributeSchema, Rng, build_benchmark, build_vocab, gen_edit_tuples, gen_items
from cirlab.adapters import BranchId, init_adapters
from cirlab.encoder import EncoderConfig
from cirlab.evaluate import evaluate_benchmark
from cirlab.merge import (
    MergeRule, MergeSpec, alpha_sweep, lrdm_merge, merge_stack, task_arithmetic,
    task_vectors, ties_merge,
)
from cirlab.trainer import (
    PretrainConfig, TrainConfig, TrainMode, build_encoded_world, pretrain_base,
    run_training,
)

rng = Rng(31)
schema = AttributeSchema()
vocab = build_vocab(schema)
stack = init_adapters(EncoderConfig(d_visual_in=schema.feature_dim), vocab,
                      rng.split("init"))
items = gen_items(schema, 600, rng.split("items"))
tuples = gen_edit_tuples(items, schema, 3000, rng.split("tuples"))
world = build_encoded_world(schema, vocab, items, tuples, stack, 0.1, rng.split("world"))

print("pretraining and decoupled dual-branch training ...")
pretrain_base(stack, world, PretrainConfig(steps=400), rng.split("pretrain"))
trained, _ = run_training(TrainConfig(mode=TrainMode.DECOUPLED, steps=1500, seed=0),
                          world, stack)

bench = build_benchmark(items, gen_edit_tuples(items, schema, 400, rng.split("q")),
                        1000, 1, 4, rng.split("bench"), noise_sigma=0.1, schema=schema)

# --- the shared-basis identity ----------------------------------------------
tvs = [task_vectors(trained, BranchId.END), task_vectors(trained, BranchId.TRANS)]
dense = task_arithmetic(tvs, [0.5, 0.5])
coeff = task_vectors(lrdm_merge(trained, 0.5), BranchId.END)
gap = max(np.abs(a - b).max() for a, b in zip(dense, coeff))
print(f"\ncoefficient merge vs 0.5/0.5 weight-space merge: "
      f"max elementwise gap {gap:.2e} (identical by algebra)")

# --- the TIES trim/elect/mean steps on a hand example -------------------------
merged = ties_merge([[np.array([[2.0, -3.0, 0.1]])], [np.array([[1.5, 1.0, -0.2]])]],
                    density=2 / 3)
print(f"TIES hand trace [2,-3,0.1] + [1.5,1,-0.2] @ density 2/3 -> "
      f"{merged[0].ravel().tolist()}")

# --- rule comparison ----------------------------------------------------------
print(f"\n{'rule':<16}{'R@1':>8}{'R@5':>8}{'mAP@10':>9}")
for rule in MergeRule:
    spec = MergeSpec(rule=rule, alpha=0.5, seed=5)
    merged_stack = merge_stack(trained, spec)
    rep = evaluate_benchmark(merged_stack, bench)
    print(f"{rule.value:<16}{rep.recall[1]:>8.3f}{rep.recall[5]:>8.3f}"
          f"{rep.map_at[10]:>9.3f}")

# --- merge-weight sweep --------------------------------------------------------
print("\nmerge-weight sweep (gallery encoded once, reused across the grid):")
rows = alpha_sweep(trained, [i / 10 for i in range(11)], bench)
print("  alpha: " + "  ".join(f"{row['alpha']:.1f}" for row in rows))
print("  R@1  : " + "  ".join(f"{row['r_at_1']:.2f}" for row in rows))
best = max(rows, key=lambda row: row["r_at_1"])
print(f"best alpha on this benchmark: {best['alpha']:.1f} (R@1 {best['r_at_1']:.3f})")
