"""Train a shared-adapter model on both objectives, then measure layer-wise
gradient interference: cross-objective cosine debiased by a split-half
same-objective baseline.

    python demos/02_gradient_interference.py
"""

from cirlab import AttributeSchema, Rng, build_vocab, gen_edit_tuples, gen_items
from cirlab.encoder import EncoderConfig
from cirlab.adapters import init_adapters
from cirlab.probe import probe_report
from cirlab.trainer import (
    PretrainConfig, TrainConfig, TrainMode, build_encoded_world, pretrain_base,
    run_training,
)

rng = Rng(7)
schema = AttributeSchema()
vocab = build_vocab(schema)
config = EncoderConfig(d_visual_in=schema.feature_dim)
stack = init_adapters(config, vocab, rng.split("init"))

items = gen_items(schema, 600, rng.split("items"))
tuples = gen_edit_tuples(items, schema, 3000, rng.split("tuples"))
world = build_encoded_world(schema, vocab, items, tuples, stack, 0.1, rng.split("world"))

print("pretraining towers and mapping network ...")
pretrain_base(stack, world, PretrainConfig(steps=400), rng.split("pretrain"))

print("training a shared adapter on endpoint + transition jointly ...")
joint, log = run_training(
    TrainConfig(mode=TrainMode.JOINT_SHARED, steps=800, seed=0), world, stack)
print(f"final losses: endpoint {log.rows[-1]['l_end']:.3f}, "
      f"transition {log.rows[-1]['l_fwd'] + log.rows[-1]['l_rev']:.3f}")

report = probe_report(joint, world, seeds=[0, 1, 2, 3, 4], m_batches=16)
print(f"\n{'layer':<14}{'s_cross':>9}{'s_base':>9}{'GI':>14}{'GI(PCGrad)':>12}")
for row in report.rows():
    print(f"{row['layer']:<14}{row['s_cross_mean']:>9.3f}{row['s_base_mean']:>9.3f}"
          f"{row['gi_mean']:>8.3f} +/-{row['gi_std']:.3f}"
          f"{row['gi_pcgrad_mean']:>10.3f}")

gi = [row["gi_mean"] for row in report.rows()]
print(f"\nthe two objectives pull the shared coefficients in conflicting "
      f"directions (negative cross-cosine);\nGI rises with depth "
      f"(block1 {gi[0]:.2f} -> out {gi[-1]:.2f}) and mutual projection "
      f"removes most of it.")
