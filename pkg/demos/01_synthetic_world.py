"""Walk through the synthetic supervision world: items, edit tuples, the
tuple-file round trip, and the retrieval benchmark with its planted
distractors.

    python demos/01_synthetic_world.py
"""

import tempfile
from pathlib import Path

from cirlab import (
    AttributeSchema, Rng, apply_edit, build_benchmark, export_tuples,
    gen_edit_tuples, gen_items, import_tuples, render_caption,
)

rng = Rng(2024)
schema = AttributeSchema()
print(f"attribute grid: {schema.combination_count:,} combinations, "
      f"feature dim {schema.feature_dim}")

# --- items and captions -----------------------------------------------------
items = gen_items(schema, 500, rng.split("items"))
print("\nthree sampled items:")
for item in items[:3]:
    print("  ", " ".join(render_caption(item)))

# --- bidirectional edit tuples ----------------------------------------------
tuples = gen_edit_tuples(items, schema, 2000, rng.split("tuples"))
print("\nthree edit tuples (forward / reverse):")
for t in tuples[:3]:
    print(f"   [{t.edited_attribute}] {' '.join(t.instruction)}")
    print(f"        reverse: {' '.join(t.reverse_instruction)}")
    print(f"        target:  {' '.join(t.modified_caption)}")

# Every tuple is an exact single-attribute rewrite, so applying the forward
# then the reverse instruction recovers the source item.
by_id = {it.id: it for it in items}
for t in tuples:
    src = by_id[t.ref_item_id]
    fwd = apply_edit(src, t.edited_attribute, t.new_value)
    back = apply_edit(fwd, t.edited_attribute, t.old_value)
    assert back.attrs() == src.attrs()
print(f"\nreverse-composition identity holds on all {len(tuples)} tuples")

# --- JSON-lines round trip ----------------------------------------------------
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "tuples.jsonl"
    export_tuples(tuples, path)
    result = import_tuples(path)
    assert result.tuples == tuples and result.skipped == 0
    print(f"tuple file round trip: {len(result.tuples)} records, "
          f"{result.skipped} skipped")
    print("first line:", path.read_text().splitlines()[0][:100], "...")

# --- benchmark ----------------------------------------------------------------
bench = build_benchmark(items, gen_edit_tuples(items, schema, 300, rng.split("q")),
                        gallery_size=900, replicas_per_item=1, shortcut_count=4,
                        rng=rng.split("bench"), noise_sigma=0.1, schema=schema)
print(f"\nbenchmark: {len(bench.queries)} queries over a "
      f"{len(bench.gallery_items)}-item gallery")
q = bench.queries[0]
print("  query instruction:", " ".join(q.tuple.instruction))
print("  relevant gallery entries:", list(q.relevant_ids))
print("  planted shortcut distractors:", list(q.shortcut_ids))
for gid in q.shortcut_ids:
    entry = bench.gallery_items[gid]
    print(f"    {gid}: {' '.join(render_caption(entry))}"
          f"  (shares the new {q.tuple.edited_attribute})")
