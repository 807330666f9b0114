"""Synthetic attribute world: items, edit tuples, and the retrieval benchmark.

Items are points in a finite attribute grid (category, color, count, material,
setting).  Captions and edit instructions are rendered from fixed templates so
the ground truth of every supervision record is analytically known.  The
benchmark plants, for each query, the edited target item plus "shortcut"
distractors that match the instruction's new attribute value while differing
from the reference on at least one preserved attribute.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InsufficientDistractors, MalformedRecord, UnsupportedVersion, WorldTooSmall
from .rng import Rng

PAD_TOKEN = "<pad>"
PSEUDO_TOKEN = "*"

# Attribute names in canonical block order (also the visual-feature layout).
ATTRIBUTES = ("category", "color", "count", "material", "setting")

DEFAULT_CATEGORIES = (
    "bird", "dog", "cat", "car", "chair", "house",
    "tree", "boat", "cup", "lamp", "bike", "horse",
)
DEFAULT_COLORS = ("red", "blue", "green", "yellow", "black", "white", "orange", "purple")
DEFAULT_COUNTS = (1, 2, 3, 4)
DEFAULT_MATERIALS = ("wooden", "metal", "plastic", "glass", "stone", "ceramic")
DEFAULT_SETTINGS = ("park", "beach", "kitchen", "street", "forest", "office", "garden", "museum")

_TEMPLATE_WORDS = ("a", "photo", "of", "in", "the", "and", "change", "from", "to", "make", "it")


@dataclass(frozen=True)
class AttributeSchema:
    categories: tuple[str, ...] = DEFAULT_CATEGORIES
    colors: tuple[str, ...] = DEFAULT_COLORS
    counts: tuple[int, ...] = DEFAULT_COUNTS
    materials: tuple[str, ...] = DEFAULT_MATERIALS
    settings: tuple[str, ...] = DEFAULT_SETTINGS

    def __post_init__(self):
        for name in ("categories", "colors", "counts", "materials", "settings"):
            vals = getattr(self, name)
            if len(vals) == 0:
                raise ValueError(f"schema field {name} must be nonempty")
            if len(set(vals)) != len(vals):
                raise ValueError(f"schema field {name} contains duplicates")
        for word in self.words():
            if " " in word:
                raise ValueError(f"attribute word {word!r} must be a single token")

    def values(self, attr: str) -> tuple:
        return {
            "category": self.categories,
            "color": self.colors,
            "count": self.counts,
            "material": self.materials,
            "setting": self.settings,
        }[attr]

    def words(self) -> list[str]:
        out = list(self.categories) + list(self.colors) + [str(c) for c in self.counts]
        out += list(self.materials) + list(self.settings)
        return out

    def block_sizes(self) -> tuple[int, ...]:
        return tuple(len(self.values(a)) for a in ATTRIBUTES)

    @property
    def feature_dim(self) -> int:
        return sum(self.block_sizes())

    @property
    def combination_count(self) -> int:
        n = 1
        for size in self.block_sizes():
            n *= size
        return n


@dataclass(frozen=True)
class Item:
    id: int
    category: str
    color: str
    count: int
    material: str
    setting: str

    def attrs(self) -> tuple:
        return (self.category, self.color, self.count, self.material, self.setting)

    def value(self, attr: str):
        return getattr(self, attr)


def _item_from_combo(schema: AttributeSchema, item_id: int, combo_index: int) -> Item:
    sizes = schema.block_sizes()
    idxs = []
    rem = combo_index
    for size in reversed(sizes):
        idxs.append(rem % size)
        rem //= size
    idxs.reverse()
    vals = [schema.values(a)[i] for a, i in zip(ATTRIBUTES, idxs)]
    return Item(item_id, *vals)


def gen_items(schema: AttributeSchema, n: int, rng: Rng) -> list[Item]:
    """Sample ``n`` items uniformly without duplicate attribute tuples."""
    if n < 1:
        raise ValueError("n must be >= 1")
    total = schema.combination_count
    if n > total:
        raise WorldTooSmall(f"requested {n} items but only {total} attribute combinations exist")
    picks = rng.permutation(total, take=n)
    return [_item_from_combo(schema, i, int(c)) for i, c in enumerate(picks)]


def render_caption(item: Item) -> list[str]:
    """``a photo of <count> <color> <material> <category> in the <setting>``."""
    return [
        "a", "photo", "of",
        str(item.count), item.color, item.material, item.category,
        "in", "the", item.setting,
    ]


def item_from_caption(tokens: list[str], item_id: int = -1) -> Item:
    """Invert ``render_caption`` positionally."""
    if len(tokens) != 10:
        raise ValueError(f"caption must have 10 tokens, got {len(tokens)}")
    return Item(item_id, category=tokens[6], color=tokens[4],
                count=int(tokens[3]), material=tokens[5], setting=tokens[9])


def apply_edit(item: Item, attr: str, new_value) -> Item:
    kwargs = {a: item.value(a) for a in ATTRIBUTES}
    kwargs[attr] = new_value
    return Item(item.id, **kwargs)


def _render_instruction(item: Item, attr: str, old, new) -> list[str]:
    if attr == "count":
        return ["make", "it", str(new), item.category]
    return ["change", "the", attr, "from", str(old), "to", str(new)]


def parse_instruction(tokens: list[str]) -> tuple[str, object | None, object]:
    """Return (attribute, old_value, new_value); count edits carry no old value."""
    if tokens[:2] == ["make", "it"]:
        return ("count", None, int(tokens[2]))
    if tokens[:2] == ["change", "the"] and len(tokens) == 7:
        attr = tokens[2]
        old, new = tokens[4], tokens[6]
        return (attr, old, new)
    raise ValueError(f"unrecognized instruction {tokens!r}")


@dataclass(frozen=True)
class EditTuple:
    ref_item_id: int
    source_caption: tuple[str, ...]
    instruction: tuple[str, ...]
    modified_caption: tuple[str, ...]
    reverse_instruction: tuple[str, ...]
    edited_attribute: str
    old_value: object
    new_value: object


def gen_edit_tuple(item: Item, schema: AttributeSchema, rng: Rng) -> EditTuple:
    """One single-attribute edit with its exact reverse instruction."""
    editable = [a for a in ATTRIBUTES if len(schema.values(a)) >= 2]
    if not editable:
        raise ValueError("schema has no attribute with at least two values")
    attr = editable[rng.randint(len(editable))]
    old = item.value(attr)
    values = schema.values(attr)
    others = [v for v in values if v != old]
    new = others[rng.randint(len(others))]
    edited = apply_edit(item, attr, new)
    instr = _render_instruction(item, attr, old, new)
    rev = _render_instruction(edited, attr, new, old)
    return EditTuple(
        ref_item_id=item.id,
        source_caption=tuple(render_caption(item)),
        instruction=tuple(instr),
        modified_caption=tuple(render_caption(edited)),
        reverse_instruction=tuple(rev),
        edited_attribute=attr,
        old_value=old,
        new_value=new,
    )


def gen_edit_tuples(items: list[Item], schema: AttributeSchema, n: int, rng: Rng) -> list[EditTuple]:
    """``n`` tuples over reference items drawn with replacement."""
    idx = rng.integers(n, len(items))
    return [gen_edit_tuple(items[int(i)], schema, rng) for i in idx]


def visual_feature(item: Item, schema: AttributeSchema, noise_sigma: float, rng: Rng) -> np.ndarray:
    """Concatenated one-hot attribute blocks plus i.i.d. Gaussian noise."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    feat = np.zeros(schema.feature_dim, dtype=np.float64)
    offset = 0
    for attr, size in zip(ATTRIBUTES, schema.block_sizes()):
        idx = schema.values(attr).index(item.value(attr))
        feat[offset + idx] = 1.0
        offset += size
    if noise_sigma > 0:
        feat += noise_sigma * rng.gaussian(schema.feature_dim)
    return feat


@dataclass(frozen=True)
class Vocab:
    """Dense token <-> id map with reserved PAD and PSEUDO entries."""

    tokens: tuple[str, ...]
    index: dict = field(repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})
        if self.tokens[0] != PAD_TOKEN or self.tokens[1] != PSEUDO_TOKEN:
            raise ValueError("vocab must reserve PAD at 0 and PSEUDO at 1")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def pseudo_id(self) -> int:
        return 1

    def encode(self, tokens) -> list[int]:
        return [self.index[t] for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]


def build_vocab(schema: AttributeSchema) -> Vocab:
    words = set(_TEMPLATE_WORDS)
    words.update(schema.words())
    words.update(ATTRIBUTES)
    ordered = (PAD_TOKEN, PSEUDO_TOKEN) + tuple(sorted(words))
    return Vocab(tokens=ordered)


# ---------------------------------------------------------------------------
# Tuple file round trip (JSON lines, one record per line)
# ---------------------------------------------------------------------------

_TUPLE_FIELDS = (
    "instruction", "modified_caption", "reverse_instruction", "source_caption",
    "edited_attribute", "old_value", "new_value", "ref_item_id",
)


def export_tuples(tuples: list[EditTuple], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in tuples:
            record = {
                "instruction": " ".join(t.instruction),
                "modified_caption": " ".join(t.modified_caption),
                "reverse_instruction": " ".join(t.reverse_instruction),
                "source_caption": " ".join(t.source_caption),
                "edited_attribute": t.edited_attribute,
                "old_value": t.old_value,
                "new_value": t.new_value,
                "ref_item_id": t.ref_item_id,
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


@dataclass
class ImportResult:
    tuples: list[EditTuple]
    skipped: int


def import_tuples(path) -> ImportResult:
    """Read a tuple file; records missing required fields are skipped and counted."""
    tuples: list[EditTuple] = []
    skipped = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(line_no, str(exc)) from exc
            if not isinstance(record, dict) or any(f not in record for f in _TUPLE_FIELDS):
                skipped += 1
                continue
            tuples.append(EditTuple(
                ref_item_id=int(record["ref_item_id"]),
                source_caption=tuple(record["source_caption"].split()),
                instruction=tuple(record["instruction"].split()),
                modified_caption=tuple(record["modified_caption"].split()),
                reverse_instruction=tuple(record["reverse_instruction"].split()),
                edited_attribute=record["edited_attribute"],
                old_value=record["old_value"],
                new_value=record["new_value"],
            ))
    return ImportResult(tuples=tuples, skipped=skipped)


# ---------------------------------------------------------------------------
# Retrieval benchmark
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchmarkQuery:
    tuple: EditTuple
    relevant_ids: tuple[int, ...]
    shortcut_ids: tuple[int, ...]
    ref_feature: np.ndarray


@dataclass
class RetrievalBenchmark:
    schema: AttributeSchema
    queries: list[BenchmarkQuery]
    gallery_items: list[Item]          # id == gallery position
    gallery_features: np.ndarray       # (len(gallery), feature_dim)
    multi_target: bool
    noise_sigma: float

    def split_queries(self) -> tuple["RetrievalBenchmark", "RetrievalBenchmark"]:
        """Deterministic even/odd split into (held-out, test) benchmarks."""
        held = [q for i, q in enumerate(self.queries) if i % 2 == 0]
        test = [q for i, q in enumerate(self.queries) if i % 2 == 1]
        mk = lambda qs: RetrievalBenchmark(self.schema, qs, self.gallery_items,
                                           self.gallery_features, self.multi_target,
                                           self.noise_sigma)
        return mk(held), mk(test)


def _target_attrs(items_by_id: dict, t: EditTuple) -> tuple:
    ref = items_by_id[t.ref_item_id]
    return apply_edit(ref, t.edited_attribute, t.new_value).attrs()


def build_benchmark(
    items: list[Item],
    tuples: list[EditTuple],
    gallery_size: int,
    replicas_per_item: int,
    shortcut_count: int,
    rng: Rng,
    noise_sigma: float = 0.1,
    schema: AttributeSchema | None = None,
    ref_plant_prob: float = 1.0,
) -> RetrievalBenchmark:
    """Gallery with planted targets, shortcut distractors, and random fillers.

    Relevance is audited semantically after construction: a gallery entry is
    relevant to a query iff its attributes equal the query's edited reference
    attributes.  Query target vectors are deduplicated so single-target mode
    has exactly one relevant entry (times ``replicas_per_item``) per query.

    With probability ``ref_plant_prob`` per query, the unedited reference item
    is also inserted: the hardest old-value distractor (it matches every
    preserved attribute), mirroring galleries that contain the reference
    image itself.
    """
    if shortcut_count < 0:
        raise ValueError("shortcut_count must be >= 0")
    if replicas_per_item < 1:
        raise ValueError("replicas_per_item must be >= 1")
    schema = schema or AttributeSchema()
    items_by_id = {it.id: it for it in items}

    seen: set[tuple] = set()
    queries: list[EditTuple] = []
    for t in tuples:
        attrs = _target_attrs(items_by_id, t)
        if attrs in seen:
            continue
        seen.add(attrs)
        queries.append(t)
    target_vectors = [_target_attrs(items_by_id, t) for t in queries]
    target_set = set(target_vectors)

    n_targets = len(queries) * replicas_per_item
    if gallery_size < n_targets:
        raise ValueError(
            f"gallery_size {gallery_size} cannot hold {n_targets} target entries "
            f"({len(queries)} deduplicated queries x {replicas_per_item} replicas)")

    gallery_attrs: list[tuple] = []
    relevant_ids: list[list[int]] = []
    for attrs in target_vectors:
        ids = []
        for _ in range(replicas_per_item):
            ids.append(len(gallery_attrs))
            gallery_attrs.append(attrs)
        relevant_ids.append(ids)

    # Pool of non-target entries, indexed by (attribute, value) for distractor reuse.
    pool_by_value: dict[tuple, list[int]] = {}

    def add_pool_entry(attrs: tuple) -> int:
        gid = len(gallery_attrs)
        gallery_attrs.append(attrs)
        for attr, val in zip(ATTRIBUTES, attrs):
            pool_by_value.setdefault((attr, val), []).append(gid)
        return gid

    def synth_distractor(target: tuple, edited_attr: str) -> tuple | None:
        # Mutate one preserved attribute; widen to two if the grid is exhausted.
        preserved = [a for a in ATTRIBUTES if a != edited_attr]
        for _ in range(64):
            attrs = dict(zip(ATTRIBUTES, target))
            n_mut = 1 if rng.uniform() < 0.75 else 2
            muts = [preserved[rng.randint(len(preserved))] for _ in range(n_mut)]
            for m in set(muts):
                options = [v for v in schema.values(m) if v != attrs[m]]
                if not options:
                    continue
                attrs[m] = options[rng.randint(len(options))]
            candidate = tuple(attrs[a] for a in ATTRIBUTES)
            if candidate not in target_set and candidate != target:
                return candidate
        return None

    if ref_plant_prob > 0:
        planted_refs: set[tuple] = set()
        for t in queries:
            if rng.uniform() >= ref_plant_prob:
                continue
            ref_attrs = items_by_id[t.ref_item_id].attrs()
            if ref_attrs in target_set or ref_attrs in planted_refs:
                continue
            if len(gallery_attrs) >= gallery_size:
                break
            planted_refs.add(ref_attrs)
            add_pool_entry(ref_attrs)

    shortcut_ids: list[tuple[int, ...]] = []
    for t, target in zip(queries, target_vectors):
        # Pool entries never carry a target vector, so any new-value match is
        # a valid shortcut distractor.
        found = list(pool_by_value.get((t.edited_attribute, t.new_value), ()))[:shortcut_count]
        while len(found) < shortcut_count:
            if len(gallery_attrs) >= gallery_size:
                raise InsufficientDistractors(
                    f"gallery budget {gallery_size} exhausted while planting "
                    f"{shortcut_count} distractors per query")
            candidate = synth_distractor(target, t.edited_attribute)
            if candidate is None:
                raise InsufficientDistractors(
                    f"attribute grid cannot supply a distractor for {target}")
            found.append(add_pool_entry(candidate))
        shortcut_ids.append(tuple(found))

    # Random fillers up to gallery_size, never colliding with a target vector.
    total = schema.combination_count
    while len(gallery_attrs) < gallery_size:
        combo = rng.randint(total)
        attrs = _item_from_combo(schema, -1, combo).attrs()
        if attrs in target_set:
            continue
        add_pool_entry(attrs)

    gallery_items = [Item(gid, *attrs) for gid, attrs in enumerate(gallery_attrs)]
    gallery_features = np.stack([
        visual_feature(it, schema, noise_sigma, rng) for it in gallery_items
    ])

    # Semantic relevance audit over the final gallery.
    by_attrs: dict[tuple, list[int]] = {}
    for it in gallery_items:
        by_attrs.setdefault(it.attrs(), []).append(it.id)
    bench_queries = []
    for t, target, shortcut in zip(queries, target_vectors, shortcut_ids):
        relevant = tuple(by_attrs[target])
        ref_feat = visual_feature(items_by_id[t.ref_item_id], schema, noise_sigma, rng)
        bench_queries.append(BenchmarkQuery(t, relevant, shortcut, ref_feat))

    return RetrievalBenchmark(
        schema=schema,
        queries=bench_queries,
        gallery_items=gallery_items,
        gallery_features=gallery_features,
        multi_target=replicas_per_item > 1,
        noise_sigma=noise_sigma,
    )


def save_benchmark(benchmark: RetrievalBenchmark, path, config_hash: str = "") -> None:
    doc = {
        "benchmark_version": 1,
        "config_hash": config_hash,
        "multi_target": benchmark.multi_target,
        "noise_sigma": benchmark.noise_sigma,
        "schema": {
            "categories": list(benchmark.schema.categories),
            "colors": list(benchmark.schema.colors),
            "counts": list(benchmark.schema.counts),
            "materials": list(benchmark.schema.materials),
            "settings": list(benchmark.schema.settings),
        },
        "gallery": [list(it.attrs()) for it in benchmark.gallery_items],
        "gallery_features": [[float(x) for x in row] for row in benchmark.gallery_features],
        "queries": [
            {
                "tuple": {
                    "instruction": " ".join(q.tuple.instruction),
                    "modified_caption": " ".join(q.tuple.modified_caption),
                    "reverse_instruction": " ".join(q.tuple.reverse_instruction),
                    "source_caption": " ".join(q.tuple.source_caption),
                    "edited_attribute": q.tuple.edited_attribute,
                    "old_value": q.tuple.old_value,
                    "new_value": q.tuple.new_value,
                    "ref_item_id": q.tuple.ref_item_id,
                },
                "relevant_ids": list(q.relevant_ids),
                "shortcut_ids": list(q.shortcut_ids),
                "ref_feature": [float(x) for x in q.ref_feature],
            }
            for q in benchmark.queries
        ],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_benchmark(path) -> RetrievalBenchmark:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("benchmark_version") != 1:
        raise UnsupportedVersion(f"benchmark_version {doc.get('benchmark_version')!r}")
    s = doc["schema"]
    schema = AttributeSchema(
        categories=tuple(s["categories"]), colors=tuple(s["colors"]),
        counts=tuple(int(c) for c in s["counts"]), materials=tuple(s["materials"]),
        settings=tuple(s["settings"]),
    )
    gallery_items = [
        Item(i, attrs[0], attrs[1], int(attrs[2]), attrs[3], attrs[4])
        for i, attrs in enumerate(doc["gallery"])
    ]
    features = np.array(doc["gallery_features"], dtype=np.float64)
    queries = []
    for q in doc["queries"]:
        t = q["tuple"]
        et = EditTuple(
            ref_item_id=int(t["ref_item_id"]),
            source_caption=tuple(t["source_caption"].split()),
            instruction=tuple(t["instruction"].split()),
            modified_caption=tuple(t["modified_caption"].split()),
            reverse_instruction=tuple(t["reverse_instruction"].split()),
            edited_attribute=t["edited_attribute"],
            old_value=t["old_value"], new_value=t["new_value"],
        )
        queries.append(BenchmarkQuery(
            et, tuple(q["relevant_ids"]), tuple(q["shortcut_ids"]),
            np.array(q["ref_feature"], dtype=np.float64),
        ))
    return RetrievalBenchmark(
        schema=schema, queries=queries, gallery_items=gallery_items,
        gallery_features=features, multi_target=bool(doc["multi_target"]),
        noise_sigma=float(doc["noise_sigma"]),
    )
