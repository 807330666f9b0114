"""Composed-query retrieval and metrics.

Gallery features are encoded once per visual pathway and cached in a
``GalleryIndex``; rankings are cosine-ordered with deterministic id
tie-breaking so identical runs produce identical metrics bit for bit.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .adapters import AdapterStack, BranchId
from .encoder import compose_prompt, make_token_batch, map_forward, text_forward, visual_forward
from .errors import CandidateSetInvalid, DimMismatch
from .rng import Rng
from .synthworld import EditTuple, RetrievalBenchmark

DEFAULT_RECALL_KS = (1, 5, 10)
DEFAULT_SUBSET_KS = (1, 2, 3)
DEFAULT_MAP_KS = (5, 10, 25, 50)
CANDIDATE_SET_SIZE = 6


@dataclass
class GalleryIndex:
    ids: np.ndarray       # (N,)
    matrix: np.ndarray    # (N, d) unit-norm rows

    @property
    def size(self) -> int:
        return self.ids.shape[0]


def build_gallery_index(benchmark: RetrievalBenchmark, stack: AdapterStack) -> GalleryIndex:
    out, _ = visual_forward(stack, benchmark.gallery_features)
    return GalleryIndex(ids=np.arange(out.shape[0], dtype=np.int64), matrix=out)


def compose_query(
    tuple_: EditTuple,
    ref_feature: np.ndarray,
    stack: AdapterStack,
    branch: BranchId = BranchId.END,
) -> np.ndarray:
    """Unit-norm embedding of the composed prompt with the pseudo token injected."""
    pseudo, _ = map_forward(stack, np.asarray(ref_feature, dtype=np.float64)[None, :])
    batch = make_token_batch(stack, [compose_prompt(tuple_.instruction)])
    out, _ = text_forward(stack, branch, batch, pseudo)
    return out[0]


def encode_queries(
    stack: AdapterStack,
    benchmark: RetrievalBenchmark,
    branch: BranchId = BranchId.END,
) -> np.ndarray:
    feats = np.stack([q.ref_feature for q in benchmark.queries])
    pseudo, _ = map_forward(stack, feats)
    batch = make_token_batch(
        stack, [compose_prompt(q.tuple.instruction) for q in benchmark.queries])
    out, _ = text_forward(stack, branch, batch, pseudo)
    return out


def rank(query: np.ndarray, index: GalleryIndex) -> np.ndarray:
    """Gallery ids by descending cosine; ties broken by ascending id."""
    query = np.asarray(query, dtype=np.float64)
    if query.shape[0] != index.matrix.shape[1]:
        raise DimMismatch(f"query dim {query.shape[0]} vs index dim {index.matrix.shape[1]}")
    norm = float(np.linalg.norm(query))
    scores = index.matrix @ (query / norm if norm > 0 else query)
    return index.ids[np.lexsort((index.ids, -scores))]


def rank_all(queries: np.ndarray, index: GalleryIndex) -> np.ndarray:
    """(n_queries, gallery) ranking matrix with the same tie-break rule."""
    scores = queries @ index.matrix.T
    out = np.empty(scores.shape, dtype=np.int64)
    for i in range(scores.shape[0]):
        out[i] = index.ids[np.lexsort((index.ids, -scores[i]))]
    return out


def recall_at_k(rankings: np.ndarray, relevant_sets: list[set[int]], k: int) -> float:
    """Fraction of queries with at least one relevant id in the top k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    hits = 0
    for ranking, relevant in zip(rankings, relevant_sets):
        if any(int(g) in relevant for g in ranking[:k]):
            hits += 1
    return hits / len(relevant_sets)


def subset_recall(
    rankings: np.ndarray,
    relevant_sets: list[set[int]],
    candidate_sets: list[set[int]],
    k: int,
) -> float:
    """Recall after filtering each ranking to the query's candidate set."""
    if k < 1:
        raise ValueError("k must be >= 1")
    hits = 0
    for ranking, relevant, candidates in zip(rankings, relevant_sets, candidate_sets):
        if not relevant <= candidates:
            raise CandidateSetInvalid(
                f"candidate set is missing relevant ids {relevant - candidates}")
        filtered = [int(g) for g in ranking if int(g) in candidates]
        if any(g in relevant for g in filtered[:k]):
            hits += 1
    return hits / len(relevant_sets)


def build_candidate_sets(
    benchmark: RetrievalBenchmark,
    seed: int = 9001,
    size: int = CANDIDATE_SET_SIZE,
) -> list[set[int]]:
    """Target(s) plus hard distractors: planted shortcuts first, random fill after."""
    rng = Rng(seed).split("candidates")
    sets = []
    n = len(benchmark.gallery_items)
    for q in benchmark.queries:
        candidates = set(q.relevant_ids)
        if len(candidates) > size:
            raise CandidateSetInvalid(
                f"{len(candidates)} relevant ids exceed candidate size {size}")
        for gid in q.shortcut_ids:
            if len(candidates) >= size:
                break
            candidates.add(gid)
        while len(candidates) < size:
            gid = rng.randint(n)
            if gid not in candidates and gid not in q.relevant_ids:
                candidates.add(gid)
        sets.append(candidates)
    return sets


def average_precision_at_k(ranking: np.ndarray, relevant: set[int], k: int) -> float:
    """AP@k with denominator min(|relevant|, k)."""
    hits = 0
    total = 0.0
    for i, gid in enumerate(ranking[:k], start=1):
        if int(gid) in relevant:
            hits += 1
            total += hits / i
    return total / min(len(relevant), k)


def map_at_k(rankings: np.ndarray, relevant_sets: list[set[int]], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if any(len(r) == 0 for r in relevant_sets):
        raise ValueError("relevant sets must be nonempty")
    aps = [average_precision_at_k(r, rel, k) for r, rel in zip(rankings, relevant_sets)]
    return float(np.mean(aps))


def shortcut_gap(
    rankings: np.ndarray,
    relevant_sets: list[set[int]],
    shortcut_sets: list[set[int]],
) -> float:
    """Fraction of queries where the best shortcut outranks every relevant item."""
    events = 0
    counted = 0
    for ranking, relevant, shortcuts in zip(rankings, relevant_sets, shortcut_sets):
        if not shortcuts:
            continue
        counted += 1
        pos = {int(g): i for i, g in enumerate(ranking)}
        best_rel = min(pos[g] for g in relevant)
        best_short = min(pos[g] for g in shortcuts)
        if best_short < best_rel:
            events += 1
    return events / counted if counted else 0.0


@dataclass
class MetricsReport:
    query_count: int
    recall: dict[int, float] = field(default_factory=dict)
    subset: dict[int, float] = field(default_factory=dict)
    map_at: dict[int, float] = field(default_factory=dict)
    shortcut_gap: float = 0.0

    def as_flat_dict(self) -> dict:
        out: dict = {}
        for k in sorted(self.recall):
            out[f"r_at_{k}"] = self.recall[k]
        for k in sorted(self.subset):
            out[f"rs_at_{k}"] = self.subset[k]
        for k in sorted(self.map_at):
            out[f"map_at_{k}"] = self.map_at[k]
        out["shortcut_gap"] = self.shortcut_gap
        out["query_count"] = self.query_count
        return out

    def to_json(self, path, config_hash: str = "") -> None:
        doc = self.as_flat_dict()
        if config_hash:
            doc["config_hash"] = config_hash
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True, indent=2)
            fh.write("\n")

    def to_csv(self, path, config_hash: str = "") -> None:
        flat = self.as_flat_dict()
        with open(path, "w", newline="") as fh:
            if config_hash:
                fh.write(f"# config_hash={config_hash}\n")
            writer = csv.DictWriter(fh, fieldnames=list(flat.keys()))
            writer.writeheader()
            writer.writerow(flat)


def evaluate_benchmark(
    stack: AdapterStack,
    benchmark: RetrievalBenchmark,
    branch: BranchId = BranchId.END,
    recall_ks: tuple[int, ...] = DEFAULT_RECALL_KS,
    subset_ks: tuple[int, ...] = DEFAULT_SUBSET_KS,
    map_ks: tuple[int, ...] = DEFAULT_MAP_KS,
    gallery_index: GalleryIndex | None = None,
    candidate_seed: int = 9001,
) -> MetricsReport:
    index = gallery_index if gallery_index is not None else build_gallery_index(benchmark, stack)
    queries = encode_queries(stack, benchmark, branch)
    rankings = rank_all(queries, index)
    relevant = [set(q.relevant_ids) for q in benchmark.queries]
    shortcuts = [set(q.shortcut_ids) for q in benchmark.queries]
    candidates = build_candidate_sets(benchmark, seed=candidate_seed)
    return MetricsReport(
        query_count=len(benchmark.queries),
        recall={k: recall_at_k(rankings, relevant, k) for k in recall_ks},
        subset={k: subset_recall(rankings, relevant, candidates, k) for k in subset_ks},
        map_at={k: map_at_k(rankings, relevant, k) for k in map_ks},
        shortcut_gap=shortcut_gap(rankings, relevant, shortcuts),
    )
