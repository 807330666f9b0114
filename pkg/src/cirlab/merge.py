"""Adapter merging: coefficient interpolation inside the shared basis (LRDM)
plus generic task-vector baselines (Task Arithmetic, TIES, DARE, DARE-TIES).

Baselines operate on dense per-layer deltas of the text-adapter layers only;
the visual adapter, mapping network, and logit scale always come from the
endpoint pathway, so the rules differ exactly where they should.  A merged
stack is deployable through its endpoint branch view: coefficient merges land
in the endpoint coefficients, dense merges are folded into the base weights.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .adapters import AdapterStack, BranchId
from .errors import DimMismatch
from .rng import Rng


class MergeRule(Enum):
    LRDM = "LRDM"
    TASK_ARITHMETIC = "TaskArithmetic"
    TIES = "TIES"
    DARE = "DARE"
    DARE_TIES = "DareTies"


@dataclass(frozen=True)
class MergeSpec:
    rule: MergeRule = MergeRule.LRDM
    alpha: float = 0.5
    ties_density: float = 0.2
    dare_drop_p: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must lie in [0, 1]")
        if not (0.0 < self.ties_density <= 1.0):
            raise ValueError("ties_density must lie in (0, 1]")
        if not (0.0 <= self.dare_drop_p < 1.0):
            raise ValueError("dare_drop_p must lie in [0, 1)")


def task_vectors(stack: AdapterStack, branch: BranchId) -> list[np.ndarray]:
    """Dense per-text-layer deltas of one branch relative to the frozen base."""
    return [layer.scale * (layer.basis @ layer.coeff(branch))
            for layer in stack.text_layers]


def lrdm_merge(stack: AdapterStack, alpha: float) -> AdapterStack:
    """Interpolate branch coefficients inside the shared basis.

    The merged stack keeps the endpoint pathway (visual adapter, mapping
    network, logit scale) untouched; the transition coefficients are zeroed
    afterwards since the branch is discarded at deployment.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("alpha must lie in [0, 1]")
    merged = stack.clone()
    for layer in merged.text_layers:
        layer.coeff_end[...] = (1.0 - alpha) * layer.coeff_end + alpha * layer.coeff_trans
        layer.coeff_trans[...] = 0.0
    return merged


def apply_task_vectors(stack: AdapterStack, deltas: list[np.ndarray]) -> AdapterStack:
    """Fold dense text-layer deltas into the bases of a deployable stack."""
    if len(deltas) != len(stack.text_layers):
        raise DimMismatch(f"{len(deltas)} deltas for {len(stack.text_layers)} layers")
    merged = stack.clone()
    for layer, delta in zip(merged.text_layers, deltas):
        if delta.shape != layer.base.shape:
            raise DimMismatch(f"delta shape {delta.shape} vs base {layer.base.shape}")
        layer.base[...] = layer.base + delta
        layer.coeff_end[...] = 0.0
        layer.coeff_trans[...] = 0.0
    return merged


def task_arithmetic(tv_list: list[list[np.ndarray]], weights: list[float]) -> list[np.ndarray]:
    """Weighted sum of task vectors, layer by layer."""
    if len(tv_list) != len(weights):
        raise DimMismatch(f"{len(tv_list)} task vectors, {len(weights)} weights")
    if not all(np.isfinite(w) for w in weights):
        raise ValueError("weights must be finite")
    n_layers = len(tv_list[0])
    merged = []
    for i in range(n_layers):
        shapes = {tv[i].shape for tv in tv_list}
        if len(shapes) != 1:
            raise DimMismatch(f"layer {i} shapes differ: {shapes}")
        merged.append(sum(w * tv[i] for tv, w in zip(tv_list, weights)))
    return merged


def _trim_by_magnitude(flat: np.ndarray, density: float) -> np.ndarray:
    """Keep the top ceil(density*n) entries by |value|; ties go to lower index."""
    n = flat.size
    k = int(np.ceil(density * n))
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    keep = order[:k]
    out[keep] = flat[keep]
    return out


def _ties_layer(mats: list[np.ndarray], density: float, weights: list[float]) -> np.ndarray:
    shape = mats[0].shape
    trimmed = np.stack([
        _trim_by_magnitude((w * m).ravel(), density) for m, w in zip(mats, weights)
    ])
    pos_mass = np.where(trimmed > 0, trimmed, 0.0).sum(axis=0)
    neg_mass = np.where(trimmed < 0, -trimmed, 0.0).sum(axis=0)
    sign = np.where(pos_mass > neg_mass, 1.0, np.where(neg_mass > pos_mass, -1.0, 0.0))
    agree = (trimmed * sign[None, :]) > 0
    counts = agree.sum(axis=0)
    summed = np.where(agree, trimmed, 0.0).sum(axis=0)
    out = np.divide(summed, counts, out=np.zeros_like(summed), where=counts > 0)
    return out.reshape(shape)


def ties_merge(
    tv_list: list[list[np.ndarray]],
    density: float,
    weights: list[float] | None = None,
) -> list[np.ndarray]:
    """Trim by magnitude, elect the heavier sign, mean the sign-agreeing survivors.

    Coordinates with equal positive and negative mass (including all-zero)
    elect sign zero and output zero.
    """
    if not (0.0 < density <= 1.0):
        raise ValueError("density must lie in (0, 1]")
    weights = [1.0] * len(tv_list) if weights is None else weights
    if len(weights) != len(tv_list):
        raise DimMismatch(f"{len(tv_list)} task vectors, {len(weights)} weights")
    n_layers = len(tv_list[0])
    return [_ties_layer([tv[i] for tv in tv_list], density, weights)
            for i in range(n_layers)]


def dare_matrix(mat: np.ndarray, drop_p: float, rng: Rng) -> np.ndarray:
    """Drop entries independently with probability ``drop_p``; rescale survivors."""
    if not (0.0 <= drop_p < 1.0):
        raise ValueError("drop_p must lie in [0, 1)")
    if drop_p == 0.0:
        return mat.copy()
    keep = rng.uniform(shape=mat.shape) >= drop_p
    return np.where(keep, mat / (1.0 - drop_p), 0.0)


def dare(tv: list[np.ndarray], drop_p: float, seed: int) -> list[np.ndarray]:
    """DARE over a task vector; each layer uses its own named substream."""
    rng = Rng(seed)
    return [dare_matrix(m, drop_p, rng.split(f"dare.layer{i}"))
            for i, m in enumerate(tv)]


def dare_ties(
    tv_list: list[list[np.ndarray]],
    drop_p: float,
    density: float,
    seed: int,
) -> list[np.ndarray]:
    """DARE each task vector, then TIES-merge the results."""
    rng = Rng(seed)
    dropped = [
        [dare_matrix(m, drop_p, rng.split(f"dare.v{j}.layer{i}"))
         for i, m in enumerate(tv)]
        for j, tv in enumerate(tv_list)
    ]
    return ties_merge(dropped, density)


def merge_stack(stack: AdapterStack, spec: MergeSpec) -> AdapterStack:
    """Produce a deployable merged stack under the requested rule."""
    if spec.rule is MergeRule.LRDM:
        return lrdm_merge(stack, spec.alpha)
    tvs = [task_vectors(stack, BranchId.END), task_vectors(stack, BranchId.TRANS)]
    if spec.rule is MergeRule.TASK_ARITHMETIC:
        deltas = task_arithmetic(tvs, [1.0 - spec.alpha, spec.alpha])
    elif spec.rule is MergeRule.TIES:
        deltas = ties_merge(tvs, spec.ties_density)
    elif spec.rule is MergeRule.DARE:
        dropped = [dare(tv, spec.dare_drop_p, spec.seed + j) for j, tv in enumerate(tvs)]
        deltas = task_arithmetic(dropped, [1.0 - spec.alpha, spec.alpha])
    elif spec.rule is MergeRule.DARE_TIES:
        deltas = dare_ties(tvs, spec.dare_drop_p, spec.ties_density, spec.seed)
    else:  # pragma: no cover
        raise ValueError(f"unknown merge rule {spec.rule}")
    # Zero the coefficients before folding so the dense delta is the only update.
    base = stack.clone()
    for layer in base.text_layers:
        layer.coeff_end[...] = 0.0
        layer.coeff_trans[...] = 0.0
    return apply_task_vectors(base, deltas)


def alpha_sweep(
    stack: AdapterStack,
    grid: list[float],
    benchmark,
    candidate_rng_seed: int = 9001,
) -> list[dict]:
    """Evaluate ``lrdm_merge`` over an alpha grid.

    The visual pathway is identical for every alpha, so gallery embeddings are
    encoded once and shared across the sweep.
    """
    from .evaluate import build_gallery_index, evaluate_benchmark

    index = build_gallery_index(benchmark, stack)
    rows = []
    for alpha in grid:
        merged = lrdm_merge(stack, alpha)
        report = evaluate_benchmark(merged, benchmark, gallery_index=index,
                                    candidate_seed=candidate_rng_seed)
        rows.append({
            "alpha": alpha,
            "r_at_1": report.recall[1],
            "r_at_5": report.recall[5],
            "map_at_10": report.map_at[10],
        })
    return rows


def sweep_to_csv(rows: list[dict], path, config_hash: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
