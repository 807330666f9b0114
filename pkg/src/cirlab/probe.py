"""Offline layer-wise gradient-interference probe.

For a fixed checkpoint, gradients of the endpoint and transition objectives
are aggregated over M mini-batches per adapted text layer.  Raw cross-objective
cosine is debiased by a same-objective split-half baseline:

    s_cross = cos(g_end, g_trans)
    s_base  = mean of the two objectives' split-half cosines
    GI      = s_base - s_cross

A PCGrad variant re-measures the cross cosine after mutually projecting the
aggregates; both readings are reported since either could be plotted.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .adapters import AdapterStack, BranchId
from .errors import DegenerateBatch
from .objectives import endpoint_batch, pcgrad_project_pair, transition_batch
from .rng import Rng
from .trainer import EncodedWorld

_COS_EPS = 0.0  # a layer with exactly zero aggregate is undefined, not tiny


@dataclass
class GradGroup:
    """Per-layer flattened coefficient gradients summed over M batches."""

    objective: str                    # "endpoint" | "transition"
    m_batches: int
    layer_names: list[str]
    total: list[np.ndarray]
    half_a: list[np.ndarray]
    half_b: list[np.ndarray]


@dataclass
class LayerScores:
    layer: str
    s_cross: float
    s_base: float
    gi: float
    s_cross_pcgrad: float
    gi_pcgrad: float
    defined: bool


def _coeff_suffix(branch: BranchId) -> str:
    return "A_end" if branch is BranchId.END else "A_trans"


def _layer_grads(stack: AdapterStack, grads: dict, branch: BranchId) -> list[np.ndarray]:
    suffix = _coeff_suffix(branch)
    out = []
    for name, layer in zip(stack.layer_names(), stack.text_layers):
        g = grads.get(f"{name}.{suffix}")
        out.append(np.zeros(layer.coeff_end.size) if g is None else g.ravel().copy())
    return out


def collect_grads(
    stack: AdapterStack,
    world: EncodedWorld,
    objective: str,
    m_batches: int,
    rng: Rng,
    branch: BranchId = BranchId.END,
    batch_size: int = 64,
    omega: float = 0.25,
    batches: list[np.ndarray] | None = None,
) -> GradGroup:
    """Aggregate one objective's coefficient gradients; no parameters move.

    ``branch`` selects both the encoding view and the coefficient set: the
    endpoint view probes the shared/endpoint coefficients (the shared-adapter
    setting), the transition view probes the transition branch (the extra
    decoupled diagnostic).  Pass ``batches`` to probe both objectives on
    identical mini-batches.
    """
    if m_batches < 2 or m_batches % 2 != 0:
        raise ValueError("m_batches must be an even count >= 2")
    if objective not in ("endpoint", "transition"):
        raise ValueError(f"unknown objective {objective!r}")
    if batches is None:
        batches = [rng.integers(batch_size, world.size) for _ in range(m_batches)]

    per_batch: list[list[np.ndarray]] = []
    for idx in batches:
        views = world.batch_views(idx)
        if objective == "endpoint":
            _, grads = endpoint_batch(
                stack, views["prompts"], views["targets"], views["ref_features"],
                branch=branch)
        else:
            breakdown, grads = transition_batch(
                stack, views["src_captions"], views["src_prompt"], views["targets"],
                views["fwd_instr"], views["rev_instr"], views["ref_features"],
                omega, branch=branch, into_basis=False)
            if not grads:
                raise DegenerateBatch(
                    f"all {len(idx)} tuples degenerate for the transition objective")
        per_batch.append(_layer_grads(stack, grads, branch))

    names = stack.layer_names()
    half = m_batches // 2
    total = [sum(pb[i] for pb in per_batch) for i in range(len(names))]
    half_a = [sum(pb[i] for pb in per_batch[:half]) for i in range(len(names))]
    half_b = [sum(pb[i] for pb in per_batch[half:]) for i in range(len(names))]
    return GradGroup(objective=objective, m_batches=m_batches, layer_names=names,
                     total=total, half_a=half_a, half_b=half_b)


def _cos(a: np.ndarray, b: np.ndarray) -> float | None:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na <= _COS_EPS or nb <= _COS_EPS:
        return None
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def interference_scores(g_end: GradGroup, g_trans: GradGroup) -> list[LayerScores]:
    """Per-layer cross-objective vs split-half-baseline agreement."""
    if g_end.layer_names != g_trans.layer_names:
        raise ValueError("gradient groups have mismatched layer structure")
    scores = []
    for i, layer in enumerate(g_end.layer_names):
        parts = [
            _cos(g_end.total[i], g_trans.total[i]),
            _cos(g_end.half_a[i], g_end.half_b[i]),
            _cos(g_trans.half_a[i], g_trans.half_b[i]),
        ]
        if any(p is None for p in parts):
            scores.append(LayerScores(layer, np.nan, np.nan, np.nan,
                                      np.nan, np.nan, defined=False))
            continue
        s_cross, base_end, base_trans = parts
        s_base = 0.5 * (base_end + base_trans)
        pe, pt = pcgrad_project_pair(g_end.total[i], g_trans.total[i])
        s_cross_pc = _cos(pe, pt)
        s_cross_pc = s_cross if s_cross_pc is None else s_cross_pc
        scores.append(LayerScores(
            layer=layer, s_cross=s_cross, s_base=s_base, gi=s_base - s_cross,
            s_cross_pcgrad=s_cross_pc, gi_pcgrad=s_base - s_cross_pc, defined=True))
    return scores


@dataclass
class GradProbeReport:
    layer_names: list[str]
    per_seed: dict[int, list[LayerScores]] = field(default_factory=dict)

    def _stat(self, attr: str, layer_idx: int) -> tuple[float, float, int]:
        vals = [getattr(scores[layer_idx], attr)
                for scores in self.per_seed.values() if scores[layer_idx].defined]
        if not vals:
            return np.nan, np.nan, 0
        mean = float(np.mean(vals))
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        return mean, std, len(vals)

    def rows(self) -> list[dict]:
        out = []
        for i, layer in enumerate(self.layer_names):
            gi_mean, gi_std, n = self._stat("gi", i)
            out.append({
                "layer": layer,
                "s_cross_mean": self._stat("s_cross", i)[0],
                "s_base_mean": self._stat("s_base", i)[0],
                "gi_mean": gi_mean,
                "gi_std": gi_std,
                "s_cross_pcgrad_mean": self._stat("s_cross_pcgrad", i)[0],
                "gi_pcgrad_mean": self._stat("gi_pcgrad", i)[0],
                "defined_seeds": n,
            })
        return out

    def to_csv(self, path, config_hash: str = "") -> None:
        rows = self.rows()
        with open(path, "w", newline="") as fh:
            if config_hash:
                fh.write(f"# config_hash={config_hash}\n")
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            for row in rows:
                writer.writerow(row)


def probe_report(
    stack: AdapterStack,
    world: EncodedWorld,
    seeds: list[int],
    m_batches: int,
    batch_size: int = 64,
    omega: float = 0.25,
    trans_branch: BranchId = BranchId.END,
) -> GradProbeReport:
    """Probe one checkpoint across batch-draw seeds.

    ``trans_branch=BranchId.END`` probes both objectives on the shared
    coefficient set (the shared-adapter setting); pass ``BranchId.TRANS`` for
    the decoupled-checkpoint diagnostic comparing branch-native geometry.
    """
    if len(seeds) < 2:
        raise ValueError("probe_report needs at least two seeds")
    report = GradProbeReport(layer_names=stack.layer_names())
    for seed in seeds:
        rng = Rng(seed).split("probe.batches")
        batches = [rng.integers(batch_size, world.size) for _ in range(m_batches)]
        g_end = collect_grads(stack, world, "endpoint", m_batches, rng,
                              branch=BranchId.END, batches=batches, omega=omega)
        g_trans = collect_grads(stack, world, "transition", m_batches, rng,
                                branch=trans_branch, batches=batches, omega=omega)
        report.per_seed[seed] = interference_scores(g_end, g_trans)
    return report
