"""Losses and gradient-combination rules.

Four batch passes cover every training phase:

* ``caption_alignment_batch``  -- tower pretraining (captions vs features)
* ``prompt_alignment_batch``   -- mapping-network pretraining (pseudo prompts)
* ``endpoint_batch``           -- composed query vs target caption, InfoNCE
* ``transition_batch``         -- instruction embeddings vs the detached
                                  source-to-target displacement

Each returns scalar losses plus a ``{parameter name: gradient}`` dict; the
trainer decides which entries to apply.  Transition anchors are plain values
(never re-derived inside a step), which realizes the stop-gradient contract.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import AdapterStack, BranchId, TAU_MAX, TAU_MIN
from .encoder import (
    TokenBatch, compose_source_prompt, encode_text, map_backward, map_forward,
    map_visual, text_backward, text_forward, visual_backward, visual_forward,
)
from .errors import DegenerateDelta, DimMismatch, NonFiniteLoss

EPS_DELTA = 1e-6


@dataclass
class LossBreakdown:
    l_end: float = 0.0
    l_fwd: float = 0.0
    l_rev: float = 0.0
    skipped_degenerate: int = 0

    @property
    def l_trans(self) -> float:
        return self.l_fwd + self.l_rev


def clamped_tau(log_tau: float) -> tuple[float, float]:
    """Temperature and its derivative w.r.t. log_tau (zero outside the clamp)."""
    raw = float(np.exp(log_tau))
    if raw < TAU_MIN:
        return TAU_MIN, 0.0
    if raw > TAU_MAX:
        return TAU_MAX, 0.0
    return raw, raw


def _check_finite(value: float, label: str) -> float:
    if not np.isfinite(value):
        raise NonFiniteLoss(f"{label} evaluated to {value}")
    return float(value)


def endpoint_loss(
    queries: np.ndarray,
    targets: np.ndarray,
    log_tau: float,
) -> tuple[float, np.ndarray, np.ndarray, float]:
    """Symmetric batch InfoNCE; returns (loss, d_queries, d_targets, d_log_tau)."""
    q = np.atleast_2d(queries)
    t = np.atleast_2d(targets)
    if q.shape != t.shape:
        raise DimMismatch(f"query batch {q.shape} vs target batch {t.shape}")
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
        raise NonFiniteLoss("contrastive inputs contain non-finite entries")
    b = q.shape[0]
    tau, dtau_dlog = clamped_tau(log_tau)

    sims = q @ t.T
    logits = tau * sims
    row_max = logits.max(axis=1, keepdims=True)
    col_max = logits.max(axis=0, keepdims=True)
    lse_rows = row_max[:, 0] + np.log(np.exp(logits - row_max).sum(axis=1))
    lse_cols = col_max[0, :] + np.log(np.exp(logits - col_max).sum(axis=0))
    diag = np.diag(logits)
    loss = _check_finite(
        -0.5 * float(np.mean((diag - lse_rows) + (diag - lse_cols))), "endpoint loss")

    p_rows = np.exp(logits - lse_rows[:, None])
    p_cols = np.exp(logits - lse_cols[None, :])
    eye = np.eye(b)
    d_logits = ((p_rows - eye) + (p_cols - eye)) / (2.0 * b)
    d_q = tau * (d_logits @ t)
    d_t = tau * (d_logits.T @ q)
    d_log_tau = float(np.sum(d_logits * sims)) * dtau_dlog
    return loss, d_q, d_t, d_log_tau


def source_anchor(
    c_src: list[str] | tuple[str, ...],
    ref_feature: np.ndarray,
    omega: float,
    stack: AdapterStack,
) -> np.ndarray:
    """Blend of caption embedding and image-conditioned source-prompt embedding.

    Follows the mixing rule literally: the result is not renormalized (the
    cosine inside the transition loss makes the scale irrelevant).
    """
    if not (0.0 <= omega <= 1.0):
        raise ValueError("omega must lie in [0, 1]")
    f_cap = encode_text(c_src, None, BranchId.TRANS, stack)
    s_ref = map_visual(ref_feature, stack)
    f_img = encode_text(compose_source_prompt(), s_ref, BranchId.TRANS, stack)
    return (1.0 - omega) * f_cap + omega * f_img


def transition_delta(
    c_tgt: list[str] | tuple[str, ...],
    anchor: np.ndarray,
    stack: AdapterStack,
) -> np.ndarray:
    """Detached displacement from the source anchor to the target caption."""
    f_tgt = encode_text(c_tgt, None, BranchId.TRANS, stack)
    delta = f_tgt - anchor
    if float(np.linalg.norm(delta)) <= EPS_DELTA:
        raise DegenerateDelta("transition proxy has near-zero norm")
    return delta


def joint_loss(l_end: float, l_trans: float, lambda_trans: float) -> float:
    if lambda_trans < 0:
        raise ValueError("lambda_trans must be >= 0")
    return l_end + lambda_trans * l_trans


def pcgrad_project_pair(g_end: np.ndarray, g_trans: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mutually project out conflicting components, both against the originals."""
    if g_end.shape != g_trans.shape:
        raise DimMismatch(f"gradient dims {g_end.shape} vs {g_trans.shape}")
    dot = float(np.dot(g_end.ravel(), g_trans.ravel()))
    if dot >= 0.0:
        return g_end.copy(), g_trans.copy()
    proj_end = g_end - (dot / float(np.dot(g_trans.ravel(), g_trans.ravel()))) * g_trans
    proj_trans = g_trans - (dot / float(np.dot(g_end.ravel(), g_end.ravel()))) * g_end
    return proj_end, proj_trans


def pcgrad_combine(g_end: np.ndarray, g_trans: np.ndarray) -> np.ndarray:
    proj_end, proj_trans = pcgrad_project_pair(g_end, g_trans)
    return proj_end + proj_trans


# ---------------------------------------------------------------------------
# Gradient plumbing
# ---------------------------------------------------------------------------

def _acc(grads: dict[str, np.ndarray], name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = value


def distribute_text_weff(
    stack: AdapterStack,
    d_weffs: list[np.ndarray],
    branch: BranchId,
    grads: dict[str, np.ndarray],
    into_coeff: bool = True,
    into_basis: bool = True,
    into_base: bool = False,
) -> None:
    """Chain effective-weight gradients onto the low-rank factors and/or base."""
    suffix = "A_end" if branch is BranchId.END else "A_trans"
    for name, layer, d_weff in zip(stack.layer_names(), stack.text_layers, d_weffs):
        if into_coeff:
            _acc(grads, f"{name}.{suffix}", layer.scale * (layer.basis.T @ d_weff))
        if into_basis:
            _acc(grads, f"{name}.B", layer.scale * (d_weff @ layer.coeff(branch).T))
        if into_base:
            _acc(grads, f"{name}.W", d_weff)


def distribute_visual_weff(
    stack: AdapterStack,
    d_weff: np.ndarray,
    grads: dict[str, np.ndarray],
    into_lora: bool = True,
    into_base: bool = False,
) -> None:
    layer = stack.visual_layer
    if into_lora:
        _acc(grads, "visual.A_end", layer.scale * (layer.basis.T @ d_weff))
        _acc(grads, "visual.B", layer.scale * (d_weff @ layer.coeff_end.T))
    if into_base:
        _acc(grads, "visual.W", d_weff)


# ---------------------------------------------------------------------------
# Batch passes
# ---------------------------------------------------------------------------

def caption_alignment_batch(
    stack: AdapterStack,
    captions: TokenBatch,
    features: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    """Tower pretraining: align caption encodings with feature encodings.

    Gradients flow into the frozen-to-be base tensors and the logit scale;
    adapter factors are untouched.
    """
    c_out, c_cache = text_forward(stack, BranchId.END, captions)
    v_out, v_cache = visual_forward(stack, features)
    loss, d_c, d_v, d_log_tau = endpoint_loss(c_out, v_out, float(stack.log_tau))

    grads: dict[str, np.ndarray] = {}
    tg = text_backward(stack, c_cache, d_c, want_embeddings=True)
    distribute_text_weff(stack, tg.d_weff, BranchId.END, grads,
                         into_coeff=False, into_basis=False, into_base=True)
    _acc(grads, "text.token_emb", tg.d_token_emb)
    _acc(grads, "text.pos_emb", tg.d_pos_emb)
    d_vw, _ = visual_backward(v_cache, d_v)
    distribute_visual_weff(stack, d_vw, grads, into_lora=False, into_base=True)
    _acc(grads, "logit_scale.log_tau", np.array(d_log_tau))
    return loss, grads


def prompt_alignment_batch(
    stack: AdapterStack,
    src_prompt: TokenBatch,
    features: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mapping-network pretraining: pseudo prompts track visual encodings.

    Only the mapping network receives gradients.
    """
    pseudo, m_cache = map_forward(stack, features)
    p_out, p_cache = text_forward(stack, BranchId.END, src_prompt, pseudo)
    v_out, _ = visual_forward(stack, features)
    loss, d_p, _, _ = endpoint_loss(p_out, v_out, float(stack.log_tau))

    grads: dict[str, np.ndarray] = {}
    tg = text_backward(stack, p_cache, d_p)
    mg = map_backward(stack, m_cache, tg.d_pseudo)
    for i, d_m in enumerate(mg.d_mapping, start=1):
        _acc(grads, f"map.M{i}", d_m)
    return loss, grads


def endpoint_batch(
    stack: AdapterStack,
    prompts: TokenBatch,
    targets: TokenBatch,
    ref_features: np.ndarray,
    branch: BranchId = BranchId.END,
    scope: str = "full",
) -> tuple[float, dict[str, np.ndarray]]:
    """Composed-query alignment pass.

    Returns the InfoNCE loss and gradients for the retrieval pathway: branch
    coefficients, shared bases, visual adapter, mapping network, and the logit
    scale (narrowed by ``scope`` for the trainable-scope ablations).
    """
    pseudo, m_cache = map_forward(stack, ref_features)
    q_out, q_cache = text_forward(stack, branch, prompts, pseudo)
    t_out, t_cache = text_forward(stack, branch, targets)
    loss, d_q, d_t, d_log_tau = endpoint_loss(q_out, t_out, float(stack.log_tau))

    grads: dict[str, np.ndarray] = {}
    qg = text_backward(stack, q_cache, d_q)
    tg = text_backward(stack, t_cache, d_t)
    for g in (qg, tg):
        distribute_text_weff(stack, g.d_weff, branch, grads)
    if scope in ("full", "text_map"):
        mg = map_backward(stack, m_cache, qg.d_pseudo)
        for i, d_m in enumerate(mg.d_mapping, start=1):
            _acc(grads, f"map.M{i}", d_m)
        if scope == "full":
            distribute_visual_weff(stack, mg.d_visual_weff, grads)
    _acc(grads, "logit_scale.log_tau", np.array(d_log_tau))
    return loss, grads


def compute_transition_deltas(
    stack: AdapterStack,
    src_captions: TokenBatch,
    src_prompt: TokenBatch,
    tgt_captions: TokenBatch,
    ref_features: np.ndarray,
    omega: float,
    branch: BranchId = BranchId.TRANS,
) -> np.ndarray:
    """Batch of detached transition proxies (rows may be degenerate)."""
    if not (0.0 <= omega <= 1.0):
        raise ValueError("omega must lie in [0, 1]")
    pseudo, _ = map_forward(stack, ref_features)
    f_cap, _ = text_forward(stack, branch, src_captions)
    f_img, _ = text_forward(stack, branch, src_prompt, pseudo)
    f_src = (1.0 - omega) * f_cap + omega * f_img
    f_tgt, _ = text_forward(stack, branch, tgt_captions)
    return f_tgt - f_src


def transition_losses_given_delta(
    stack: AdapterStack,
    fwd_instr: TokenBatch,
    rev_instr: TokenBatch,
    deltas: np.ndarray,
    branch: BranchId = BranchId.TRANS,
    into_basis: bool = False,
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Cosine alignment of instruction embeddings with fixed displacement rows.

    Degenerate rows (near-zero delta) are dropped from the mean and counted.
    ``into_basis`` routes gradients into the shared bases as well, which the
    shared-adapter (joint) modes require; the decoupled transition pass keeps
    it off so only branch coefficients move.
    """
    norms = np.linalg.norm(deltas, axis=1)
    keep = norms > EPS_DELTA
    n_keep = int(keep.sum())
    breakdown = LossBreakdown(skipped_degenerate=int(deltas.shape[0]) - n_keep)
    if n_keep == 0:
        return breakdown, {}

    f_fwd, fwd_cache = text_forward(stack, branch, fwd_instr)
    f_rev, rev_cache = text_forward(stack, branch, rev_instr)
    delta_hat = np.zeros_like(deltas)
    delta_hat[keep] = deltas[keep] / norms[keep, None]

    cos_fwd = np.sum(f_fwd * delta_hat, axis=1)
    cos_rev = np.sum(f_rev * delta_hat, axis=1)
    breakdown.l_fwd = _check_finite(float(np.mean(1.0 - cos_fwd[keep])), "forward transition loss")
    breakdown.l_rev = _check_finite(float(np.mean(1.0 + cos_rev[keep])), "reverse transition loss")

    d_fwd = -delta_hat / n_keep
    d_rev = delta_hat / n_keep

    grads: dict[str, np.ndarray] = {}
    fg = text_backward(stack, fwd_cache, d_fwd)
    rg = text_backward(stack, rev_cache, d_rev)
    for g in (fg, rg):
        distribute_text_weff(stack, g.d_weff, branch, grads,
                             into_coeff=True, into_basis=into_basis)
    return breakdown, grads


def transition_batch(
    stack: AdapterStack,
    src_captions: TokenBatch,
    src_prompt: TokenBatch,
    tgt_captions: TokenBatch,
    fwd_instr: TokenBatch,
    rev_instr: TokenBatch,
    ref_features: np.ndarray,
    omega: float,
    branch: BranchId = BranchId.TRANS,
    into_basis: bool = False,
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    deltas = compute_transition_deltas(
        stack, src_captions, src_prompt, tgt_captions, ref_features, omega, branch)
    return transition_losses_given_delta(
        stack, fwd_instr, rev_instr, deltas, branch, into_basis)


def transition_loss(
    t_fwd: list[str] | tuple[str, ...],
    t_rev: list[str] | tuple[str, ...],
    delta: np.ndarray,
    stack: AdapterStack,
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Single-tuple transition loss against a precomputed (detached) delta."""
    if float(np.linalg.norm(delta)) <= EPS_DELTA:
        raise DegenerateDelta("transition proxy has near-zero norm")
    from .encoder import make_token_batch

    fwd = make_token_batch(stack, [list(t_fwd)])
    rev = make_token_batch(stack, [list(t_rev)])
    return transition_losses_given_delta(stack, fwd, rev, np.asarray(delta)[None, :])
