"""Training loops: surrogate tower pretraining, decoupled two-pass training,
joint/PCGrad ablation modes, and the AdamW optimizer.

The decoupled mode runs two sequential passes over the same mini-batch: the
endpoint pass updates the retrieval pathway (its coefficients, shared bases,
visual adapter, mapping network, logit scale), then the transition pass
computes detached anchors with the just-updated weights and moves only the
transition coefficients.  ``sequential_passes=False`` evaluates both passes at
the pre-step weights instead, for studying the alternative ordering.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .adapters import AdapterStack, BranchId
from .encoder import TokenBatch, compose_prompt, compose_source_prompt, make_token_batch
from .errors import NonFiniteLoss
from .objectives import (
    LossBreakdown, caption_alignment_batch, endpoint_batch, pcgrad_combine,
    prompt_alignment_batch, transition_batch,
)
from .rng import Rng
from .synthworld import (
    AttributeSchema, EditTuple, Item, Vocab, render_caption, visual_feature,
)


class TrainMode(Enum):
    DECOUPLED = "Decoupled"
    ENDPOINT_ONLY = "EndpointOnly"
    TRANSITION_ONLY = "TransitionOnly"
    JOINT_SHARED = "JointShared"
    JOINT_PCGRAD = "JointPCGrad"


@dataclass
class TrainConfig:
    mode: TrainMode = TrainMode.DECOUPLED
    steps: int = 1000
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    warmup_steps: int = 50
    lambda_trans: float = 1.0
    omega: float = 0.25
    scope: str = "full"
    sequential_passes: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for contrastive passes")
        if not (0.0 <= self.omega <= 1.0):
            raise ValueError("omega must lie in [0, 1]")
        if self.lambda_trans < 0:
            raise ValueError("lambda_trans must be >= 0")


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_update(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    opt: OptimizerState,
    lr: float,
    weight_decay: float,
) -> None:
    """One decoupled-weight-decay Adam step, in place over ``grads`` keys."""
    opt.step += 1
    t = opt.step
    bias1 = 1.0 - ADAM_BETA1 ** t
    bias2 = 1.0 - ADAM_BETA2 ** t
    for name in grads:
        p = params[name]
        g = grads[name]
        if name not in opt.m:
            opt.m[name] = np.zeros_like(p)
            opt.v[name] = np.zeros_like(p)
        m = opt.m[name]
        v = opt.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        update = (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)
        p -= lr * update
        if weight_decay:
            p -= lr * weight_decay * p


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup: int) -> float:
    """Linear warmup then cosine decay; ``step`` is 1-based."""
    if warmup > 0 and step <= warmup:
        return base_lr * step / warmup
    if total_steps <= warmup:
        return base_lr
    progress = (step - warmup) / (total_steps - warmup)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


# ---------------------------------------------------------------------------
# Pre-tokenized world
# ---------------------------------------------------------------------------

def _slice(tb: TokenBatch, idx: np.ndarray) -> TokenBatch:
    return TokenBatch(ids=tb.ids[idx], lengths=tb.lengths[idx], pseudo_pos=tb.pseudo_pos[idx])


def _tile(tb: TokenBatch, count: int) -> TokenBatch:
    return TokenBatch(
        ids=np.repeat(tb.ids, count, axis=0),
        lengths=np.repeat(tb.lengths, count),
        pseudo_pos=np.repeat(tb.pseudo_pos, count),
    )


@dataclass
class EncodedWorld:
    """Tokenized supervision plus fixed per-tuple reference features."""

    schema: AttributeSchema
    vocab: Vocab
    items: list[Item]
    tuples: list[EditTuple]
    ref_features: np.ndarray
    prompt_fwd: TokenBatch
    tgt_caption: TokenBatch
    src_caption: TokenBatch
    fwd_instr: TokenBatch
    rev_instr: TokenBatch
    src_prompt: TokenBatch       # single row
    item_onehots: np.ndarray     # noise-free features per item, for pretraining
    item_captions: TokenBatch
    noise_sigma: float

    @property
    def size(self) -> int:
        return len(self.tuples)

    def batch_views(self, idx: np.ndarray) -> dict:
        return {
            "prompts": _slice(self.prompt_fwd, idx),
            "targets": _slice(self.tgt_caption, idx),
            "src_captions": _slice(self.src_caption, idx),
            "fwd_instr": _slice(self.fwd_instr, idx),
            "rev_instr": _slice(self.rev_instr, idx),
            "src_prompt": _tile(self.src_prompt, len(idx)),
            "ref_features": self.ref_features[idx],
        }


def build_encoded_world(
    schema: AttributeSchema,
    vocab: Vocab,
    items: list[Item],
    tuples: list[EditTuple],
    stack: AdapterStack,
    noise_sigma: float,
    rng: Rng,
) -> EncodedWorld:
    ref_feats = _ref_features(schema, items, tuples, noise_sigma, rng)
    return EncodedWorld(
        schema=schema, vocab=vocab, items=items, tuples=tuples,
        ref_features=ref_feats,
        prompt_fwd=make_token_batch(stack, [compose_prompt(t.instruction) for t in tuples]),
        tgt_caption=make_token_batch(stack, [list(t.modified_caption) for t in tuples]),
        src_caption=make_token_batch(stack, [list(t.source_caption) for t in tuples]),
        fwd_instr=make_token_batch(stack, [list(t.instruction) for t in tuples]),
        rev_instr=make_token_batch(stack, [list(t.reverse_instruction) for t in tuples]),
        src_prompt=make_token_batch(stack, [compose_source_prompt()]),
        item_onehots=np.stack([visual_feature(it, schema, 0.0, rng) for it in items]),
        item_captions=make_token_batch(stack, [render_caption(it) for it in items]),
        noise_sigma=noise_sigma,
    )


def _ref_features(schema, items, tuples, noise_sigma, rng):
    onehots = {it.id: visual_feature(it, schema, 0.0, rng) for it in items}
    base = np.stack([onehots[t.ref_item_id] for t in tuples])
    if noise_sigma > 0:
        base = base + noise_sigma * rng.gaussian(shape=base.shape)
    return base


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------

@dataclass
class PretrainConfig:
    steps: int = 500
    batch_size: int = 64
    learning_rate: float = 3e-3
    weight_decay: float = 0.0
    warmup_steps: int = 20


def pretrain_base(
    stack: AdapterStack,
    world: EncodedWorld,
    config: PretrainConfig,
    rng: Rng,
) -> list[dict]:
    """Two-phase surrogate pretraining, mutating ``stack`` in place.

    Phase one contrastively aligns caption encodings with item features and
    trains the towers, embeddings, and logit scale.  Phase two freezes the
    towers and fits the mapping network so source-only pseudo prompts track
    the visual encodings.  Adapter coefficients stay at zero throughout.
    """
    params = stack.named_params()
    n_items = len(world.items)
    log: list[dict] = []

    opt = OptimizerState()
    for step in range(1, config.steps + 1):
        idx = rng.integers(config.batch_size, n_items)
        feats = world.item_onehots[idx]
        if world.noise_sigma > 0:
            feats = feats + world.noise_sigma * rng.gaussian(shape=feats.shape)
        captions = _slice(world.item_captions, idx)
        loss, grads = caption_alignment_batch(stack, captions, feats)
        lr = cosine_lr(step, config.steps, config.learning_rate, config.warmup_steps)
        adamw_update(params, grads, opt, lr, config.weight_decay)
        log.append({"phase": "towers", "step": step, "loss": loss, "lr": lr, "tau": stack.tau()})

    opt = OptimizerState()
    src_prompt = world.src_prompt
    for step in range(1, config.steps + 1):
        idx = rng.integers(config.batch_size, n_items)
        feats = world.item_onehots[idx]
        if world.noise_sigma > 0:
            feats = feats + world.noise_sigma * rng.gaussian(shape=feats.shape)
        prompts = _tile(src_prompt, len(idx))
        loss, grads = prompt_alignment_batch(stack, prompts, feats)
        lr = cosine_lr(step, config.steps, config.learning_rate, config.warmup_steps)
        adamw_update(params, grads, opt, lr, config.weight_decay)
        log.append({"phase": "mapping", "step": step, "loss": loss, "lr": lr, "tau": stack.tau()})
    return log


# ---------------------------------------------------------------------------
# Training steps
# ---------------------------------------------------------------------------

def train_step_endpoint(
    stack: AdapterStack,
    world: EncodedWorld,
    idx: np.ndarray,
    opt: OptimizerState,
    lr: float,
    weight_decay: float,
    scope: str = "full",
) -> float:
    views = world.batch_views(idx)
    loss, grads = endpoint_batch(
        stack, views["prompts"], views["targets"], views["ref_features"],
        branch=BranchId.END, scope=scope)
    adamw_update(stack.named_params(), grads, opt, lr, weight_decay)
    return loss


def train_step_transition(
    stack: AdapterStack,
    world: EncodedWorld,
    idx: np.ndarray,
    opt: OptimizerState,
    lr: float,
    weight_decay: float,
    omega: float,
) -> LossBreakdown:
    views = world.batch_views(idx)
    breakdown, grads = transition_batch(
        stack, views["src_captions"], views["src_prompt"], views["targets"],
        views["fwd_instr"], views["rev_instr"], views["ref_features"],
        omega, branch=BranchId.TRANS, into_basis=False)
    if grads:
        adamw_update(stack.named_params(), grads, opt, lr, weight_decay)
    return breakdown


def _flatten_layer(grads: dict, layer_name: str, stack: AdapterStack) -> np.ndarray:
    a = grads.get(f"{layer_name}.A_end")
    b = grads.get(f"{layer_name}.B")
    layer = stack.text_layers[stack.layer_names().index(layer_name)]
    a = np.zeros_like(layer.coeff_end) if a is None else a
    b = np.zeros_like(layer.basis) if b is None else b
    return np.concatenate([a.ravel(), b.ravel()])


def _unflatten_layer(flat: np.ndarray, layer_name: str, stack: AdapterStack,
                     out: dict[str, np.ndarray]) -> None:
    layer = stack.text_layers[stack.layer_names().index(layer_name)]
    n_a = layer.coeff_end.size
    out[f"{layer_name}.A_end"] = flat[:n_a].reshape(layer.coeff_end.shape)
    out[f"{layer_name}.B"] = flat[n_a:].reshape(layer.basis.shape)


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def to_csv(self, path, config_hash: str = "") -> None:
        with open(path, "w", newline="") as fh:
            if config_hash:
                fh.write(f"# config_hash={config_hash}\n")
            writer = csv.DictWriter(
                fh, fieldnames=["step", "l_end", "l_fwd", "l_rev", "lr", "tau",
                                "degenerate_count"])
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)


def run_training(
    config: TrainConfig,
    world: EncodedWorld,
    stack: AdapterStack,
) -> tuple[AdapterStack, TrainLog]:
    """Train a fresh clone of ``stack`` under the configured mode."""
    stack = stack.clone()
    params = stack.named_params()
    rng_batches = Rng(config.seed).split("train.batches")
    log = TrainLog()

    opt_end = OptimizerState()
    opt_trans = OptimizerState()
    joint_layers = stack.layer_names()

    for step in range(1, config.steps + 1):
        lr = cosine_lr(step, config.steps, config.learning_rate, config.warmup_steps)
        idx = rng_batches.integers(config.batch_size, world.size)
        l_end, l_fwd, l_rev, degenerate = 0.0, 0.0, 0.0, 0

        if config.mode is TrainMode.ENDPOINT_ONLY:
            l_end = train_step_endpoint(stack, world, idx, opt_end, lr,
                                        config.weight_decay, config.scope)
        elif config.mode is TrainMode.TRANSITION_ONLY:
            breakdown = train_step_transition(stack, world, idx, opt_trans, lr,
                                              config.weight_decay, config.omega)
            l_fwd, l_rev = breakdown.l_fwd, breakdown.l_rev
            degenerate = breakdown.skipped_degenerate
        elif config.mode is TrainMode.DECOUPLED:
            if config.sequential_passes:
                l_end = train_step_endpoint(stack, world, idx, opt_end, lr,
                                            config.weight_decay, config.scope)
                breakdown = train_step_transition(stack, world, idx, opt_trans, lr,
                                                  config.weight_decay, config.omega)
            else:
                views = world.batch_views(idx)
                l_end, end_grads = endpoint_batch(
                    stack, views["prompts"], views["targets"], views["ref_features"],
                    branch=BranchId.END, scope=config.scope)
                breakdown, trans_grads = transition_batch(
                    stack, views["src_captions"], views["src_prompt"], views["targets"],
                    views["fwd_instr"], views["rev_instr"], views["ref_features"],
                    config.omega, branch=BranchId.TRANS, into_basis=False)
                adamw_update(params, end_grads, opt_end, lr, config.weight_decay)
                if trans_grads:
                    adamw_update(params, trans_grads, opt_trans, lr, config.weight_decay)
            l_fwd, l_rev = breakdown.l_fwd, breakdown.l_rev
            degenerate = breakdown.skipped_degenerate
        else:  # joint modes: both losses through the shared (endpoint) view
            views = world.batch_views(idx)
            l_end, end_grads = endpoint_batch(
                stack, views["prompts"], views["targets"], views["ref_features"],
                branch=BranchId.END, scope=config.scope)
            breakdown, trans_grads = transition_batch(
                stack, views["src_captions"], views["src_prompt"], views["targets"],
                views["fwd_instr"], views["rev_instr"], views["ref_features"],
                config.omega, branch=BranchId.END, into_basis=True)
            l_fwd, l_rev = breakdown.l_fwd, breakdown.l_rev
            degenerate = breakdown.skipped_degenerate

            combined: dict[str, np.ndarray] = {}
            if config.mode is TrainMode.JOINT_SHARED:
                for name, g in end_grads.items():
                    combined[name] = g.copy()
                for name, g in trans_grads.items():
                    if name in combined:
                        combined[name] = combined[name] + config.lambda_trans * g
                    else:
                        combined[name] = config.lambda_trans * g
            else:  # JOINT_PCGRAD: per-layer projection of the two objectives
                for layer_name in joint_layers:
                    ge = _flatten_layer(end_grads, layer_name, stack)
                    gt = config.lambda_trans * _flatten_layer(trans_grads, layer_name, stack)
                    _unflatten_layer(pcgrad_combine(ge, gt), layer_name, stack, combined)
                for name, g in end_grads.items():
                    if name not in combined:
                        combined[name] = g
            adamw_update(params, combined, opt_end, lr, config.weight_decay)

        tau = stack.tau()
        if not np.isfinite(l_end) or not np.isfinite(l_fwd) or not np.isfinite(l_rev):
            raise NonFiniteLoss(f"non-finite loss at step {step}")
        log.rows.append({
            "step": step, "l_end": l_end, "l_fwd": l_fwd, "l_rev": l_rev,
            "lr": lr, "tau": tau, "degenerate_count": degenerate,
        })
    return stack, log
