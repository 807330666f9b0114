"""Token encoder with adapted residual blocks, visual projector, and the
pseudo-token mapping network.

Text pipeline: positionally modulated token embeddings, mean-pool over real
positions, ``n_blocks`` residual tanh blocks, an adapted output projection,
then l2-normalization.  Position enters multiplicatively,

    x_i = (1 + p_i) * e_i,

with the pseudo slot's embedding replaced before the modulation.  A plain
additive combination would make mean-pooling permutation-invariant, and
forward/reverse instruction pairs are token permutations of each other; the
multiplicative gate keeps token order observable exactly when positional
embeddings are nonzero, while every gradient stays closed-form.

Forward functions return caches; the matching ``*_backward`` functions map an
output gradient to gradients on effective weights, embeddings, and inputs.
Distribution of effective-weight gradients onto low-rank factors is the
caller's job (it depends on which pass owns which parameters).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .errors import DegenerateNorm, DimMismatch, MissingPseudo, SequenceTooLong
from .linalg import EPS_NORM

if TYPE_CHECKING:
    from .adapters import AdapterStack, BranchId

PROMPT_PREFIX = ("a", "photo", "of")


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    n_blocks: int = 4
    max_len: int = 24
    d_visual_in: int = 38
    lora_rank: int = 8
    lora_alpha: float = 16.0

    def __post_init__(self):
        if self.d_model < 8:
            raise ValueError("d_model must be >= 8")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.max_len < 12:
            raise ValueError("max_len must cover the longest template")
        if self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")

    @property
    def lora_scale(self) -> float:
        return self.lora_alpha / self.lora_rank


def compose_prompt(t: list[str] | tuple[str, ...]) -> list[str]:
    """Composed-query prompt: ``a photo of * and <instruction>``."""
    if not t:
        raise ValueError("instruction tokens must be nonempty")
    return list(PROMPT_PREFIX) + ["*", "and"] + list(t)


def compose_source_prompt() -> list[str]:
    """Source-only prompt: ``a photo of *``."""
    return list(PROMPT_PREFIX) + ["*"]


# ---------------------------------------------------------------------------
# Batched token handling
# ---------------------------------------------------------------------------

@dataclass
class TokenBatch:
    ids: np.ndarray         # (B, n) int64, padded with PAD id 0
    lengths: np.ndarray     # (B,)
    pseudo_pos: np.ndarray  # (B,) position of PSEUDO per row, -1 when absent

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    @property
    def mask(self) -> np.ndarray:
        n = self.ids.shape[1]
        return np.arange(n)[None, :] < self.lengths[:, None]


def make_token_batch(stack: "AdapterStack", token_lists: list[list[str]]) -> TokenBatch:
    vocab = stack.vocab
    max_len = stack.config.max_len
    lengths = np.array([len(t) for t in token_lists], dtype=np.int64)
    if int(lengths.max(initial=0)) > max_len:
        raise SequenceTooLong(f"sequence length {int(lengths.max())} > max_len {max_len}")
    n = int(lengths.max(initial=1))
    ids = np.zeros((len(token_lists), n), dtype=np.int64)
    pseudo_pos = np.full(len(token_lists), -1, dtype=np.int64)
    for b, toks in enumerate(token_lists):
        row = vocab.encode(toks)
        ids[b, : len(row)] = row
        hits = [i for i, tid in enumerate(row) if tid == vocab.pseudo_id]
        if len(hits) > 1:
            raise ValueError("prompt contains more than one pseudo slot")
        if hits:
            pseudo_pos[b] = hits[0]
    return TokenBatch(ids=ids, lengths=lengths, pseudo_pos=pseudo_pos)


# ---------------------------------------------------------------------------
# Text tower
# ---------------------------------------------------------------------------

@dataclass
class TextCache:
    batch: TokenBatch
    w_effs: list[np.ndarray]
    x0: np.ndarray            # pre-gain embeddings (pseudo already substituted)
    hs: list[np.ndarray]      # h_0 .. h_L, each (B, d)
    ts: list[np.ndarray]      # tanh activations per block
    z: np.ndarray             # pre-normalization output (B, d)
    norms: np.ndarray         # (B, 1)
    out: np.ndarray           # (B, d) unit rows


@dataclass
class TextGrads:
    d_weff: list[np.ndarray]              # per adapted text layer, (d, d)
    d_pseudo: np.ndarray                  # (B, d); zero rows where no pseudo
    d_token_emb: np.ndarray | None = None
    d_pos_emb: np.ndarray | None = None


def text_forward(
    stack: "AdapterStack",
    branch: "BranchId",
    batch: TokenBatch,
    pseudo: np.ndarray | None = None,
) -> tuple[np.ndarray, TextCache]:
    from .adapters import effective_weight

    has_pseudo = batch.pseudo_pos >= 0
    if has_pseudo.any() and pseudo is None:
        raise MissingPseudo("prompt contains the pseudo slot but no pseudo vector was given")

    w_effs = [effective_weight(layer, branch) for layer in stack.text_layers]
    n = batch.ids.shape[1]

    x0 = stack.token_emb[batch.ids]                     # (B, n, d)
    if pseudo is not None and has_pseudo.any():
        rows = np.nonzero(has_pseudo)[0]
        x0[rows, batch.pseudo_pos[rows]] = pseudo[rows]
    x = x0 * (1.0 + stack.pos_emb[:n])[None, :, :]
    mask = batch.mask
    x = x * mask[:, :, None]
    h0 = x.sum(axis=1) / batch.lengths[:, None]

    hs = [h0]
    ts = []
    n_blocks = stack.config.n_blocks
    for layer_idx in range(n_blocks):
        u = hs[-1] @ w_effs[layer_idx].T
        t = np.tanh(u)
        ts.append(t)
        hs.append(hs[-1] + t)
    z = hs[-1] @ w_effs[n_blocks].T
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms <= EPS_NORM):
        raise DegenerateNorm("text encoding collapsed to zero norm")
    out = z / norms
    return out, TextCache(batch=batch, w_effs=w_effs, x0=x0, hs=hs, ts=ts,
                          z=z, norms=norms, out=out)


def text_backward(
    stack: "AdapterStack",
    cache: TextCache,
    d_out: np.ndarray,
    want_embeddings: bool = False,
) -> TextGrads:
    n_blocks = stack.config.n_blocks
    out, norms = cache.out, cache.norms

    dz = (d_out - out * np.sum(out * d_out, axis=1, keepdims=True)) / norms
    d_weff = [np.zeros_like(w) for w in cache.w_effs]
    d_weff[n_blocks] = dz.T @ cache.hs[n_blocks]
    dh = dz @ cache.w_effs[n_blocks]
    for layer_idx in range(n_blocks - 1, -1, -1):
        du = dh * (1.0 - cache.ts[layer_idx] ** 2)
        d_weff[layer_idx] = du.T @ cache.hs[layer_idx]
        dh = dh + du @ cache.w_effs[layer_idx]

    batch = cache.batch
    mask = batch.mask
    n = batch.ids.shape[1]
    dx = (dh / batch.lengths[:, None])[:, None, :] * mask[:, :, None]   # (B, n, d)
    gain = 1.0 + stack.pos_emb[:n]
    dx_pre = dx * gain[None, :, :]          # gradient w.r.t. pre-gain embeddings

    d_pseudo = np.zeros((batch.size, stack.config.d_model))
    has_pseudo = batch.pseudo_pos >= 0
    if has_pseudo.any():
        rows = np.nonzero(has_pseudo)[0]
        d_pseudo[rows] = dx_pre[rows, batch.pseudo_pos[rows]]

    d_token_emb = d_pos_emb = None
    if want_embeddings:
        d_pos_emb = np.zeros_like(stack.pos_emb)
        d_pos_emb[:n] = (dx * cache.x0).sum(axis=0)
        d_token_emb = np.zeros_like(stack.token_emb)
        token_mask = mask.copy()
        if has_pseudo.any():
            rows = np.nonzero(has_pseudo)[0]
            token_mask[rows, batch.pseudo_pos[rows]] = False
        np.add.at(d_token_emb, batch.ids[token_mask], dx_pre[token_mask])
    return TextGrads(d_weff=d_weff, d_pseudo=d_pseudo,
                     d_token_emb=d_token_emb, d_pos_emb=d_pos_emb)


# ---------------------------------------------------------------------------
# Visual tower and mapping network
# ---------------------------------------------------------------------------

@dataclass
class VisualCache:
    features: np.ndarray
    w_eff: np.ndarray
    z: np.ndarray
    norms: np.ndarray
    out: np.ndarray


def visual_forward(stack: "AdapterStack", features: np.ndarray) -> tuple[np.ndarray, VisualCache]:
    from .adapters import BranchId, effective_weight

    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[1] != stack.config.d_visual_in:
        raise DimMismatch(
            f"feature dim {features.shape[1]} != d_visual_in {stack.config.d_visual_in}")
    # The visual pathway belongs to the retrieval branch; its endpoint-side
    # coefficients are the only ones ever trained.
    w_eff = effective_weight(stack.visual_layer, BranchId.END)
    z = features @ w_eff.T
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms <= EPS_NORM):
        raise DegenerateNorm("visual encoding collapsed to zero norm")
    out = z / norms
    return out, VisualCache(features=features, w_eff=w_eff, z=z, norms=norms, out=out)


def visual_backward(cache: VisualCache, d_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (d_w_eff, d_features)."""
    dz = (d_out - cache.out * np.sum(cache.out * d_out, axis=1, keepdims=True)) / cache.norms
    d_w_eff = dz.T @ cache.features
    d_features = dz @ cache.w_eff
    return d_w_eff, d_features


@dataclass
class MapCache:
    visual: VisualCache
    t1: np.ndarray
    t2: np.ndarray
    out: np.ndarray


def map_forward(stack: "AdapterStack", features: np.ndarray) -> tuple[np.ndarray, MapCache]:
    """Pseudo-token vectors: visual embedding through the three-layer network.

    No final normalization; the result is an embedding-slot value.
    """
    ev, vcache = visual_forward(stack, features)
    m1, m2, m3 = stack.mapping
    t1 = np.tanh(ev @ m1.T)
    t2 = np.tanh(t1 @ m2.T)
    out = t2 @ m3.T
    return out, MapCache(visual=vcache, t1=t1, t2=t2, out=out)


@dataclass
class MapGrads:
    d_mapping: list[np.ndarray]
    d_visual_weff: np.ndarray
    d_features: np.ndarray


def map_backward(stack: "AdapterStack", cache: MapCache, d_out: np.ndarray) -> MapGrads:
    m1, m2, m3 = stack.mapping
    d_m3 = d_out.T @ cache.t2
    dt2 = d_out @ m3
    da2 = dt2 * (1.0 - cache.t2 ** 2)
    d_m2 = da2.T @ cache.t1
    dt1 = da2 @ m2
    da1 = dt1 * (1.0 - cache.t1 ** 2)
    d_m1 = da1.T @ cache.visual.out
    d_ev = da1 @ m1
    d_w_eff, d_features = visual_backward(cache.visual, d_ev)
    return MapGrads(d_mapping=[d_m1, d_m2, d_m3], d_visual_weff=d_w_eff, d_features=d_features)


# ---------------------------------------------------------------------------
# Single-example conveniences
# ---------------------------------------------------------------------------

def encode_text(
    tokens: list[str] | tuple[str, ...],
    pseudo: np.ndarray | None,
    branch: "BranchId",
    stack: "AdapterStack",
) -> np.ndarray:
    batch = make_token_batch(stack, [list(tokens)])
    pseudo_arr = None if pseudo is None else np.asarray(pseudo, dtype=np.float64)[None, :]
    out, _ = text_forward(stack, branch, batch, pseudo_arr)
    return out[0]


def encode_visual(feature: np.ndarray, stack: "AdapterStack") -> np.ndarray:
    out, _ = visual_forward(stack, np.asarray(feature, dtype=np.float64)[None, :])
    return out[0]


def map_visual(feature: np.ndarray, stack: "AdapterStack") -> np.ndarray:
    out, _ = map_forward(stack, np.asarray(feature, dtype=np.float64)[None, :])
    return out[0]
