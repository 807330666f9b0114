"""Shared-basis dual-branch low-rank parameter store and checkpoints.

Every adapted layer keeps one frozen base weight, one shared output basis, and
two coefficient sets (endpoint / transition).  The basis is a single array, so
the two branch views can never drift apart.  The stack also owns the frozen
tower tensors, the mapping network, and the logit scale, which makes a saved
checkpoint a complete runnable model.

Checkpoint file layout (little-endian):

    magic "DCIR" | u32 version=1 | u32 tensor_count
    per tensor: u32 name_len | name UTF-8 | u32 ndim | u32 dims[ndim] | f64 values

One extra tensor named ``__meta__.config_json`` stores the config echo, vocab,
and provenance seed as UTF-8 bytes widened to float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .encoder import EncoderConfig
from .errors import CorruptTensor, UnsupportedVersion
from .synthworld import Vocab

if TYPE_CHECKING:
    from .rng import Rng

MAGIC = b"DCIR"
CHECKPOINT_VERSION = 1
META_TENSOR = "__meta__.config_json"

TAU_INIT = 1.0 / 0.07
TAU_MIN, TAU_MAX = 1.0, 100.0


class BranchId(Enum):
    END = "end"
    TRANS = "trans"


class PassId(Enum):
    ENDPOINT = "endpoint"
    TRANSITION = "transition"
    JOINT = "joint"


@dataclass
class LoraLayer:
    base: np.ndarray        # frozen W, (d_out, d_in)
    basis: np.ndarray       # shared B, (d_out, r)
    coeff_end: np.ndarray   # A_end, (r, d_in)
    coeff_trans: np.ndarray # A_trans, (r, d_in)
    scale: float            # lora_alpha / r

    def coeff(self, branch: BranchId) -> np.ndarray:
        return self.coeff_end if branch is BranchId.END else self.coeff_trans


def effective_weight(layer: LoraLayer, branch: BranchId) -> np.ndarray:
    """Deployable weight view: base + scale * basis @ coeff_branch."""
    return layer.base + layer.scale * (layer.basis @ layer.coeff(branch))


@dataclass
class AdapterStack:
    config: EncoderConfig
    vocab: Vocab
    token_emb: np.ndarray            # (vocab, d)
    pos_emb: np.ndarray              # (max_len, d)
    text_layers: list[LoraLayer]     # blocks 1..L then the output projection
    visual_layer: LoraLayer
    mapping: list[np.ndarray]        # three (d, d) matrices
    log_tau: np.ndarray              # shape-() array
    provenance_seed: int = 0

    def tau(self) -> float:
        return float(np.clip(np.exp(self.log_tau), TAU_MIN, TAU_MAX))

    def layer_names(self) -> list[str]:
        names = [f"text.block{i + 1}" for i in range(self.config.n_blocks)]
        names.append("text.out")
        return names

    def named_params(self) -> dict[str, np.ndarray]:
        """Canonical name -> array views, in a fixed order."""
        params: dict[str, np.ndarray] = {
            "text.token_emb": self.token_emb,
            "text.pos_emb": self.pos_emb,
        }
        for name, layer in zip(self.layer_names(), self.text_layers):
            params[f"{name}.W"] = layer.base
            params[f"{name}.B"] = layer.basis
            params[f"{name}.A_end"] = layer.coeff_end
            params[f"{name}.A_trans"] = layer.coeff_trans
        params["visual.W"] = self.visual_layer.base
        params["visual.B"] = self.visual_layer.basis
        params["visual.A_end"] = self.visual_layer.coeff_end
        params["visual.A_trans"] = self.visual_layer.coeff_trans
        for i, m in enumerate(self.mapping, start=1):
            params[f"map.M{i}"] = m
        params["logit_scale.log_tau"] = self.log_tau
        return params

    def clone(self) -> "AdapterStack":
        def copy_layer(layer: LoraLayer) -> LoraLayer:
            return LoraLayer(layer.base.copy(), layer.basis.copy(),
                             layer.coeff_end.copy(), layer.coeff_trans.copy(), layer.scale)

        return AdapterStack(
            config=self.config,
            vocab=self.vocab,
            token_emb=self.token_emb.copy(),
            pos_emb=self.pos_emb.copy(),
            text_layers=[copy_layer(l) for l in self.text_layers],
            visual_layer=copy_layer(self.visual_layer),
            mapping=[m.copy() for m in self.mapping],
            log_tau=self.log_tau.copy(),
            provenance_seed=self.provenance_seed,
        )


def init_adapters(config: EncoderConfig, vocab: Vocab, rng: "Rng") -> AdapterStack:
    """Fresh stack: Gaussian towers and bases, zero coefficients.

    Zero coefficients put both branches exactly at the frozen base, so an
    untrained stack encodes identically under either branch view.
    """
    d = config.d_model
    r = config.lora_rank
    s = config.lora_scale

    def gauss(shape, std):
        return std * rng.gaussian(shape=shape)

    token_emb = gauss((len(vocab), d), 0.1)
    pos_emb = gauss((config.max_len, d), 0.1)

    def make_layer(d_out, d_in):
        return LoraLayer(
            base=gauss((d_out, d_in), 1.0 / np.sqrt(d_in)),
            basis=gauss((d_out, r), 1.0 / np.sqrt(r)),
            coeff_end=np.zeros((r, d_in)),
            coeff_trans=np.zeros((r, d_in)),
            scale=s,
        )

    text_layers = [make_layer(d, d) for _ in range(config.n_blocks + 1)]
    visual_layer = make_layer(d, config.d_visual_in)
    mapping = [gauss((d, d), 1.0 / np.sqrt(d)) for _ in range(3)]
    log_tau = np.array(np.log(TAU_INIT), dtype=np.float64)

    return AdapterStack(
        config=config, vocab=vocab,
        token_emb=token_emb, pos_emb=pos_emb,
        text_layers=text_layers, visual_layer=visual_layer,
        mapping=mapping, log_tau=log_tau,
        provenance_seed=rng.seed,
    )


def trainable_mask(stack: AdapterStack, pass_id: PassId, scope: str = "full") -> list[str]:
    """Parameter names a pass may update.

    The endpoint pass owns the retrieval pathway: its coefficients, every
    shared basis, the visual adapter, the mapping network, and the logit
    scale.  The transition pass owns only the transition coefficients, so it
    can never rewrite the retrieval basis or visual pathway.  The joint
    (shared-adapter) pass uses the endpoint coefficient set as its single
    shared coefficient set.  ``scope`` narrows the endpoint set for the
    trainable-scope ablations: "text_only", "text_map", or "full".
    """
    if scope not in ("full", "text_map", "text_only"):
        raise ValueError(f"unknown scope {scope!r}")
    layer_names = stack.layer_names()
    if pass_id is PassId.TRANSITION:
        return [f"{name}.A_trans" for name in layer_names]
    names: list[str] = []
    for name in layer_names:
        names.append(f"{name}.A_end")
        names.append(f"{name}.B")
    if scope == "full":
        names += ["visual.A_end", "visual.B"]
    if scope in ("full", "text_map"):
        names += ["map.M1", "map.M2", "map.M3"]
    names.append("logit_scale.log_tau")
    return names


# ---------------------------------------------------------------------------
# Checkpoint serialization
# ---------------------------------------------------------------------------

def _meta_payload(stack: AdapterStack, config_hash: str) -> bytes:
    cfg = stack.config
    meta = {
        "config": {
            "d_model": cfg.d_model,
            "n_blocks": cfg.n_blocks,
            "max_len": cfg.max_len,
            "d_visual_in": cfg.d_visual_in,
            "lora_rank": cfg.lora_rank,
            "lora_alpha": cfg.lora_alpha,
        },
        "vocab": list(stack.vocab.tokens),
        "provenance_seed": stack.provenance_seed,
        "config_hash": config_hash,
    }
    return json.dumps(meta, sort_keys=True).encode("utf-8")


def save_checkpoint(stack: AdapterStack, path, config_hash: str = "") -> None:
    params = stack.named_params()
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    entries = list(params.items())
    meta_bytes = _meta_payload(stack, config_hash)
    entries.append((META_TENSOR, np.frombuffer(meta_bytes, dtype=np.uint8).astype(np.float64)))
    buf += struct.pack("<I", len(entries))
    for name, arr in entries:
        name_bytes = name.encode("utf-8")
        buf += struct.pack("<I", len(name_bytes))
        buf += name_bytes
        buf += struct.pack("<I", arr.ndim)
        for dim in arr.shape:
            buf += struct.pack("<I", dim)
        buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def _read_exact(data: bytes, offset: int, count: int) -> tuple[bytes, int]:
    if offset + count > len(data):
        raise CorruptTensor(f"unexpected end of file at byte {offset}")
    return data[offset:offset + count], offset + count


def read_checkpoint_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    """Raw named tensors plus decoded metadata."""
    data = Path(path).read_bytes()
    chunk, offset = _read_exact(data, 0, 4)
    if chunk != MAGIC:
        raise CorruptTensor(f"bad magic {chunk!r}")
    chunk, offset = _read_exact(data, offset, 4)
    version = struct.unpack("<I", chunk)[0]
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersion(f"checkpoint version {version}")
    chunk, offset = _read_exact(data, offset, 4)
    count = struct.unpack("<I", chunk)[0]
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        chunk, offset = _read_exact(data, offset, 4)
        name_len = struct.unpack("<I", chunk)[0]
        chunk, offset = _read_exact(data, offset, name_len)
        name = chunk.decode("utf-8")
        chunk, offset = _read_exact(data, offset, 4)
        ndim = struct.unpack("<I", chunk)[0]
        dims = []
        for _ in range(ndim):
            chunk, offset = _read_exact(data, offset, 4)
            dims.append(struct.unpack("<I", chunk)[0])
        n_values = 1
        for dim in dims:
            n_values *= dim
        chunk, offset = _read_exact(data, offset, 8 * n_values)
        arr = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(dims)
        if name in tensors:
            raise CorruptTensor(f"duplicate tensor {name}")
        tensors[name] = arr
    if offset != len(data):
        raise CorruptTensor(f"{len(data) - offset} trailing bytes")
    if META_TENSOR not in tensors:
        raise CorruptTensor("missing metadata tensor")
    meta_bytes = tensors.pop(META_TENSOR).astype(np.uint8).tobytes()
    try:
        meta = json.loads(meta_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptTensor(f"metadata payload unreadable: {exc}") from exc
    return tensors, meta


def load_checkpoint(path) -> AdapterStack:
    tensors, meta = read_checkpoint_tensors(path)
    cfg = EncoderConfig(**meta["config"])
    vocab = Vocab(tokens=tuple(meta["vocab"]))

    d, r = cfg.d_model, cfg.lora_rank

    def take(name: str, shape: tuple[int, ...]) -> np.ndarray:
        if name not in tensors:
            raise CorruptTensor(f"missing tensor {name}")
        arr = tensors.pop(name)
        if arr.shape != shape:
            raise CorruptTensor(f"tensor {name} has shape {arr.shape}, expected {shape}")
        return arr.copy()

    token_emb = take("text.token_emb", (len(vocab), d))
    pos_emb = take("text.pos_emb", (cfg.max_len, d))
    layers = []
    names = [f"text.block{i + 1}" for i in range(cfg.n_blocks)] + ["text.out"]
    for name in names:
        layers.append(LoraLayer(
            base=take(f"{name}.W", (d, d)),
            basis=take(f"{name}.B", (d, r)),
            coeff_end=take(f"{name}.A_end", (r, d)),
            coeff_trans=take(f"{name}.A_trans", (r, d)),
            scale=cfg.lora_scale,
        ))
    visual = LoraLayer(
        base=take("visual.W", (d, cfg.d_visual_in)),
        basis=take("visual.B", (d, r)),
        coeff_end=take("visual.A_end", (r, cfg.d_visual_in)),
        coeff_trans=take("visual.A_trans", (r, cfg.d_visual_in)),
        scale=cfg.lora_scale,
    )
    mapping = [take(f"map.M{i}", (d, d)) for i in (1, 2, 3)]
    log_tau = take("logit_scale.log_tau", ())
    if tensors:
        raise CorruptTensor(f"unexpected tensors: {sorted(tensors)}")
    return AdapterStack(
        config=cfg, vocab=vocab, token_emb=token_emb, pos_emb=pos_emb,
        text_layers=layers, visual_layer=visual, mapping=mapping,
        log_tau=log_tau, provenance_seed=int(meta.get("provenance_seed", 0)),
    )
