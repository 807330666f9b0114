"""Shared builders for small worlds and stacks used across the test suite."""

import numpy as np
import pytest

from cirlab.adapters import init_adapters
from cirlab.encoder import EncoderConfig
from cirlab.rng import Rng
from cirlab.synthworld import AttributeSchema, build_vocab, gen_edit_tuples, gen_items
from cirlab.trainer import build_encoded_world

TINY_SCHEMA = AttributeSchema(
    categories=("bird", "dog", "cat"),
    colors=("red", "blue"),
    counts=(1, 2),
    materials=("wooden", "metal"),
    settings=("park", "beach"),
)

MEDIUM_SCHEMA = AttributeSchema(
    categories=("bird", "dog", "cat", "car"),
    colors=("red", "blue", "green"),
    counts=(1, 2, 3),
    materials=("wooden", "metal", "glass"),
    settings=("park", "beach", "street"),
)


def make_tiny_stack(seed=7, d_model=8, n_blocks=2, rank=2, randomize_coeffs=True,
                    schema=TINY_SCHEMA):
    rng = Rng(seed)
    vocab = build_vocab(schema)
    cfg = EncoderConfig(d_model=d_model, n_blocks=n_blocks, max_len=16,
                        d_visual_in=schema.feature_dim, lora_rank=rank,
                        lora_alpha=2.0 * rank)
    stack = init_adapters(cfg, vocab, rng.split("init"))
    if randomize_coeffs:
        cr = rng.split("coeffs")
        for layer in stack.text_layers + [stack.visual_layer]:
            layer.coeff_end[...] = 0.3 * cr.gaussian(shape=layer.coeff_end.shape)
            layer.coeff_trans[...] = 0.3 * cr.gaussian(shape=layer.coeff_trans.shape)
    return schema, vocab, stack


def make_tiny_world(stack, schema, vocab, n_items=12, n_tuples=10, seed=11, noise=0.05):
    rng = Rng(seed)
    items = gen_items(schema, n_items, rng.split("items"))
    tuples = gen_edit_tuples(items, schema, n_tuples, rng.split("tuples"))
    world = build_encoded_world(schema, vocab, items, tuples, stack, noise,
                                rng.split("world"))
    return items, tuples, world


@pytest.fixture
def tiny_stack():
    return make_tiny_stack()


@pytest.fixture
def tiny_env():
    schema, vocab, stack = make_tiny_stack()
    items, tuples, world = make_tiny_world(stack, schema, vocab)
    return schema, vocab, stack, items, tuples, world


def finite_diff_param_check(loss_fn, grads, params, rtol=1e-5):
    """Compare every supplied analytic gradient tensor to central differences."""
    worst = 0.0
    for name, analytic in grads.items():
        p = params[name]
        fd = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            mi = it.multi_index
            h = 1e-6 * max(1.0, abs(float(p[mi])))
            old = float(p[mi])
            p[mi] = old + h
            hi = loss_fn()
            p[mi] = old - h
            lo = loss_fn()
            p[mi] = old
            fd[mi] = (hi - lo) / (2.0 * h)
        denom = max(float(np.linalg.norm(fd)), 1e-10)
        err = float(np.linalg.norm(np.asarray(analytic) - fd)) / denom
        worst = max(worst, err)
        assert err < rtol, f"gradient mismatch for {name}: rel err {err}"
    return worst
