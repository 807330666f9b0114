import numpy as np
import pytest

from cirlab.adapters import BranchId, effective_weight
from cirlab.encoder import (
    EncoderConfig, compose_prompt, compose_source_prompt, encode_text,
    encode_visual, make_token_batch, map_visual, text_forward,
)
from cirlab.errors import DimMismatch, MissingPseudo, SequenceTooLong
from cirlab.rng import Rng
from cirlab.synthworld import gen_items, render_caption, visual_feature

from conftest import make_tiny_stack


class TestComposePrompt:
    def test_composed_form(self):
        assert compose_prompt(["make", "it", "2", "bird"]) == \
            ["a", "photo", "of", "*", "and", "make", "it", "2", "bird"]

    def test_source_only(self):
        assert compose_source_prompt() == ["a", "photo", "of", "*"]

    def test_empty_instruction_rejected(self):
        with pytest.raises(ValueError):
            compose_prompt([])

    def test_single_pseudo_slot(self):
        assert compose_prompt(["change", "the", "color"]).count("*") == 1


class TestEncodeText:
    def test_deterministic(self, tiny_stack):
        _, _, stack = tiny_stack
        caption = ["a", "photo", "of", "1", "red", "wooden", "bird", "in", "the", "park"]
        v1 = encode_text(caption, None, BranchId.END, stack)
        v2 = encode_text(caption, None, BranchId.END, stack)
        assert np.array_equal(v1, v2)

    def test_unit_norm(self, tiny_stack):
        _, _, stack = tiny_stack
        out = encode_text(["a", "photo", "of", "red", "bird"], None, BranchId.END, stack)
        assert abs(np.linalg.norm(out) - 1.0) < 1e-12

    def test_equal_coefficients_equal_branches(self):
        _, _, stack = make_tiny_stack(randomize_coeffs=True)
        for layer in stack.text_layers:
            layer.coeff_trans[...] = layer.coeff_end
        caption = ["a", "photo", "of", "2", "blue", "metal", "cat", "in", "the", "beach"]
        assert np.array_equal(encode_text(caption, None, BranchId.END, stack),
                              encode_text(caption, None, BranchId.TRANS, stack))

    def test_zero_adapters_match_frozen_base(self):
        schema, vocab, stack = make_tiny_stack(randomize_coeffs=False)
        base = make_tiny_stack(randomize_coeffs=False)[2]
        caption = ["a", "photo", "of", "1", "red", "wooden", "dog", "in", "the", "park"]
        assert np.array_equal(encode_text(caption, None, BranchId.END, stack),
                              encode_text(caption, None, BranchId.TRANS, base))

    def test_missing_pseudo(self, tiny_stack):
        _, _, stack = tiny_stack
        with pytest.raises(MissingPseudo):
            encode_text(compose_source_prompt(), None, BranchId.END, stack)

    def test_sequence_too_long(self, tiny_stack):
        _, _, stack = tiny_stack
        with pytest.raises(SequenceTooLong):
            encode_text(["a"] * (stack.config.max_len + 1), None, BranchId.END, stack)

    def test_order_sensitivity_forward_vs_reverse(self, tiny_stack):
        # Reversed instructions are token permutations; positional gates must
        # keep their embeddings distinct.
        _, _, stack = tiny_stack
        fwd = ["change", "the", "color", "from", "red", "to", "blue"]
        rev = ["change", "the", "color", "from", "blue", "to", "red"]
        vf = encode_text(fwd, None, BranchId.TRANS, stack)
        vr = encode_text(rev, None, BranchId.TRANS, stack)
        assert np.linalg.norm(vf - vr) > 1e-6

    def test_order_insensitive_when_positions_zero(self, tiny_stack):
        _, _, stack = tiny_stack
        stack = stack.clone()
        stack.pos_emb[...] = 0.0
        fwd = ["change", "the", "color", "from", "red", "to", "blue"]
        rev = ["change", "the", "color", "from", "blue", "to", "red"]
        assert np.allclose(encode_text(fwd, None, BranchId.END, stack),
                           encode_text(rev, None, BranchId.END, stack), atol=1e-12)

    def test_residual_zero_blocks_reduce_to_projection(self, tiny_stack):
        _, _, stack = tiny_stack
        stack = stack.clone()
        for layer in stack.text_layers[:-1]:
            layer.base[...] = 0.0
            layer.coeff_end[...] = 0.0
            layer.coeff_trans[...] = 0.0
        tokens = ["a", "photo", "of", "red", "bird"]
        out = encode_text(tokens, None, BranchId.END, stack)
        ids = stack.vocab.encode(tokens)
        x = stack.token_emb[ids] * (1.0 + stack.pos_emb[: len(ids)])
        pooled = x.mean(axis=0)
        w_out = effective_weight(stack.text_layers[-1], BranchId.END)
        expected = w_out @ pooled
        expected /= np.linalg.norm(expected)
        assert np.allclose(out, expected, atol=1e-12)

    def test_pseudo_replaces_embedding_before_gating(self, tiny_stack):
        _, _, stack = tiny_stack
        pseudo = Rng(3).gaussian(stack.config.d_model)
        prompt = compose_source_prompt()
        out1 = encode_text(prompt, pseudo, BranchId.END, stack)
        out2 = encode_text(prompt, 2.0 * pseudo, BranchId.END, stack)
        assert not np.allclose(out1, out2)


class TestEncodeVisual:
    def test_zero_lora_matches_base_projection(self):
        schema, _, stack = make_tiny_stack(randomize_coeffs=False)
        item = gen_items(schema, 1, Rng(1))[0]
        feat = visual_feature(item, schema, 0.0, Rng(2))
        out = encode_visual(feat, stack)
        expected = stack.visual_layer.base @ feat
        expected /= np.linalg.norm(expected)
        assert np.allclose(out, expected, atol=1e-12)

    def test_scale_invariance(self, tiny_stack):
        schema, _, stack = tiny_stack
        feat = visual_feature(gen_items(schema, 1, Rng(1))[0], schema, 0.1, Rng(3))
        assert np.allclose(encode_visual(feat, stack), encode_visual(2.0 * feat, stack),
                           atol=1e-12)

    def test_dim_mismatch(self, tiny_stack):
        _, _, stack = tiny_stack
        with pytest.raises(DimMismatch):
            encode_visual(np.zeros(stack.config.d_visual_in + 1), stack)

    def test_noisy_replicas_closer_than_random_items(self, tiny_stack):
        # Monte-Carlo audit: two noisy views of one item stay closer in
        # embedding space than views of different items.
        schema, _, stack = tiny_stack
        rng = Rng(17)
        items = gen_items(schema, 40, rng.split("items"))
        wins = 0
        for k in range(100):
            item = items[k % len(items)]
            other = items[(k + 7) % len(items)]
            e1 = encode_visual(visual_feature(item, schema, 0.1, rng), stack)
            e2 = encode_visual(visual_feature(item, schema, 0.1, rng), stack)
            eo = encode_visual(visual_feature(other, schema, 0.1, rng), stack)
            if float(e1 @ e2) > float(e1 @ eo):
                wins += 1
        assert wins >= 90


class TestMapVisual:
    def test_output_dim(self, tiny_stack):
        schema, _, stack = tiny_stack
        feat = visual_feature(gen_items(schema, 1, Rng(1))[0], schema, 0.0, Rng(2))
        assert map_visual(feat, stack).shape == (stack.config.d_model,)

    def test_deterministic(self, tiny_stack):
        schema, _, stack = tiny_stack
        feat = visual_feature(gen_items(schema, 1, Rng(1))[0], schema, 0.0, Rng(2))
        assert np.array_equal(map_visual(feat, stack), map_visual(feat, stack))

    def test_not_normalized(self, tiny_stack):
        # Pseudo tokens are embedding-slot values, not retrieval vectors.
        schema, _, stack = tiny_stack
        rng = Rng(5)
        norms = [np.linalg.norm(map_visual(
            visual_feature(it, schema, 0.1, rng), stack))
            for it in gen_items(schema, 8, rng)]
        assert np.std(norms) > 1e-6


class TestTokenBatch:
    def test_padding_and_lengths(self, tiny_stack):
        _, _, stack = tiny_stack
        batch = make_token_batch(stack, [["a", "photo"], ["a", "photo", "of", "red"]])
        assert batch.ids.shape == (2, 4)
        assert batch.lengths.tolist() == [2, 4]
        assert batch.ids[0, 2] == stack.vocab.pad_id

    def test_pseudo_position_found(self, tiny_stack):
        _, _, stack = tiny_stack
        batch = make_token_batch(stack, [compose_prompt(["make", "it", "2", "bird"])])
        assert batch.pseudo_pos[0] == 3

    def test_double_pseudo_rejected(self, tiny_stack):
        _, _, stack = tiny_stack
        with pytest.raises(ValueError):
            make_token_batch(stack, [["a", "*", "*"]])

    def test_batched_matches_single(self, tiny_stack):
        schema, _, stack = tiny_stack
        captions = [render_caption(it) for it in gen_items(schema, 6, Rng(8))]
        batch = make_token_batch(stack, captions)
        out, _ = text_forward(stack, BranchId.END, batch)
        for i, caption in enumerate(captions):
            single = encode_text(caption, None, BranchId.END, stack)
            assert np.allclose(out[i], single, atol=1e-12)


class TestEncoderConfig:
    def test_bounds(self):
        with pytest.raises(ValueError):
            EncoderConfig(d_model=4)
        with pytest.raises(ValueError):
            EncoderConfig(n_blocks=0)
        with pytest.raises(ValueError):
            EncoderConfig(lora_rank=0)

    def test_lora_scale(self):
        cfg = EncoderConfig(lora_rank=8, lora_alpha=16.0)
        assert cfg.lora_scale == 2.0
