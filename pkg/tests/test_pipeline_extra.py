"""Pretraining quality audits, sweep kinds, and the ablation stage surface."""

import csv
import json

import numpy as np
import pytest

from cirlab.adapters import BranchId
from cirlab.config import load_config
from cirlab.encoder import EncoderConfig, text_forward, visual_forward, map_forward
from cirlab.evaluate import evaluate_benchmark
from cirlab.merge import alpha_sweep
from cirlab.pipeline import run_ablate, run_gen, run_pretrain, run_sweep, run_train
from cirlab.rng import Rng
from cirlab.synthworld import AttributeSchema, build_benchmark, build_vocab, gen_edit_tuples, gen_items
from cirlab.trainer import (
    PretrainConfig, TrainConfig, TrainMode, _slice, _tile, build_encoded_world,
    pretrain_base, run_training,
)
from cirlab.adapters import init_adapters


@pytest.fixture(scope="module")
def pretrained_default():
    """Default-schema stack pretrained long enough for the quality audits."""
    rng = Rng(515)
    schema = AttributeSchema()
    vocab = build_vocab(schema)
    stack = init_adapters(EncoderConfig(d_visual_in=schema.feature_dim), vocab,
                          rng.split("init"))
    items = gen_items(schema, 1200, rng.split("items"))
    train_items, held_items = items[:1000], items[1000:]
    tuples = gen_edit_tuples(train_items, schema, 64, rng.split("tuples"))
    world = build_encoded_world(schema, vocab, train_items, tuples, stack, 0.1,
                                rng.split("world"))
    pretrain_base(stack, world, PretrainConfig(steps=500), rng.split("pretrain"))
    held_world = build_encoded_world(schema, vocab, held_items,
                                     gen_edit_tuples(held_items, schema, 4, rng.split("ht")),
                                     stack, 0.1, rng.split("hw"))
    return schema, stack, held_world, rng.split("audit")


class TestPretrainQuality:
    def test_heldout_caption_retrieval_at_least_090(self, pretrained_default):
        schema, stack, held_world, rng = pretrained_default
        n = len(held_world.items)
        assert n == 200
        feats = held_world.item_onehots + 0.1 * rng.gaussian(
            shape=held_world.item_onehots.shape)
        captions, _ = text_forward(stack, BranchId.END, held_world.item_captions)
        visuals, _ = visual_forward(stack, feats)
        r1 = float(np.mean(np.argmax(captions @ visuals.T, axis=1) == np.arange(n)))
        assert r1 >= 0.9, f"held-out caption->feature R@1 {r1:.3f}"

    def test_pseudo_prompt_tracks_own_visual_for_95pct(self, pretrained_default):
        # Post-pretraining audit: the source-only prompt with the mapped
        # pseudo token is closer to its own visual encoding than to 95% of
        # the other items' encodings.
        schema, stack, held_world, rng = pretrained_default
        n = len(held_world.items)
        feats = held_world.item_onehots + 0.1 * rng.gaussian(
            shape=held_world.item_onehots.shape)
        pseudo, _ = map_forward(stack, feats)
        prompts = _tile(held_world.src_prompt, n)
        prompt_emb, _ = text_forward(stack, BranchId.END, prompts, pseudo)
        visuals, _ = visual_forward(stack, feats)
        sims = prompt_emb @ visuals.T
        own = np.diag(sims)
        beaten = np.mean(sims <= own[:, None], axis=1)
        assert float(np.mean(beaten >= 0.95)) >= 0.95


def _tiny_cfg(extra=()):
    return load_config(None, [
        "world.n_items=60", "world.n_tuples=200", "world.n_queries=40",
        "world.gallery_size=150", "pretrain.steps=25", "train.steps=20",
        "train.batch_size=16", "probe.m_batches=4", "probe.seeds=0,1",
        "sweep.omega_grid=0.0,0.5", "sweep.lambda_grid=0.0,1.0",
        "merge.alpha_grid=0.0,0.5,1.0",
        *extra,
    ])


class TestSweeps:
    def test_alpha_zero_row_equals_endpoint_branch_eval(self):
        rng = Rng(9)
        schema = AttributeSchema()
        vocab = build_vocab(schema)
        stack = init_adapters(
            EncoderConfig(d_model=16, n_blocks=2, d_visual_in=schema.feature_dim,
                          lora_rank=2, lora_alpha=4.0), vocab, rng.split("init"))
        items = gen_items(schema, 60, rng.split("items"))
        tuples = gen_edit_tuples(items, schema, 150, rng.split("tuples"))
        world = build_encoded_world(schema, vocab, items, tuples, stack, 0.05,
                                    rng.split("world"))
        trained, _ = run_training(
            TrainConfig(mode=TrainMode.DECOUPLED, steps=15, batch_size=8, seed=3),
            world, stack)
        bench = build_benchmark(items, gen_edit_tuples(items, schema, 30, rng.split("q")),
                                100, 1, 2, rng.split("b"), noise_sigma=0.05, schema=schema)
        rows = alpha_sweep(trained, [0.0, 1.0], bench)
        assert len(rows) == 2
        direct = evaluate_benchmark(trained, bench, branch=BranchId.END)
        assert rows[0]["r_at_1"] == direct.recall[1]
        assert rows[0]["r_at_5"] == direct.recall[5]
        assert rows[0]["map_at_10"] == direct.map_at[10]

    @pytest.mark.parametrize("kind,column", [
        ("alpha", "alpha"), ("omega", "omega"), ("lambda", "lambda_trans"),
    ])
    def test_sweep_kinds_write_their_grids(self, tmp_path, kind, column):
        cfg = _tiny_cfg([f"sweep.kind={kind}"])
        run_gen(cfg, tmp_path)
        run_pretrain(cfg, tmp_path)
        run_train(cfg, tmp_path)
        run_sweep(cfg, tmp_path)
        path = tmp_path / f"sweep_{kind}.csv"
        rows = list(csv.DictReader(
            line for line in path.read_text().splitlines() if not line.startswith("#")))
        assert column in rows[0]
        assert {"r_at_1", "r_at_5", "map_at_10"} <= set(rows[0])
        assert len(rows) >= 2


class TestAblateStage:
    def test_emits_one_row_per_mode_with_table_labels(self, tmp_path):
        cfg = _tiny_cfg(["ablate.seeds=0,1", "ablate.steps=15"])
        summary = run_ablate(cfg, tmp_path)
        rows = list(csv.DictReader(
            line for line in (tmp_path / "ablation.csv").read_text().splitlines()
            if not line.startswith("#")))
        labels = {row["mode"] for row in rows}
        assert {"Transition only", "Endpoint only", "Joint", "Joint+PCGrad",
                "Decoupled+LRDM", "Decoupled+LRDM(alpha*)"} <= labels
        per_seed_modes = [row["mode"] for row in rows if row["seed"] == "0"]
        assert len(per_seed_modes) == 6
        assert set(summary["means"]) == {"Transition only", "Endpoint only", "Joint",
                                         "Joint+PCGrad", "Decoupled+LRDM"}
        doc = json.loads((tmp_path / "ablation.json").read_text())
        assert doc["gi_layers"] == [f"text.block{i}" for i in (1, 2, 3, 4)] + ["text.out"]
        assert len(doc["gi_mean"]) == 5
        assert "alpha_star" in doc["per_seed"]["0"]["LRDM"]
