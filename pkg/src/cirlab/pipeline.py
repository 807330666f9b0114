"""Experiment pipeline stages and the consolidated run report.

Every stage derives its world deterministically from the master seed via
named sub-streams, so stages are independently re-runnable; checkpoints are
the only cross-stage artifacts read back from disk.  Each artifact embeds the
canonical config hash and is listed in ``manifest.json``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adapters import AdapterStack, BranchId, init_adapters, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .encoder import EncoderConfig
from .errors import ConfigInvalid, MissingArtifact
from .evaluate import MetricsReport, build_gallery_index, evaluate_benchmark
from .merge import MergeRule, MergeSpec, alpha_sweep, lrdm_merge, merge_stack, sweep_to_csv
from .probe import collect_grads, interference_scores, probe_report
from .rng import Rng
from .synthworld import (
    AttributeSchema, RetrievalBenchmark, build_benchmark, build_vocab,
    export_tuples, gen_edit_tuples, gen_items, save_benchmark,
)
from .trainer import (
    EncodedWorld, PretrainConfig, TrainConfig, TrainMode, build_encoded_world,
    pretrain_base, run_training,
)

ABLATE_MODE_LABELS = {
    "TransitionOnly": "Transition only",
    "EndpointOnly": "Endpoint only",
    "JointShared": "Joint",
    "JointPCGrad": "Joint+PCGrad",
    "Decoupled": "Decoupled+LRDM",
}


# ---------------------------------------------------------------------------
# World derivation
# ---------------------------------------------------------------------------

@dataclass
class WorldBundle:
    seed_tag: int
    schema: AttributeSchema
    enc_config: EncoderConfig
    stack: AdapterStack          # freshly initialized, not pretrained
    world: EncodedWorld
    benchmark: RetrievalBenchmark
    rng_pretrain: Rng


def build_world_bundle(cfg: ExperimentConfig, seed_tag: int = 0) -> WorldBundle:
    master = int(cfg["run"]["master_seed"])
    rng = Rng(master).split(f"seed{seed_tag}")
    schema = AttributeSchema()
    vocab = build_vocab(schema)
    enc_cfg = EncoderConfig(
        d_model=cfg["encoder"]["d_model"],
        n_blocks=cfg["encoder"]["n_blocks"],
        max_len=cfg["encoder"]["max_len"],
        d_visual_in=schema.feature_dim,
        lora_rank=cfg["encoder"]["lora_rank"],
        lora_alpha=cfg["encoder"]["lora_alpha"],
    )
    stack = init_adapters(enc_cfg, vocab, rng.split("init"))
    w = cfg["world"]
    items = gen_items(schema, w["n_items"], rng.split("items"))
    train_tuples = gen_edit_tuples(items, schema, w["n_tuples"], rng.split("tuples"))
    world = build_encoded_world(schema, vocab, items, train_tuples, stack,
                                w["noise_sigma"], rng.split("world"))
    eval_tuples = gen_edit_tuples(items, schema, w["n_queries"], rng.split("eval_tuples"))
    benchmark = build_benchmark(
        items, eval_tuples, w["gallery_size"], w["replicas_per_item"],
        w["shortcut_count"], rng.split("bench"), noise_sigma=w["noise_sigma"],
        schema=schema, ref_plant_prob=w["ref_plant_prob"],
    )
    return WorldBundle(seed_tag=seed_tag, schema=schema, enc_config=enc_cfg,
                       stack=stack, world=world, benchmark=benchmark,
                       rng_pretrain=rng.split("pretrain"))


def _pretrain_config(cfg: ExperimentConfig) -> PretrainConfig:
    p = cfg["pretrain"]
    return PretrainConfig(steps=p["steps"], batch_size=p["batch_size"],
                          learning_rate=p["learning_rate"],
                          weight_decay=p["weight_decay"],
                          warmup_steps=p["warmup_steps"])


def _train_config(cfg: ExperimentConfig, mode: str, seed: int,
                  steps: int | None = None) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        mode=TrainMode(mode),
        steps=t["steps"] if steps is None else steps,
        batch_size=t["batch_size"],
        learning_rate=t["learning_rate"],
        weight_decay=t["weight_decay"],
        warmup_steps=t["warmup_steps"],
        lambda_trans=t["lambda_trans"],
        omega=t["omega"],
        scope=t["scope"],
        sequential_passes=t["sequential_passes"],
        seed=seed,
    )


def eval_branch(mode: str) -> BranchId:
    return BranchId.TRANS if mode == "TransitionOnly" else BranchId.END


# ---------------------------------------------------------------------------
# Manifest helpers
# ---------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _check_manifest(out_dir: Path, config_hash: str) -> dict:
    manifest_path = out_dir / "manifest.json"
    if not manifest_path.exists():
        return {"config_hash": config_hash, "stages": {}}
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("config_hash") != config_hash:
        raise ConfigInvalid("run directory was produced with a different configuration")
    return manifest


def _update_manifest(out_dir: Path, config_hash: str, stage: str, files: list[str]) -> None:
    manifest = _check_manifest(out_dir, config_hash)
    manifest["stages"][stage] = {name: _sha256(out_dir / name) for name in sorted(files)}
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _require(out_dir: Path, name: str) -> Path:
    path = out_dir / name
    if not path.exists():
        raise MissingArtifact(str(name))
    return path


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def _prepare(cfg: ExperimentConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _check_manifest(out_dir, cfg.config_hash())


def run_gen(cfg: ExperimentConfig, out_dir: Path) -> list[str]:
    _prepare(cfg, out_dir)
    bundle = build_world_bundle(cfg)
    export_tuples(bundle.world.tuples, out_dir / "tuples.jsonl")
    save_benchmark(bundle.benchmark, out_dir / "benchmark.json", cfg.config_hash())
    files = ["tuples.jsonl", "benchmark.json"]
    _update_manifest(out_dir, cfg.config_hash(), "gen", files)
    return files


def run_pretrain(cfg: ExperimentConfig, out_dir: Path) -> list[str]:
    _prepare(cfg, out_dir)
    bundle = build_world_bundle(cfg)
    log = pretrain_base(bundle.stack, bundle.world, _pretrain_config(cfg),
                        bundle.rng_pretrain)
    save_checkpoint(bundle.stack, out_dir / "pretrained.dcir", cfg.config_hash())
    with open(out_dir / "pretrain_log.csv", "w", newline="") as fh:
        fh.write(f"# config_hash={cfg.config_hash()}\n")
        writer = csv.DictWriter(fh, fieldnames=["phase", "step", "loss", "lr", "tau"])
        writer.writeheader()
        for row in log:
            writer.writerow(row)
    files = ["pretrained.dcir", "pretrain_log.csv"]
    _update_manifest(out_dir, cfg.config_hash(), "pretrain", files)
    return files


def run_train(cfg: ExperimentConfig, out_dir: Path) -> list[str]:
    _prepare(cfg, out_dir)
    pretrained = load_checkpoint(_require(out_dir, "pretrained.dcir"))
    bundle = build_world_bundle(cfg)
    files = []
    for mode in cfg["train"]["modes"]:
        tc = _train_config(cfg, mode, seed=int(cfg["run"]["master_seed"]))
        trained, log = run_training(tc, bundle.world, pretrained)
        name = f"trained_{mode}.dcir"
        save_checkpoint(trained, out_dir / name, cfg.config_hash())
        log_name = f"train_log_{mode}.csv"
        log.to_csv(out_dir / log_name, cfg.config_hash())
        files += [name, log_name]
    _update_manifest(out_dir, cfg.config_hash(), "train", files)
    return files


def run_probe(cfg: ExperimentConfig, out_dir: Path) -> list[str]:
    _prepare(cfg, out_dir)
    target = cfg["probe"]["target_mode"]
    stack = load_checkpoint(_require(out_dir, f"trained_{target}.dcir"))
    bundle = build_world_bundle(cfg)
    report = probe_report(
        stack, bundle.world, seeds=list(cfg["probe"]["seeds"]),
        m_batches=cfg["probe"]["m_batches"], batch_size=cfg["probe"]["batch_size"],
        omega=cfg["train"]["omega"])
    report.to_csv(out_dir / "probe.csv", cfg.config_hash())
    _update_manifest(out_dir, cfg.config_hash(), "probe", ["probe.csv"])
    return ["probe.csv"]


def run_merge(cfg: ExperimentConfig, out_dir: Path) -> list[str]:
    _prepare(cfg, out_dir)
    source = cfg["merge"]["source_mode"]
    stack = load_checkpoint(_require(out_dir, f"trained_{source}.dcir"))
    files = []
    for rule in cfg["merge"]["rules"]:
        spec = MergeSpec(
            rule=MergeRule(rule), alpha=cfg["merge"]["alpha"],
            ties_density=cfg["merge"]["ties_density"],
            dare_drop_p=cfg["merge"]["dare_drop_p"],
            seed=int(cfg["run"]["master_seed"]),
        )
        merged = merge_stack(stack, spec)
        name = f"merged_{rule}.dcir"
        save_checkpoint(merged, out_dir / name, cfg.config_hash())
        files.append(name)
    _update_manifest(out_dir, cfg.config_hash(), "merge", files)
    return files


def run_eval(cfg: ExperimentConfig, out_dir: Path) -> MetricsReport:
    _prepare(cfg, out_dir)
    target = cfg["eval"]["target"]
    stack = load_checkpoint(_require(out_dir, f"{target}.dcir"))
    bundle = build_world_bundle(cfg)
    branch = BranchId.TRANS if target == "trained_TransitionOnly" else BranchId.END
    report = evaluate_benchmark(
        stack, bundle.benchmark, branch=branch,
        recall_ks=tuple(cfg["eval"]["recall_ks"]),
        subset_ks=tuple(cfg["eval"]["subset_ks"]),
        map_ks=tuple(cfg["eval"]["map_ks"]),
    )
    report.to_json(out_dir / "metrics.json", cfg.config_hash())
    report.to_csv(out_dir / "metrics.csv", cfg.config_hash())
    _update_manifest(out_dir, cfg.config_hash(), "eval", ["metrics.json", "metrics.csv"])
    return report


def run_sweep(cfg: ExperimentConfig, out_dir: Path) -> list[str]:
    _prepare(cfg, out_dir)
    kind = cfg["sweep"]["kind"]
    bundle = build_world_bundle(cfg)
    if kind == "alpha":
        stack = load_checkpoint(_require(out_dir, "trained_Decoupled.dcir"))
        rows = alpha_sweep(stack, list(cfg["merge"]["alpha_grid"]), bundle.benchmark)
        name = "sweep_alpha.csv"
    elif kind == "omega":
        pretrained = load_checkpoint(_require(out_dir, "pretrained.dcir"))
        rows = []
        for omega in cfg["sweep"]["omega_grid"]:
            tc = _train_config(cfg, "Decoupled", seed=int(cfg["run"]["master_seed"]))
            tc.omega = omega
            trained, _ = run_training(tc, bundle.world, pretrained)
            merged = lrdm_merge(trained, cfg["merge"]["alpha"])
            rep = evaluate_benchmark(merged, bundle.benchmark)
            rows.append({"omega": omega, "r_at_1": rep.recall[1],
                         "r_at_5": rep.recall[5], "map_at_10": rep.map_at[10]})
        name = "sweep_omega.csv"
    else:  # lambda: shared-adapter transition-weight sweep
        pretrained = load_checkpoint(_require(out_dir, "pretrained.dcir"))
        rows = []
        for lam in cfg["sweep"]["lambda_grid"]:
            tc = _train_config(cfg, "JointShared", seed=int(cfg["run"]["master_seed"]))
            tc.lambda_trans = lam
            trained, _ = run_training(tc, bundle.world, pretrained)
            rep = evaluate_benchmark(trained, bundle.benchmark)
            rows.append({"lambda_trans": lam, "r_at_1": rep.recall[1],
                         "r_at_5": rep.recall[5], "map_at_10": rep.map_at[10]})
        name = "sweep_lambda.csv"
    sweep_to_csv(rows, out_dir / name, cfg.config_hash())
    _update_manifest(out_dir, cfg.config_hash(), f"sweep_{kind}", [name])
    return [name]


# ---------------------------------------------------------------------------
# Alpha selection and the ablation protocol
# ---------------------------------------------------------------------------

def select_alpha(
    dec_stack: AdapterStack,
    held: RetrievalBenchmark,
    grid: list[float],
    se_mult: float = 1.0,
) -> tuple[float, list[dict]]:
    """Held-out merge-weight selection, conservative by construction.

    A nonzero alpha is chosen only when its held-out R@1 beats alpha=0 by at
    least ``se_mult`` binomial standard errors without worsening the held-out
    shortcut gap; ties resolve to the smaller alpha.  Otherwise alpha=0, which
    reproduces the endpoint branch exactly.
    """
    index = build_gallery_index(held, dec_stack)
    table = []
    for alpha in grid:
        rep = evaluate_benchmark(lrdm_merge(dec_stack, alpha), held, gallery_index=index)
        table.append({"alpha": alpha, "r_at_1": rep.recall[1],
                      "shortcut_gap": rep.shortcut_gap})
    base = next(row for row in table if row["alpha"] == 0.0)
    n = len(held.queries)
    se = float(np.sqrt(max(base["r_at_1"] * (1.0 - base["r_at_1"]), 1e-4) / n))
    best = base
    for row in table:
        if row["shortcut_gap"] > base["shortcut_gap"]:
            continue
        if row["r_at_1"] < base["r_at_1"] + se_mult * se:
            continue
        if row["r_at_1"] > best["r_at_1"]:
            best = row
    return float(best["alpha"]), table


def run_ablate(cfg: ExperimentConfig, out_dir: Path) -> dict:
    """Five-mode comparison over seeds on the conflict benchmark.

    Per seed: pretrain once, train every mode on the same batch stream,
    evaluate on the test half of the benchmark, probe the shared-adapter
    checkpoint, and merge the decoupled branches at a held-out-selected
    alpha.  Writes ``ablation.csv`` and a machine-readable ``ablation.json``
    with per-seed values, interference statistics, and phase timings.
    """
    _prepare(cfg, out_dir)
    seeds = list(cfg["ablate"]["seeds"])
    steps = cfg["ablate"]["steps"]
    modes = ["TransitionOnly", "EndpointOnly", "JointShared", "JointPCGrad", "Decoupled"]
    grid = list(cfg["merge"]["alpha_grid"])

    t_start = time.perf_counter()
    t_joint_probe = 0.0
    per_seed: dict[str, dict] = {}
    gi_by_seed: list[list[float]] = []
    layer_names: list[str] = []
    rows = []

    for seed in seeds:
        bundle = build_world_bundle(cfg, seed_tag=seed)
        t0 = time.perf_counter()
        pretrain_base(bundle.stack, bundle.world, _pretrain_config(cfg),
                      bundle.rng_pretrain)
        t_pretrain = time.perf_counter() - t0
        held, test = bundle.benchmark.split_queries()
        record: dict = {"pretrain_seconds": t_pretrain}
        dec_stack = None
        for mode in modes:
            t0 = time.perf_counter()
            tc = _train_config(cfg, mode, seed=seed, steps=steps)
            trained, _ = run_training(tc, bundle.world, bundle.stack)
            t_train = time.perf_counter() - t0
            rep = evaluate_benchmark(trained, test, branch=eval_branch(mode))
            record[mode] = {"r_at_1": rep.recall[1], "r_at_5": rep.recall[5],
                            "map_at_10": rep.map_at[10],
                            "shortcut_gap": rep.shortcut_gap}
            rows.append({"seed": seed, "mode": ABLATE_MODE_LABELS[mode],
                         "alpha": "", **record[mode]})
            if mode == "JointShared":
                t_joint_probe += t_train
                t0 = time.perf_counter()
                prng = Rng(seed).split("probe.batches")
                m = cfg["probe"]["m_batches"]
                batches = [prng.integers(cfg["probe"]["batch_size"], bundle.world.size)
                           for _ in range(m)]
                g_end = collect_grads(trained, bundle.world, "endpoint", m, prng,
                                      batches=batches, omega=cfg["train"]["omega"])
                g_trans = collect_grads(trained, bundle.world, "transition", m, prng,
                                        batches=batches, omega=cfg["train"]["omega"])
                scores = interference_scores(g_end, g_trans)
                layer_names = [s.layer for s in scores]
                gi_by_seed.append([s.gi for s in scores])
                record["gi"] = [s.gi for s in scores]
                record["s_cross"] = [s.s_cross for s in scores]
                record["s_base"] = [s.s_base for s in scores]
                t_joint_probe += time.perf_counter() - t0
            if mode == "Decoupled":
                dec_stack = trained
        alpha_star, sel_table = select_alpha(dec_stack, held, grid,
                                             cfg["ablate"]["selection_se_mult"])
        merged = lrdm_merge(dec_stack, alpha_star)
        rep = evaluate_benchmark(merged, test,
                                 gallery_index=build_gallery_index(test, dec_stack))
        record["LRDM"] = {"r_at_1": rep.recall[1], "r_at_5": rep.recall[5],
                          "map_at_10": rep.map_at[10],
                          "shortcut_gap": rep.shortcut_gap,
                          "alpha_star": alpha_star}
        record["alpha_table"] = sel_table
        rows.append({"seed": seed, "mode": "Decoupled+LRDM(alpha*)",
                     "alpha": alpha_star, **{k: v for k, v in record["LRDM"].items()
                                             if k != "alpha_star"}})
        per_seed[str(seed)] = record

    gi = np.array(gi_by_seed)
    summary = {
        "config_hash": cfg.config_hash(),
        "seeds": seeds,
        "steps": steps,
        "per_seed": per_seed,
        "means": {
            label: {
                metric: float(np.mean([per_seed[str(s)][key][metric] for s in seeds]))
                for metric in ("r_at_1", "r_at_5", "map_at_10", "shortcut_gap")
            }
            for key, label in [("TransitionOnly", "Transition only"),
                               ("EndpointOnly", "Endpoint only"),
                               ("JointShared", "Joint"),
                               ("JointPCGrad", "Joint+PCGrad"),
                               ("LRDM", "Decoupled+LRDM")]
        },
        "gi_layers": layer_names,
        "gi_mean": [float(x) for x in gi.mean(axis=0)],
        "gi_std": [float(x) for x in gi.std(axis=0, ddof=1)],
        "timings": {
            "total_seconds": time.perf_counter() - t_start,
            "joint_and_probe_seconds": t_joint_probe,
        },
    }
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        fh.write(f"# config_hash={cfg.config_hash()}\n")
        writer = csv.DictWriter(fh, fieldnames=["seed", "mode", "alpha", "r_at_1",
                                                "r_at_5", "map_at_10", "shortcut_gap"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    (out_dir / "ablation.json").write_text(json.dumps(summary, sort_keys=True) + "\n")
    _update_manifest(out_dir, cfg.config_hash(), "ablate",
                     ["ablation.csv", "ablation.json"])
    return summary


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

_REQUIRED_FOR_REPORT = [
    "tuples.jsonl", "benchmark.json", "pretrained.dcir", "probe.csv", "metrics.json",
]


def _embedded_hash(path: Path) -> str | None:
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        return doc.get("config_hash")
    if path.suffix == ".csv":
        first = path.read_text().splitlines()[0]
        if first.startswith("# config_hash="):
            return first.split("=", 1)[1]
        return None
    if path.suffix == ".dcir":
        from .adapters import read_checkpoint_tensors
        _, meta = read_checkpoint_tensors(path)
        return meta.get("config_hash") or None
    return None


def run_report(out_dir: Path) -> dict:
    """Consolidated, regression-diffable summary of a pipeline run."""
    manifest_path = out_dir / "manifest.json"
    if not manifest_path.exists():
        raise MissingArtifact("manifest.json")
    manifest = json.loads(manifest_path.read_text())
    config_hash = manifest["config_hash"]

    for name in _REQUIRED_FOR_REPORT:
        _require(out_dir, name)
    train_files = [n for n in manifest.get("stages", {}).get("train", {})
                   if n.endswith(".dcir")]
    if not train_files:
        raise MissingArtifact("trained_*.dcir")

    artifacts = {}
    for stage, files in sorted(manifest.get("stages", {}).items()):
        for name in sorted(files):
            path = _require(out_dir, name)
            embedded = _embedded_hash(path)
            if embedded not in (None, "", config_hash):
                raise ConfigInvalid(
                    f"{name} embeds config hash {embedded[:12]}..., "
                    f"manifest says {config_hash[:12]}...")
            artifacts[name] = _sha256(path)

    headline: dict = {}
    metrics = json.loads((out_dir / "metrics.json").read_text())
    headline["metrics"] = {k: v for k, v in metrics.items() if k != "config_hash"}
    probe_rows = [r for r in csv.DictReader(
        line for line in (out_dir / "probe.csv").read_text().splitlines()
        if not line.startswith("#"))]
    headline["probe_max_gi_mean"] = max(float(r["gi_mean"]) for r in probe_rows)
    sweep_path = out_dir / "sweep_alpha.csv"
    if sweep_path.exists():
        sweep_rows = [r for r in csv.DictReader(
            line for line in sweep_path.read_text().splitlines()
            if not line.startswith("#"))]
        best = max(sweep_rows, key=lambda r: float(r["r_at_1"]))
        headline["sweep_best_alpha"] = float(best["alpha"])
    ablation_path = out_dir / "ablation.json"
    if ablation_path.exists():
        ablation = json.loads(ablation_path.read_text())
        headline["ablation_means"] = ablation["means"]

    report = {"config_hash": config_hash, "artifacts": artifacts, "headline": headline}
    (out_dir / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    return report
