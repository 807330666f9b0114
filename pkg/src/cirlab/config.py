"""Experiment configuration: a sectioned key=value text file with typed
validation, dotted-path overrides, and a canonical content hash.

Grammar (INI-flavored):

    # comment
    [section]
    key = value            ; scalars: int, float, bool (true/false), str
    grid = 0, 0.1, 0.2     ; lists: comma-separated

Overrides use dotted paths, e.g. ``train.steps=2000``.  Unknown sections or
keys fail validation.  The canonical hash is the sha256 of the sorted
``section.key=repr(value)`` lines, so formatting differences do not change it.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigInvalid

_MODES = ("Decoupled", "EndpointOnly", "TransitionOnly", "JointShared", "JointPCGrad")
_RULES = ("LRDM", "TaskArithmetic", "TIES", "DARE", "DareTies")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


# section -> key -> (parser, default)
CONFIG_SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "master_seed": (int, 1234),
        "out_dir": (str, "runs/default"),
    },
    "world": {
        "n_items": (int, 1000),
        "n_tuples": (int, 5000),
        "n_queries": (int, 1000),
        "gallery_size": (int, 2000),
        "replicas_per_item": (int, 1),
        "shortcut_count": (int, 4),
        "noise_sigma": (float, 0.1),
        "ref_plant_prob": (float, 1.0),
    },
    "encoder": {
        "d_model": (int, 64),
        "n_blocks": (int, 4),
        "max_len": (int, 24),
        "lora_rank": (int, 8),
        "lora_alpha": (float, 16.0),
    },
    "pretrain": {
        "steps": (int, 500),
        "batch_size": (int, 64),
        "learning_rate": (float, 3e-3),
        "weight_decay": (float, 0.0),
        "warmup_steps": (int, 20),
    },
    "train": {
        "modes": (_str_list, _MODES),
        "steps": (int, 1000),
        "batch_size": (int, 64),
        "learning_rate": (float, 1e-3),
        "weight_decay": (float, 0.01),
        "warmup_steps": (int, 50),
        "lambda_trans": (float, 1.0),
        "omega": (float, 0.25),
        "scope": (str, "full"),
        "sequential_passes": (_bool, True),
    },
    "probe": {
        "target_mode": (str, "JointShared"),
        "m_batches": (int, 16),
        "seeds": (_int_list, (0, 1, 2, 3, 4)),
        "batch_size": (int, 64),
    },
    "merge": {
        "rules": (_str_list, _RULES),
        "alpha": (float, 0.5),
        "alpha_grid": (_float_list, tuple(i / 10 for i in range(11))),
        "ties_density": (float, 0.2),
        "dare_drop_p": (float, 0.9),
        "source_mode": (str, "Decoupled"),
    },
    "eval": {
        "target": (str, "merged_LRDM"),
        "recall_ks": (_int_list, (1, 5, 10)),
        "subset_ks": (_int_list, (1, 2, 3)),
        "map_ks": (_int_list, (5, 10, 25, 50)),
    },
    "sweep": {
        "kind": (str, "alpha"),
        "omega_grid": (_float_list, (0.0, 0.25, 0.5, 0.75, 1.0)),
        "lambda_grid": (_float_list, (0.0, 0.5, 1.0, 2.0, 4.0)),
    },
    "ablate": {
        "seeds": (_int_list, (0, 1, 2, 3, 4)),
        "steps": (int, 4000),
        "selection_se_mult": (float, 1.0),
    },
}


@dataclass
class ExperimentConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def get(self, path: str):
        section, key = path.split(".", 1)
        return self.values[section][key]

    def canonical_lines(self) -> list[str]:
        lines = []
        for section in sorted(self.values):
            for key in sorted(self.values[section]):
                lines.append(f"{section}.{key}={self.values[section][key]!r}")
        return lines

    def config_hash(self) -> str:
        payload = "\n".join(self.canonical_lines()).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()

    def validate(self) -> None:
        train = self.values["train"]
        for mode in train["modes"]:
            if mode not in _MODES:
                raise ConfigInvalid(f"unknown train mode {mode!r}")
        if train["scope"] not in ("full", "text_map", "text_only"):
            raise ConfigInvalid(f"unknown scope {train['scope']!r}")
        if not (0.0 <= train["omega"] <= 1.0):
            raise ConfigInvalid("train.omega must lie in [0, 1]")
        if train["lambda_trans"] < 0:
            raise ConfigInvalid("train.lambda_trans must be >= 0")
        if train["batch_size"] < 2:
            raise ConfigInvalid("train.batch_size must be >= 2")
        merge = self.values["merge"]
        for rule in merge["rules"]:
            if rule not in _RULES:
                raise ConfigInvalid(f"unknown merge rule {rule!r}")
        if not (0.0 <= merge["alpha"] <= 1.0):
            raise ConfigInvalid("merge.alpha must lie in [0, 1]")
        if not (0.0 < merge["ties_density"] <= 1.0):
            raise ConfigInvalid("merge.ties_density must lie in (0, 1]")
        if not (0.0 <= merge["dare_drop_p"] < 1.0):
            raise ConfigInvalid("merge.dare_drop_p must lie in [0, 1)")
        probe = self.values["probe"]
        if probe["m_batches"] < 2 or probe["m_batches"] % 2:
            raise ConfigInvalid("probe.m_batches must be an even count >= 2")
        if len(probe["seeds"]) < 2:
            raise ConfigInvalid("probe.seeds needs at least two entries")
        if self.values["sweep"]["kind"] not in ("alpha", "omega", "lambda"):
            raise ConfigInvalid(f"unknown sweep kind {self.values['sweep']['kind']!r}")
        world = self.values["world"]
        if world["n_items"] < 1 or world["n_tuples"] < 1 or world["n_queries"] < 1:
            raise ConfigInvalid("world sizes must be positive")
        if not (0.0 <= world["ref_plant_prob"] <= 1.0):
            raise ConfigInvalid("world.ref_plant_prob must lie in [0, 1]")


def default_config() -> ExperimentConfig:
    values = {
        section: {key: default for key, (_, default) in keys.items()}
        for section, keys in CONFIG_SCHEMA.items()
    }
    return ExperimentConfig(values=values)


def _parse_value(section: str, key: str, raw: str):
    try:
        parser, _ = CONFIG_SCHEMA[section][key]
    except KeyError:
        raise ConfigInvalid(f"unknown config key {section}.{key}") from None
    try:
        return parser(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigInvalid(f"bad value for {section}.{key}: {raw!r} ({exc})") from exc


def load_config(path=None, overrides: list[str] | None = None) -> ExperimentConfig:
    cfg = default_config()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        text = Path(path).read_text(encoding="utf-8")
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigInvalid(f"cannot parse config file: {exc}") from exc
        for section in parser.sections():
            if section not in CONFIG_SCHEMA:
                raise ConfigInvalid(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                cfg.values[section][key] = _parse_value(section, key, raw)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigInvalid(f"override must look like section.key=value, got {item!r}")
        path_part, raw = item.split("=", 1)
        section, key = path_part.split(".", 1)
        if section not in CONFIG_SCHEMA:
            raise ConfigInvalid(f"unknown config section {section!r}")
        cfg.values[section][key] = _parse_value(section, key, raw)
    cfg.validate()
    return cfg
