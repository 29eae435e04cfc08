"""Experiment configuration: flat key = value sections, round-trippable,
content-hashed into every artifact."""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field

from .data import SyntheticDataset, make_dataset
from .distill import DistillConfig
from .nets import ModelConfig
from .process import DiffusionProcess, NoiseSchedule
from .teacher import TeacherTrainConfig


class ConfigError(ValueError):
    pass


# section -> key -> (type, default); REQUIRED means no default
REQUIRED = object()

SCHEMA: dict[str, dict[str, tuple]] = {
    "dataset": {
        "kind": (str, REQUIRED),
        "seq_len": (int, REQUIRED),
        "vocab": (int, REQUIRED),
        "seed": (int, 0),
    },
    "process": {
        "kind": (str, REQUIRED),
        "schedule": (str, "linear"),
    },
    "model": {
        "emb": (int, 16),
        "hidden": (int, 32),
        "depth": (int, 2),
        "time_width": (int, 8),
        "n_noise": (int, 8),
    },
    "teacher": {
        "steps": (int, 3000),
        "batch": (int, 64),
        "lr": (float, 3e-3),
        "weighting": (str, "unit"),
        "eval_every": (int, 500),
        "eval_steps": (int, 16),
    },
    "distill": {
        "k": (int, 1),
        "tau": (float, 1.0),
        "top_p": (float, 1.0),
        "delta": (float, 2.0),
        "soft_targets": (bool, False),
        "loss_variant": (str, "cross_entropy"),
        "weighting": (str, "unit"),
        "steps": (int, 8000),
        "batch": (int, 64),
        "gen_lr": (float, 1e-3),
        "aux_lr": (float, 2e-3),
        "ds": (float, 1.0 / 64.0),
        "aux_per_gen": (int, 1),
        "eval_every": (int, 1000),
        "noise_marginal_draws": (int, 64),
        "naive_topp_mask": (bool, False),
    },
    "eval": {
        "metrics": (str, "exact_kl,sample_entropy"),
        "steps": (int, 16),
        "n_samples": (int, 20000),
        "gm_pairs": (int, 200),
        "gm_batch": (int, 64),
    },
    "run": {
        "seed": (int, 0),
        "out_dir": (str, "out"),
        "record_wallclock": (bool, True),
    },
}

_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _convert(section: str, key: str, raw: str, typ):
    try:
        if typ is bool:
            return _BOOL[raw.strip().lower()]
        return typ(raw)
    except (ValueError, KeyError):
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {typ.__name__}")


@dataclass
class ExperimentConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)

    def get(self, section: str, key: str):
        return self.values[section][key]

    def set(self, section: str, key: str, raw: str) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config field [{section}] {key}")
        typ, _ = SCHEMA[section][key]
        self.values[section][key] = _convert(section, key, str(raw), typ)

    # -- factories ---------------------------------------------------------
    def dataset(self) -> SyntheticDataset:
        d = self.values["dataset"]
        return make_dataset(d["kind"], d["seq_len"], d["vocab"], seed=d["seed"])

    def process(self) -> DiffusionProcess:
        p = self.values["process"]
        return DiffusionProcess(p["kind"], self.values["dataset"]["vocab"],
                                NoiseSchedule(p["schedule"]))

    def model_config(self, n_noise: int | None = None) -> ModelConfig:
        m = self.values["model"]
        return ModelConfig(
            seq_len=self.values["dataset"]["seq_len"],
            vocab=self.values["dataset"]["vocab"],
            masked=self.values["process"]["kind"] == "masked",
            emb=m["emb"], hidden=m["hidden"], depth=m["depth"],
            time_width=m["time_width"],
            n_noise=m["n_noise"] if n_noise is None else n_noise)

    def teacher_config(self) -> TeacherTrainConfig:
        t = self.values["teacher"]
        return TeacherTrainConfig(steps=t["steps"], batch=t["batch"], lr=t["lr"],
                                  weighting=t["weighting"], eval_every=t["eval_every"],
                                  eval_steps=t["eval_steps"])

    def distill_config(self) -> DistillConfig:
        d = self.values["distill"]
        return DistillConfig(k=d["k"], tau=d["tau"], top_p=d["top_p"], delta=d["delta"],
                             soft_targets=d["soft_targets"], loss_variant=d["loss_variant"],
                             weighting=d["weighting"], steps=d["steps"], batch=d["batch"],
                             gen_lr=d["gen_lr"], aux_lr=d["aux_lr"], ds=d["ds"],
                             aux_per_gen=d["aux_per_gen"],
                             naive_topp_mask=d["naive_topp_mask"],
                             eval_every=d["eval_every"],
                             noise_marginal_draws=d["noise_marginal_draws"])


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}")
    cfg = ExperimentConfig({s: {} for s in SCHEMA})
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config field [{section}] {key}")
            typ, _ = SCHEMA[section][key]
            cfg.values[section][key] = _convert(section, key, raw, typ)
    for section, keys in SCHEMA.items():
        for key, (typ, default) in keys.items():
            if key not in cfg.values[section]:
                if default is REQUIRED:
                    raise ConfigError(f"missing required field [{section}] {key}")
                cfg.values[section][key] = default
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")


def to_text(cfg: ExperimentConfig) -> str:
    """Canonical serialization: sorted sections and keys, round-trip stable."""
    lines = []
    for section in sorted(cfg.values):
        lines.append(f"[{section}]")
        for key in sorted(cfg.values[section]):
            lines.append(f"{key} = {cfg.values[section][key]}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(to_text(cfg).encode("utf-8")).hexdigest()[:16]
