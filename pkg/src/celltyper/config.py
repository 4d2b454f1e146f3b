"""Structured configuration: one YAML document, strict keys, typed access.

Precedence is flags > file > defaults. Every key is declared in the schema
below; anything else is rejected at load time with its dotted path, so a
typo never silently falls back to a default.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import yaml

from . import data as data_mod
from . import detection, encoder, evaluation, training
from .errors import ConfigError
from .util import child_seed

# section -> key -> (default, type); bool before int because bool is an int
_SCHEMA: dict[str, dict[str, tuple]] = {
    "paths": {
        "workspace": ("workspace", str),
        "data": ("", str),
        "processed": ("", str),
        "models": ("", str),
        "memory": ("", str),
        "reports": ("", str),
    },
    "synthesis": {
        "tissues": (1, int),
        "classes_per_tissue": (4, int),
        "cells_per_class": (100, int),
        "genes": (60, int),
        "marker_genes_per_class": (5, int),
        "marker_strength": (5.0, float),
        "baseline_mean": (1.0, float),
        "noise_level": (0.5, float),
        "batches": (1, int),
        "batch_shift": (0.0, float),
    },
    "preprocess": {
        "target_sum": (1e4, float),
        "log1p": (True, bool),
        "min_genes_per_cell": (1, int),
        "min_cells_per_gene": (1, int),
        "split_ratios": ([8, 1, 1], list),
    },
    "encoder": {
        "hidden_dims": ([256, 256], list),
        "embedding_dim": (64, int),
        "activation": ("relu", str),
    },
    "ssl": {
        "mask_fraction": (0.15, float),
        "epochs": (30, int),
        "lr": (1e-3, float),
        "batch_size": (64, int),
    },
    "train": {
        "lr_max": (1e-3, float),
        "lr_min": (1e-5, float),
        "batch_size": (64, int),
        "max_epochs": (200, int),
        "patience": (10, int),
        "beta1": (0.9, float),
        "beta2": (0.999, float),
        "eps": (1e-8, float),
        "convergence_loss": (1e-6, float),
    },
    "adapters": {
        "n_experts": (5, int),
        "rank": (8, int),
        "alpha": (16.0, float),
    },
    "index": {
        "nlist": (None, int),
        "nprobe": (None, int),
        "metric": ("euclidean", str),
    },
    "detection": {
        "top_m": (10, int),
        "sigma": (3.0, float),
        "ambiguity_low": (0.8, float),
        "ambiguity_high": (1.2, float),
        "agreement_min": (0.6, float),
        "distance_quantile": (0.95, float),
    },
    "oracle": {
        "mode": ("rule", str),
        "endpoint": (None, str),
        "model": (None, str),
        "timeout": (10.0, float),
        "retries": (2, int),
    },
    "sweep": {
        "sample_counts": ([10, 20, 30, 40, 50], list),
        "repeats": (1, int),
        "holdout_class": (None, str),
    },
}

_TOP_LEVEL = {"seed"} | set(_SCHEMA)


def _coerce(dotted: str, value, expected):
    """Check or convert one value; strings from flags get parsed."""
    if value is None:
        return None
    if expected is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"config key '{dotted}' expects a boolean, got {value!r}")
    if expected is int:
        if isinstance(value, bool):
            raise ConfigError(f"config key '{dotted}' expects an integer, got {value!r}")
        if isinstance(value, int):
            return value
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
        raise ConfigError(f"config key '{dotted}' expects an integer, got {value!r}")
    if expected is float:
        if isinstance(value, bool):
            raise ConfigError(f"config key '{dotted}' expects a number, got {value!r}")
        if isinstance(value, (int, float)):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        raise ConfigError(f"config key '{dotted}' expects a number, got {value!r}")
    if expected is list:
        if isinstance(value, str):
            value = [tok for tok in value.replace(",", " ").split() if tok]
            return [int(tok) if tok.lstrip("-").isdigit() else float(tok)
                    for tok in value]
        if isinstance(value, (list, tuple)):
            return list(value)
        raise ConfigError(f"config key '{dotted}' expects a list, got {value!r}")
    if expected is str:
        if isinstance(value, str):
            return value
        raise ConfigError(f"config key '{dotted}' expects a string, got {value!r}")
    raise ConfigError(f"config key '{dotted}' has unsupported schema type")


@dataclass
class CliConfig:
    seed: int = 0
    sections: dict = field(default_factory=dict)

    def get(self, dotted: str):
        section, _, key = dotted.partition(".")
        if not key:
            if section == "seed":
                return self.seed
            raise ConfigError(f"unknown config key '{dotted}'")
        try:
            return self.sections[section][key]
        except KeyError:
            raise ConfigError(f"unknown config key '{dotted}'") from None

    # -- resolved paths ----------------------------------------------------
    def path(self, name: str) -> str:
        """Directory for one artifact family, defaulting under workspace."""
        paths = self.sections["paths"]
        if name == "workspace":
            return paths["workspace"]
        return paths[name] or os.path.join(paths["workspace"], name)

    # -- typed section views -----------------------------------------------
    def synthesis_config(self) -> data_mod.SynthesisConfig:
        s = self.sections["synthesis"]
        return data_mod.SynthesisConfig(seed=child_seed(self.seed, "synthesize"), **s)

    def encoder_config(self, input_dim: int) -> encoder.EncoderConfig:
        e = self.sections["encoder"]
        return encoder.EncoderConfig(input_dim, tuple(int(h) for h in e["hidden_dims"]),
                                     e["embedding_dim"], e["activation"])

    def ssl_config(self) -> encoder.SslConfig:
        s = self.sections["ssl"]
        return encoder.SslConfig(s["mask_fraction"], s["epochs"], s["lr"],
                                 s["batch_size"], seed=child_seed(self.seed, "ssl"))

    def train_config(self, label: str) -> training.TrainConfig:
        t = dict(self.sections["train"])
        cfg = training.TrainConfig(seed=child_seed(self.seed, f"train:{label}"), **t)
        cfg.validate()
        return cfg

    def detection_params(self) -> detection.DetectionParams:
        p = detection.DetectionParams(**self.sections["detection"])
        p.validate()
        return p

    def oracle_config(self) -> detection.OracleConfig:
        o = detection.OracleConfig(**self.sections["oracle"])
        o.validate()
        return o

    def sweep_config(self) -> evaluation.IncrementalSweepConfig:
        s = self.sections["sweep"]
        cfg = evaluation.IncrementalSweepConfig(
            [int(n) for n in s["sample_counts"]], s["repeats"],
            seed=child_seed(self.seed, "sweep"))
        cfg.validate()
        return cfg

    @property
    def holdout_class(self) -> str | None:
        return self.sections["sweep"]["holdout_class"]

    @property
    def split_ratios(self) -> tuple[int, int, int]:
        r = self.sections["preprocess"]["split_ratios"]
        if len(r) != 3:
            raise ConfigError("preprocess.split_ratios needs exactly 3 numbers")
        return tuple(int(v) for v in r)


def _defaults() -> dict:
    return {sec: {k: spec[0] for k, spec in keys.items()}
            for sec, keys in _SCHEMA.items()}


def load_config(path=None, overrides: dict | None = None) -> CliConfig:
    """Read a YAML config file and apply flag overrides on top.

    overrides maps dotted keys to values; both the file and the overrides
    are validated against the same schema.
    """
    sections = _defaults()
    seed = 0
    if path is not None:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"config file is not valid YAML: {e}") from None
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a mapping at top level")
        for sec, body in raw.items():
            if sec not in _TOP_LEVEL:
                raise ConfigError(f"unknown config key '{sec}'")
            if sec == "seed":
                seed = _coerce("seed", body, int)
                continue
            if not isinstance(body, dict):
                raise ConfigError(f"config section '{sec}' must be a mapping")
            for k, v in body.items():
                if k not in _SCHEMA[sec]:
                    raise ConfigError(f"unknown config key '{sec}.{k}'")
                sections[sec][k] = _coerce(f"{sec}.{k}", v, _SCHEMA[sec][k][1])
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if not key:
            if section == "seed":
                seed = _coerce("seed", value, int)
                continue
            raise ConfigError(f"unknown config key '{dotted}'")
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ConfigError(f"unknown config key '{dotted}'")
        sections[section][key] = _coerce(dotted, value, _SCHEMA[section][key][1])
    return CliConfig(seed, sections)
