"""Declarative pipeline configuration (JSON) and per-stage config hashes.

Every artifact is stamped with the hash of the configuration sections it
depends on, chained through its upstream stages; a consumer recomputes the
expected hash from the current config and refuses mismatched inputs.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from .errors import ConfigError
from .model.vit import ModelConfig
from .signal import FilterSpec

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "paths": {
        "data_dir": "data",
        "manifest": "data/manifest.csv",
        "labels": "data/labels.csv",
        "cache_dir": "cache",
        "output_dir": "out",
    },
    "synthesize": {"n_records": 2000, "positive_rate": 0.5, "seed": 0, "noise_mv": 0.05},
    "filter": {
        "low_cut_hz": 0.5,
        "high_cut_hz": 40.0,
        "butterworth_order": 3,
        "median_kernel_samples": 5,
        "median_as_baseline": False,
        "edge_pad_samples": None,
    },
    "raster": {"target_samples": 2500, "canvas": 560, "side": 224},
    "split": {"seed": 0, "test_fraction": 0.2, "fractions": [0.01, 0.1, 0.25, 0.5, 1.0]},
    "tokenizer": {"vocab_size": 64, "max_patches": 200000, "max_iters": 50, "seed": 0},
    "model": {
        "layers": 2,
        "hidden": 64,
        "heads": 4,
        "mlp_ratio": 4.0,
        "patch_size": 16,
        "channels": 1,
        "n_classes": 2,
        "dropout": 0.0,
        "invert_input": True,
    },
    "pretrain": {
        "epochs": 10,
        "batch_size": 32,
        "lr": 5e-4,
        "weight_decay": 0.05,
        "mask_ratio": 0.4,
        "seed": 0,
        "checkpoint_every": 5,
    },
    "finetune": {
        "epochs": 30,
        "batch_size": 32,
        "base_lr": 3e-4,
        "max_lr": 1e-3,
        "seed": 0,
        "head_only": False,
        "fractions": [0.1, 1.0],
    },
    "eval": {"n_bootstrap": 500, "seed": 0, "sample_n": 1000, "saliency_count": 8, "saliency_method": "gradcam"},
}

# Sections each stage's artifacts depend on, beyond their upstream stage.
STAGE_SECTIONS = {
    "images": ("filter", "raster"),
    "tokenizer": ("split", "tokenizer"),
    "pretrain": ("model", "pretrain"),
    "finetune": ("finetune",),
}
STAGE_PARENT = {"images": None, "tokenizer": "images", "pretrain": "tokenizer", "finetune": "pretrain"}


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key} must be a table")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


@dataclass
class PipelineConfig:
    data: Dict[str, Dict[str, Any]]
    base_dir: Path = Path(".")

    @classmethod
    def default(cls, base_dir=".") -> "PipelineConfig":
        return cls(copy.deepcopy(DEFAULTS), Path(base_dir))

    @classmethod
    def load(cls, path, overrides: Iterable[str] = ()) -> "PipelineConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        cfg = cls(_merge(DEFAULTS, raw), path.parent)
        cfg.apply(overrides)
        return cfg

    def apply(self, overrides: Iterable[str]) -> None:
        """Apply ``section.key=value`` overrides; values parse as JSON, else as strings."""
        for item in overrides:
            key, sep, value = item.partition("=")
            section, dot, name = key.partition(".")
            if not sep or not dot or section not in self.data or name not in self.data[section]:
                raise ConfigError(f"bad override {item!r}; expected section.key=value with a known key")
            try:
                parsed = json.loads(value)
            except json.JSONDecodeError:
                parsed = value
            self.data[section][name] = parsed
        self.validate()

    def validate(self) -> None:
        try:
            self.filter_spec()
            self.model_config()
        except Exception as exc:  # surfaced as a config error with context
            raise ConfigError(f"invalid configuration: {exc}") from exc
        if int(self.data["synthesize"]["n_records"]) < 2:
            raise ConfigError("synthesize.n_records must be >= 2")
        if self.data["raster"]["side"] != self.model_config().image_side:
            raise ConfigError("raster.side must equal the model image side")

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.data, sort_keys=True, indent=2) + "\n")

    def __getitem__(self, section: str) -> Dict[str, Any]:
        return self.data[section]

    def path(self, key: str) -> Path:
        p = Path(self.data["paths"][key])
        return p if p.is_absolute() else self.base_dir / p

    # typed views -------------------------------------------------------

    def filter_spec(self) -> FilterSpec:
        return FilterSpec(**self.data["filter"])

    def model_config(self) -> ModelConfig:
        m = self.data["model"]
        return ModelConfig(
            layers=m["layers"],
            hidden=m["hidden"],
            heads=m["heads"],
            mlp_ratio=m["mlp_ratio"],
            patch_size=m["patch_size"],
            image_side=self.data["raster"]["side"],
            channels=m["channels"],
            vocab_size=self.data["tokenizer"]["vocab_size"],
            n_classes=m["n_classes"],
            dropout=m["dropout"],
            invert_input=bool(m["invert_input"]),
        )

    # hashes -------------------------------------------------------------

    def config_hash(self) -> str:
        """Hash of the whole canonicalized configuration, paths excluded."""
        return _digest({k: v for k, v in self.data.items() if k != "paths"})

    def stage_hash(self, stage: str) -> str:
        if stage not in STAGE_SECTIONS:
            raise ConfigError(f"unknown stage {stage!r}")
        parent = STAGE_PARENT[stage]
        payload = {s: self.data[s] for s in STAGE_SECTIONS[stage]}
        if stage == "pretrain":
            payload["raster"] = self.data["raster"]
        payload["upstream"] = self.stage_hash(parent) if parent else None
        return _digest(payload)

    def finetune_hash(self, init: str) -> str:
        if init == "pretrained":
            return _digest({"finetune": self.data["finetune"], "upstream": self.stage_hash("pretrain")})
        return _digest(
            {
                "finetune": self.data["finetune"],
                "model": self.data["model"],
                "split": self.data["split"],
                "upstream": self.stage_hash("images"),
            }
        )
