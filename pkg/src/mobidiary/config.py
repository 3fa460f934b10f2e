"""Run configuration files.

The file is TOML restricted to a fixed set of dotted keys, e.g.::

    model.d_model = 128
    model.patch.P = 25
    train.epochs = 30
    ablation.pe = false

Tables (``[model]``, ``[model.patch]``) are equivalent to the dotted form.
Every key is typed and range-checked when loaded; unknown keys are errors.
Keys that are left out keep their defaults.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .model import DTYPES, ModelConfig
from .sensor_encoder import EncoderConfig, PatchConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration key."""


def _int(lo=None, odd=False, even=False):
    def check(key, v):
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{key} must be an integer, got {v!r}")
        if lo is not None and v < lo:
            raise ConfigError(f"{key} must be >= {lo}, got {v}")
        if odd and v % 2 == 0:
            raise ConfigError(f"{key} must be odd, got {v}")
        if even and v % 2:
            raise ConfigError(f"{key} must be even, got {v}")
        return v
    return check


def _float(lo=None, above=None):
    def check(key, v):
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise ConfigError(f"{key} must be a finite number, got {v!r}")
        if lo is not None and v < lo:
            raise ConfigError(f"{key} must be >= {lo}, got {v}")
        if above is not None and v <= above:
            raise ConfigError(f"{key} must be > {above}, got {v}")
        return float(v)
    return check


def _bool(key, v):
    if not isinstance(v, bool):
        raise ConfigError(f"{key} must be true or false, got {v!r}")
    return v


def _choice(*options):
    def check(key, v):
        if v not in options:
            raise ConfigError(f"{key} must be one of {options}, got {v!r}")
        return v
    return check


SCHEMA = {
    "model.d_model": (_int(2, even=True), 128),
    "model.n_heads": (_int(1), 4),
    "model.n_sa_layers": (_int(0), 2),
    "model.n_text_layers": (_int(1), 2),
    "model.n_convffn_blocks": (_int(0), 2),
    "model.dw_kernel": (_int(1, odd=True), 15),
    "model.patch.P": (_int(1), 25),
    "model.patch.S": (_int(1), 25),
    "model.pe_base_sensor": (_float(above=1.0), 1000.0),
    "model.pe_base_text": (_float(above=1.0), 10000.0),
    "model.n_final_pwconv": (_int(1), 1),
    "model.ffn_width": (_int(1), 256),
    "model.dtype": (_choice(*DTYPES), "float32"),
    "train.lr": (_float(lo=0.0), 1e-4),
    "train.weight_decay": (_float(lo=0.0), 1e-3),
    "train.batch_size": (_int(1), 16),
    "train.epochs": (_int(1), 30),
    "train.seed": (_int(0), 0),
    "train.max_grad_norm": (_float(above=0.0), None),
    "train.max_steps": (_int(1), None),
    "train.target_loss": (_float(above=0.0), None),
    "decode.t_max": (_int(1), 50),
    "ablation.patch": (_bool, True),
    "ablation.pe": (_bool, True),
    "ablation.placement": (_bool, True),
    "ablation.convffn": (_bool, True),
}


def flatten(tree: Mapping, prefix: str = "") -> dict:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


@dataclass(frozen=True)
class RunConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in SCHEMA.items()})

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @classmethod
    def from_mapping(cls, tree: Mapping) -> "RunConfig":
        flat = flatten(tree)
        unknown = sorted(set(flat) - set(SCHEMA))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        values = {k: d for k, (_, d) in SCHEMA.items()}
        for k, v in flat.items():
            values[k] = SCHEMA[k][0](k, v)
        if values["model.d_model"] % values["model.n_heads"]:
            raise ConfigError("model.d_model must be divisible by model.n_heads")
        if values["model.patch.S"] > values["model.patch.P"]:
            raise ConfigError("model.patch.S must not exceed model.patch.P")
        return cls(values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            tree = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        try:
            return cls.from_mapping(tree)
        except ConfigError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def model_config(self, D: int, C: int, num_placements: int) -> ModelConfig:
        v = self.values
        enc = EncoderConfig(
            D=D,
            C=C,
            num_placements=num_placements,
            patch=PatchConfig(v["model.patch.P"], v["model.patch.S"]),
            d_model=v["model.d_model"],
            n_heads=v["model.n_heads"],
            n_sa_layers=v["model.n_sa_layers"],
            ffn_width=v["model.ffn_width"],
            n_convffn_blocks=v["model.n_convffn_blocks"],
            dw_kernel=v["model.dw_kernel"],
            n_final_pwconv=v["model.n_final_pwconv"],
            pe_base=v["model.pe_base_sensor"],
            **self.ablation_flags(),
        )
        return ModelConfig(encoder=enc, n_text_layers=v["model.n_text_layers"], pe_base_text=v["model.pe_base_text"],
                           t_max=v["decode.t_max"], dtype=v["model.dtype"])

    def ablation_flags(self) -> dict:
        v = self.values
        return {
            "enable_patching": v["ablation.patch"],
            "enable_pe": v["ablation.pe"],
            "enable_placement": v["ablation.placement"],
            "enable_convffn": v["ablation.convffn"],
        }

    def train_config(self, **overrides) -> TrainConfig:
        v = self.values
        kw = dict(
            lr=v["train.lr"],
            weight_decay=v["train.weight_decay"],
            batch_size=v["train.batch_size"],
            epochs=v["train.epochs"],
            seed=v["train.seed"],
            max_grad_norm=v["train.max_grad_norm"],
            max_steps=v["train.max_steps"],
            target_loss=v["train.target_loss"],
            **self.ablation_flags(),
        )
        kw.update(overrides)
        return TrainConfig(**kw)

    def with_values(self, **dotted) -> "RunConfig":
        """Copy with some keys replaced; pass dotted keys via ``**{"train.seed": 1}``."""
        merged = dict(self.values)
        merged.update(dotted)
        tree: dict = {}
        for k, val in merged.items():
            if val is None:
                continue
            node = tree
            *parents, leaf = k.split(".")
            for p in parents:
                node = node.setdefault(p, {})
            node[leaf] = val
        return RunConfig.from_mapping(tree)
