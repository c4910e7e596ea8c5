"""Run and model configuration, TOML loading and flag overrides."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import tomli

from .errors import ConfigError

SLOT_KINDS = ("entity", "random", "query")
SCHEMES = ("compose", "avg", "max", "min")


@dataclass
class SyntheticSpec:
    grid_h: int = 24
    grid_w: int = 24
    num_groups: int = 6
    max_instances: int = 4
    feature_dim: int = 64
    noise_std: float = 0.05
    offset_std: float = 0.1
    referent_arity: int = 1
    num_items: int = 2500
    min_side: int = 4
    max_side: int = 10
    patch_px: int = 16
    seed: int = 0

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    def validate(self) -> None:
        if self.grid_h < 1 or self.grid_w < 1:
            raise ConfigError("grid extents must be positive")
        # background takes one more orthonormal direction
        if self.num_groups < 1 or self.num_groups + 1 > self.feature_dim:
            raise ConfigError(f"need 1 <= num_groups < feature_dim, got {self.num_groups}")
        if self.max_instances < 1:
            raise ConfigError("max_instances must be >= 1")
        if not 1 <= self.referent_arity <= self.max_instances:
            raise ConfigError("referent_arity must lie in [1, max_instances]")
        if not 1 <= self.min_side <= self.max_side:
            raise ConfigError("need 1 <= min_side <= max_side")
        if self.num_items < 1:
            raise ConfigError("num_items must be >= 1")


@dataclass
class RunConfig:
    dim: int = 512
    hidden_dim: int = 1024
    t_iters: int = 6
    k_g: int = 18
    k_s: int = 2
    slot_kind: str = "entity"
    heads: int = 4
    mlp_ratio: int = 4
    fusion_mlp: bool = True
    decoder_hidden: int | None = None
    pos_encoding: str = "1d"
    grid_h: int = 24
    grid_w: int = 24
    patch_px: int = 16
    batch_size: int = 32
    epochs: int = 50
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    lambda_recon: float = 1.0
    c3_temperature: float = 1.0
    tau: float = 0.5
    scheme: str = "compose"
    seed: int = 0
    eval_seed: int = 1234
    eval_every: int = 1
    train_fraction: float = 0.8
    precision: str = "f32"

    @property
    def num_slots(self) -> int:
        return self.k_g * self.k_s

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def image_h(self) -> int:
        return self.grid_h * self.patch_px

    @property
    def image_w(self) -> int:
        return self.grid_w * self.patch_px

    @property
    def decoder_width(self) -> int:
        return self.decoder_hidden if self.decoder_hidden else 2 * self.dim

    def validate(self) -> None:
        if self.k_g < 1 or self.k_s < 1:
            raise ConfigError(f"k_g and k_s must be positive, got {self.k_g}, {self.k_s}")
        if self.t_iters < 1:
            raise ConfigError("t_iters must be >= 1")
        if self.slot_kind not in SLOT_KINDS:
            raise ConfigError(f"slot_kind must be one of {SLOT_KINDS}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("tau must lie in (0, 1)")
        if self.lambda_recon < 0:
            raise ConfigError("lambda_recon must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.pos_encoding not in ("1d", "2d"):
            raise ConfigError("pos_encoding must be '1d' or '2d'")
        if self.pos_encoding == "2d" and self.dim % 4:
            raise ConfigError("2d positional encoding needs dim divisible by 4")
        if self.precision not in ("f32", "f64"):
            raise ConfigError("precision must be f32 or f64")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RunConfig:
        return _from_dict(cls, data)


def _from_dict(cls, data: dict[str, Any]):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = dict(data)
    if "betas" in kwargs:
        kwargs["betas"] = tuple(kwargs["betas"])
    return cls(**kwargs)


def synthetic_run_config(**overrides) -> RunConfig:
    """Reduced-width configuration used on the default synthetic benchmark.

    The learning rate is ten times the full-scale default: at 1e-4 the
    contrastive loss stays near log(batch) for the whole 30-epoch budget.
    The decoder hidden width is D rather than 2D to keep a run inside the
    time budget on one core.
    """
    base = RunConfig(dim=64, hidden_dim=128, k_g=6, k_s=2, t_iters=6, epochs=30, lr=1e-3, decoder_hidden=64)
    return base.replace(**overrides)


@dataclass
class FileConfig:
    run: RunConfig = field(default_factory=RunConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)


def load_config(path: str | Path | None) -> FileConfig:
    """Read a TOML file with optional ``[run]`` and ``[data]`` tables."""
    if path is None:
        return FileConfig(run=synthetic_run_config())
    with open(path, "rb") as fh:
        raw = tomli.load(fh)
    unknown = set(raw) - {"run", "data"}
    if unknown:
        raise ConfigError(f"unknown config tables: {sorted(unknown)}")
    run = _from_dict(RunConfig, {**asdict(synthetic_run_config()), **raw.get("run", {})})
    data = _from_dict(SyntheticSpec, raw.get("data", {}))
    return FileConfig(run=run, data=data)
