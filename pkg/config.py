#!/usr/bin/env python3
"""
config.py — Hyperparameters, config files and overrides

This module defines:
- TrainConfig: every PatchGD / GD knob (p, ζ, k or sampling fraction, B, α, ε, μ, ...)
- DataConfig: synthetic dataset generation knobs
- RunConfig: paths and run-level switches
- load_settings(): TOML file + `--set key=value` overrides + flag overrides

Precedence: flags > --set overrides > file > dataclass defaults.
Keys are namespaced by table: `train.patch_size`, `data.image_size`, `run.out_dir`.

It does NOT touch any tensors; validation is pure.
"""

from __future__ import annotations

import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from errors import ConfigError

MODES = ("patchgd", "gd", "gd_extended")
STAGE_KINDS = ("conv", "pool")


# -----------------------------
# Dataclasses
# -----------------------------
@dataclass(frozen=True)
class TrainConfig:
    # PatchGD core
    patch_size: int = 32                     # p (pixels)
    inner_iterations: int = 4                # ζ
    patches_per_inner: Optional[int] = None  # k; None -> derived from sampling_fraction
    sampling_fraction: float = 0.1           # "Sampling %": k = ceil(fraction * m * n)
    max_coverage: float = 1.0                # μ: "Max Sampled %"
    grad_accum_steps: int = 1                # ε
    flush_remainder: bool = False            # apply leftover U when ζ % ε != 0
    batch_size: int = 4                      # B

    # optimisation
    lr: float = 1e-3                         # peak α
    warmup_epochs: int = 2
    schedule_total_epochs: int = 100
    final_lr_fraction: float = 0.5
    epochs: int = 30
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    gd_accum_steps: int = 1                  # GD baselines: mini-batches per optimizer step

    # model
    mode: str = "patchgd"
    embed_dim: int = 64                      # s
    num_classes: int = 10                    # c
    in_channels: int = 1                     # C
    depth_spec: Optional[Tuple[Tuple[str, int], ...]] = None  # None -> model_zoo.default_depth_spec(p)
    head_channels: int = 256
    head_layers: int = 4

    # misc
    seed: int = 0
    dtype: str = "float32"
    deterministic_log: bool = False

    def resolve_k(self, m: int, n: int) -> int:
        """Patches per inner iteration for an m×n grid, never more than the grid holds."""
        if self.patches_per_inner is not None:
            return min(int(self.patches_per_inner), m * n)
        return max(1, math.ceil(self.sampling_fraction * m * n - 1e-9))

    def coverage_budget(self, m: int, n: int) -> int:
        """⌈μ·m·n⌉ cells per outer iteration."""
        return max(1, math.ceil(self.max_coverage * m * n - 1e-9))

    def violations(self) -> List[str]:
        out: List[str] = []
        if self.mode not in MODES:
            out.append(f"train.mode must be one of {MODES}, got '{self.mode}'")
        if self.inner_iterations < 1:
            out.append(f"train.inner_iterations (ζ) must be >= 1, got {self.inner_iterations}")
        if self.grad_accum_steps < 1:
            out.append(f"train.grad_accum_steps (ε) must be >= 1, got {self.grad_accum_steps}")
        if self.grad_accum_steps > max(self.inner_iterations, 1):
            out.append(
                f"train.grad_accum_steps (ε={self.grad_accum_steps}) must be <= "
                f"train.inner_iterations (ζ={self.inner_iterations})"
            )
        if self.patches_per_inner is not None and self.patches_per_inner < 1:
            out.append(f"train.patches_per_inner (k) must be >= 1, got {self.patches_per_inner}")
        if not 0.0 < self.sampling_fraction <= 1.0:
            out.append(f"train.sampling_fraction must be in (0, 1], got {self.sampling_fraction}")
        if not 0.0 < self.max_coverage <= 1.0:
            out.append(f"train.max_coverage (μ) must be in (0, 1], got {self.max_coverage}")
        p = self.patch_size
        if p < 8 or p & (p - 1):
            out.append(f"train.patch_size (p) must be a power of two >= 8, got {p}")
        if self.batch_size < 1:
            out.append(f"train.batch_size (B) must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            out.append(f"train.lr (α) must be >= 0, got {self.lr}")
        if self.epochs < 1:
            out.append(f"train.epochs must be >= 1, got {self.epochs}")
        if self.warmup_epochs < 0 or self.warmup_epochs > self.schedule_total_epochs:
            out.append(
                f"train.warmup_epochs must be in [0, schedule_total_epochs={self.schedule_total_epochs}], "
                f"got {self.warmup_epochs}"
            )
        if self.embed_dim < 1:
            out.append(f"train.embed_dim (s) must be >= 1, got {self.embed_dim}")
        if self.num_classes < 2:
            out.append(f"train.num_classes (c) must be >= 2, got {self.num_classes}")
        if self.gd_accum_steps < 1:
            out.append(f"train.gd_accum_steps must be >= 1, got {self.gd_accum_steps}")
        if self.dtype not in ("float32", "float64"):
            out.append(f"train.dtype must be float32 or float64, got '{self.dtype}'")
        for kind, width in self.depth_spec or ():
            if kind not in STAGE_KINDS or int(width) < 1:
                out.append(f"train.depth_spec entry ({kind!r}, {width!r}) is invalid")
        if self.depth_spec is not None and not (p & (p - 1)) and len(self.depth_spec) != int(math.log2(max(p, 1))):
            out.append(
                f"train.depth_spec has {len(self.depth_spec)} halving stages but patch_size {p} "
                f"needs {int(math.log2(p))} to reach 1×1"
            )
        return out

    def validate(self) -> "TrainConfig":
        bad = self.violations()
        if bad:
            raise ConfigError("invalid train config: " + "; ".join(bad), bad)
        return self

    def grid_warnings(self, m: int, n: int) -> List[str]:
        """Non-fatal observations about how ζ, k and μ cover an m×n grid."""
        notes: List[str] = []
        k = self.resolve_k(m, n)
        if self.patches_per_inner is not None and self.patches_per_inner > m * n:
            notes.append(
                f"train.patches_per_inner = {self.patches_per_inner} > m·n = {m * n}: "
                f"every inner iteration refreshes the whole grid (k = {m * n})"
            )
        budget = self.coverage_budget(m, n)
        if k * self.inner_iterations < budget:
            notes.append(
                f"k·ζ = {k}·{self.inner_iterations} = {k * self.inner_iterations} < coverage budget {budget}: "
                f"some cells stay stale every outer iteration"
            )
        if self.max_coverage == 1.0 and k * self.inner_iterations > m * n:
            notes.append(
                f"k·ζ = {k * self.inner_iterations} > m·n = {m * n}: the sampler is exhausted "
                f"before the last inner iterations"
            )
        if self.inner_iterations % self.grad_accum_steps and not self.flush_remainder:
            notes.append(
                f"ζ % ε = {self.inner_iterations % self.grad_accum_steps}: leftover accumulated "
                f"gradients are discarded (train.flush_remainder=false)"
            )
        return notes


@dataclass(frozen=True)
class DataConfig:
    image_size: int = 128                  # M = N
    train_count: int = 5000
    val_count: int = 1000
    scale_min: float = 0.05                # digit size range, fraction of M
    scale_max: float = 0.6
    digit_source: str = "procedural"       # procedural | idx
    idx_images: Optional[str] = None
    idx_labels: Optional[str] = None
    seed: int = 0
    pad_value: float = 0.0
    downscale: int = 1                     # GD warm-start on lower resolution
    workers: int = 1

    def violations(self) -> List[str]:
        out: List[str] = []
        if self.image_size < 8:
            out.append(f"data.image_size must be >= 8, got {self.image_size}")
        if not 0.0 < self.scale_min <= self.scale_max <= 1.0:
            out.append(
                f"data scale range must satisfy 0 < scale_min <= scale_max <= 1 (fraction of M), "
                f"got [{self.scale_min}, {self.scale_max}]"
            )
        if self.train_count < 0 or self.val_count < 0:
            out.append("data.train_count and data.val_count must be >= 0")
        if self.digit_source not in ("procedural", "idx"):
            out.append(f"data.digit_source must be 'procedural' or 'idx', got '{self.digit_source}'")
        if self.digit_source == "idx" and not (self.idx_images and self.idx_labels):
            out.append("data.digit_source='idx' needs data.idx_images and data.idx_labels")
        if self.downscale < 1 or self.image_size % self.downscale:
            out.append(f"data.downscale must be >= 1 and divide image_size, got {self.downscale}")
        if self.workers < 1:
            out.append(f"data.workers must be >= 1, got {self.workers}")
        return out

    def validate(self) -> "DataConfig":
        bad = self.violations()
        if bad:
            raise ConfigError("invalid data config: " + "; ".join(bad), bad)
        return self


@dataclass(frozen=True)
class RunConfig:
    out_dir: str = "runs/default"
    dataset_dir: str = "data/ultramnist"
    enforce_budget: Optional[int] = None   # bytes; refuse runs whose modeled peak exceeds it
    quiet: bool = False
    log_level: str = "INFO"


@dataclass(frozen=True)
class Settings:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def to_dict(self) -> Dict[str, Any]:
        raw = asdict(self)
        if self.train.depth_spec is not None:
            raw["train"]["depth_spec"] = [list(stage) for stage in self.train.depth_spec]
        return raw

    def validate(self) -> "Settings":
        bad = self.train.violations() + self.data.violations()
        if bad:
            raise ConfigError("invalid config: " + "; ".join(bad), bad)
        return self


_SECTIONS = {"train": TrainConfig, "data": DataConfig, "run": RunConfig}


# -----------------------------
# Loading / overrides
# -----------------------------
def parse_value(text: str) -> Any:
    """Parse an override value as a TOML literal, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def set_key(raw: Dict[str, Dict[str, Any]], dotted: str, value: Any) -> None:
    section, _, key = dotted.partition(".")
    if section not in _SECTIONS or not key:
        raise ConfigError(f"unknown config key '{dotted}' (expected train.*, data.* or run.*)")
    known = {f.name for f in fields(_SECTIONS[section])}
    if key not in known:
        raise ConfigError(f"unknown config key '{dotted}'")
    raw.setdefault(section, {})[key] = value


def _coerce(section: str, values: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(values)
    if section == "train" and out.get("depth_spec") is not None:
        out["depth_spec"] = tuple((str(kind), int(width)) for kind, width in out["depth_spec"])
    return out


def settings_from_dict(raw: Dict[str, Dict[str, Any]]) -> Settings:
    parts: Dict[str, Any] = {}
    for section, cls in _SECTIONS.items():
        values = raw.get(section, {}) or {}
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(section + '.' + k for k in unknown)}")
        try:
            parts[section] = cls(**_coerce(section, values))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad values in [{section}]: {exc}") from exc
    extra = sorted(set(raw) - set(_SECTIONS) - {"model"})
    if extra:
        raise ConfigError(f"unknown config tables: {', '.join(extra)}")
    return Settings(**parts)


def load_settings(
    path: Optional[str] = None,
    *,
    overrides: Sequence[str] = (),
    flags: Optional[Dict[str, Any]] = None,
) -> Settings:
    """
    Build Settings from an optional TOML file, then `key=value` overrides,
    then already-parsed flag values (None means "flag not given").
    """
    raw: Dict[str, Dict[str, Any]] = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = tomllib.loads(p.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid TOML: {exc}") from exc
        # [model] is an alias table for model keys that live in TrainConfig
        for key, value in (raw.pop("model", {}) or {}).items():
            set_key(raw, f"train.{key}", value)

    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override '{item}' must look like section.key=value")
        set_key(raw, key.strip(), parse_value(value.strip()))

    for dotted, value in (flags or {}).items():
        if value is not None:
            set_key(raw, dotted, value)

    return settings_from_dict(raw)


def with_train(settings: Settings, **changes: Any) -> Settings:
    return replace(settings, train=replace(settings.train, **changes))
