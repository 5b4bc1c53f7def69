#!/usr/bin/env python3
"""
memcost.py — Analytic activation-memory model for GD vs PatchGD

All numbers are shapes × dtype width; nothing is measured and nothing is random.

Accounting rules:
- activation bytes = the input of every layer, retained for backward
- parameters, gradients, Adam moments (2×) are counted for every run
- PatchGD additionally holds the Z block (B·m·n·s) and the accumulators U1, U2
- PatchGD peak = max(fill phase, inner iteration):
    fill phase:      no retained activations; the largest adjacent layer pair of
                     one chunk of B·k patches is live at a time
    inner iteration: activations of B·k patches through f_θ1 + head activations on Z
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from errors import DimensionError, ValidationError
from model_zoo import CompositeModel, FeatureExtractor, HeadNet, LayerShape

DTypeLike = Union[str, np.dtype, type]


def dtype_width(dtype: DTypeLike) -> int:
    dt = np.dtype(dtype)
    if dt.kind != "f":
        raise ValidationError(f"memory model needs a float dtype, got {dt}")
    return dt.itemsize


def _nelem(shape: Tuple[int, ...]) -> int:
    return int(np.prod(shape, dtype=np.int64))


def _param_count_extractor(f: FeatureExtractor) -> int:
    return int(sum(p.size for p in f.parameters().values()))


def _param_count_head(g: HeadNet) -> int:
    return int(sum(p.size for p in g.parameters().values()))


@dataclass
class MemoryReport:
    method: str
    layers: List[Tuple[str, int]] = field(default_factory=list)   # (layer, retained input bytes)
    activation_bytes: int = 0
    patch_activation_bytes: int = 0
    head_activation_bytes: int = 0
    parameter_bytes: int = 0
    gradient_bytes: int = 0
    optimizer_bytes: int = 0
    accumulator_bytes: int = 0
    z_bytes: int = 0
    fill_peak_bytes: int = 0
    inner_peak_bytes: int = 0
    peak_bytes: int = 0
    config: Dict[str, Any] = field(default_factory=dict)

    def components(self) -> Dict[str, int]:
        return {
            "activations": self.activation_bytes,
            "patch_activations": self.patch_activation_bytes,
            "head_activations": self.head_activation_bytes,
            "parameters": self.parameter_bytes,
            "gradients": self.gradient_bytes,
            "optimizer_state": self.optimizer_bytes,
            "accumulators": self.accumulator_bytes,
            "z_block": self.z_bytes,
            "peak": self.peak_bytes,
        }

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _layer_bytes(layers: List[LayerShape], width: int) -> List[Tuple[str, int]]:
    return [(name, _nelem(shape) * width) for name, shape in layers]


# -----------------------------
# GD
# -----------------------------
def estimate_gd(
    model: Union[CompositeModel, FeatureExtractor],
    image_size: Tuple[int, int],
    batch: int,
    dtype: DTypeLike = "float32",
    *,
    accumulate: bool = False,
) -> MemoryReport:
    """
    Whole-image training: every layer's input over B full images is retained.
    `accumulate` adds one gradient-sized buffer for accumulation across mini-batches.
    """
    width = dtype_width(dtype)
    M, N = image_size
    backbone = model if isinstance(model, FeatureExtractor) else model.backbone
    if M % backbone.stride or N % backbone.stride:
        raise DimensionError(f"image {M}×{N} not divisible by backbone stride {backbone.stride}")
    m, n = M // backbone.stride, N // backbone.stride
    s = backbone.embed_dim

    shapes = backbone.layer_inputs(batch, M, N)
    n_params = _param_count_extractor(backbone)
    if isinstance(model, CompositeModel):
        if model.mode == "gd":
            shapes += [("gap", (batch, s, m, n)), ("cls", (batch, s))]
            n_params += model.classifier.weight.size + model.classifier.bias.size
        else:
            shapes += model.head.layer_inputs(batch, m, n)
            n_params += _param_count_head(model.head)
    layers = _layer_bytes(shapes, width)

    rep = MemoryReport(method="gd" if not isinstance(model, CompositeModel) else model.mode, layers=layers)
    rep.activation_bytes = sum(b for _, b in layers)
    rep.parameter_bytes = n_params * width
    rep.gradient_bytes = rep.parameter_bytes
    rep.optimizer_bytes = 2 * rep.parameter_bytes
    rep.accumulator_bytes = rep.parameter_bytes if accumulate else 0
    rep.inner_peak_bytes = (
        rep.parameter_bytes + rep.gradient_bytes + rep.optimizer_bytes + rep.accumulator_bytes + rep.activation_bytes
    )
    rep.peak_bytes = rep.inner_peak_bytes
    rep.config = {"M": M, "N": N, "B": batch, "dtype": np.dtype(dtype).name}
    return rep


# -----------------------------
# PatchGD
# -----------------------------
def estimate_patchgd(
    extractor: FeatureExtractor,
    head: HeadNet,
    image_size: Tuple[int, int],
    p: int,
    k: int,
    batch: int,
    s: Optional[int] = None,
    dtype: DTypeLike = "float32",
) -> MemoryReport:
    width = dtype_width(dtype)
    if extractor.patch_size != p:
        raise DimensionError(f"extractor patch size {extractor.patch_size} != p={p}")
    s = extractor.embed_dim if s is None else s
    if s != extractor.embed_dim or s != head.embed_dim:
        raise DimensionError(f"s={s} must match extractor ({extractor.embed_dim}) and head ({head.embed_dim}) widths")
    M, N = image_size
    m, n = math.ceil(M / p), math.ceil(N / p)
    if not 1 <= k <= m * n:
        raise ValidationError(f"k={k} must be in [1, m·n={m * n}]")

    patch_layers = _layer_bytes(extractor.layer_inputs(batch * k, p, p), width)
    head_layers = _layer_bytes(head.layer_inputs(batch, m, n), width)

    rep = MemoryReport(method="patchgd", layers=patch_layers + head_layers)
    rep.patch_activation_bytes = sum(b for _, b in patch_layers)
    rep.head_activation_bytes = sum(b for _, b in head_layers)
    rep.activation_bytes = rep.patch_activation_bytes + rep.head_activation_bytes
    rep.parameter_bytes = (_param_count_extractor(extractor) + _param_count_head(head)) * width
    rep.gradient_bytes = rep.parameter_bytes
    rep.optimizer_bytes = 2 * rep.parameter_bytes
    rep.accumulator_bytes = rep.parameter_bytes
    rep.z_bytes = batch * m * n * s * width

    fixed = rep.parameter_bytes + rep.optimizer_bytes + rep.z_bytes
    live = [b for _, b in patch_layers] + [batch * k * s * width]
    fill_working = max(live[i] + live[i + 1] for i in range(len(live) - 1))
    rep.fill_peak_bytes = fixed + fill_working
    rep.inner_peak_bytes = fixed + rep.gradient_bytes + rep.accumulator_bytes + rep.activation_bytes
    rep.peak_bytes = max(rep.fill_peak_bytes, rep.inner_peak_bytes)
    rep.config = {"M": M, "N": N, "p": p, "k": k, "B": batch, "s": s, "m": m, "n": n, "dtype": np.dtype(dtype).name}
    return rep


# -----------------------------
# Budget search
# -----------------------------
def max_feasible_batch(report_builder: Callable[[int], MemoryReport], budget_bytes: int, *, cap: int = 1 << 20) -> int:
    """Largest B with peak(B) <= budget (peak is non-decreasing in B); 0 if even B=1 does not fit."""
    if report_builder(1).peak_bytes > budget_bytes:
        return 0
    lo = 1
    while lo < cap and report_builder(min(lo * 2, cap)).peak_bytes <= budget_bytes:
        lo = min(lo * 2, cap)
    hi = min(lo * 2, cap + 1)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if report_builder(mid).peak_bytes <= budget_bytes:
            lo = mid
        else:
            hi = mid
    return lo


def format_bytes(n: int) -> str:
    value = float(n)
    for unit in ("B", "KiB", "MiB", "GiB"):
        if value < 1024 or unit == "GiB":
            return f"{value:.1f} {unit}" if unit != "B" else f"{int(value)} B"
        value /= 1024
    return f"{n} B"
