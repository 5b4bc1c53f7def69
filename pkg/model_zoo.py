#!/usr/bin/env python3
"""
model_zoo.py — Patch feature extractor f_θ1, latent head g_θ2, GD composites

Models:
- FeatureExtractor (f_θ1): non-overlapping halving stages (2×2/stride-2 conv+relu
  or 2×2 max-pool) then a 1×1 projection to s channels. A p×p patch collapses to
  1×1×s; a full M×N image yields the (M/p)×(N/p)×s map of its patch embeddings.
- HeadNet (g_θ2): `head_layers` 3×3 convs (padding 1) with relu, global average
  pool, linear to c logits. Works on any m×n grid.
- CompositeModel: full-image baselines. "gd" = backbone + global pool + linear,
  "gd_extended" = backbone + HeadNet.
- PatchGDModel: (f_θ1, g_θ2) pair trained by PatchGD.

Parameter names carry the role: "f.*" is θ1, "g.*" is θ2, "cls.*" is the GD
classifier. Weights are Kaiming-uniform (fan-in), biases zero, all seeded.
"""

from __future__ import annotations

import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, DimensionError
from tensor_core import (
    Tensor,
    conv2d,
    get_default_dtype,
    global_avg_pool,
    linear,
    max_pool2d,
    relu,
    softmax,
    transpose,
)

Params = Dict[str, Tensor]
LayerShape = Tuple[str, Tuple[int, ...]]

# rng stream tags, so extractor and head draw independent weights from one seed
_TAG_EXTRACTOR = 1
_TAG_HEAD = 2
_TAG_CLASSIFIER = 3


# -----------------------------
# Small building blocks
# -----------------------------
def _kaiming_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    values = rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())
    return Tensor(values, requires_grad=True)


class Conv2d:
    __slots__ = ("weight", "bias", "stride", "padding")

    def __init__(self, rng: np.random.Generator, in_ch: int, out_ch: int, kernel: int, *, stride: int = 1, padding: int = 0):
        self.weight = _kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def out_hw(self, h: int, w: int) -> Tuple[int, int]:
        k = self.weight.shape[2]
        return (h + 2 * self.padding - k) // self.stride + 1, (w + 2 * self.padding - k) // self.stride + 1


class Linear:
    __slots__ = ("weight", "bias")

    def __init__(self, rng: np.random.Generator, in_features: int, out_features: int):
        self.weight = _kaiming_uniform(rng, (out_features, in_features), in_features)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


def count_params(params: Params) -> int:
    return int(sum(p.size for p in params.values()))


def default_depth_spec(patch_size: int) -> Tuple[Tuple[str, int], ...]:
    """log2(p) conv stages, widths 16, 32, 64, 64, ..."""
    stages = int(math.log2(patch_size))
    return tuple(("conv", min(16 * 2 ** i, 64)) for i in range(stages))


# -----------------------------
# f_θ1
# -----------------------------
class FeatureExtractor:
    """Maps [N,C,H,W] to [N,s,H/p,W/p]; for H=W=p this is the 1×1×s patch embedding."""

    def __init__(self, patch_size: int, in_channels: int, embed_dim: int, depth_spec: Sequence[Tuple[str, int]], rng: np.random.Generator):
        self.patch_size = patch_size
        self.in_channels = in_channels
        self.embed_dim = embed_dim
        self.depth_spec = tuple((str(k), int(w)) for k, w in depth_spec)
        self.stages: List[Tuple[str, Optional[Conv2d]]] = []
        ch = in_channels
        for i, (kind, width) in enumerate(self.depth_spec):
            if kind == "conv":
                self.stages.append(("conv", Conv2d(rng, ch, width, 2, stride=2)))
                ch = width
            elif kind == "pool":
                if width != ch:
                    raise ConfigError(f"depth_spec stage {i}: pool keeps {ch} channels, spec says {width}")
                self.stages.append(("pool", None))
            else:
                raise ConfigError(f"depth_spec stage {i}: unknown kind '{kind}'")
        self.proj = Conv2d(rng, ch, embed_dim, 1)

    @property
    def stride(self) -> int:
        return 2 ** len(self.stages)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(f"feature extractor expects [N,{self.in_channels},H,W], got {x.shape}")
        H, W = x.shape[2], x.shape[3]
        if H % self.stride or W % self.stride:
            raise DimensionError(f"spatial axes H={H}, W={W} not divisible by backbone stride {self.stride}")
        for kind, layer in self.stages:
            x = relu(layer(x)) if kind == "conv" else max_pool2d(x, 2)
        return self.proj(x)

    def embed(self, patches: Tensor) -> Tensor:
        """[k,C,p,p] -> [k,s]"""
        if patches.ndim != 4 or patches.shape[2:] != (self.patch_size, self.patch_size):
            raise DimensionError(f"embed() expects [k,C,{self.patch_size},{self.patch_size}], got {patches.shape}")
        out = self(patches)
        return out.reshape(out.shape[0], self.embed_dim)

    def parameters(self, prefix: str = "f") -> Params:
        params: Params = {}
        for i, (kind, layer) in enumerate(self.stages):
            if layer is not None:
                params[f"{prefix}.stage{i}.weight"] = layer.weight
                params[f"{prefix}.stage{i}.bias"] = layer.bias
        params[f"{prefix}.proj.weight"] = self.proj.weight
        params[f"{prefix}.proj.bias"] = self.proj.bias
        return params

    def layer_inputs(self, batch: int, height: int, width: int) -> List[LayerShape]:
        """(layer name, input shape) for every layer, used for activation accounting."""
        out: List[LayerShape] = []
        ch, h, w = self.in_channels, height, width
        for i, (kind, layer) in enumerate(self.stages):
            if kind == "conv":
                out.append((f"stage{i}.conv", (batch, ch, h, w)))
                ch = layer.weight.shape[0]
                h, w = h // 2, w // 2
                out.append((f"stage{i}.relu", (batch, ch, h, w)))
            else:
                out.append((f"stage{i}.pool", (batch, ch, h, w)))
                h, w = h // 2, w // 2
        out.append(("proj", (batch, ch, h, w)))
        return out


def build_feature_extractor(
    patch_size: int,
    channels: int,
    embed_dim: int,
    depth_spec: Optional[Sequence[Tuple[str, int]]] = None,
    *,
    seed: int = 0,
) -> FeatureExtractor:
    """Build f_θ1; every stage halves the spatial size, so len(depth_spec) == log2(p)."""
    if patch_size < 8 or patch_size & (patch_size - 1):
        raise ConfigError(f"patch_size must be a power of two >= 8, got {patch_size}")
    if embed_dim < 1:
        raise ConfigError(f"embed_dim must be >= 1, got {embed_dim}")
    spec = tuple(depth_spec) if depth_spec is not None else default_depth_spec(patch_size)
    needed = int(math.log2(patch_size))
    if len(spec) != needed:
        raise ConfigError(
            f"depth_spec with {len(spec)} halving stages cannot reduce a {patch_size}×{patch_size} "
            f"patch to 1×1 (needs {needed})"
        )
    rng = np.random.default_rng([seed, _TAG_EXTRACTOR])
    return FeatureExtractor(patch_size, channels, embed_dim, spec, rng)


# -----------------------------
# g_θ2
# -----------------------------
class HeadNet:
    """Latent classification head over an m×n×s grid."""

    def __init__(self, embed_dim: int, num_classes: int, *, channels: int = 256, layers: int = 4, seed: int = 0):
        rng = np.random.default_rng([seed, _TAG_HEAD])
        self.embed_dim = embed_dim
        self.num_classes = num_classes
        self.convs: List[Conv2d] = []
        ch = embed_dim
        for _ in range(layers):
            self.convs.append(Conv2d(rng, ch, channels, 3, padding=1))
            ch = channels
        self.fc = Linear(rng, ch, num_classes)

    def __call__(self, feature_map: Tensor) -> Tensor:
        """[B,s,m,n] -> [B,c]"""
        x = feature_map
        for conv in self.convs:
            x = relu(conv(x))
        return self.fc(global_avg_pool(x))

    def parameters(self, prefix: str = "g") -> Params:
        params: Params = {}
        for i, conv in enumerate(self.convs):
            params[f"{prefix}.conv{i}.weight"] = conv.weight
            params[f"{prefix}.conv{i}.bias"] = conv.bias
        params[f"{prefix}.fc.weight"] = self.fc.weight
        params[f"{prefix}.fc.bias"] = self.fc.bias
        return params

    def layer_inputs(self, batch: int, m: int, n: int) -> List[LayerShape]:
        out: List[LayerShape] = []
        ch = self.embed_dim
        for i, conv in enumerate(self.convs):
            out.append((f"head.conv{i}", (batch, ch, m, n)))
            ch = conv.weight.shape[0]
            out.append((f"head.relu{i}", (batch, ch, m, n)))
        out.append(("head.pool", (batch, ch, m, n)))
        out.append(("head.fc", (batch, ch)))
        return out


def head_forward(Z: Tensor, head: HeadNet) -> Tensor:
    """Z values [B,m,n,s] (or a single [m,n,s] grid) -> logits [B,c]."""
    if Z.ndim == 3:
        Z = Z.reshape(1, *Z.shape)
    if Z.ndim != 4:
        raise DimensionError(f"head_forward expects Z of shape [B,m,n,s], got {Z.shape}")
    if Z.shape[-1] != head.embed_dim:
        raise DimensionError(f"Z width s={Z.shape[-1]} does not match head input width {head.embed_dim}")
    return head(transpose(Z, (0, 3, 1, 2)))


def predict_proba(logits: Tensor) -> np.ndarray:
    return softmax(logits, axis=-1).data


# -----------------------------
# Model containers
# -----------------------------
class PatchGDModel:
    """θ = [θ1, θ2]: patch extractor plus latent head."""

    def __init__(self, extractor: FeatureExtractor, head: HeadNet):
        if extractor.embed_dim != head.embed_dim:
            raise DimensionError(f"extractor width s={extractor.embed_dim} != head width {head.embed_dim}")
        self.extractor = extractor
        self.head = head

    def theta1(self) -> Params:
        return self.extractor.parameters("f")

    def theta2(self) -> Params:
        return self.head.parameters("g")

    def parameters(self) -> Params:
        return {**self.theta1(), **self.theta2()}


class CompositeModel:
    """Full-image model for the GD baselines (one forward over the whole image)."""

    def __init__(self, mode: str, backbone: FeatureExtractor, *, head: Optional[HeadNet] = None, classifier: Optional[Linear] = None):
        if mode not in ("gd", "gd_extended"):
            raise ConfigError(f"composite mode must be 'gd' or 'gd_extended', got '{mode}'")
        if mode == "gd" and classifier is None:
            raise ConfigError("mode 'gd' needs a classifier")
        if mode == "gd_extended" and head is None:
            raise ConfigError("mode 'gd_extended' needs a head")
        self.mode = mode
        self.backbone = backbone
        self.head = head
        self.classifier = classifier

    def feature_map(self, X: Tensor) -> Tensor:
        return self.backbone(X)

    def __call__(self, X: Tensor) -> Tensor:
        return gd_forward(X, self)

    def parameters(self) -> Params:
        params = self.backbone.parameters("f")
        if self.mode == "gd":
            params["cls.weight"] = self.classifier.weight
            params["cls.bias"] = self.classifier.bias
        else:
            params.update(self.head.parameters("g"))
        return params


def gd_forward(X: Tensor, model: CompositeModel) -> Tensor:
    """X [B,C,M,N] -> logits [B,c]. No implicit resize: M, N must divide by the backbone stride."""
    if X.ndim == 3:
        X = X.reshape(1, *X.shape)
    if X.ndim != 4:
        raise DimensionError(f"gd_forward expects X of shape [B,C,M,N], got {X.shape}")
    stride = model.backbone.stride
    if X.shape[2] % stride or X.shape[3] % stride:
        raise DimensionError(f"image axes M={X.shape[2]}, N={X.shape[3]} not divisible by backbone stride {stride}")
    fmap = model.backbone(X)
    if model.mode == "gd":
        return model.classifier(global_avg_pool(fmap))
    return model.head(fmap)


def build_patchgd_model(cfg) -> PatchGDModel:
    """cfg: config.TrainConfig"""
    extractor = build_feature_extractor(cfg.patch_size, cfg.in_channels, cfg.embed_dim, cfg.depth_spec, seed=cfg.seed)
    head = HeadNet(cfg.embed_dim, cfg.num_classes, channels=cfg.head_channels, layers=cfg.head_layers, seed=cfg.seed)
    return PatchGDModel(extractor, head)


def build_composite_model(cfg, mode: Optional[str] = None) -> CompositeModel:
    """Same seeds as build_patchgd_model, so weights in common are identical."""
    mode = mode or cfg.mode
    backbone = build_feature_extractor(cfg.patch_size, cfg.in_channels, cfg.embed_dim, cfg.depth_spec, seed=cfg.seed)
    if mode == "gd":
        classifier = Linear(np.random.default_rng([cfg.seed, _TAG_CLASSIFIER]), cfg.embed_dim, cfg.num_classes)
        return CompositeModel("gd", backbone, classifier=classifier)
    head = HeadNet(cfg.embed_dim, cfg.num_classes, channels=cfg.head_channels, layers=cfg.head_layers, seed=cfg.seed)
    return CompositeModel("gd_extended", backbone, head=head)


_BUILDERS = {
    "patchgd": build_patchgd_model,
    "gd": build_composite_model,
    "gd_extended": build_composite_model,
}


def build_model(cfg):
    """Dispatch on cfg.mode."""
    builder = _BUILDERS.get(cfg.mode)
    if builder is None:
        raise ConfigError(f"unknown mode '{cfg.mode}', expected one of {sorted(_BUILDERS)}")
    return builder(cfg)
