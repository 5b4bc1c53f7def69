#!/usr/bin/env python3
"""
patching.py — Image tiling, patch extraction and the inner-iteration patch sampler

Images are numpy arrays [H, W, C] (a 2-D array is treated as C=1).
The grid of an M×N image with patch size p has m = M/p rows and n = N/p columns;
cell (a, b) covers X[a·p:(a+1)·p, b·p:(b+1)·p, :].

Sampling works like drawing from a bag without replacement:
- every outer iteration starts with a fresh shuffled bag of all m·n cells
- each inner iteration draws the next min(k, remaining) cells
- drawing stops after ⌈μ·m·n⌉ cells (max coverage), then the sampler reports
  exhaustion (None) until it is reset
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ContractError, DimensionError, GridIndexError, ValidationError
from tensor_core import Tensor

Cell = Tuple[int, int]
ImageLike = Union[np.ndarray, Tensor]


# -----------------------------
# Grid
# -----------------------------
@dataclass(frozen=True)
class GridSpec:
    M: int
    N: int
    p: int

    def __post_init__(self) -> None:
        if self.p < 1 or self.M < self.p or self.N < self.p:
            raise DimensionError(f"grid needs M, N >= p >= 1, got M={self.M}, N={self.N}, p={self.p}")
        if self.M % self.p or self.N % self.p:
            raise DimensionError(f"p={self.p} must divide M={self.M} and N={self.N}; pad_to_grid first")

    @property
    def m(self) -> int:
        return self.M // self.p

    @property
    def n(self) -> int:
        return self.N // self.p

    @property
    def cells(self) -> int:
        return self.m * self.n

    def all_cells(self) -> List[Cell]:
        return [(a, b) for a in range(self.m) for b in range(self.n)]


def _as_hwc(X: ImageLike) -> np.ndarray:
    arr = X.data if isinstance(X, Tensor) else np.asarray(X)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise DimensionError(f"image must be [H,W] or [H,W,C], got shape {arr.shape}")
    return arr


def grid_for(X: ImageLike, p: int) -> GridSpec:
    arr = _as_hwc(X)
    return GridSpec(arr.shape[0], arr.shape[1], p)


# -----------------------------
# Padding / extraction
# -----------------------------
def pad_to_grid(X: ImageLike, p: int, fill: float = 0.0) -> np.ndarray:
    """Round H and W up to multiples of p (bottom/right border), never resize."""
    arr = _as_hwc(X)
    H, W, _ = arr.shape
    pad_h = (-H) % p
    pad_w = (-W) % p
    if not pad_h and not pad_w:
        return arr
    return np.pad(arr, ((0, pad_h), (0, pad_w), (0, 0)), mode="constant", constant_values=fill)


def patch_extractor(X: ImageLike, a: int, b: int, p: int) -> Tensor:
    """Copy of cell (a, b) as a [p, p, C] tensor."""
    arr = _as_hwc(X)
    grid = GridSpec(arr.shape[0], arr.shape[1], p)
    if not (0 <= a < grid.m and 0 <= b < grid.n):
        raise GridIndexError(f"cell ({a}, {b}) outside the {grid.m}×{grid.n} grid")
    return Tensor(arr[a * p:(a + 1) * p, b * p:(b + 1) * p, :].copy(), dtype=arr.dtype if arr.dtype.kind == "f" else None)


def tile(X: ImageLike, p: int) -> np.ndarray:
    """All patches, [m, n, p, p, C], row-major cell order."""
    arr = _as_hwc(X)
    grid = GridSpec(arr.shape[0], arr.shape[1], p)
    C = arr.shape[2]
    return arr.reshape(grid.m, p, grid.n, p, C).transpose(0, 2, 1, 3, 4)


def assemble(patches: Sequence[np.ndarray], positions: Sequence[Cell], grid: GridSpec, channels: int) -> np.ndarray:
    """Inverse of extraction: place patches back at their cells (unfilled cells stay 0)."""
    out = np.zeros((grid.M, grid.N, channels), dtype=np.asarray(patches[0]).dtype if len(patches) else np.float32)
    p = grid.p
    for patch, (a, b) in zip(patches, positions):
        out[a * p:(a + 1) * p, b * p:(b + 1) * p, :] = np.asarray(patch).reshape(p, p, channels)
    return out


def patches_to_input(patches: np.ndarray) -> Tensor:
    """[k, p, p, C] -> [k, C, p, p] tensor for the feature extractor."""
    return Tensor(np.ascontiguousarray(np.asarray(patches).transpose(0, 3, 1, 2)))


# -----------------------------
# Sampler
# -----------------------------
@dataclass
class PatchBatch:
    patches: np.ndarray          # [k, p, p, C]
    positions: List[Cell]

    def __len__(self) -> int:
        return len(self.positions)

    def as_input(self) -> Tensor:
        return patches_to_input(self.patches)


@dataclass
class SamplerState:
    """Per-image shuffled bag of cells + cursor, limited to ⌈μ·m·n⌉ draws per outer iteration."""

    grid: GridSpec
    max_coverage: float = 1.0
    rng: random.Random = field(default_factory=lambda: random.Random(0))
    permutation: List[Cell] = field(default_factory=list)
    cursor: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.max_coverage <= 1.0:
            raise ValidationError(f"max_coverage must be in (0, 1], got {self.max_coverage}")
        if not self.permutation:
            self.reset()

    @property
    def budget(self) -> int:
        return max(1, math.ceil(self.max_coverage * self.grid.cells - 1e-9))

    @property
    def remaining(self) -> int:
        return max(0, self.budget - self.cursor)

    @property
    def exhausted(self) -> bool:
        return self.remaining == 0

    def reset(self) -> None:
        """Fresh permutation for a new outer iteration."""
        cells = self.grid.all_cells()
        self.rng.shuffle(cells)
        self.permutation = cells
        self.cursor = 0

    def draw(self, k: int) -> List[Cell]:
        take = min(k, self.remaining)
        cells = self.permutation[self.cursor:self.cursor + take]
        self.cursor += take
        return cells


def new_sampler(grid: GridSpec, *, max_coverage: float = 1.0, seed: int = 0) -> SamplerState:
    return SamplerState(grid=grid, max_coverage=max_coverage, rng=random.Random(seed))


def sample_patches(X: ImageLike, k: int, state: SamplerState) -> Optional[PatchBatch]:
    """
    Next min(k, remaining) cells of the image with their contents.
    Returns None once the coverage budget of this outer iteration is spent.
    """
    if k < 1:
        raise ContractError(f"sample_patches needs k >= 1, got {k}")
    if state.exhausted:
        return None
    arr = _as_hwc(X)
    if (arr.shape[0], arr.shape[1]) != (state.grid.M, state.grid.N):
        raise DimensionError(f"image {arr.shape[:2]} does not match sampler grid {(state.grid.M, state.grid.N)}")
    cells = state.draw(k)
    tiles = tile(arr, state.grid.p)
    rows = np.array([a for a, _ in cells])
    cols = np.array([b for _, b in cells])
    return PatchBatch(patches=tiles[rows, cols].copy(), positions=cells)
