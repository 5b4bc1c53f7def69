#!/usr/bin/env python3
"""
zblock.py — The Z latent grid (B×m×n×s) with gradient masking

Lifecycle per outer iteration:
1) z_fill / z_fill_batch: every cell = f_θ1(patch), computed under no_grad
2) for each inner iteration:
   - Z.begin_inner_iteration(): previous active cells become plain (detached) values
   - z_update(Z, batch, f, image=b): listed cells get fresh, gradient-tracked embeddings
   - z_read(Z): one tensor where only the active cells carry a gradient path

Z.values always holds the latest numbers of every cell; the active embeddings
are kept alongside so z_read can splice them back in with their graph.
Staleness counts inner iterations since a cell was last computed (diagnostic).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ContractError, DimensionError, GridIndexError, StateError
from patching import Cell, GridSpec, PatchBatch, grid_for, patches_to_input, tile
from tensor_core import Tensor, concat, index_put, is_grad_enabled, no_grad
from tensor_io import write_record

EmbedFn = Callable[[Tensor], Tensor]


def _embed_fn(f) -> EmbedFn:
    """Accept a FeatureExtractor (uses .embed) or any callable [k,C,p,p] -> [k,s]."""
    return f.embed if hasattr(f, "embed") else f


@dataclass
class ZBlock:
    grid: GridSpec
    batch: int
    embed_dim: int
    values: np.ndarray = field(repr=False)          # [B, m, n, s]
    active_mask: np.ndarray = field(repr=False)     # [B, m, n]
    staleness: np.ndarray = field(repr=False)       # [B, m, n]
    filled: bool = False
    _active: Dict[int, Tuple[Tuple[np.ndarray, np.ndarray], Tensor]] = field(default_factory=dict, repr=False)

    @classmethod
    def empty(cls, grid: GridSpec, batch: int, embed_dim: int, dtype=np.float32) -> "ZBlock":
        shape = (batch, grid.m, grid.n)
        return cls(
            grid=grid,
            batch=batch,
            embed_dim=embed_dim,
            values=np.zeros(shape + (embed_dim,), dtype=dtype),
            active_mask=np.zeros(shape, dtype=bool),
            staleness=np.zeros(shape, dtype=np.int64),
        )

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return (self.batch, self.grid.m, self.grid.n, self.embed_dim)

    def begin_inner_iteration(self) -> None:
        """Drop the gradient path of last iteration's active cells; they become stale values."""
        self._active.clear()
        self.active_mask[:] = False
        self.staleness += 1

    def active_cells(self, image: int = 0) -> List[Cell]:
        a, b = np.nonzero(self.active_mask[image])
        return list(zip(a.tolist(), b.tolist()))


# -----------------------------
# Filling
# -----------------------------
def _fill_rows(embed: EmbedFn, patches: np.ndarray, chunk: Optional[int]) -> np.ndarray:
    """Embed [K,p,p,C] patches in chunks, no graph recorded."""
    K = patches.shape[0]
    step = chunk or K
    out: List[np.ndarray] = []
    with no_grad():
        for start in range(0, K, step):
            emb = embed(patches_to_input(patches[start:start + step]))
            if emb.ndim != 2:
                raise DimensionError(f"feature extractor must return [k, s], got {emb.shape}")
            out.append(emb.data)
    return np.concatenate(out, axis=0)


def z_fill(
    X: np.ndarray,
    f,
    p: int,
    *,
    embed_dim: Optional[int] = None,
    order: Optional[Sequence[Cell]] = None,
    chunk: Optional[int] = None,
) -> ZBlock:
    """Fill Z for one (padded) image; cells are independent, so `order` does not change the result."""
    return z_fill_batch([X], f, p, embed_dim=embed_dim, order=order, chunk=chunk)


def z_fill_batch(
    images: Sequence[np.ndarray],
    f,
    p: int,
    *,
    embed_dim: Optional[int] = None,
    order: Optional[Sequence[Cell]] = None,
    chunk: Optional[int] = None,
) -> ZBlock:
    if not images:
        raise DimensionError("z_fill_batch needs at least one image")
    if hasattr(f, "patch_size") and f.patch_size != p:
        raise DimensionError(f"extractor patch size {f.patch_size} != grid patch size p={p}")
    grid = grid_for(images[0], p)
    cells = list(order) if order is not None else grid.all_cells()
    if sorted(cells) != grid.all_cells():
        raise ContractError("z_fill order must list every grid cell exactly once")
    rows = np.array([a for a, _ in cells])
    cols = np.array([b for _, b in cells])

    embed = _embed_fn(f)
    patches = []
    for i, X in enumerate(images):
        g = grid_for(X, p)
        if (g.M, g.N) != (grid.M, grid.N):
            raise DimensionError(f"image {i} is {g.M}×{g.N}, batch grid is {grid.M}×{grid.N}")
        patches.append(tile(X, p)[rows, cols])
    flat = np.concatenate(patches, axis=0)

    emb = _fill_rows(embed, flat, chunk)
    s = emb.shape[1]
    if embed_dim is not None and s != embed_dim:
        raise DimensionError(f"embedding width {s} does not match Z width s={embed_dim}")

    Z = ZBlock.empty(grid, len(images), s, dtype=emb.dtype)
    per_image = len(cells)
    for i in range(len(images)):
        Z.values[i, rows, cols] = emb[i * per_image:(i + 1) * per_image]
    Z.filled = True
    return Z


# -----------------------------
# Partial update + read
# -----------------------------
def z_update(Z: ZBlock, batch: PatchBatch, f, *, image: int = 0) -> ZBlock:
    """
    Replace the listed cells of one image by fresh gradient-tracked embeddings.
    Cells of this image activated earlier in the same inner iteration lose their path.
    """
    if not Z.filled:
        raise StateError("z_update before z_fill")
    if not is_grad_enabled():
        raise ContractError("z_update needs gradient tracking enabled on the feature extractor")
    if not 0 <= image < Z.batch:
        raise GridIndexError(f"image index {image} outside batch of {Z.batch}")
    positions = list(batch.positions)
    if len(set(positions)) != len(positions):
        raise ContractError(f"duplicate positions in one z_update call: {positions}")
    for a, b in positions:
        if not (0 <= a < Z.grid.m and 0 <= b < Z.grid.n):
            raise GridIndexError(f"cell ({a}, {b}) outside the {Z.grid.m}×{Z.grid.n} grid")

    emb = _embed_fn(f)(batch.as_input())
    if emb.shape != (len(positions), Z.embed_dim):
        raise DimensionError(f"embeddings of shape {emb.shape}, expected ({len(positions)}, {Z.embed_dim})")

    rows = np.array([a for a, _ in positions], dtype=np.intp)
    cols = np.array([b for _, b in positions], dtype=np.intp)
    Z.active_mask[image] = False
    Z.active_mask[image, rows, cols] = True
    Z.values[image, rows, cols] = emb.data
    Z.staleness[image, rows, cols] = 0
    Z._active[image] = ((rows, cols), emb)
    return Z


def z_read(Z: ZBlock) -> Tensor:
    """[B,m,n,s] view: detached stale cells + gradient-tracked active cells (one splice for the whole batch)."""
    if not Z.filled:
        raise StateError("z_read before z_fill")
    images = sorted(Z._active)
    if not images:
        return Tensor(Z.values, dtype=Z.values.dtype)
    cells = [Z._active[i][0] for i in images]
    index = (
        np.concatenate([np.full(rows.shape, i, dtype=np.intp) for i, (rows, _) in zip(images, cells)]),
        np.concatenate([rows for rows, _ in cells]),
        np.concatenate([cols for _, cols in cells]),
    )
    emb = concat([Z._active[i][1] for i in images])
    return index_put(Tensor(Z.values, dtype=Z.values.dtype), index, emb)


def z_dump(Z: ZBlock, path: Union[str, Path], *, image: Optional[int] = None, meta: Optional[dict] = None) -> Path:
    """Write Z values + staleness (whole batch, or one image) as a binary tensor record."""
    if not Z.filled:
        raise StateError("z_dump before z_fill")
    values, staleness = Z.values, Z.staleness
    if image is not None:
        if not 0 <= image < Z.batch:
            raise GridIndexError(f"image index {image} outside batch of {Z.batch}")
        values, staleness = values[image], staleness[image]
    info = {"M": Z.grid.M, "N": Z.grid.N, "p": Z.grid.p, **(meta or {})}
    return write_record(path, {"values": values, "staleness": staleness}, kind="zblock", meta=info)
