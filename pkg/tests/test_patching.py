import math
import random

import numpy as np
import pytest

from errors import ContractError, DimensionError, GridIndexError, ValidationError
from patching import (
    GridSpec,
    assemble,
    grid_for,
    new_sampler,
    pad_to_grid,
    patch_extractor,
    patches_to_input,
    sample_patches,
    tile,
)


@pytest.fixture
def image():
    return np.arange(16 * 24, dtype=np.float32).reshape(16, 24)


def test_grid_dimensions(image):
    grid = grid_for(image, 8)
    assert (grid.m, grid.n, grid.cells) == (2, 3, 6)
    assert grid.all_cells()[:4] == [(0, 0), (0, 1), (0, 2), (1, 0)]


@pytest.mark.parametrize("M,N,p", [(16, 20, 8), (4, 16, 8), (16, 16, 0)])
def test_grid_rejects_bad_shapes(M, N, p):
    with pytest.raises(DimensionError):
        GridSpec(M, N, p)


def test_patch_extractor_cell(image):
    patch = patch_extractor(image, 1, 2, 8)
    assert patch.shape == (8, 8, 1)
    np.testing.assert_array_equal(patch.data[:, :, 0], image[8:16, 16:24])


@pytest.mark.parametrize("a,b", [(2, 0), (0, 3), (-1, 0)])
def test_patch_extractor_out_of_grid(image, a, b):
    with pytest.raises(GridIndexError):
        patch_extractor(image, a, b, 8)


def test_tile_then_assemble_reproduces_image(image):
    tiles = tile(image, 8)
    grid = grid_for(image, 8)
    cells = grid.all_cells()
    rebuilt = assemble([tiles[a, b] for a, b in cells], cells, grid, 1)
    np.testing.assert_array_equal(rebuilt[:, :, 0], image)


def test_assemble_leaves_unfilled_cells_zero(image):
    grid = grid_for(image, 8)
    rebuilt = assemble([tile(image, 8)[0, 1]], [(0, 1)], grid, 1)
    assert rebuilt[:8, :8].sum() == 0
    np.testing.assert_array_equal(rebuilt[:8, 8:16, 0], image[:8, 8:16])


def test_pad_to_grid():
    padded = pad_to_grid(np.ones((10, 17)), 8, fill=-1.0)
    assert padded.shape == (16, 24, 1)
    assert padded[9, 16, 0] == 1.0
    assert padded[10, 0, 0] == -1.0 and padded[0, 17, 0] == -1.0
    aligned = np.ones((16, 16, 2))
    assert pad_to_grid(aligned, 8) is aligned


def test_patches_to_input_layout():
    patches = np.zeros((3, 8, 8, 2))
    patches[1, :, :, 1] = 5.0
    x = patches_to_input(patches)
    assert x.shape == (3, 2, 8, 8)
    assert x.data[1, 1].min() == 5.0 and x.data[1, 0].max() == 0.0


# -----------------------------
# sampler
# -----------------------------
def test_sampler_draws_every_cell_once(image):
    state = new_sampler(grid_for(image, 8), seed=3)
    seen, sizes = [], []
    while (batch := sample_patches(image, 4, state)) is not None:
        seen.extend(batch.positions)
        sizes.append(len(batch))
    assert sorted(seen) == grid_for(image, 8).all_cells()
    assert sizes == [4, 2]


def test_sampler_batch_contents_match_cells(image):
    state = new_sampler(grid_for(image, 8), seed=0)
    batch = sample_patches(image, 3, state)
    assert len(batch) == 3 and batch.patches.shape == (3, 8, 8, 1)
    for patch, (a, b) in zip(batch.patches, batch.positions):
        np.testing.assert_array_equal(patch, patch_extractor(image, a, b, 8).data)
    assert batch.as_input().shape == (3, 1, 8, 8)


def test_sampler_coverage_budget(image):
    state = new_sampler(grid_for(image, 8), max_coverage=0.5, seed=1)
    drawn = []
    while (batch := sample_patches(image, 2, state)) is not None:
        drawn.extend(batch.positions)
    assert len(drawn) == 3
    assert state.exhausted and state.remaining == 0


def test_sampler_reset_starts_new_outer_iteration(image):
    state = new_sampler(grid_for(image, 8), seed=5)
    sample_patches(image, 6, state)
    assert sample_patches(image, 1, state) is None
    state.reset()
    assert len(sample_patches(image, 6, state)) == 6


def test_sampler_is_seeded(image):
    a = new_sampler(grid_for(image, 8), seed=11).permutation
    b = new_sampler(grid_for(image, 8), seed=11).permutation
    c = new_sampler(grid_for(image, 8), seed=12).permutation
    assert a == b
    assert sorted(a) == sorted(c)


def test_sampler_argument_checks(image):
    with pytest.raises(ValidationError):
        new_sampler(grid_for(image, 8), max_coverage=0.0)
    state = new_sampler(grid_for(image, 8))
    with pytest.raises(ContractError):
        sample_patches(image, 0, state)
    with pytest.raises(DimensionError):
        sample_patches(np.zeros((8, 8)), 1, state)


def test_sampler_coverage_property():
    rnd = random.Random(2024)
    for _ in range(1000):
        p = rnd.choice([8, 16])
        m, n = rnd.randint(1, 6), rnd.randint(1, 6)
        mu = rnd.choice([1.0, 0.5, rnd.uniform(0.05, 1.0)])
        k = rnd.randint(1, m * n)
        image = np.zeros((m * p, n * p), dtype=np.float32)
        state = new_sampler(grid_for(image, p), max_coverage=mu, seed=rnd.getrandbits(32))
        drawn = []
        while (batch := sample_patches(image, k, state)) is not None:
            assert 1 <= len(batch) <= k
            drawn.extend(batch.positions)
        assert len(set(drawn)) == len(drawn)
        assert len(drawn) == max(1, math.ceil(mu * m * n - 1e-9))
        if mu == 1.0:
            assert sorted(drawn) == grid_for(image, p).all_cells()
