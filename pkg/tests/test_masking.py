import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import label

from mimlab.masking import (
    MaskSpec,
    ModelSize,
    blockwise_mask,
    default_ratio,
    random_mask,
    sample_mask,
    target_mask_count,
)
from mimlab.patching import PatchGrid
from mimlab.rng import stream

GRID14 = PatchGrid(14, 14, 16)


@pytest.mark.parametrize("n,gamma,count", [(196, 0.50, 98), (196, 0.15, 29), (196, 0.25, 49), (196, 0.0, 0), (196, 1.0, 196), (4, 0.5, 2)])
def test_target_mask_count(n, gamma, count):
    assert target_mask_count(n, gamma) == count


def test_target_mask_count_rounds_half_up():
    assert target_mask_count(10, 0.25) == 3  # 2.5 -> 3
    assert target_mask_count(4, 0.125) == 1  # 0.5 -> 1


@pytest.mark.parametrize("gamma", [-0.1, 1.01])
def test_target_mask_count_range(gamma):
    with pytest.raises(ValueError):
        target_mask_count(10, gamma)


@pytest.mark.parametrize("sampler", [random_mask, blockwise_mask])
def test_extreme_counts(sampler):
    rng = stream(0, "t")
    none = sampler(GRID14, 0, rng)
    assert none.masked.size == 0 and none.visible.tolist() == list(range(196))
    full = sampler(GRID14, 196, rng)
    assert full.visible.size == 0 and full.masked.tolist() == list(range(196))


@pytest.mark.parametrize("sampler", [random_mask, blockwise_mask])
def test_count_out_of_range(sampler):
    with pytest.raises(ValueError):
        sampler(GRID14, 197, stream(0, "t"))
    with pytest.raises(ValueError):
        sampler(GRID14, -1, stream(0, "t"))


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.floats(0, 1), st.sampled_from(["random", "blockwise"]), st.integers(0, 10**6))
def test_partition_invariants(h, w, gamma, kind, seed):
    grid = PatchGrid(h, w, 4)
    count = target_mask_count(grid.n, gamma)
    m = sample_mask(kind, grid, count, stream(seed, "mask"))
    assert m.masked.size == count
    assert np.intersect1d(m.visible, m.masked).size == 0
    assert sorted(np.concatenate([m.visible, m.masked]).tolist()) == list(range(grid.n))
    assert np.all(np.diff(m.visible) > 0) and np.all(np.diff(m.masked) > 0)
    assert m.gamma == count / grid.n


def test_random_mask_is_uniform():
    grid = PatchGrid(4, 4, 4)
    rng = np.random.default_rng(7)
    hits = np.zeros(16)
    draws = 100_000
    for _ in range(draws):
        hits += random_mask(grid, 8, rng).as_bool()
    assert np.abs(hits / draws - 0.5).max() < 0.02


def test_streams_are_reproducible_and_order_independent():
    a = [blockwise_mask(GRID14, 98, stream(5, "mask", 2, i)) for i in range(10)]
    b = [blockwise_mask(GRID14, 98, stream(5, "mask", 2, i)) for i in reversed(range(10))][::-1]
    assert all(x == y for x, y in zip(a, b))
    assert a[0] != a[1]


def _components(m: MaskSpec) -> int:
    return label(m.as_bool().reshape(m.grid.h, m.grid.w))[1]


def test_blockwise_is_more_contiguous_than_random():
    seeds = 2000
    block = np.mean([_components(blockwise_mask(GRID14, 98, stream(s, "cc"))) for s in range(seeds)])
    rand = np.mean([_components(random_mask(GRID14, 98, stream(s, "cc"))) for s in range(seeds)])
    assert block < rand


def test_mask_spec_rejects_bad_partitions():
    grid = PatchGrid(2, 2, 4)
    with pytest.raises(ValueError):
        MaskSpec(grid, np.array([0, 1]), np.array([1, 2, 3]))
    with pytest.raises(ValueError):
        MaskSpec(grid, np.array([0]), np.array([1, 2]))
    with pytest.raises(ValueError):
        MaskSpec(grid, np.array([1, 0]), np.array([2, 3]))


def test_render():
    m = MaskSpec(PatchGrid(2, 3, 4), np.array([0, 2, 4]), np.array([1, 3, 5]))
    assert m.render() == ".#.\n#.#"


def test_default_ratio_table():
    assert default_ratio("tiny") == 0.15
    assert default_ratio("Small") == 0.25
    assert default_ratio(ModelSize.BASE) == 0.50
    assert default_ratio("large") == 0.50
    with pytest.raises(ValueError):
        default_ratio("huge")


def test_default_ratio_non_decreasing_in_model_size():
    ratios = [default_ratio(s) for s in ModelSize]
    assert ratios == sorted(ratios)
