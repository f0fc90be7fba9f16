import itertools

import numpy as np
import pytest

from pee import deploy
from pee.core import BlockLayout
from pee.deploy import package as package_file
from pee.exceptions import (
    BudgetInfeasibleError,
    ConfigurationError,
    FormatError,
    NotFoundError,
)
from pee.finetune import GroupModel

from tests.pee.helpers import group_model


def _layout(group_items=((0, 1, 2), (3, 4, 5)), blocks: int = 3) -> BlockLayout:
    return BlockLayout(blocks=blocks, block_dim=2, group_items=group_items)


def _model(layout: BlockLayout, alpha: np.ndarray) -> GroupModel:
    return group_model(layout, alpha)


ALPHA = np.array([[0.30, 0.05], [0.20, 0.25], [0.10, 0.10]])


def test_budget_arithmetic_of_large_catalogue():
    # 50000 items in 20 groups, d = 16: one block is 40000 parameters
    items = np.arange(50000)
    layout = BlockLayout(
        blocks=16,
        block_dim=16,
        group_items=tuple(
            tuple(items[g * 2500 : (g + 1) * 2500].tolist()) for g in range(20)
        ),
    )
    assert 160_000 == deploy.block_bytes(layout, 0)
    assert 62 == deploy.max_blocks_for_budget(deploy.budget_bytes(10), layout, 0)


def test_budget_boundary():
    layout = _layout()
    minimal = deploy.minimal_bytes(layout)
    assert 24 + 2 * 24 == minimal
    user_bytes = deploy.user_embedding_bytes(layout)
    assert 2 == deploy.max_blocks_for_budget(minimal, layout, user_bytes)
    with pytest.raises(BudgetInfeasibleError) as excinfo:
        deploy.check_budget(minimal - 1, layout)
    assert minimal == excinfo.value.minimal
    assert str(minimal) in str(excinfo.value)


def test_budget_conversions():
    assert 2_500_000 == deploy.budget_bytes(2.5)
    assert 2.5 == deploy.budget_megabytes(2_500_000)
    layout = _layout()
    assert [168, 84] == deploy.parse_budgets([1.0, 0.5], "fraction", layout)
    assert [1_000_000] == deploy.parse_budgets([1.0], "mb", layout)
    with pytest.raises(ConfigurationError):
        deploy.parse_budgets([1.0], "gb", layout)


def test_select_blocks_example():
    alpha = np.array([[0.4, 0.3], [0.1, 0.2]])
    assert ((0,), (0, 1)) == deploy.select_blocks(alpha, 3, 2)


def test_select_blocks_floor_and_saturation():
    assert ((0,), (1,)) == deploy.select_blocks(ALPHA, 2, 2)
    assert ((0, 1, 2), (0, 1, 2)) == deploy.select_blocks(ALPHA, 6, 2)
    with pytest.raises(BudgetInfeasibleError):
        deploy.select_blocks(ALPHA, 1, 2)
    with pytest.raises(ConfigurationError):
        deploy.select_blocks(ALPHA, 3, 3)


def test_select_blocks_ties():
    alpha = np.full((3, 2), 0.1)
    # Protected blocks are block 0, then group 0 goes first
    assert ((0, 1), (0,)) == deploy.select_blocks(alpha, 3, 2)
    assert [(0, 1), (0, 2), (1, 1), (1, 2)] == deploy.ranked_blocks(alpha)


def _brute_force_best(alpha: np.ndarray, capacity: int) -> float:
    blocks, groups = alpha.shape
    pairs = [(b, g) for b in range(blocks) for g in range(groups)]
    best = -np.inf
    for size in range(groups, min(capacity, len(pairs)) + 1):
        for subset in itertools.combinations(pairs, size):
            if len({g for _, g in subset}) < groups:
                continue
            best = max(best, sum(alpha[b, g] for b, g in subset))
    return best


@pytest.mark.parametrize("shape", [(2, 2), (3, 2), (2, 3), (4, 2), (3, 3), (4, 3)])
def test_select_blocks_is_optimal(shape):
    rng = np.random.default_rng(sum(shape))
    blocks, groups = shape
    for _ in range(5):
        alpha = rng.random(shape)
        for capacity in range(groups, blocks * groups + 1):
            selection = deploy.select_blocks(alpha, capacity, groups)
            assert all(selection)
            assert capacity == sum(len(s) for s in selection)
            total = sum(alpha[b, g] for g, s in enumerate(selection) for b in s)
            assert np.isclose(_brute_force_best(alpha, capacity), total)


def test_build_package():
    layout = _layout()
    model = _model(layout, ALPHA)
    package = deploy.build_package(model, 7, 24 + 3 * 24)
    assert ((0, 1), (1,)) == package.selection
    assert 3 == package.block_count
    assert 6 + 3 * 6 == package.param_count
    assert package.byte_size <= package.budget
    assert np.array_equal(model.params["users"][1], package.user_embedding)
    table = deploy.normalized_table(model)
    assert np.allclose(table[[3, 4, 5], 2:4], package.blocks[(1, 1)])
    assert (-1.0 <= table).all() and (table <= 1.0).all()


def test_build_package_errors():
    model = _model(_layout(), ALPHA)
    with pytest.raises(BudgetInfeasibleError):
        deploy.build_package(model, 7, 71)
    with pytest.raises(NotFoundError):
        deploy.build_package(model, 4, 1000)


def test_build_package_with_unequal_groups():
    layout = _layout(group_items=((0, 1, 2, 3), (4, 5)))
    model = _model(layout, ALPHA)
    # Block costs are 32 and 16 bytes, user embedding 24
    # The next ranked block does not fit the remaining 6 bytes
    package = deploy.build_package(model, 3, 24 + 32 + 16 + 32 + 6)
    assert ((0, 1), (1,)) == package.selection
    assert 104 == package.byte_size


def test_shrink_package():
    model = _model(_layout(), ALPHA)
    package = deploy.build_package(model, 3, deploy.full_bytes(model.layout))
    assert 6 == package.block_count
    assert package is deploy.shrink_package(package, package.byte_size)
    assert 6 == package.block_count
    deploy.shrink_package(package, deploy.minimal_bytes(model.layout))
    assert ((0,), (1,)) == package.selection
    assert {(0, 0), (1, 1)} == set(package.blocks)
    with pytest.raises(BudgetInfeasibleError):
        deploy.shrink_package(package, 10)


@pytest.mark.parametrize(
    "group_items", [((0, 1, 2), (3, 4, 5)), ((0, 1, 2, 3), (4, 5))]
)
def test_shrink_matches_direct_build(group_items):
    layout = _layout(group_items)
    rng = np.random.default_rng(7)
    minimal = deploy.minimal_bytes(layout)
    full = deploy.full_bytes(layout)
    for draw in range(200):
        alpha = rng.random((3, 2))
        if draw % 10 == 0:
            alpha = np.round(alpha, 1)
        model = _model(layout, alpha)
        draws = rng.integers(minimal, full + 1, size=2).tolist()
        large, small = sorted(draws, reverse=True)
        shrunk = deploy.shrink_package(deploy.build_package(model, 3, large), small)
        direct = deploy.build_package(model, 3, small)
        assert direct.selection == shrunk.selection
        assert set(direct.blocks) == set(shrunk.blocks)
        assert shrunk.byte_size <= small


def test_random_scores():
    first = deploy.random_scores(3, 2, seed=1, group=0)
    assert np.array_equal(first, deploy.random_scores(3, 2, seed=1, group=0))
    assert not np.array_equal(first, deploy.random_scores(3, 2, seed=1, group=1))
    assert np.isclose(1.0, first.sum())
    assert (first > 0).all()


def test_selection_overlap():
    assert 2 == deploy.selection_overlap(((0, 1), (2,)), ((1,), (0, 2)))


def test_package_roundtrip(tmp_path):
    model = _model(_layout(), ALPHA)
    package = deploy.build_package(model, 7, 100)
    path = package_file.save(tmp_path / "user_7.pee", package)
    loaded = package_file.load(path)
    assert package.selection == loaded.selection
    assert package.layout.group_items == loaded.layout.group_items
    assert 7 == loaded.user_id
    assert np.array_equal(package.alpha, loaded.alpha)
    for key, block in package.blocks.items():
        assert np.array_equal(block, loaded.blocks[key])
    assert package_file.encode(package) == package_file.encode(loaded)


def test_package_rejects_damaged_files(tmp_path):
    data = package_file.encode(deploy.build_package(_model(_layout(), ALPHA), 7, 100))
    with pytest.raises(FormatError, match="truncated"):
        package_file.decode(data[:-1])
    with pytest.raises(FormatError, match="trailing"):
        package_file.decode(data + b"\x00")
    with pytest.raises(FormatError, match="magic"):
        package_file.decode(b"XXXX" + data[4:])
    # Group 0 without any block
    damaged = bytearray(data)
    damaged[package_file.HEADER.size : package_file.HEADER.size + 2] = b"\x00\x00"
    with pytest.raises(FormatError):
        package_file.decode(bytes(damaged))
    with pytest.raises(FormatError):
        package_file.load(tmp_path / "missing.pee")


def test_package_requires_equal_segments():
    layout = _layout(group_items=((0, 1, 2, 3), (4, 5)))
    package = deploy.build_package(_model(layout, ALPHA), 3, 200)
    with pytest.raises(FormatError):
        package_file.encode(package)
