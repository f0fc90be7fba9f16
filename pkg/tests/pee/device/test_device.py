import numpy as np
import pytest

from pee import deploy, device, utils
from pee.core import BlockLayout, Role
from pee.deploy import PeePackage
from pee.exceptions import (
    BudgetInfeasibleError,
    ConfigurationError,
    InstrumentationError,
)

from tests.pee.helpers import group_model, toy_log


def _package(user_embedding, selection, blocks, group_items=((0,), (1,))) -> PeePackage:
    layout = BlockLayout(blocks=2, block_dim=2, group_items=group_items)
    package = PeePackage(
        user_id=0,
        user_embedding=np.asarray(user_embedding, dtype=np.float32),
        selection=selection,
        blocks={
            key: np.asarray(value, dtype=np.float32) for key, value in blocks.items()
        },
        alpha=np.full((2, 2), 0.25, dtype=np.float32),
        layout=layout,
        budget=1000,
    )
    package.validate()
    return package


def test_item_scores_hand_example():
    package = _package(
        [1.0, 1.0, 1.0, 1.0],
        ((0,), (0, 1)),
        {(0, 0): [[1.0, 0.0]], (1, 0): [[0.0, 1.0]], (1, 1): [[1.0, 1.0]]},
    )
    scores = device.item_scores(package)
    # Item 1 uses two blocks: (2 / 2) * (2 + 4)
    assert [4.0, 6.0] == scores.tolist()


def test_zero_user_ranks_by_item_id():
    package = _package(
        [0.0] * 4,
        ((0,), (1,)),
        {(0, 0): [[1.0, 0.0]], (1, 1): [[3.0, 1.0]]},
    )
    ranking = device.rank_items(package)
    assert [0.0, 0.0] == ranking.scores.tolist()
    assert [0, 1] == ranking.ordered_items.tolist()
    assert ranking.latency_micros >= 0.0


def _naive_scores(package: PeePackage) -> np.ndarray:
    layout = package.layout
    max_selected = max(len(s) for s in package.selection)
    scores = np.zeros(layout.n_items)
    for group, selected in enumerate(package.selection):
        for row, item in enumerate(layout.group_items[group]):
            total = 0.0
            for block in selected:
                repeated = np.tile(package.blocks[(group, block)][row], layout.blocks)
                total += float(np.dot(package.user_embedding, repeated))
            scores[item] = max_selected / len(selected) * total
    return scores


def _random_package(seed: int, budget: int) -> PeePackage:
    rng = np.random.default_rng(seed)
    layout = BlockLayout(blocks=4, block_dim=3, group_items=((0, 5, 2), (1, 4), (3, 6)))
    model = group_model(layout, rng.random((4, 3)), seed=seed)
    return deploy.build_package(model, 7, budget)


@pytest.mark.parametrize("seed", range(5))
def test_scores_match_naive_oracle(seed: int):
    layout_bytes = deploy.full_bytes(_random_package(0, 10_000).layout)
    package = _random_package(seed, layout_bytes - 12 * seed * 4)
    assert np.allclose(_naive_scores(package), device.item_scores(package), atol=1e-6)


def test_uniform_package_is_plain_repeated_dot():
    package = _random_package(1, 10_000)
    assert all(4 == len(s) for s in package.selection)
    layout = package.layout
    table = np.zeros((layout.n_items, layout.dim))
    for (group, block), values in package.blocks.items():
        rows = list(layout.group_items[group])
        table[rows, block * 3 : (block + 1) * 3] = values
    user_sum = package.user_embedding.reshape(4, 3).sum(axis=0)
    expected = table.reshape(layout.n_items, 4, 3).sum(axis=1) @ user_sum
    assert np.allclose(expected, device.item_scores(package), atol=1e-6)


def test_scaling_user_keeps_ranking():
    package = _random_package(2, 200)
    ranking = device.rank_items(package)
    package.user_embedding = package.user_embedding * 3.0
    scaled = device.rank_items(package)
    assert np.allclose(3.0 * ranking.scores, scaled.scores, rtol=1e-5)
    assert np.array_equal(ranking.ordered_items, scaled.ordered_items)


def _log():
    # User 7 saw items 0 and 1, items 2 and 5 are held out for testing
    edges = [(7, 0), (7, 1), (7, 3), (7, 2), (7, 5), (3, 4)]
    roles = [Role.TRAIN, Role.TRAIN, Role.VALIDATION, Role.TEST, Role.TEST, Role.TRAIN]
    return toy_log(8, 7, edges, roles=roles)


def test_evaluate_package_excludes_seen_items():
    package = _random_package(3, 10_000)
    log = _log()
    recall, ndcg = device.evaluate_package(package, log, k=4)
    assert 1.0 == recall
    assert 0.0 < ndcg <= 1.0
    full_recall, _ = device.evaluate_package(package, log, k=7)
    assert 1.0 == full_recall


def test_evaluate_package_without_test_items():
    package = _random_package(3, 10_000)
    package.user_id = 3
    assert device.evaluate_package(package, _log(), k=4) is None


def test_timeline_matches_fresh_builds():
    rng = np.random.default_rng(4)
    layout = BlockLayout(blocks=4, block_dim=3, group_items=((0, 5, 2), (1, 4), (3, 6)))
    model = group_model(layout, rng.random((4, 3)), seed=4)
    full = deploy.full_bytes(layout)
    minimal = deploy.minimal_bytes(layout)
    budgets = [full, (full + minimal) // 2, minimal]
    package = deploy.build_package(model, 7, full)
    report = device.simulate_budget_timeline(package, budgets, _log(), k=2)
    assert 3 == len(report.rows)
    assert budgets == [row.budget for row in report.rows]
    assert 0 == report.rows[0].removed_blocks
    for row, budget in zip(report.rows, budgets):
        fresh = deploy.build_package(model, 7, budget)
        assert (row.recall, row.ndcg) == device.evaluate_package(fresh, _log(), k=2)
        assert fresh.param_count == row.param_count
    assert report.rows[0].param_count > report.rows[-1].param_count


def test_timeline_single_budget_is_noop():
    package = _random_package(5, 10_000)
    before = package.selection
    report = device.simulate_budget_timeline(package, [package.budget], _log(), k=2)
    assert 1 == len(report.rows)
    assert before == package.selection


def test_timeline_report_columns(tmp_path):
    package = _random_package(5, 10_000)
    budgets = [package.budget, 200]
    report = device.simulate_budget_timeline(package, budgets, _log(), k=2)
    path = report.to_csv(tmp_path / "report.csv")
    header = path.read_text(encoding="utf-8").splitlines()[0]
    assert ",".join(device.REPORT_COLUMNS) == header
    frame = report.frame()
    assert [0.01, 0.0002] == frame["budgetMB"].tolist()


@pytest.mark.parametrize(
    "budgets,error",
    [
        ([], ConfigurationError),
        ([200, 300], ConfigurationError),
        ([200, 200], ConfigurationError),
        ([20_000], ConfigurationError),
        ([300, 10], BudgetInfeasibleError),
    ],
)
def test_timeline_rejects_invalid_budgets(budgets, error):
    package = _random_package(6, 10_000)
    before = package.selection
    with pytest.raises(error):
        device.simulate_budget_timeline(package, budgets, _log(), k=2)
    assert before == package.selection


def test_timeline_detects_rebuilds(monkeypatch):
    original = device.shrink_package

    def rebuilding_shrink(package, budget):
        utils.instrumentation.count(utils.instrumentation.PACKAGE_BUILD)
        return original(package, budget)

    monkeypatch.setattr(device, "shrink_package", rebuilding_shrink)
    package = _random_package(7, 10_000)
    with pytest.raises(InstrumentationError):
        device.simulate_budget_timeline(package, [package.budget], _log(), k=2)


def test_ranking_caps_blas_threads(monkeypatch):
    calls = []
    original = device.threadpool_limits

    def recording_limits(limits=None, user_api=None):
        calls.append((limits, user_api))
        return original(limits=limits, user_api=user_api)

    monkeypatch.setattr(device, "threadpool_limits", recording_limits)
    package = _random_package(5, 10_000)
    device.rank_items(package)
    budgets = [package.budget, 200]
    device.simulate_budget_timeline(package, budgets, _log(), k=2, threads=3)
    assert [(1, "blas"), (3, "blas"), (3, "blas")] == calls
