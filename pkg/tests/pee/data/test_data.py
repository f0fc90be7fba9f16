from pathlib import Path
from typing import List, Tuple

import numpy as np
import pytest
import scipy.stats

from pee import data
from pee.core import InteractionLog, Role
from pee.exceptions import (
    ConfigurationError,
    EmptyDatasetError,
    FormatError,
    ParseError,
)


def _write(path: Path, lines: List[str]) -> Path:
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _pairs(users: int, items_per_user: int) -> List[Tuple[int, int]]:
    return [(u, i) for u in range(users) for i in range(items_per_user)]


def _tsv(pairs) -> List[str]:
    return [f"u{u}\ti{i}" for u, i in pairs]


def test_load_keeps_dense_users(tmp_path):
    # Every item is shared by all 12 users, every user has 12 items
    path = _write(tmp_path / "in.tsv", _tsv(_pairs(12, 12)))
    log = data.load_and_filter(path, 10)
    assert 12 == log.n_users
    assert 12 == log.n_items
    assert 144 == len(log)
    assert np.all(log.roles == Role.UNASSIGNED)


def test_load_filters_to_fixed_point(tmp_path):
    pairs = _pairs(10, 10)
    # User 10 has 9 interactions, item 10 is supported only by user 10
    pairs += [(10, i) for i in range(8)] + [(10, 10)]
    path = _write(tmp_path / "in.tsv", _tsv(pairs))
    log = data.load_and_filter(path, 10)
    assert 10 == log.n_users
    assert 10 == log.n_items
    assert "u10" not in log.user_ids
    assert "i10" not in log.item_ids
    users, items = log.users, log.items
    assert np.all(np.bincount(users) >= 10)
    assert np.all(np.bincount(items) >= 10)


def test_load_collapses_duplicates(tmp_path):
    lines = ["# userId\titemId", "a\tx", "a\tx", "b\tx", "a\ty", "", "b\ty"]
    log = data.load_and_filter(_write(tmp_path / "in.tsv", lines), 1)
    assert 4 == len(log)
    assert ("a", "b") == log.user_ids
    assert ("x", "y") == log.item_ids


def test_load_numeric_ids_sorted_numerically(tmp_path):
    lines = ["10\t2", "9\t2", "10\t1", "9\t1"]
    log = data.load_and_filter(_write(tmp_path / "in.tsv", lines), 1)
    assert ("9", "10") == log.user_ids
    assert ("1", "2") == log.item_ids


def test_load_keeps_earliest_timestamp(tmp_path):
    lines = ["a\tx\t200", "a\tx\t100", "a\ty\t2022-06-08T00:00:00"]
    log = data.load_and_filter(_write(tmp_path / "in.tsv", lines), 1)
    assert 2 == len(log)
    assert [100.0, 1654646400.0] == log.timestamps.tolist()


@pytest.mark.parametrize(
    "lines,lineno",
    [
        (["a\tx", "a"], 2),
        (["a\tx", "a\tx\t1\t2"], 2),
        (["a\tx\t1", "b\ty"], 2),
        (["a\t\t1"], 1),
        (["a\tx\tlater"], 1),
    ],
)
def test_load_malformed(tmp_path, lines, lineno: int):
    with pytest.raises(ParseError) as excinfo:
        data.load_and_filter(_write(tmp_path / "in.tsv", lines), 1)
    assert lineno == excinfo.value.lineno
    assert f":{lineno}:" in str(excinfo.value)


def test_load_empty(tmp_path):
    with pytest.raises(EmptyDatasetError):
        data.load_and_filter(_write(tmp_path / "in.tsv", ["# nothing"]), 1)
    with pytest.raises(EmptyDatasetError):
        data.load_and_filter(_write(tmp_path / "in.tsv", ["a\tx"]), 2)


def _log(users: int, items_per_user: int, timestamps: bool = False) -> InteractionLog:
    pairs = np.array(_pairs(users, items_per_user), dtype=np.int64)
    return InteractionLog(
        n_users=users,
        n_items=items_per_user,
        users=pairs[:, 0],
        items=pairs[:, 1],
        roles=np.zeros(len(pairs), dtype=np.int64),
        # Every user sees the items in a different order
        timestamps=(
            ((pairs[:, 0] + pairs[:, 1]) % items_per_user).astype(np.float64)
            if timestamps
            else None
        ),
    )


@pytest.mark.parametrize(
    "count,result",
    [(10, (7, 1, 2)), (3, (2, 0, 1)), (1, (1, 0, 0)), (2, (2, 0, 0)), (20, (14, 2, 4))],
)
def test_role_counts(count: int, result):
    assert result == data._role_counts(count, (0.7, 0.1, 0.2))


def test_split_per_user_ratio():
    log = data.split_roles(_log(20, 10), (0.7, 0.1, 0.2), seed=1)
    for user in range(20):
        roles = log.roles[log.users == user]
        assert 7 == np.sum(roles == Role.TRAIN)
        assert 1 == np.sum(roles == Role.VALIDATION)
        assert 2 == np.sum(roles == Role.TEST)
    log.validate()


def test_split_is_deterministic():
    first = data.split_roles(_log(5, 10), seed=3)
    second = data.split_roles(_log(5, 10), seed=3)
    other = data.split_roles(_log(5, 10), seed=4)
    assert np.array_equal(first.roles, second.roles)
    assert not np.array_equal(first.roles, other.roles)


def test_split_by_timestamp_holds_out_latest():
    log = data.split_roles(_log(10, 10, timestamps=True), seed=0)
    for user in range(10):
        selected = log.users == user
        items = log.items[selected]
        roles = log.roles[selected]
        latest = {(8 - user) % 10, (9 - user) % 10}
        assert latest == set(items[roles == Role.TEST].tolist())
        assert {(7 - user) % 10} == set(items[roles == Role.VALIDATION].tolist())


def test_split_global_mode():
    log = data.split_roles(_log(10, 10), seed=0, mode="global")
    assert 70 == np.sum(log.roles == Role.TRAIN)
    log.validate()


def test_split_invalid():
    with pytest.raises(ConfigurationError):
        data.split_roles(_log(2, 3), (0.5, 0.5, 0.5))
    with pytest.raises(ConfigurationError):
        data.split_roles(_log(2, 3), mode="weekly")


def _popularity_log(popularity: List[int]) -> InteractionLog:
    users: List[int] = []
    items: List[int] = []
    for item, count in enumerate(popularity):
        users += list(range(count))
        items += [item] * count
    n_users = max(max(popularity), 1)
    return InteractionLog(
        n_users=n_users,
        n_items=len(popularity),
        users=np.array(users, dtype=np.int64),
        items=np.array(items, dtype=np.int64),
        roles=np.full(len(users), Role.TRAIN, dtype=np.int64),
    )


def test_segment_by_popularity():
    plan = data.segment_items_by_popularity(_popularity_log([5, 4, 3, 2, 1, 0]), 3)
    assert ((0, 1), (2, 3), (4, 5)) == plan.item_groups


def test_segment_by_popularity_sizes_and_ties():
    plan = data.segment_items_by_popularity(_popularity_log([1, 4, 2, 4, 0, 3, 5]), 3)
    assert [3, 2, 2] == [len(g) for g in plan.item_groups]
    # Items 1 and 3 share popularity 4, the lower id goes first
    assert (6, 1, 3) == plan.item_groups[0]


def test_segment_randomly_is_a_seeded_partition():
    log = _popularity_log([5, 4, 3, 2, 1, 0, 1])
    plan = data.segment_items_randomly(log, 3, seed=2)
    again = data.segment_items_randomly(log, 3, seed=2)
    assert plan.item_groups == again.item_groups
    assert list(range(7)) == sorted(i for g in plan.item_groups for i in g)
    assert [3, 2, 2] == [len(g) for g in plan.item_groups]


def test_segment_too_many_groups():
    with pytest.raises(ConfigurationError):
        data.segment_items_by_popularity(_popularity_log([1, 1]), 3)


def test_sampler_forced_negative():
    # User 0 interacted with every item except 3
    log = InteractionLog(
        n_users=1,
        n_items=4,
        users=np.zeros(3, dtype=np.int64),
        items=np.array([0, 1, 2]),
        roles=np.full(3, Role.TRAIN),
    )
    batch = data.sample_bpr_batch(log, 50, seed=0)
    assert 50 == len(batch)
    assert np.all(batch.negatives == 3)
    assert Role.TRAIN == batch.role


def test_sampler_empty_batch():
    log = _log(2, 3).with_roles(np.full(6, Role.TRAIN))
    batch = data.sample_bpr_batch(log, 0, seed=0)
    assert 0 == len(batch)
    assert [] == batch.triples()


def test_sampler_negatives_are_uniform():
    # One user with a single positive item, 100 candidate negatives
    log = InteractionLog(
        n_users=1,
        n_items=101,
        users=np.array([0]),
        items=np.array([100]),
        roles=np.array([Role.TRAIN]),
    )
    samples = 100_000
    batch = data.sample_bpr_batch(log, samples, seed=0)
    counts = np.bincount(batch.negatives, minlength=101)
    assert 0 == counts[100]
    expected = samples / 100
    chi_squared = float(np.sum(np.square(counts[:100] - expected) / expected))
    assert chi_squared < scipy.stats.chi2.ppf(0.9999, 99)
    sigma = np.sqrt(samples * (1 / 100) * (1 - 1 / 100))
    assert np.all(np.abs(counts[:100] - expected) < 5 * sigma)


def test_sampler_restricted_to_users_and_role():
    log = data.split_roles(_log(4, 10), seed=0)
    sampler = data.BprSampler(
        log, role=Role.VALIDATION, exclude=(Role.TRAIN, Role.VALIDATION), users=[1, 2]
    )
    assert 2 == len(sampler)
    batch = sampler.sample(20, np.random.default_rng(0))
    assert set(batch.users.tolist()) <= {1, 2}
    assert Role.VALIDATION == batch.role
    for user, negative in zip(batch.users, batch.negatives):
        assert negative not in log.items_of(int(user), Role.TRAIN, Role.VALIDATION)


def test_sampler_epoch_covers_all_positives():
    log = data.split_roles(_log(3, 10), seed=0)
    sampler = data.BprSampler(log)
    batches = sampler.epoch(4, np.random.default_rng(1))
    sizes = [len(b) for b in batches]
    assert len(sampler) == sum(sizes)
    assert all(4 == size for size in sizes[:-1])
    seen = sorted(
        (int(u), int(p)) for b in batches for u, p in zip(b.users, b.positives)
    )
    assert seen == sorted(zip(*(a.tolist() for a in log.pairs(Role.TRAIN))))


def test_snapshot_roundtrip(tmp_path):
    log = data.split_roles(_log(3, 10, timestamps=True), seed=0)
    data.save_snapshot(log, tmp_path / "snapshot")
    loaded = data.load_snapshot(tmp_path / "snapshot")
    assert np.array_equal(log.users, loaded.users)
    assert np.array_equal(log.roles, loaded.roles)
    assert np.array_equal(log.timestamps, loaded.timestamps)
    assert (tmp_path / "snapshot" / data.STATS_FILE).is_file()


def test_snapshot_missing(tmp_path):
    with pytest.raises(FormatError):
        data.load_snapshot(tmp_path)


def test_stats():
    log = data.split_roles(_log(20, 10), seed=0)
    stats = data.stats(log)
    assert 20 == stats["users"]
    assert 140 == stats["train"]
    assert 20 == stats["validation"]
    assert 40 == stats["test"]
    assert "1.000000" == stats["density"]
