from __future__ import annotations

import dataclasses
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from pee import logger, utils
from pee.core import GroupingPlan, InteractionLog, Role, equal_segment_sizes
from pee.exceptions import (
    ConfigurationError,
    EmptyDatasetError,
    FormatError,
    ParseError,
)

pipeline_log = logger.Pipeline.logger()

SNAPSHOT_VERSION = 1
SNAPSHOT_FILE = "interactions.npz"
STATS_FILE = "stats.txt"


# Loading


def _read_records(path: Path) -> Tuple[List[str], List[str], Optional[List[float]]]:
    users: List[str] = []
    items: List[str] = []
    timestamps: List[float] = []
    with_time: Optional[bool] = None

    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) not in (2, 3):
                raise ParseError(
                    str(path),
                    lineno,
                    f"expected 2 or 3 tab separated fields, got {len(fields)}",
                )
            if any(not f.strip() for f in fields):
                raise ParseError(str(path), lineno, "empty field")
            has_time = len(fields) == 3
            if with_time is None:
                with_time = has_time
            elif with_time != has_time:
                raise ParseError(
                    str(path), lineno, "timestamp column is not consistent"
                )
            users.append(fields[0].strip())
            items.append(fields[1].strip())
            if has_time:
                try:
                    timestamps.append(utils.time.parse_timestamp(fields[2].strip()))
                except (ValueError, OverflowError) as exc:
                    raise ParseError(str(path), lineno, f"invalid timestamp: {exc}")
    return users, items, (timestamps if with_time else None)


def _dense_ids(values: np.ndarray) -> Tuple[np.ndarray, Tuple[str, ...]]:
    """Map original ids to contiguous integers in sorted id order.

    Numeric ids are sorted numerically, so the mapping does not depend on
    the order of input lines.
    """
    unique = np.unique(values)
    if all(u.lstrip("-").isdigit() for u in unique):
        unique = np.array(sorted(unique, key=int), dtype=object)
    lookup: Dict[str, int] = {u: i for i, u in enumerate(unique)}
    return np.array([lookup[v] for v in values], dtype=np.int64), tuple(unique)


def filter_interactions(
    users: np.ndarray, items: np.ndarray, min_interactions: int
) -> np.ndarray:
    """Return mask of interactions surviving iterative filtering.

    Users and items with fewer than ``min_interactions`` interactions are
    removed until a fixed point is reached.
    """
    keep = np.ones(len(users), dtype=bool)
    while True:
        user_counts = np.bincount(users[keep], minlength=users.max(initial=-1) + 1)
        item_counts = np.bincount(items[keep], minlength=items.max(initial=-1) + 1)
        valid = (user_counts[users] >= min_interactions) & (
            item_counts[items] >= min_interactions
        )
        next_keep = keep & valid
        if np.array_equal(next_keep, keep):
            return keep
        keep = next_keep


def load_and_filter(path: Union[str, Path], min_interactions: int) -> InteractionLog:
    """Load tab separated interactions and filter sparse users and items.

    Duplicate (user, item) lines are collapsed into one interaction; when
    timestamps are present, the earliest one is kept. Returned triples have
    :attr:`Role.UNASSIGNED` role.
    """
    if min_interactions < 1:
        raise ConfigurationError("'min_interactions' has to be at least 1.")
    path = Path(path)
    raw_users, raw_items, raw_times = _read_records(path)
    if not raw_users:
        raise EmptyDatasetError(f"No interaction found in '{path}'.")

    user_codes, user_names = _dense_ids(np.array(raw_users, dtype=object))
    item_codes, item_names = _dense_ids(np.array(raw_items, dtype=object))

    # Deduplicate; lexsort puts the earliest timestamp first within each pair
    keys = user_codes * len(item_names) + item_codes
    if raw_times is not None:
        times = np.array(raw_times, dtype=np.float64)
        order = np.lexsort((times, keys))
    else:
        times = None
        order = np.argsort(keys, kind="stable")
    _, first = np.unique(keys[order], return_index=True)
    chosen = order[first]
    duplicates = len(keys) - len(chosen)
    if duplicates:
        pipeline_log.debug("ingest", f"Collapsed {duplicates} duplicate interactions.")

    user_codes = user_codes[chosen]
    item_codes = item_codes[chosen]
    if times is not None:
        times = times[chosen]

    keep = filter_interactions(user_codes, item_codes, min_interactions)
    if not keep.any():
        raise EmptyDatasetError(
            f"No interaction in '{path}' survives filtering with "
            f"min_interactions={min_interactions}."
        )
    user_codes, item_codes = user_codes[keep], item_codes[keep]
    if times is not None:
        times = times[keep]

    # Densify again over surviving ids
    kept_users = np.unique(user_codes)
    kept_items = np.unique(item_codes)
    users = np.searchsorted(kept_users, user_codes)
    items = np.searchsorted(kept_items, item_codes)

    order = np.lexsort((items, users))
    log = InteractionLog(
        n_users=len(kept_users),
        n_items=len(kept_items),
        users=users[order],
        items=items[order],
        roles=np.zeros(len(users), dtype=np.int64),
        user_ids=tuple(user_names[u] for u in kept_users),
        item_ids=tuple(item_names[i] for i in kept_items),
        timestamps=None if times is None else times[order],
    )
    pipeline_log.info(
        "ingest",
        f"Loaded {len(log)} interactions of {log.n_users} users "
        f"and {log.n_items} items from '{path}'.",
    )
    return log


# Splitting


def _round(value: float) -> int:
    return int(math.floor(value + 0.5))


def _role_counts(count: int, ratios: Sequence[float]) -> Tuple[int, int, int]:
    """Split ``count`` into (train, validation, test).

    Validation and test sizes are rounded to nearest, train gets the rest and
    always keeps at least one interaction.
    """
    n_val = _round(count * ratios[1])
    n_test = _round(count * ratios[2])
    while count - n_val - n_test < 1:
        if n_test > 0:
            n_test -= 1
        else:
            n_val -= 1
    return count - n_val - n_test, n_val, n_test


def split_roles(
    log: InteractionLog,
    ratios: Sequence[float] = (0.7, 0.1, 0.2),
    seed: int = 0,
    *,
    mode: str = "per_user",
) -> InteractionLog:
    """Assign train/validation/test roles.

    In ``per_user`` mode the interactions of every user are ordered (by
    timestamp when present, by a seeded shuffle otherwise) and cut by
    :func:`_role_counts`. In ``global`` mode all interactions are cut at
    once. Afterwards, items without any train interaction get one of their
    held-out interactions moved to train.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"Ratios have to sum to 1, got {tuple(ratios)}.")
    rng = utils.random.generator(seed, utils.random.STREAM_SPLIT)
    roles = np.zeros(len(log), dtype=np.int64)

    def ordered(indices: np.ndarray) -> np.ndarray:
        if log.timestamps is not None:
            return indices[np.lexsort((log.items[indices], log.timestamps[indices]))]
        return rng.permutation(indices)

    def assign(indices: np.ndarray) -> None:
        n_train, n_val, _ = _role_counts(len(indices), ratios)
        roles[indices[:n_train]] = Role.TRAIN
        roles[indices[n_train : n_train + n_val]] = Role.VALIDATION
        roles[indices[n_train + n_val :]] = Role.TEST

    if mode == "per_user":
        bounds = np.searchsorted(log.users, np.arange(log.n_users + 1))
        sorted_users = np.all(np.diff(log.users) >= 0)
        for user in range(log.n_users):
            if sorted_users:
                indices = np.arange(bounds[user], bounds[user + 1])
            else:
                indices = np.flatnonzero(log.users == user)
            assign(ordered(indices))
    elif mode == "global":
        assign(ordered(np.arange(len(log))))
        # Every user keeps at least one train interaction
        for user in range(log.n_users):
            indices = np.flatnonzero(log.users == user)
            if len(indices) and not (roles[indices] == Role.TRAIN).any():
                roles[indices[0]] = Role.TRAIN
    else:
        raise ConfigurationError(f"Unknown split mode '{mode}'.")

    train_items = np.zeros(log.n_items, dtype=bool)
    train_items[log.items[roles == Role.TRAIN]] = True
    moved = 0
    for item in np.flatnonzero(~train_items):
        indices = np.flatnonzero(log.items == item)
        if len(indices):
            roles[indices[0]] = Role.TRAIN
            moved += 1
    if moved:
        pipeline_log.debug("ingest", f"Moved {moved} held-out interactions to train.")

    return log.with_roles(roles)


# Item segmentation


def segment_items_by_popularity(log: InteractionLog, item_groups: int) -> GroupingPlan:
    """Sort items by train popularity and cut them into near-equal groups.

    Ties in popularity are broken by ascending item id.
    """
    if item_groups > log.n_items:
        raise ConfigurationError(
            f"Cannot create {item_groups} item groups from {log.n_items} items."
        )
    popularity = log.popularity
    order = np.lexsort((np.arange(log.n_items), -popularity))
    return GroupingPlan(
        item_groups=_cut(order, item_groups),
        popularity=popularity,
    )


def segment_items_randomly(
    log: InteractionLog, item_groups: int, seed: int
) -> GroupingPlan:
    """Shuffle the items and cut them into near-equal groups."""
    if item_groups > log.n_items:
        raise ConfigurationError(
            f"Cannot create {item_groups} item groups from {log.n_items} items."
        )
    rng = utils.random.generator(seed, utils.random.STREAM_SEGMENT)
    order = rng.permutation(log.n_items)
    return GroupingPlan(item_groups=_cut(order, item_groups), popularity=log.popularity)


def _cut(order: np.ndarray, groups: int) -> Tuple[Tuple[int, ...], ...]:
    sizes = equal_segment_sizes(len(order), groups)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return tuple(
        tuple(int(i) for i in order[bounds[g] : bounds[g + 1]]) for g in range(groups)
    )


# BPR sampling


@dataclasses.dataclass(frozen=True)
class BprTriple:
    user: int
    positive: int
    negative: int


@dataclasses.dataclass(frozen=True)
class BprBatch:
    """Batch of BPR triples.

    ``role`` tells which interactions provided the positives, the fine-tuning
    loop uses it to keep the W and V updates on different batches.
    """

    users: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    role: Role = Role.TRAIN

    def __len__(self) -> int:
        return len(self.users)

    def triples(self) -> List[BprTriple]:
        return [
            BprTriple(int(u), int(p), int(n))
            for u, p, n in zip(self.users, self.positives, self.negatives)
        ]


class BprSampler:
    """Uniform (user, positive) sampler with rejection-sampled negatives.

    :param log: Interaction log with roles assigned.
    :param role: Role of the positive interactions.
    :param exclude: Roles whose items can never be negatives of the user.
    :param users: Restrict positives to these users (a user group).
    """

    def __init__(
        self,
        log: InteractionLog,
        *,
        role: Role = Role.TRAIN,
        exclude: Sequence[Role] = (Role.TRAIN,),
        users: Optional[Sequence[int]] = None,
    ):
        self.n_items: int = log.n_items
        self.role: Role = role

        pos_users, pos_items = log.pairs(role)
        if users is not None:
            member = np.isin(pos_users, np.asarray(users, dtype=np.int64))
            pos_users, pos_items = pos_users[member], pos_items[member]

        ex_users, ex_items = log.pairs(*exclude)
        self._excluded: np.ndarray = np.unique(ex_users * self.n_items + ex_items)

        # Users adjacent to every item cannot get a negative
        degree = np.bincount(ex_users, minlength=log.n_users)
        saturated = degree[pos_users] >= self.n_items
        if saturated.any():
            for user in np.unique(pos_users[saturated]):
                pipeline_log.warning(
                    "ingest",
                    f"User {user} interacted with every item, "
                    "their samples are skipped.",
                )
        self.users: np.ndarray = pos_users[~saturated]
        self.positives: np.ndarray = pos_items[~saturated]

    def __len__(self) -> int:
        return len(self.users)

    def _is_excluded(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        keys = users * self.n_items + items
        if not len(self._excluded):
            return np.zeros(len(keys), dtype=bool)
        index = np.searchsorted(self._excluded, keys)
        index = np.minimum(index, len(self._excluded) - 1)
        return self._excluded[index] == keys

    def negatives_for(self, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        negatives = rng.integers(0, self.n_items, size=len(users))
        pending = np.flatnonzero(self._is_excluded(users, negatives))
        while len(pending):
            negatives[pending] = rng.integers(0, self.n_items, size=len(pending))
            still = self._is_excluded(users[pending], negatives[pending])
            pending = pending[still]
        return negatives

    def sample(self, batch_size: int, rng: np.random.Generator) -> BprBatch:
        if batch_size == 0:
            empty = np.zeros(0, dtype=np.int64)
            return BprBatch(empty, empty, empty, self.role)
        if not len(self):
            raise EmptyDatasetError(
                f"No {self.role.name.lower()} interaction to sample."
            )
        picked = rng.integers(0, len(self), size=batch_size)
        users = self.users[picked]
        utils.instrumentation.count(utils.instrumentation.TRAINING_SAMPLE, batch_size)
        negatives = self.negatives_for(users, rng)
        return BprBatch(users, self.positives[picked], negatives, self.role)

    def epoch(self, batch_size: int, rng: np.random.Generator) -> List[BprBatch]:
        """Split all positives in shuffled batches, each with fresh negatives."""
        order = rng.permutation(len(self))
        batches: List[BprBatch] = []
        for start in range(0, len(order), batch_size):
            picked = order[start : start + batch_size]
            users = self.users[picked]
            batches.append(
                BprBatch(
                    users,
                    self.positives[picked],
                    self.negatives_for(users, rng),
                    self.role,
                )
            )
        return batches


def sample_bpr_batch(
    log: InteractionLog,
    batch_size: int,
    seed: Union[int, np.random.Generator],
) -> BprBatch:
    """Sample ``batch_size`` train triples with uniform negatives."""
    if isinstance(seed, np.random.Generator):
        rng = seed
    else:
        rng = utils.random.generator(seed, utils.random.STREAM_PRETRAIN)
    return BprSampler(log).sample(batch_size, rng)


# Snapshots


def save_snapshot(log: InteractionLog, directory: Union[str, Path]) -> Path:
    """Write binary snapshot and human-readable stats into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / SNAPSHOT_FILE
    arrays = {
        "version": np.array([SNAPSHOT_VERSION], dtype=np.int64),
        "shape": np.array([log.n_users, log.n_items], dtype=np.int64),
        "users": log.users,
        "items": log.items,
        "roles": log.roles,
        "user_ids": np.array(log.user_ids, dtype=str),
        "item_ids": np.array(log.item_ids, dtype=str),
    }
    if log.timestamps is not None:
        arrays["timestamps"] = log.timestamps
    with path.open("wb") as handle:
        np.savez(handle, **arrays)
    with (directory / STATS_FILE).open("w", encoding="utf-8") as handle:
        handle.write(format_stats(log))
    return path


def load_snapshot(directory: Union[str, Path]) -> InteractionLog:
    directory = Path(directory)
    path = directory / SNAPSHOT_FILE if directory.is_dir() else directory
    if not path.is_file():
        raise FormatError(f"Snapshot '{path}' does not exist.")
    with np.load(path, allow_pickle=False) as data:
        if int(data["version"][0]) != SNAPSHOT_VERSION:
            raise FormatError(f"Snapshot '{path}' has unsupported version.")
        n_users, n_items = (int(v) for v in data["shape"])
        return InteractionLog(
            n_users=n_users,
            n_items=n_items,
            users=data["users"],
            items=data["items"],
            roles=data["roles"],
            user_ids=tuple(str(u) for u in data["user_ids"]),
            item_ids=tuple(str(i) for i in data["item_ids"]),
            timestamps=data["timestamps"] if "timestamps" in data.files else None,
        )


def stats(log: InteractionLog) -> Dict[str, object]:
    result: Dict[str, object] = {
        "users": log.n_users,
        "items": log.n_items,
        "interactions": len(log),
        "density": f"{log.density():.6f}",
    }
    for role in (Role.TRAIN, Role.VALIDATION, Role.TEST):
        result[role.name.lower()] = int(log.mask(role).sum())
    return result


def format_stats(log: InteractionLog) -> str:
    rows = [{"key": k, "value": v} for k, v in stats(log).items()]
    header = {"key": "Statistic", "value": "Value"}
    return utils.text.create_table(rows, header, rich=False)
