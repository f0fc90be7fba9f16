"""Shared data model: interactions, block-structured tables, groupings."""

from __future__ import annotations

import dataclasses
import enum
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from pee.exceptions import ConfigurationError, NotFoundError

FLOAT = np.float32


class Role(enum.IntEnum):
    UNASSIGNED: int = 0
    TRAIN: int = 1
    VALIDATION: int = 2
    TEST: int = 3


@dataclasses.dataclass(frozen=True)
class InteractionLog:
    """Deduplicated implicit feedback.

    Triples are stored column-wise: ``users[i]``, ``items[i]`` and
    ``roles[i]`` describe one interaction. Ids are dense and zero-based;
    the original ids from the input file are kept in ``user_ids`` and
    ``item_ids``.
    """

    n_users: int
    n_items: int
    users: np.ndarray
    items: np.ndarray
    roles: np.ndarray
    user_ids: Tuple[str, ...] = ()
    item_ids: Tuple[str, ...] = ()
    timestamps: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("users", "items", "roles"):
            array = np.asarray(getattr(self, name), dtype=np.int64)
            array.setflags(write=False)
            object.__setattr__(self, name, array)
        if not (len(self.users) == len(self.items) == len(self.roles)):
            raise ValueError("Interaction columns differ in length.")

    def __len__(self) -> int:
        return len(self.users)

    def __repr__(self) -> str:
        return (
            f"<{self.__class__.__name__} users={self.n_users} "
            f"items={self.n_items} interactions={len(self)}>"
        )

    def with_roles(self, roles: np.ndarray) -> InteractionLog:
        return dataclasses.replace(self, roles=np.asarray(roles, dtype=np.int64))

    def mask(self, *roles: Role) -> np.ndarray:
        return np.isin(self.roles, [int(r) for r in roles])

    def pairs(self, *roles: Role) -> Tuple[np.ndarray, np.ndarray]:
        """Return ``(users, items)`` of interactions with given roles."""
        selected = self.mask(*roles)
        return self.users[selected], self.items[selected]

    @cached_property
    def user_adjacency(self) -> List[Set[int]]:
        """Per-user set of train items."""
        adjacency: List[Set[int]] = [set() for _ in range(self.n_users)]
        for user, item in zip(*self.pairs(Role.TRAIN)):
            adjacency[user].add(int(item))
        return adjacency

    @cached_property
    def item_adjacency(self) -> List[Set[int]]:
        """Per-item set of train users."""
        adjacency: List[Set[int]] = [set() for _ in range(self.n_items)]
        for user, item in zip(*self.pairs(Role.TRAIN)):
            adjacency[item].add(int(user))
        return adjacency

    def items_of(self, user: int, *roles: Role) -> Set[int]:
        selected = (self.users == user) & self.mask(*roles)
        return set(int(i) for i in self.items[selected])

    @cached_property
    def popularity(self) -> np.ndarray:
        """Train interaction count per item."""
        _, items = self.pairs(Role.TRAIN)
        return np.bincount(items, minlength=self.n_items).astype(np.int64)

    def density(self) -> float:
        if self.n_users == 0 or self.n_items == 0:
            return 0.0
        return len(self) / (self.n_users * self.n_items)

    def validate(self) -> None:
        """Check the interaction invariants; raise :class:`ValueError`."""
        keys = (self.users * self.n_items + self.items) * 4 + self.roles
        if len(np.unique(keys)) != len(keys):
            raise ValueError("Duplicate (user, item) pair within one role.")
        train_users = set(self.pairs(Role.TRAIN)[0].tolist())
        train_items = set(self.pairs(Role.TRAIN)[1].tolist())
        held_users, held_items = self.pairs(Role.VALIDATION, Role.TEST)
        if not set(held_users.tolist()) <= train_users:
            raise ValueError("Held-out user without train interactions.")
        if not set(held_items.tolist()) <= train_items:
            raise ValueError("Held-out item without train interactions.")


@dataclasses.dataclass(frozen=True)
class BlockLayout:
    """Shape of the block grid without the values.

    :param blocks: N, number of blocks per item.
    :param block_dim: d, length of one block.
    :param group_items: Item ids of every item group, in row order.
    """

    blocks: int
    block_dim: int
    group_items: Tuple[Tuple[int, ...], ...]
    bytes_per_parameter: int = 4

    @property
    def dim(self) -> int:
        return self.blocks * self.block_dim

    @property
    def n_groups(self) -> int:
        return len(self.group_items)

    @cached_property
    def group_sizes(self) -> np.ndarray:
        return np.array([len(g) for g in self.group_items], dtype=np.int64)

    @cached_property
    def n_items(self) -> int:
        return int(self.group_sizes.sum())

    @cached_property
    def item_order(self) -> np.ndarray:
        """Item ids in (group, row) order."""
        if not self.group_items:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.asarray(g, dtype=np.int64) for g in self.group_items])

    @cached_property
    def item_group(self) -> np.ndarray:
        """Group index of every item id."""
        result = np.full(self.n_items, -1, dtype=np.int64)
        for index, items in enumerate(self.group_items):
            result[list(items)] = index
        return result

    @cached_property
    def item_row(self) -> np.ndarray:
        """Row index of every item id within its group."""
        result = np.full(self.n_items, -1, dtype=np.int64)
        for items in self.group_items:
            result[list(items)] = np.arange(len(items))
        return result

    def membership(self, item: int) -> Tuple[int, int]:
        """Return ``(group index, row index)`` of the item."""
        if not 0 <= item < self.n_items:
            raise NotFoundError(f"Item {item} is not part of the block grid.")
        return int(self.item_group[item]), int(self.item_row[item])

    def block_parameters(self, group: int) -> int:
        """Parameter count of one block of the group."""
        return int(self.group_sizes[group]) * self.block_dim

    def validate(self) -> None:
        if self.blocks <= 0 or self.block_dim <= 0:
            raise ConfigurationError(
                "Block count and block dimension must be positive."
            )
        order = np.sort(self.item_order)
        if not np.array_equal(order, np.arange(self.n_items)):
            raise ConfigurationError("Item groups do not partition the items.")


class BlockGrid:
    """Item embedding table organized as ``G_v# x N`` embedding blocks.

    Values are held as one ``|V| x D`` table indexed by item id; block
    ``n`` of group ``g`` is the ``(itemsInGroup x d)`` matrix
    ``table[group_items[g], n*d:(n+1)*d]``.
    """

    def __init__(self, layout: BlockLayout, table: np.ndarray):
        layout.validate()
        if table.shape != (layout.n_items, layout.dim):
            raise ValueError(
                f"Table of shape {table.shape} does not fit the layout "
                f"({layout.n_items}, {layout.dim})."
            )
        self.layout: BlockLayout = layout
        self.table: np.ndarray = table

    def __repr__(self) -> str:
        return (
            f"<{self.__class__.__name__} groups={self.layout.n_groups} "
            f"blocks={self.layout.blocks} block_dim={self.layout.block_dim}>"
        )

    def copy(self) -> BlockGrid:
        return BlockGrid(self.layout, self.table.copy())

    def block(self, group: int, block: int) -> np.ndarray:
        """Return the ``(itemsInGroup x d)`` block matrix."""
        d = self.layout.block_dim
        rows = np.asarray(self.layout.group_items[group], dtype=np.int64)
        return self.table[rows, block * d : (block + 1) * d]

    def collection(self, block: int) -> np.ndarray:
        """E^n: n-th blocks of all item groups stacked vertically."""
        d = self.layout.block_dim
        return self.table[self.layout.item_order, block * d : (block + 1) * d]

    def item_blocks(self, item: int) -> np.ndarray:
        """Return the ``(N x d)`` blocks of one item."""
        self.layout.membership(item)
        return self.table[item].reshape(self.layout.blocks, self.layout.block_dim)


def full_embedding_of(grid: BlockGrid, item: int) -> np.ndarray:
    """Concatenate the item's rows of blocks 1..N of its group."""
    group, row = grid.layout.membership(item)
    blocks = [grid.block(group, n)[row] for n in range(grid.layout.blocks)]
    return np.concatenate(blocks)


@dataclasses.dataclass
class UserEmbeddingTable:
    rows: np.ndarray

    @property
    def n_users(self) -> int:
        return self.rows.shape[0]

    def row(self, user: int) -> np.ndarray:
        if not 0 <= user < self.n_users:
            raise NotFoundError(f"User {user} has no embedding.")
        return self.rows[user]


@dataclasses.dataclass(frozen=True)
class GroupingPlan:
    """User groups and popularity ordered item groups."""

    item_groups: Tuple[Tuple[int, ...], ...]
    popularity: np.ndarray
    user_groups: Tuple[Tuple[int, ...], ...] = ()

    def with_user_groups(self, user_groups: Sequence[Sequence[int]]) -> GroupingPlan:
        groups = tuple(tuple(int(u) for u in g) for g in user_groups)
        return dataclasses.replace(self, user_groups=groups)

    def layout(self, blocks: int, block_dim: int, bytes_per_parameter: int = 4):
        return BlockLayout(
            blocks=blocks,
            block_dim=block_dim,
            group_items=self.item_groups,
            bytes_per_parameter=bytes_per_parameter,
        )

    @cached_property
    def user_group_of(self) -> Dict[int, int]:
        return {u: g for g, users in enumerate(self.user_groups) for u in users}


def equal_segment_sizes(count: int, groups: int) -> List[int]:
    """Sizes of ``groups`` contiguous segments of ``count`` elements.

    The remainder goes to the earliest segments, one extra element each.
    """
    if groups <= 0 or groups > count:
        raise ConfigurationError(
            f"Cannot split {count} elements into {groups} non-empty groups."
        )
    base, remainder = divmod(count, groups)
    return [base + 1 if g < remainder else base for g in range(groups)]
