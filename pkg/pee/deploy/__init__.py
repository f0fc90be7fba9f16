"""Customization of personalized elastic embedding packages.

Budgets are integers in bytes; ``1 MB = 10**6 bytes``. Byte accounting
counts embedding parameters only: the user embedding plus the selected
blocks, ``bytes_per_parameter`` bytes each.

Block ranking: every item group keeps its highest weighted block (ties to
the lowest block index). All other ``(group, block)`` pairs are ranked by
weight descending, then group index, then block index; a package at a
budget holds the longest prefix of that ranking that fits. Shrinking drops
ranked blocks from the end of the prefix, so shrinking a package yields
exactly the package built directly at the smaller budget.
"""

from __future__ import annotations

import dataclasses
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from pee import utils
from pee.core import BlockLayout
from pee.exceptions import BudgetInfeasibleError, ConfigurationError
from pee.finetune import GroupModel
from pee.finetune.network import INFERENCE, normalize_blocks

BYTES_PER_MB = 1_000_000

Selection = Tuple[Tuple[int, ...], ...]


def budget_bytes(megabytes: float) -> int:
    """Convert megabytes to whole bytes."""
    return int(round(megabytes * BYTES_PER_MB))


def budget_megabytes(amount: int) -> float:
    return amount / BYTES_PER_MB


def user_embedding_bytes(layout: BlockLayout) -> int:
    return layout.dim * layout.bytes_per_parameter


def block_bytes(layout: BlockLayout, group: int) -> int:
    return layout.block_parameters(group) * layout.bytes_per_parameter


def minimal_bytes(layout: BlockLayout, user_bytes: Optional[int] = None) -> int:
    """Size of the package holding one block per item group."""
    if user_bytes is None:
        user_bytes = user_embedding_bytes(layout)
    return user_bytes + sum(block_bytes(layout, g) for g in range(layout.n_groups))


def full_bytes(layout: BlockLayout) -> int:
    """Size of the package holding every block."""
    return user_embedding_bytes(layout) + layout.blocks * sum(
        block_bytes(layout, g) for g in range(layout.n_groups)
    )


def check_budget(
    budget: int, layout: BlockLayout, user_bytes: Optional[int] = None
) -> None:
    minimal = minimal_bytes(layout, user_bytes)
    if budget < minimal:
        raise BudgetInfeasibleError(budget, minimal)


def max_blocks_for_budget(budget: int, layout: BlockLayout, user_bytes: int) -> int:
    """Maximum number of blocks ``C`` a budget of ``budget`` bytes can hold.

    With unequal group sizes the smallest group's block cost is used, so the
    result is an upper bound; selection checks exact byte costs.
    """
    check_budget(budget, layout, user_bytes)
    smallest = min(block_bytes(layout, g) for g in range(layout.n_groups))
    return (budget - user_bytes) // smallest


# Selection


def protected_blocks(alpha: np.ndarray) -> np.ndarray:
    """Per item group, the block with the highest weight."""
    # argmax returns the first maximum, ties go to the lowest block index
    return np.argmax(alpha, axis=0)


def ranked_blocks(alpha: np.ndarray) -> List[Tuple[int, int]]:
    """Non-protected ``(group, block)`` pairs in selection order."""
    blocks, groups = alpha.shape
    protected = protected_blocks(alpha)
    block_index, group_index = np.meshgrid(
        np.arange(blocks), np.arange(groups), indexing="ij"
    )
    weights = alpha.astype(np.float64).ravel()
    block_index = block_index.ravel()
    group_index = group_index.ravel()
    keep = block_index != protected[group_index]
    order = np.lexsort((block_index[keep], group_index[keep], -weights[keep]))
    return [
        (int(group_index[keep][i]), int(block_index[keep][i])) for i in order
    ]


def _as_selection(chosen: Dict[int, List[int]], groups: int) -> Selection:
    return tuple(tuple(sorted(chosen.get(g, []))) for g in range(groups))


def select_blocks(alpha: np.ndarray, capacity: int, groups: int) -> Selection:
    """Choose ``capacity`` blocks: every group's best block, then the top
    remaining weights.

    :param alpha: Weights of shape ``(N, G_v#)``.
    :param capacity: Total number of blocks ``C``.
    :return: Sorted block indices per item group.
    """
    if alpha.shape[1] != groups:
        raise ConfigurationError(
            f"Weights have {alpha.shape[1]} groups, expected {groups}."
        )
    if capacity < groups:
        raise BudgetInfeasibleError(capacity, groups, "blocks")
    protected = protected_blocks(alpha)
    chosen: Dict[int, List[int]] = {g: [int(protected[g])] for g in range(groups)}
    for group, block in ranked_blocks(alpha)[: capacity - groups]:
        chosen[group].append(block)
    return _as_selection(chosen, groups)


def select_blocks_within(
    alpha: np.ndarray, layout: BlockLayout, budget: int, user_bytes: int
) -> Selection:
    """Byte-exact selection: the longest prefix of the ranking that fits."""
    check_budget(budget, layout, user_bytes)
    protected = protected_blocks(alpha)
    chosen: Dict[int, List[int]] = {
        g: [int(protected[g])] for g in range(layout.n_groups)
    }
    remaining = budget - minimal_bytes(layout, user_bytes)
    for group, block in ranked_blocks(alpha):
        cost = block_bytes(layout, group)
        if cost > remaining:
            break
        chosen[group].append(block)
        remaining -= cost
    return _as_selection(chosen, layout.n_groups)


def random_scores(blocks: int, groups: int, seed: int, group: int = 0) -> np.ndarray:
    """Seeded stand-in for the weights, used when importance weights are off.

    The scores are positive and sum to one so they can be stored as the
    package weights.
    """
    rng = utils.random.generator(seed, utils.random.STREAM_SELECTION, group)
    scores = rng.random((blocks, groups)) + 1e-12
    return (scores / scores.sum()).astype(np.float32)


# Packages


@dataclasses.dataclass
class PeePackage:
    """Deployable embeddings of one user.

    ``blocks`` maps ``(group, block)`` to the normalized
    ``(itemsInGroup x d)`` matrix. ``alpha`` is the weight snapshot the
    selection was made from.
    """

    user_id: int
    user_embedding: np.ndarray
    selection: Selection
    blocks: Dict[Tuple[int, int], np.ndarray]
    alpha: np.ndarray
    layout: BlockLayout
    budget: int

    def __repr__(self) -> str:
        return (
            f"<{self.__class__.__name__} user={self.user_id} "
            f"blocks={self.block_count} bytes={self.byte_size}>"
        )

    @property
    def block_count(self) -> int:
        return sum(len(s) for s in self.selection)

    @property
    def param_count(self) -> int:
        """Selected block parameters plus the user embedding."""
        layout = self.layout
        return layout.dim + sum(
            len(selected) * layout.block_parameters(g)
            for g, selected in enumerate(self.selection)
        )

    @property
    def byte_size(self) -> int:
        return self.param_count * self.layout.bytes_per_parameter

    @property
    def max_selected(self) -> int:
        return max(len(s) for s in self.selection)

    def validate(self) -> None:
        for group, selected in enumerate(self.selection):
            if not 1 <= len(selected) <= self.layout.blocks:
                raise ConfigurationError(
                    f"Item group {group} has {len(selected)} blocks."
                )
        if self.byte_size > self.budget:
            raise BudgetInfeasibleError(self.budget, self.byte_size)


def normalized_table(model: GroupModel) -> np.ndarray:
    """Item table after inference-mode normalization, ``|V| x D``."""
    return normalize_blocks(model.params["items"], model.norm, INFERENCE)


def build_package(
    model: GroupModel,
    user_id: int,
    budget: int,
    *,
    alpha: Optional[np.ndarray] = None,
    table: Optional[np.ndarray] = None,
) -> PeePackage:
    """Select and normalize blocks of ``model`` for one user and budget.

    :param alpha: Selection weights, the model's frozen weights by default.
    :param table: Precomputed :func:`normalized_table` of the model.
    """
    utils.instrumentation.count(utils.instrumentation.PACKAGE_BUILD)
    layout = model.layout
    if alpha is None:
        alpha = model.alpha
    alpha = np.asarray(alpha, dtype=np.float32)
    user = model.user_embedding(user_id).astype(np.float32)
    selection = select_blocks_within(
        alpha, layout, budget, user_embedding_bytes(layout)
    )

    if table is None:
        table = normalized_table(model)
    d = layout.block_dim
    blocks: Dict[Tuple[int, int], np.ndarray] = {}
    for group, selected in enumerate(selection):
        rows = np.asarray(layout.group_items[group], dtype=np.int64)
        for block in selected:
            blocks[(group, block)] = np.ascontiguousarray(
                table[rows, block * d : (block + 1) * d], dtype=np.float32
            )

    package = PeePackage(
        user_id=int(user_id),
        user_embedding=user,
        selection=selection,
        blocks=blocks,
        alpha=alpha.copy(),
        layout=layout,
        budget=int(budget),
    )
    package.validate()
    return package


def shrink_package(package: PeePackage, budget: int) -> PeePackage:
    """Drop the lowest ranked blocks until the package fits ``budget``.

    Works in place on ``package``, using only its stored weights. A budget
    at or above the current size leaves the package unchanged.
    """
    layout = package.layout
    if budget >= package.byte_size:
        return package
    check_budget(budget, layout)

    selected = {(g, b) for g, blocks in enumerate(package.selection) for b in blocks}
    removable = [pair for pair in ranked_blocks(package.alpha) if pair in selected]
    size = package.byte_size
    while size > budget:
        group, block = removable.pop()
        selected.discard((group, block))
        package.blocks.pop((group, block), None)
        size -= block_bytes(layout, group)

    package.selection = tuple(
        tuple(sorted(b for g2, b in selected if g2 == g))
        for g in range(layout.n_groups)
    )
    package.budget = int(budget)
    return package


def selection_overlap(first: Selection, second: Selection) -> int:
    """Number of ``(group, block)`` pairs selected in both."""
    return sum(len(set(a) & set(b)) for a, b in zip(first, second))


def parse_budgets(values: Sequence[float], unit: str, layout: BlockLayout) -> List[int]:
    """Budgets in bytes from megabytes or from fractions of the full package."""
    if unit == "mb":
        return [budget_bytes(v) for v in values]
    if unit == "fraction":
        total = full_bytes(layout)
        return [int(np.floor(v * total)) for v in values]
    raise ConfigurationError(f"Unknown budget unit '{unit}'.")
