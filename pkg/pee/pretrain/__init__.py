"""Pretraining of the global embedding tables.

Layer-0 user and item tables are propagated over the normalized
user-item graph; the final layer is scored by dot products and trained with
BPR minus the diversity-driven block regularizer. Gradients are derived by
hand: every propagation layer is a symmetric linear map, so the backward
pass applies the same map to the gradients.
"""

from __future__ import annotations

import dataclasses
from typing import List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from pee import logger, metrics, utils
from pee.config import PipelineConfig
from pee.core import (
    FLOAT,
    BlockGrid,
    GroupingPlan,
    InteractionLog,
    Role,
    UserEmbeddingTable,
)
from pee.data import (
    BprBatch,
    BprSampler,
    segment_items_by_popularity,
    segment_items_randomly,
)
from pee.exceptions import TrainingDivergedError
from pee.optim import Adam, Parameters, all_finite

pipeline_log = logger.Pipeline.logger()


class PropagationGraph:
    """Normalized bipartite train graph.

    ``adjacency[i, j] = 1 / sqrt(|G_ui| * |G_vj|)`` for every train edge.
    Nodes without edges keep their embedding at every layer.
    """

    def __init__(self, log: InteractionLog, layers: int):
        users, items = log.pairs(Role.TRAIN)
        self.layers: int = layers
        self.user_degree: np.ndarray = np.bincount(users, minlength=log.n_users)
        self.item_degree: np.ndarray = np.bincount(items, minlength=log.n_items)
        eta = 1.0 / np.sqrt(
            self.user_degree[users].astype(np.float64) * self.item_degree[items]
        )
        self.adjacency: sp.csr_matrix = sp.csr_matrix(
            (eta, (users, items)), shape=(log.n_users, log.n_items)
        )
        self.adjacency_t: sp.csr_matrix = self.adjacency.T.tocsr()
        self.user_isolated: np.ndarray = (self.user_degree == 0)[:, None]
        self.item_isolated: np.ndarray = (self.item_degree == 0)[:, None]

    def __repr__(self) -> str:
        return (
            f"<{self.__class__.__name__} users={self.adjacency.shape[0]} "
            f"items={self.adjacency.shape[1]} edges={self.adjacency.nnz} "
            f"layers={self.layers}>"
        )

    def eta(self, user: int, item: int) -> float:
        return float(self.adjacency[user, item])

    def layer(
        self, users: np.ndarray, items: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray]:
        """One propagation layer; also the transposed map of the backward pass."""
        next_users = self.adjacency @ items
        next_items = self.adjacency_t @ users
        next_users = np.where(self.user_isolated, users, next_users)
        next_items = np.where(self.item_isolated, items, next_items)
        return next_users.astype(users.dtype), next_items.astype(items.dtype)


def propagate(
    graph: PropagationGraph,
    users: np.ndarray,
    items: np.ndarray,
    *,
    final_layer_only: bool = True,
) -> Tuple[np.ndarray, np.ndarray]:
    """Propagate layer-0 tables ``graph.layers`` times.

    Returns the final layer, or the mean of layers ``0..L1`` when
    ``final_layer_only`` is off.
    """
    sum_users, sum_items = users, items
    for _ in range(graph.layers):
        users, items = graph.layer(users, items)
        if not final_layer_only:
            sum_users = sum_users + users
            sum_items = sum_items + items
    if final_layer_only:
        return users, items
    scale = 1.0 / (graph.layers + 1)
    return (
        (sum_users * scale).astype(users.dtype),
        (sum_items * scale).astype(items.dtype),
    )


def backpropagate(
    graph: PropagationGraph,
    grad_users: np.ndarray,
    grad_items: np.ndarray,
    *,
    final_layer_only: bool = True,
) -> Tuple[np.ndarray, np.ndarray]:
    """Map gradients w.r.t. propagated tables back to layer 0."""
    # The layer map is symmetric, the backward pass is again propagation
    return propagate(graph, grad_users, grad_items, final_layer_only=final_layer_only)


def diversity(table: np.ndarray, blocks: int) -> Tuple[float, np.ndarray]:
    """Sum of pairwise squared Frobenius distances between block collections.

    ``table`` is ``|V| x D`` with ``D = blocks * d``; collection ``E^n`` is
    column slice ``n``. Uses ``sum_{a<b} |x_a - x_b|^2 =
    N * sum_n |x_n|^2 - |sum_n x_n|^2``.

    :return: Value and its gradient w.r.t. ``table``.
    """
    n_rows, dim = table.shape
    shaped = table.reshape(n_rows, blocks, dim // blocks)
    total = shaped.sum(axis=1, dtype=np.float64)
    value = blocks * float(np.sum(np.square(shaped, dtype=np.float64))) - float(
        np.sum(np.square(total))
    )
    grad = 2.0 * (blocks * shaped - total[:, None, :].astype(table.dtype))
    return value, grad.reshape(n_rows, dim).astype(table.dtype)


def bpr_dot(
    batch: BprBatch, users: np.ndarray, items: np.ndarray
) -> Tuple[float, np.ndarray, np.ndarray]:
    """BPR loss over dot product scores.

    :return: ``(loss, grad_users, grad_items)``; gradients are full-size.
    """
    u = users[batch.users]
    pos = items[batch.positives]
    neg = items[batch.negatives]
    x = np.sum(u * (pos - neg), axis=1, dtype=np.float64)
    loss = float(np.sum(np.logaddexp(0.0, -x)))
    # d(-ln sigmoid(x))/dx = -sigmoid(-x)
    dx = (-0.5 * (1.0 - np.tanh(x / 2.0)))[:, None].astype(users.dtype)

    grad_users = np.zeros_like(users)
    grad_items = np.zeros_like(items)
    np.add.at(grad_users, batch.users, dx * (pos - neg))
    np.add.at(grad_items, batch.positives, dx * u)
    np.add.at(grad_items, batch.negatives, -dx * u)
    return loss, grad_users, grad_items


def pretrain_loss(
    batch: BprBatch,
    users: np.ndarray,
    grid: BlockGrid,
    reg: float,
) -> float:
    """BPR over dot products minus ``reg`` times the block diversity.

    ``users`` and ``grid`` hold propagated final-layer embeddings.
    """
    loss, _, _ = bpr_dot(batch, users, grid.table)
    value, _ = diversity(grid.table, grid.layout.blocks)
    return loss - reg * value


def objective(
    params: Parameters,
    graph: PropagationGraph,
    batch: BprBatch,
    *,
    blocks: int,
    reg: float,
    weight_decay: float,
    final_layer_only: bool = True,
) -> Tuple[float, Parameters]:
    """Full pretraining loss and its gradient w.r.t. layer-0 tables.

    ``params`` holds ``users`` and ``items`` layer-0 tables.
    """
    users0, items0 = params["users"], params["items"]
    users, items = propagate(graph, users0, items0, final_layer_only=final_layer_only)

    loss, grad_users, grad_items = bpr_dot(batch, users, items)
    if reg:
        value, grad = diversity(items, blocks)
        loss -= reg * value
        grad_items = grad_items - reg * grad

    grad_users0, grad_items0 = backpropagate(
        graph, grad_users, grad_items, final_layer_only=final_layer_only
    )
    if weight_decay:
        loss += weight_decay * float(
            np.sum(np.square(users0, dtype=np.float64))
            + np.sum(np.square(items0, dtype=np.float64))
        )
        grad_users0 = grad_users0 + 2.0 * weight_decay * users0
        grad_items0 = grad_items0 + 2.0 * weight_decay * items0
    return loss, {"users": grad_users0, "items": grad_items0}


@dataclasses.dataclass
class PretrainState:
    params: Parameters
    optimizer: Adam

    @property
    def step(self) -> int:
        return self.optimizer.steps


def init_state(
    n_users: int, n_items: int, dim: int, *, std: float, learning_rate: float, seed: int
) -> PretrainState:
    """Seeded Gaussian layer-0 tables."""
    rng = utils.random.generator(seed, utils.random.STREAM_PRETRAIN, 0)
    params = {
        "users": (rng.standard_normal((n_users, dim)) * std).astype(FLOAT),
        "items": (rng.standard_normal((n_items, dim)) * std).astype(FLOAT),
    }
    return PretrainState(params=params, optimizer=Adam(learning_rate))


def pretrain_step(
    batch: BprBatch,
    state: PretrainState,
    graph: PropagationGraph,
    config: PipelineConfig,
) -> float:
    """Apply one Adam update and return the batch loss."""
    loss, grads = objective(
        state.params,
        graph,
        batch,
        blocks=config.model.blocks,
        reg=config.pretrain.reg,
        weight_decay=config.pretrain.weight_decay,
        final_layer_only=config.pretrain.final_layer_only,
    )
    if not np.isfinite(loss) or not all_finite(grads.values()):
        raise TrainingDivergedError(
            "pretrain",
            state.step,
            {
                "loss": loss,
                "user_norm": float(np.linalg.norm(state.params["users"])),
                "item_norm": float(np.linalg.norm(state.params["items"])),
            },
        )
    state.optimizer.step(state.params, grads)
    return loss


def validation_recall(
    log: InteractionLog, users: np.ndarray, items: np.ndarray, k: int
) -> float:
    """Mean validation Recall@K of dot-product scoring, train items excluded."""
    held_users, held_items = log.pairs(Role.VALIDATION)
    if not len(held_users):
        return 0.0
    truth: dict = {}
    for user, item in zip(held_users.tolist(), held_items.tolist()):
        truth.setdefault(user, set()).add(item)
    recalls: List[float] = []
    for user, relevant in truth.items():
        scores = items @ users[user]
        ranked = metrics.top_k(scores, k, excluded=log.user_adjacency[user])
        recalls.append(metrics.recall_at_k(ranked.tolist(), relevant, k))
    return float(np.mean(recalls))


@dataclasses.dataclass
class PretrainResult:
    grid: BlockGrid
    users: UserEmbeddingTable
    grouping: GroupingPlan
    history: List[dict]


def make_grouping(log: InteractionLog, config: PipelineConfig) -> GroupingPlan:
    if config.model.popularity_segmentation:
        return segment_items_by_popularity(log, config.model.item_groups)
    return segment_items_randomly(log, config.model.item_groups, config.seed)


def run_pretrain(
    log: InteractionLog,
    config: PipelineConfig,
    grouping: Optional[GroupingPlan] = None,
) -> PretrainResult:
    """Train until validation recall stops improving for ``patience`` checks.

    Returns the propagated tables of the best validated state, laid out as a
    block grid.
    """
    settings = config.pretrain
    if grouping is None:
        grouping = make_grouping(log, config)
    layout = grouping.layout(
        config.model.blocks, config.model.block_dim, config.model.bytes_per_parameter
    )

    graph = PropagationGraph(log, settings.layers)
    state = init_state(
        log.n_users,
        log.n_items,
        config.dim,
        std=settings.init_std,
        learning_rate=settings.learning_rate,
        seed=config.seed,
    )
    sampler = BprSampler(log)
    rng = utils.random.generator(config.seed, utils.random.STREAM_PRETRAIN, 1)

    best_score = -np.inf
    best_params = {name: value.copy() for name, value in state.params.items()}
    stale = 0
    history: List[dict] = []

    for epoch in range(settings.epochs):
        losses = [
            pretrain_step(batch, state, graph, config)
            for batch in sampler.epoch(settings.batch_size, rng)
        ]
        record = {"epoch": epoch + 1, "loss": float(np.sum(losses))}

        if (epoch + 1) % settings.eval_every == 0 or epoch + 1 == settings.epochs:
            users, items = propagate(
                graph,
                state.params["users"],
                state.params["items"],
                final_layer_only=settings.final_layer_only,
            )
            score = validation_recall(log, users, items, settings.eval_k)
            record["recall"] = score
            if score > best_score:
                best_score = score
                best_params = {
                    name: value.copy() for name, value in state.params.items()
                }
                stale = 0
            else:
                stale += 1
        history.append(record)
        pipeline_log.debug(
            "pretrain",
            f"Epoch {epoch + 1}: loss {record['loss']:.4f}, "
            f"recall@{settings.eval_k} {record.get('recall', float('nan')):.4f}.",
        )
        if stale >= settings.patience:
            pipeline_log.info("pretrain", f"Early stopping after epoch {epoch + 1}.")
            break

    users, items = propagate(
        graph,
        best_params["users"],
        best_params["items"],
        final_layer_only=settings.final_layer_only,
    )
    pipeline_log.info(
        "pretrain",
        f"Finished after {len(history)} epochs, best validation "
        f"recall@{settings.eval_k} {max(best_score, 0.0):.4f}.",
    )
    return PretrainResult(
        grid=BlockGrid(layout, items.astype(FLOAT)),
        users=UserEmbeddingTable(users.astype(FLOAT)),
        grouping=grouping,
        history=history,
    )
