"""Scorer and controller networks with hand-written backward passes.

Weights use the row-vector convention: a layer computes ``h @ W + b`` with
``W`` of shape ``(in, out)``. Parameter names are ``<net>.<i>.weight`` and
``<net>.<i>.bias`` for hidden layers and ``<net>.out.weight`` and
``<net>.out.bias`` for the output layer.
"""

from __future__ import annotations

import dataclasses
from typing import List, Optional, Tuple

import numpy as np

from pee.data import BprBatch
from pee.optim import Parameters
from pee.pretrain import diversity

TRAIN = "train"
INFERENCE = "inference"


# Normalization


@dataclasses.dataclass
class NormStats:
    """Running per-dimension statistics of the item rows."""

    mean: np.ndarray
    var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.9

    def copy(self) -> NormStats:
        return NormStats(self.mean.copy(), self.var.copy(), self.epsilon, self.momentum)

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        keep = self.momentum
        mean = keep * self.mean + (1.0 - keep) * batch_mean
        var = keep * self.var + (1.0 - keep) * batch_var
        self.mean = mean.astype(self.mean.dtype)
        self.var = var.astype(self.var.dtype)

    @staticmethod
    def of(
        table: np.ndarray, *, epsilon: float = 1e-5, momentum: float = 0.9
    ) -> NormStats:
        """Statistics of a whole table, used to seed the running values."""
        return NormStats(table.mean(axis=0), table.var(axis=0), epsilon, momentum)


@dataclasses.dataclass
class _NormCache:
    normalized: np.ndarray
    centered: np.ndarray
    inv_std: np.ndarray
    batch: bool
    batch_mean: Optional[np.ndarray]
    batch_var: Optional[np.ndarray]


def _normalize(rows: np.ndarray, stats: NormStats, mode: str) -> _NormCache:
    if mode not in (TRAIN, INFERENCE):
        raise ValueError(f"Unknown normalization mode '{mode}'.")
    # A single row has no variance, fall back to running statistics
    batch = mode == TRAIN and rows.shape[0] >= 2
    if batch:
        mean = rows.mean(axis=0)
        var = rows.var(axis=0)
    else:
        mean, var = stats.mean, stats.var
    centered = rows - mean
    inv_std = 1.0 / np.sqrt(var + stats.epsilon)
    normalized = np.tanh(centered * inv_std).astype(rows.dtype)
    return _NormCache(
        normalized,
        centered,
        inv_std,
        batch,
        mean if batch else None,
        var if batch else None,
    )


def _normalize_backward(grad: np.ndarray, cache: _NormCache) -> np.ndarray:
    grad_scaled = grad * (1.0 - np.square(cache.normalized))
    if not cache.batch:
        return grad_scaled * cache.inv_std
    m = grad.shape[0]
    xhat = cache.centered * cache.inv_std
    return (cache.inv_std / m) * (
        m * grad_scaled
        - grad_scaled.sum(axis=0)
        - xhat * np.sum(grad_scaled * xhat, axis=0)
    )


def normalize_blocks(
    rows: np.ndarray, stats: NormStats, mode: str = TRAIN
) -> np.ndarray:
    """``tanh((e - mu) / sqrt(var + eps))`` per dimension.

    Train mode uses the batch statistics and folds them into the running
    values of ``stats``; inference mode uses the running values.
    """
    cache = _normalize(rows, stats, mode)
    if cache.batch:
        stats.update(cache.batch_mean, cache.batch_var)
    return cache.normalized


# Dense layers


def hidden_layers(params: Parameters, prefix: str) -> int:
    count = 0
    while f"{prefix}.{count}.weight" in params:
        count += 1
    return count


def init_mlp(
    prefix: str,
    sizes: List[int],
    rng: np.random.Generator,
    *,
    std: float,
    dtype=np.float32,
) -> Parameters:
    """Gaussian weights and zero biases; the last size is the output layer."""
    params: Parameters = {}
    for index, (size_in, size_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        name = "out" if index == len(sizes) - 2 else str(index)
        params[f"{prefix}.{name}.weight"] = (
            rng.standard_normal((size_in, size_out)) * std
        ).astype(dtype)
        params[f"{prefix}.{name}.bias"] = np.zeros(size_out, dtype=dtype)
    return params


def _mlp_forward(
    params: Parameters, prefix: str, h: np.ndarray
) -> Tuple[np.ndarray, List]:
    activations = [h]
    for index in range(hidden_layers(params, prefix)):
        weight = params[f"{prefix}.{index}.weight"]
        h = np.tanh(h @ weight + params[f"{prefix}.{index}.bias"])
        activations.append(h)
    out = h @ params[f"{prefix}.out.weight"] + params[f"{prefix}.out.bias"]
    return out, activations


def _mlp_backward(
    params: Parameters, prefix: str, activations: List, grad_out: np.ndarray
) -> Tuple[Parameters, np.ndarray]:
    grads: Parameters = {}
    h = activations[-1]
    grads[f"{prefix}.out.weight"] = h.T @ grad_out
    grads[f"{prefix}.out.bias"] = grad_out.sum(axis=0)
    grad = grad_out @ params[f"{prefix}.out.weight"].T
    for index in reversed(range(len(activations) - 1)):
        h = activations[index + 1]
        grad_pre = grad * (1.0 - np.square(h))
        grads[f"{prefix}.{index}.weight"] = activations[index].T @ grad_pre
        grads[f"{prefix}.{index}.bias"] = grad_pre.sum(axis=0)
        grad = grad_pre @ params[f"{prefix}.{index}.weight"].T
    return grads, grad


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# Controller


@dataclasses.dataclass
class _ControllerCache:
    activations: List
    probabilities: np.ndarray


def _controller_pass(
    params: Parameters, popularity: np.ndarray, loss_value: float
) -> Tuple[np.ndarray, _ControllerCache]:
    dtype = params["controller.out.weight"].dtype
    h0 = np.concatenate([popularity, [loss_value]]).astype(dtype)[None, :]
    logits, activations = _mlp_forward(params, "controller", h0)
    logits = logits[0].astype(np.float64)
    exp = np.exp(logits - logits.max())
    probabilities = (exp / exp.sum()).astype(dtype)
    groups = len(popularity)
    # alpha[i, j] = e_c[G_v * i + j]
    alpha = probabilities.reshape(-1, groups)
    return alpha, _ControllerCache(activations, probabilities)


def controller_forward(
    params: Parameters, popularity: np.ndarray, loss_value: float
) -> np.ndarray:
    """Importance weights ``alpha`` of shape ``(N, G_v#)``.

    The input is the group popularity vector followed by the loss value.
    """
    alpha, _ = _controller_pass(params, popularity, loss_value)
    return alpha


def controller_backward(
    params: Parameters, cache: _ControllerCache, grad_alpha: np.ndarray
) -> Parameters:
    e = cache.probabilities.astype(np.float64)
    grad_e = grad_alpha.reshape(-1).astype(np.float64)
    grad_logits = e * (grad_e - np.dot(e, grad_e))
    dtype = params["controller.out.weight"].dtype
    grads, _ = _mlp_backward(
        params, "controller", cache.activations, grad_logits.astype(dtype)[None, :]
    )
    return grads


def uniform_alpha(blocks: int, groups: int, dtype=np.float32) -> np.ndarray:
    return np.full((blocks, groups), 1.0 / (blocks * groups), dtype=dtype)


# Scorer


@dataclasses.dataclass(frozen=True)
class Structure:
    """Static indexing of one group model.

    :param item_group: Item group index of every item id.
    :param local_user: Row of every user id in the group's user table, or -1.
    """

    blocks: int
    block_dim: int
    item_group: np.ndarray
    local_user: np.ndarray

    def rows_of(self, users: np.ndarray) -> np.ndarray:
        if len(users) and users.max() >= len(self.local_user):
            raise ValueError("Batch contains users outside of the group.")
        rows = self.local_user[users]
        if (rows < 0).any():
            raise ValueError("Batch contains users outside of the group.")
        return rows


def block_scale(alpha: np.ndarray, groups: np.ndarray, block_dim: int) -> np.ndarray:
    """``S[r, n*d + k] = alpha[n, groups[r]]``."""
    return np.repeat(alpha[:, groups].T, block_dim, axis=1)


@dataclasses.dataclass
class LossResult:
    loss: float
    bpr: float
    grads: Parameters
    grad_alpha: np.ndarray
    batch_mean: Optional[np.ndarray] = None
    batch_var: Optional[np.ndarray] = None


def loss_and_grads(
    params: Parameters,
    alpha: np.ndarray,
    batch: BprBatch,
    structure: Structure,
    stats: NormStats,
    *,
    reg: float = 0.0,
    weight_decay: float = 0.0,
    mode: str = TRAIN,
) -> LossResult:
    """BPR over scorer outputs, minus ``reg`` times block diversity, plus decay.

    ``params`` holds the trainable set W: ``items``, ``users`` and the
    ``scorer.*`` layers. Gradients are returned for all of W and for
    ``alpha``.
    """
    items = params["items"]
    users = params["users"]
    size = len(batch)
    dtype = items.dtype

    user_rows = structure.rows_of(batch.users)
    item_ids = np.concatenate([batch.positives, batch.negatives])
    u = users[user_rows]
    h_users = np.concatenate([u, u])

    norm = _normalize(items[item_ids], stats, mode)
    scale = block_scale(
        alpha.astype(dtype), structure.item_group[item_ids], structure.block_dim
    )
    weighted = norm.normalized * scale

    h0 = np.concatenate([h_users, weighted], axis=1)
    logits, activations = _mlp_forward(params, "scorer", h0)
    scores = sigmoid(logits[:, 0])

    x = (scores[:size] - scores[size:]).astype(np.float64)
    bpr = float(np.sum(np.logaddexp(0.0, -x)))
    loss = bpr

    grad_x = -sigmoid(-x)
    grad_scores = np.concatenate([grad_x, -grad_x]).astype(dtype)
    grad_logits = (grad_scores * scores * (1.0 - scores))[:, None]

    grads, grad_h0 = _mlp_backward(params, "scorer", activations, grad_logits)
    dim = users.shape[1]
    grad_h_users = grad_h0[:, :dim]
    grad_weighted = grad_h0[:, dim:]

    grad_users = np.zeros_like(users)
    np.add.at(grad_users, user_rows, grad_h_users[:size] + grad_h_users[size:])

    # Sum of block columns per (block, item group)
    per_row = (grad_weighted * norm.normalized).reshape(
        len(item_ids), structure.blocks, structure.block_dim
    ).sum(axis=2)
    grad_alpha = np.zeros((structure.blocks, alpha.shape[1]), dtype=np.float64)
    np.add.at(grad_alpha.T, structure.item_group[item_ids], per_row)

    grad_rows = _normalize_backward(grad_weighted * scale, norm)
    grad_items = np.zeros_like(items)
    np.add.at(grad_items, item_ids, grad_rows.astype(dtype))

    if reg:
        value, grad = diversity(items, structure.blocks)
        loss -= reg * value
        grad_items = grad_items - reg * grad
    if weight_decay:
        loss += weight_decay * float(
            np.sum(np.square(items, dtype=np.float64))
            + np.sum(np.square(users, dtype=np.float64))
        )
        grad_items = grad_items + 2.0 * weight_decay * items
        grad_users = grad_users + 2.0 * weight_decay * users

    grads["items"] = grad_items.astype(dtype)
    grads["users"] = grad_users.astype(dtype)
    return LossResult(
        loss=loss,
        bpr=bpr,
        grads=grads,
        grad_alpha=grad_alpha,
        batch_mean=norm.batch_mean,
        batch_var=norm.batch_var,
    )


def score_rows(
    params: Parameters,
    alpha: np.ndarray,
    user_rows: np.ndarray,
    item_ids: np.ndarray,
    structure: Structure,
    stats: NormStats,
) -> np.ndarray:
    """Scorer output for (user row, item) pairs with inference normalization."""
    items = params["items"]
    norm = _normalize(items[item_ids], stats, INFERENCE)
    scale = block_scale(
        alpha.astype(items.dtype), structure.item_group[item_ids], structure.block_dim
    )
    h0 = np.concatenate([params["users"][user_rows], norm.normalized * scale], axis=1)
    logits, _ = _mlp_forward(params, "scorer", h0)
    return sigmoid(logits[:, 0])
