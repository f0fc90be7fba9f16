"""Finite differences and small fixtures shared by the test modules."""

from typing import Callable, Dict

import numpy as np

from pee.core import InteractionLog, Role
from pee.data import BprBatch
from pee.finetune import GroupModel
from pee.finetune.network import NormStats


def numeric_gradient(
    function: Callable[[], float], array: np.ndarray, eps: float = 1e-6
) -> np.ndarray:
    """Central differences of ``function`` w.r.t. every entry of ``array``.

    ``array`` is perturbed in place and restored afterwards.
    """
    grad = np.zeros(array.shape, dtype=np.float64)
    flat = array.reshape(-1)
    for index in range(flat.size):
        original = flat[index]
        flat[index] = original + eps
        plus = function()
        flat[index] = original - eps
        minus = function()
        flat[index] = original
        grad.reshape(-1)[index] = (plus - minus) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


def check_gradients(
    function: Callable[[], float],
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    tolerance: float = 1e-4,
) -> None:
    for name, grad in grads.items():
        numeric = numeric_gradient(function, params[name])
        error = relative_error(np.asarray(grad, dtype=np.float64), numeric)
        assert error < tolerance, f"{name}: relative error {error}"


def toy_log(n_users: int, n_items: int, edges, roles=None) -> InteractionLog:
    """Log from ``(user, item)`` edges, all of them train unless ``roles``."""
    edges = np.asarray(edges, dtype=np.int64)
    if roles is None:
        roles = np.full(len(edges), Role.TRAIN, dtype=np.int64)
    return InteractionLog(
        n_users=n_users,
        n_items=n_items,
        users=edges[:, 0],
        items=edges[:, 1],
        roles=np.asarray(roles, dtype=np.int64),
    )


def batch_of(triples, role: Role = Role.TRAIN) -> BprBatch:
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    return BprBatch(triples[:, 0], triples[:, 1], triples[:, 2], role)


def group_model(layout, alpha, members=(3, 7), seed: int = 0) -> GroupModel:
    """Frozen group model with random tables and identity normalization."""
    rng = np.random.default_rng(seed)
    return GroupModel(
        group=0,
        layout=layout,
        members=np.asarray(members, dtype=np.int64),
        params={
            "items": rng.standard_normal((layout.n_items, layout.dim)).astype(
                np.float32
            ),
            "users": rng.standard_normal((len(members), layout.dim)).astype(np.float32),
        },
        controller={},
        norm=NormStats(
            np.zeros(layout.dim, dtype=np.float32),
            np.ones(layout.dim, dtype=np.float32),
        ),
        popularity=np.full(layout.n_groups, 1.0 / layout.n_groups, dtype=np.float32),
        alpha=np.asarray(alpha, dtype=np.float32),
        frozen=True,
    )
