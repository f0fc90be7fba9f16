"""Planted-structure interaction data.

Users and items are drawn from latent clusters. A user interacts with an item
of its own cluster with probability ``p_in`` and with any other item with
probability ``p_out``. The structure is strong enough that a working
pipeline beats random ranking by a wide margin.
"""

from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from pee import utils


def generate_planted(
    n_users: int,
    n_items: int,
    clusters: int,
    p_in: float,
    p_out: float,
    seed: int,
) -> Tuple[List[Tuple[int, int]], np.ndarray, np.ndarray]:
    """Return ``(pairs, user_clusters, item_clusters)``."""
    rng = utils.random.generator(seed, utils.random.STREAM_SYNTHETIC)
    user_clusters = rng.integers(0, clusters, size=n_users)
    item_clusters = np.arange(n_items) % clusters
    rng.shuffle(item_clusters)

    same = user_clusters[:, None] == item_clusters[None, :]
    probability = np.where(same, p_in, p_out)
    hits = rng.random((n_users, n_items)) < probability
    users, items = np.nonzero(hits)
    pairs = [(int(u), int(i)) for u, i in zip(users, items)]
    return pairs, user_clusters, item_clusters


def write_tsv(path: Union[str, Path], pairs: List[Tuple[int, int]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        handle.write("# userId\titemId\n")
        for user, item in pairs:
            handle.write(f"u{user}\ti{item}\n")
    return path
