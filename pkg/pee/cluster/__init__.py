"""K-means partition of users over their pretrained embeddings."""

from __future__ import annotations

import dataclasses
import struct
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from pee import logger, utils
from pee.exceptions import ClusteringError, ConfigurationError, FormatError

pipeline_log = logger.Pipeline.logger()

CENTROID_MAGIC = b"PEEC"
CENTROID_VERSION = 1
CENTROID_HEADER = struct.Struct("<4sHII")


@dataclasses.dataclass
class ClusterState:
    centroids: np.ndarray
    assignment: np.ndarray
    within_cluster_variance: float
    history: List[float] = dataclasses.field(default_factory=list)

    @property
    def n_groups(self) -> int:
        return self.centroids.shape[0]

    def members(self, group: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == group)

    def groups(self) -> List[Tuple[int, ...]]:
        return [tuple(int(u) for u in self.members(g)) for g in range(self.n_groups)]


def squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """``|points| x |centroids|`` matrix of squared Euclidean distances."""
    distances = (
        np.sum(np.square(points), axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + np.sum(np.square(centroids), axis=1)[None, :]
    )
    return np.maximum(distances, 0.0)


def kmeans_plusplus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n_points = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(0, n_points)]
    closest = squared_distances(points, centroids[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # All points coincide with chosen centroids
            index = rng.integers(0, n_points)
        else:
            index = rng.choice(n_points, p=closest / total)
        centroids[i] = points[index]
        distances = squared_distances(points, centroids[i : i + 1])[:, 0]
        closest = np.minimum(closest, distances)
    return centroids


def _assign(points: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    distances = squared_distances(points, centroids)
    # argmin returns the first minimum, ties go to the lowest group index
    labels = np.argmin(distances, axis=1)
    return labels, distances[np.arange(len(points)), labels]


def _repair_empty(
    points: np.ndarray, centroids: np.ndarray, labels: np.ndarray, closest: np.ndarray
) -> None:
    """Give every empty cluster the point farthest from its centroid."""
    k = centroids.shape[0]
    for group in range(k):
        if (labels == group).any():
            continue
        counts = np.bincount(labels, minlength=k)
        movable = counts[labels] > 1
        if not movable.any():
            raise ClusteringError("Not enough distinct points to fill every cluster.")
        candidates = np.flatnonzero(movable)
        index = candidates[np.argmax(closest[candidates])]
        labels[index] = group
        closest[index] = 0.0
        centroids[group] = points[index]


def lloyd(
    points: np.ndarray,
    centroids: np.ndarray,
    *,
    max_iters: int,
    tol: float,
) -> ClusterState:
    """Lloyd iterations from given centroids.

    Variance is recorded after every assignment step and has to be
    non-increasing.
    """
    centroids = centroids.astype(np.float64, copy=True)
    history: List[float] = []
    labels, closest = _assign(points, centroids)
    _repair_empty(points, centroids, labels, closest)
    history.append(float(closest.sum()))

    for _ in range(max_iters):
        updated = np.empty_like(centroids)
        for group in range(centroids.shape[0]):
            updated[group] = points[labels == group].mean(axis=0)
        shift = float(np.sqrt(np.sum(np.square(updated - centroids))))
        centroids = updated

        labels, closest = _assign(points, centroids)
        _repair_empty(points, centroids, labels, closest)
        variance = float(closest.sum())
        if variance > history[-1] * (1.0 + 1e-9) + 1e-12:
            raise ClusteringError(
                f"Within-cluster variance increased from {history[-1]} to {variance}."
            )
        history.append(variance)
        if shift < tol:
            break

    # Final centroids are means of the final assignment
    for group in range(centroids.shape[0]):
        centroids[group] = points[labels == group].mean(axis=0)
    labels, closest = _assign(points, centroids)
    if np.bincount(labels, minlength=centroids.shape[0]).min() == 0:
        _repair_empty(points, centroids, labels, closest)
    return ClusterState(centroids, labels, float(closest.sum()), history)


def kmeans_users(
    users: np.ndarray,
    groups: int,
    seed: int,
    *,
    max_iters: int = 100,
    tol: float = 1e-4,
    restarts: int = 10,
    threads: int = 1,
) -> ClusterState:
    """Partition user embeddings into ``groups`` clusters.

    Every restart seeds with k-means++ from its own derived stream; the
    restart with the lowest within-cluster variance wins (ties go to the
    earlier restart).
    """
    n_users = users.shape[0]
    if groups > n_users:
        raise ConfigurationError(
            f"Cannot create {groups} user groups from {n_users} users."
        )
    if groups <= 0:
        raise ConfigurationError("Number of user groups has to be positive.")
    points = np.asarray(users, dtype=np.float64)
    generators = utils.random.spawn(seed, restarts, utils.random.STREAM_CLUSTER)

    def restart(rng: np.random.Generator) -> ClusterState:
        initial = kmeans_plusplus(points, groups, rng)
        return lloyd(points, initial, max_iters=max_iters, tol=tol)

    if threads > 1 and restarts > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            states = list(pool.map(restart, generators))
    else:
        states = [restart(rng) for rng in generators]

    best = min(
        range(len(states)), key=lambda i: (states[i].within_cluster_variance, i)
    )
    state = states[best]
    sizes = np.bincount(state.assignment, minlength=groups).tolist()
    pipeline_log.info(
        "cluster",
        f"Best of {restarts} restarts has variance "
        f"{state.within_cluster_variance:.4f}, group sizes {sizes}.",
    )
    return state


# Files


def save_assignment(path: Union[str, Path], state: ClusterState) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for user, group in enumerate(state.assignment.tolist()):
            handle.write(f"{user}\t{group}\n")
    return path


def load_assignment(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    pairs: List[Tuple[int, int]] = []
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                user, group = (int(v) for v in line.split("\t"))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: expected 'userId<TAB>groupIndex'.")
            pairs.append((user, group))
    assignment = np.full(len(pairs), -1, dtype=np.int64)
    for user, group in pairs:
        if not 0 <= user < len(pairs) or group < 0:
            raise FormatError(f"{path}: user {user} or group {group} is out of range.")
        assignment[user] = group
    if (assignment < 0).any():
        raise FormatError(f"{path}: some users have no group.")
    return assignment


def save_centroids(path: Union[str, Path], centroids: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    groups, dim = centroids.shape
    with path.open("wb") as handle:
        header = CENTROID_HEADER.pack(CENTROID_MAGIC, CENTROID_VERSION, groups, dim)
        handle.write(header)
        handle.write(np.ascontiguousarray(centroids, dtype="<f4").tobytes())
    return path


def load_centroids(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < CENTROID_HEADER.size:
        raise FormatError(f"'{path}' is truncated.")
    magic, version, groups, dim = CENTROID_HEADER.unpack_from(data)
    if magic != CENTROID_MAGIC or version != CENTROID_VERSION:
        raise FormatError(f"'{path}' is not a centroid file.")
    if len(data) - CENTROID_HEADER.size != groups * dim * 4:
        raise FormatError(f"'{path}' has a wrong size.")
    values = np.frombuffer(data, dtype="<f4", offset=CENTROID_HEADER.size)
    return values.reshape(groups, dim).astype(np.float32)
