import numpy as np
import pytest

from pee import cluster
from pee.exceptions import ClusteringError, ConfigurationError, FormatError

POINTS = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]])


def test_kmeans_separates_pairs():
    state = cluster.kmeans_users(POINTS, 2, seed=0)
    left, right = state.assignment[0], state.assignment[2]
    assert left != right
    assert [left, left, right, right] == state.assignment.tolist()
    assert np.allclose([0.0, 0.5], state.centroids[left])
    assert np.allclose([10.0, 0.5], state.centroids[right])
    assert np.isclose(1.0, state.within_cluster_variance)


def test_kmeans_single_group_is_global_mean():
    rng = np.random.default_rng(1)
    points = rng.standard_normal((30, 3))
    state = cluster.kmeans_users(points, 1, seed=0)
    assert np.allclose(points.mean(axis=0), state.centroids[0])
    scatter = np.sum(np.square(points - points.mean(axis=0)))
    assert np.isclose(scatter, state.within_cluster_variance)
    assert [tuple(range(30))] == state.groups()


def test_kmeans_too_many_groups():
    with pytest.raises(ConfigurationError):
        cluster.kmeans_users(POINTS, 5, seed=0)


def test_kmeans_variance_is_monotone():
    rng = np.random.default_rng(2)
    points = rng.standard_normal((100, 4))
    state = cluster.lloyd(
        points, points[rng.choice(100, 6, replace=False)], max_iters=50, tol=0.0
    )
    assert all(a >= b for a, b in zip(state.history, state.history[1:]))


def test_kmeans_no_empty_clusters():
    # Duplicated points force repairs
    points = np.array([[0.0, 0.0]] * 5 + [[1.0, 1.0]] * 3 + [[5.0, 5.0]])
    state = cluster.kmeans_users(points, 3, seed=4, restarts=3)
    assert 3 == len(set(state.assignment.tolist()))
    assert all(len(group) for group in state.groups())


def test_kmeans_cannot_fill_clusters_from_identical_points():
    points = np.zeros((3, 2))
    centroids = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    with pytest.raises(ClusteringError):
        cluster.lloyd(points, centroids, max_iters=5, tol=0.0)


def _oracle_objective(points: np.ndarray, k: int, restarts: int) -> float:
    """Best plain Lloyd objective over random-partition initializations."""
    rng = np.random.default_rng(123)
    best = np.inf
    for _ in range(restarts):
        centroids = points[rng.choice(len(points), k, replace=False)].copy()
        for _ in range(300):
            differences = points[:, None, :] - centroids[None, :, :]
            distances = np.square(differences).sum(axis=2)
            labels = distances.argmin(axis=1)
            updated = np.array(
                [
                    (
                        points[labels == g].mean(axis=0)
                        if (labels == g).any()
                        else centroids[g]
                    )
                    for g in range(k)
                ]
            )
            if np.allclose(updated, centroids):
                break
            centroids = updated
        distances = np.square(points[:, None, :] - centroids[None, :, :]).sum(axis=2)
        best = min(best, float(distances.min(axis=1).sum()))
    return best


def test_kmeans_close_to_multi_restart_oracle():
    rng = np.random.default_rng(5)
    points = rng.standard_normal((200, 4))
    state = cluster.kmeans_users(points, 5, seed=0, tol=1e-8, max_iters=300)
    assert state.within_cluster_variance <= 1.05 * _oracle_objective(points, 5, 50)


def test_kmeans_deterministic_across_threads():
    rng = np.random.default_rng(6)
    points = rng.standard_normal((60, 3))
    serial = cluster.kmeans_users(points, 4, seed=3)
    parallel = cluster.kmeans_users(points, 4, seed=3, threads=4)
    assert np.array_equal(serial.assignment, parallel.assignment)
    assert np.array_equal(serial.centroids, parallel.centroids)


def test_assignment_roundtrip(tmp_path):
    state = cluster.kmeans_users(POINTS, 2, seed=0)
    path = cluster.save_assignment(tmp_path / "assignment.tsv", state)
    assert np.array_equal(state.assignment, cluster.load_assignment(path))
    first = path.read_text(encoding="utf-8").splitlines()[0]
    assert f"0\t{state.assignment[0]}" == first


@pytest.mark.parametrize("content", ["0\t1\nx\t0\n", "0\t0\n5\t1\n", "1\t0\n1\t1\n"])
def test_assignment_invalid(tmp_path, content: str):
    path = tmp_path / "assignment.tsv"
    path.write_text(content, encoding="utf-8")
    with pytest.raises(FormatError):
        cluster.load_assignment(path)


def test_centroids_roundtrip(tmp_path):
    centroids = np.arange(6, dtype=np.float32).reshape(2, 3)
    path = cluster.save_centroids(tmp_path / "centroids.bin", centroids)
    assert np.array_equal(centroids, cluster.load_centroids(path))


def test_centroids_invalid(tmp_path):
    path = cluster.save_centroids(tmp_path / "centroids.bin", np.ones((2, 3)))
    data = path.read_bytes()
    path.write_bytes(data[:-2])
    with pytest.raises(FormatError):
        cluster.load_centroids(path)
    path.write_bytes(b"PEE")
    with pytest.raises(FormatError):
        cluster.load_centroids(path)
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        cluster.load_centroids(path)
