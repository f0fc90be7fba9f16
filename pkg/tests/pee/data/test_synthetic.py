import numpy as np

from pee import data
from pee.data import synthetic


def test_planted_structure():
    pairs, user_clusters, item_clusters = synthetic.generate_planted(
        200, 200, 4, 0.5, 0.02, seed=0
    )
    users = np.array([u for u, _ in pairs])
    items = np.array([i for _, i in pairs])
    same = user_clusters[users] == item_clusters[items]
    # Expected within-cluster share is 0.5 / (0.5 + 3 * 0.02) ~ 0.89
    assert 0.85 < same.mean() < 0.93
    assert [50, 50, 50, 50] == np.bincount(item_clusters).tolist()


def test_planted_is_seeded():
    first, _, _ = synthetic.generate_planted(50, 40, 2, 0.5, 0.05, seed=1)
    second, _, _ = synthetic.generate_planted(50, 40, 2, 0.5, 0.05, seed=1)
    third, _, _ = synthetic.generate_planted(50, 40, 2, 0.5, 0.05, seed=2)
    assert first == second
    assert first != third


def test_planted_tsv_loads(tmp_path):
    pairs, _, _ = synthetic.generate_planted(60, 60, 3, 0.5, 0.02, seed=0)
    path = synthetic.write_tsv(tmp_path / "planted.tsv", pairs)
    log = data.load_and_filter(path, 5)
    assert log.n_users > 50
    assert log.n_items > 50
    assert len(log) <= len(pairs)
