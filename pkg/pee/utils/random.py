from typing import List

import numpy as np

# Stream tags, so that stages never share a random stream.
STREAM_SPLIT = 1
STREAM_SEGMENT = 2
STREAM_PRETRAIN = 3
STREAM_CLUSTER = 4
STREAM_FINETUNE = 5
STREAM_SELECTION = 6
STREAM_SYNTHETIC = 7


def generator(seed: int, *path: int) -> np.random.Generator:
    """Return generator for the stream identified by ``seed`` and ``path``.

    Streams with different paths are independent, which lets parallel workers
    (restarts, user groups) draw disjoint sequences.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *path]))


def spawn(seed: int, count: int, *path: int) -> List[np.random.Generator]:
    """Return ``count`` independent child generators."""
    children = np.random.SeedSequence([int(seed), *path]).spawn(count)
    return [np.random.default_rng(child) for child in children]
