"""Versioned binary checkpoint of the pretrained tables.

Layout, everything little-endian:

* header ``<4sHIIIIII``: magic ``PEEL``, version, |U|, |V|, N, d, G_v#,
  bytes per parameter
* G_v# ``u32`` item group sizes
* |V| ``u32`` item ids in (group, row) order
* blocks in (group asc, block asc) order, each ``itemsInGroup x d`` float32
  row-major
* user table ``|U| x D`` float32 row-major
"""

import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from pee.core import BlockGrid, BlockLayout, UserEmbeddingTable
from pee.exceptions import FormatError

MAGIC = b"PEEL"
VERSION = 2
HEADER = struct.Struct("<4sHIIIIII")


def encode(grid: BlockGrid, users: UserEmbeddingTable) -> bytes:
    layout = grid.layout
    result = bytearray()
    result.extend(
        HEADER.pack(
            MAGIC,
            VERSION,
            users.n_users,
            layout.n_items,
            layout.blocks,
            layout.block_dim,
            layout.n_groups,
            layout.bytes_per_parameter,
        )
    )
    result.extend(layout.group_sizes.astype("<u4").tobytes())
    result.extend(layout.item_order.astype("<u4").tobytes())
    for group in range(layout.n_groups):
        for block in range(layout.blocks):
            values = grid.block(group, block)
            result.extend(np.ascontiguousarray(values, dtype="<f4").tobytes())
    result.extend(np.ascontiguousarray(users.rows, dtype="<f4").tobytes())
    return bytes(result)


def decode(data: bytes) -> Tuple[BlockGrid, UserEmbeddingTable]:
    if len(data) < HEADER.size:
        raise FormatError("Checkpoint is truncated.")
    (
        magic,
        version,
        n_users,
        n_items,
        blocks,
        block_dim,
        n_groups,
        bytes_per_parameter,
    ) = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"Checkpoint has invalid magic {magic!r}.")
    if version != VERSION:
        raise FormatError(f"Checkpoint version {version} is not supported.")
    if bytes_per_parameter == 0:
        raise FormatError("Checkpoint has zero bytes per parameter.")
    dim = blocks * block_dim
    offset = HEADER.size

    def take(count: int, dtype: str) -> np.ndarray:
        nonlocal offset
        size = count * np.dtype(dtype).itemsize
        if offset + size > len(data):
            raise FormatError("Checkpoint is truncated.")
        array = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
        offset += size
        return array

    sizes = take(n_groups, "<u4").astype(np.int64)
    order = take(n_items, "<u4").astype(np.int64)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    group_items = tuple(
        tuple(int(i) for i in order[bounds[g] : bounds[g + 1]]) for g in range(n_groups)
    )
    layout = BlockLayout(blocks, block_dim, group_items, bytes_per_parameter)

    table = np.zeros((n_items, dim), dtype=np.float32)
    for group in range(n_groups):
        rows = order[bounds[group] : bounds[group + 1]]
        for block in range(blocks):
            values = take(int(sizes[group]) * block_dim, "<f4")
            table[rows, block * block_dim : (block + 1) * block_dim] = values.reshape(
                -1, block_dim
            )
    users = take(n_users * dim, "<f4").reshape(n_users, dim).astype(np.float32)
    if offset != len(data):
        raise FormatError("Checkpoint has trailing data.")
    return BlockGrid(layout, table), UserEmbeddingTable(users)


def save(path: Union[str, Path], grid: BlockGrid, users: UserEmbeddingTable) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(encode(grid, users))
    return path


def load(path: Union[str, Path]) -> Tuple[BlockGrid, UserEmbeddingTable]:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"Checkpoint '{path}' does not exist.")
    with path.open("rb") as handle:
        return decode(handle.read())
