"""Package file format.

Everything little-endian:

* header ``<4sHIIIII``: magic ``PEE1``, version, N, d, G_v#, |V|, user id
* per item group a ``u16`` bitmask of selected blocks (bit ``n`` = block ``n``)
* selected block matrices in (group asc, block asc) order, float32 row-major
* user embedding, D float32
* alpha, ``N x G_v#`` float32 row-major
* metadata: |V| ``u32`` item ids in (group, row) order, ``u32`` bytes per
  parameter

Item group sizes are not stored; they follow from |V| and G_v# by equal
segmentation. The bitmask limits packages to N <= 16.
"""

import struct
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from pee.core import BlockLayout, equal_segment_sizes
from pee.deploy import PeePackage
from pee.exceptions import ConfigurationError, FormatError

MAGIC = b"PEE1"
VERSION = 1
HEADER = struct.Struct("<4sHIIIII")
MAX_BLOCKS = 16


def encode(package: PeePackage) -> bytes:
    layout = package.layout
    if layout.blocks > MAX_BLOCKS:
        raise FormatError(f"Packages support at most {MAX_BLOCKS} blocks per item.")
    expected = equal_segment_sizes(layout.n_items, layout.n_groups)
    if list(layout.group_sizes) != expected:
        raise FormatError("Item groups are not equally segmented.")

    parts: List[bytes] = [
        HEADER.pack(
            MAGIC,
            VERSION,
            layout.blocks,
            layout.block_dim,
            layout.n_groups,
            layout.n_items,
            package.user_id,
        )
    ]
    masks = [sum(1 << b for b in selected) for selected in package.selection]
    parts.append(np.asarray(masks, dtype="<u2").tobytes())
    for group, selected in enumerate(package.selection):
        for block in selected:
            values = package.blocks[(group, block)]
            parts.append(np.ascontiguousarray(values, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(package.user_embedding, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(package.alpha, dtype="<f4").tobytes())
    parts.append(layout.item_order.astype("<u4").tobytes())
    parts.append(struct.pack("<I", layout.bytes_per_parameter))
    return b"".join(parts)


def decode(data: bytes) -> PeePackage:
    if len(data) < HEADER.size:
        raise FormatError("Package is truncated.")
    (
        magic,
        version,
        blocks,
        block_dim,
        n_groups,
        n_items,
        user_id,
    ) = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"Package has invalid magic {magic!r}.")
    if version != VERSION:
        raise FormatError(f"Package version {version} is not supported.")
    if blocks > MAX_BLOCKS:
        raise FormatError(f"Package declares {blocks} blocks per item.")
    offset = HEADER.size

    def take(count: int, dtype: str) -> np.ndarray:
        nonlocal offset
        size = count * np.dtype(dtype).itemsize
        if offset + size > len(data):
            raise FormatError("Package is truncated.")
        array = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
        offset += size
        return array

    sizes = equal_segment_sizes(n_items, n_groups)
    masks = take(n_groups, "<u2")
    selection = tuple(
        tuple(b for b in range(blocks) if int(mask) >> b & 1) for mask in masks.tolist()
    )
    stored: Dict[Tuple[int, int], np.ndarray] = {}
    for group, selected in enumerate(selection):
        for block in selected:
            values = take(sizes[group] * block_dim, "<f4")
            values = values.reshape(sizes[group], block_dim)
            stored[(group, block)] = values.astype(np.float32)
    user = take(blocks * block_dim, "<f4").astype(np.float32)
    alpha = take(blocks * n_groups, "<f4").reshape(blocks, n_groups).astype(np.float32)
    order = take(n_items, "<u4").astype(np.int64)
    (bytes_per_parameter,) = take(1, "<u4").tolist()
    if offset != len(data):
        raise FormatError("Package has trailing data.")

    bounds = np.concatenate([[0], np.cumsum(sizes)])
    layout = BlockLayout(
        blocks,
        block_dim,
        tuple(
            tuple(int(i) for i in order[bounds[g] : bounds[g + 1]])
            for g in range(n_groups)
        ),
        int(bytes_per_parameter),
    )
    package = PeePackage(
        user_id=int(user_id),
        user_embedding=user,
        selection=selection,
        blocks=stored,
        alpha=alpha,
        layout=layout,
        budget=0,
    )
    package.budget = package.byte_size
    try:
        package.validate()
    except ConfigurationError as exc:
        raise FormatError(f"Package is damaged: {exc}")
    return package


def save(path: Union[str, Path], package: PeePackage) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(encode(package))
    return path


def load(path: Union[str, Path]) -> PeePackage:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"Package '{path}' does not exist.")
    return decode(path.read_bytes())
