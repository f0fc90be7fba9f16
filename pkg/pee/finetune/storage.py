"""Binary file of a frozen group model.

Everything little-endian:

* header ``<4sHIIIIIIId``: magic ``PEEG``, version, group index, N, d,
  G_v#, |V|, member count, bytes per parameter, epsilon (float64)
* G_v# ``u32`` item group sizes, |V| ``u32`` item ids in (group, row) order
* member ``u32`` user ids
* alpha ``N x G_v#`` float32
* running mean and running variance, D float32 each
* item table ``|V| x D`` float32 in item id order
* user rows ``members x D`` float32

Scorer and controller weights are not stored, deployment does not use them.
"""

import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

from pee.core import BlockLayout
from pee.exceptions import FormatError
from pee.finetune import GroupModel
from pee.finetune.network import NormStats

MAGIC = b"PEEG"
VERSION = 2
HEADER = struct.Struct("<4sHIIIIIIId")


def encode(model: GroupModel) -> bytes:
    layout = model.layout
    header = HEADER.pack(
        MAGIC,
        VERSION,
        model.group,
        layout.blocks,
        layout.block_dim,
        layout.n_groups,
        layout.n_items,
        len(model.members),
        layout.bytes_per_parameter,
        model.norm.epsilon,
    )
    parts = [
        header,
        layout.group_sizes.astype("<u4").tobytes(),
        layout.item_order.astype("<u4").tobytes(),
        model.members.astype("<u4").tobytes(),
        model.alpha.astype("<f4").tobytes(),
        model.norm.mean.astype("<f4").tobytes(),
        model.norm.var.astype("<f4").tobytes(),
        np.ascontiguousarray(model.params["items"], dtype="<f4").tobytes(),
        np.ascontiguousarray(model.params["users"], dtype="<f4").tobytes(),
    ]
    return b"".join(parts)


def decode(data: bytes) -> GroupModel:
    if len(data) < HEADER.size:
        raise FormatError("Group model file is truncated.")
    (
        magic,
        version,
        group,
        blocks,
        block_dim,
        n_groups,
        n_items,
        n_members,
        bytes_per_parameter,
        epsilon,
    ) = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"Group model has invalid magic {magic!r}.")
    if version != VERSION:
        raise FormatError(f"Group model version {version} is not supported.")
    if bytes_per_parameter == 0:
        raise FormatError("Group model has zero bytes per parameter.")

    dim = blocks * block_dim
    offset = HEADER.size

    def take(count: int, dtype: str) -> np.ndarray:
        nonlocal offset
        size = count * np.dtype(dtype).itemsize
        if offset + size > len(data):
            raise FormatError("Group model file is truncated.")
        array = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
        offset += size
        return array

    sizes = take(n_groups, "<u4").astype(np.int64)
    order = take(n_items, "<u4").astype(np.int64)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    layout = BlockLayout(
        blocks,
        block_dim,
        tuple(
            tuple(int(i) for i in order[bounds[g] : bounds[g + 1]])
            for g in range(n_groups)
        ),
        bytes_per_parameter,
    )
    members = take(n_members, "<u4").astype(np.int64)
    alpha = take(blocks * n_groups, "<f4").reshape(blocks, n_groups).astype(np.float32)
    mean = take(dim, "<f4").astype(np.float32)
    var = take(dim, "<f4").astype(np.float32)
    items = take(n_items * dim, "<f4").reshape(n_items, dim).astype(np.float32)
    users = take(n_members * dim, "<f4").reshape(n_members, dim).astype(np.float32)
    if offset != len(data):
        raise FormatError("Group model file has trailing data.")

    params: Dict[str, np.ndarray] = {"items": items, "users": users}
    return GroupModel(
        group=group,
        layout=layout,
        members=members,
        params=params,
        controller={},
        norm=NormStats(mean, var, float(epsilon)),
        popularity=np.zeros(n_groups, dtype=np.float32),
        alpha=alpha,
        frozen=True,
    )


def path_of(directory: Union[str, Path], group: int) -> Path:
    return Path(directory) / f"group_{group:03d}.bin"


def save(directory: Union[str, Path], model: GroupModel) -> Path:
    path = path_of(directory, model.group)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(encode(model))
    return path


def load(path: Union[str, Path]) -> GroupModel:
    path = Path(path)
    if path.is_dir():
        raise FormatError(f"'{path}' is a directory, expected a group model file.")
    if not path.is_file():
        raise FormatError(f"Group model '{path}' does not exist.")
    return decode(path.read_bytes())


def load_all(directory: Union[str, Path]) -> Dict[int, GroupModel]:
    models = {}
    for path in sorted(Path(directory).glob("group_*.bin")):
        model = load(path)
        models[model.group] = model
    return models
