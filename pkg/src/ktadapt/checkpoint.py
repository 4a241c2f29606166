"""Plain-text weight dump with a shape header per tensor.

Layout::

    ktadapt-checkpoint 1
    kind <kind>
    meta <key> <value>          (any number)
    tensor <name> <ndim> <dim>...
    <values, space separated, row-major>
    ...

Floats are written with ``repr``, which round-trips float64 exactly.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
MAGIC = "ktadapt-checkpoint"


class CheckpointError(ValueError):
    pass


def save(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    lines = [f"{MAGIC} {FORMAT_VERSION}", f"kind {kind}"]
    for key, val in meta.items():
        lines.append(f"meta {key} {val}")
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        lines.append(f"tensor {name} {arr.ndim} {' '.join(map(str, arr.shape))}".rstrip())
        lines.append(" ".join(repr(x) for x in arr.ravel().tolist()))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load(path) -> tuple[str, dict[str, str], dict[str, np.ndarray]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = int(lines[0].split()[1])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    kind = lines[1].split(maxsplit=1)[1]
    meta: dict[str, str] = {}
    arrays: dict[str, np.ndarray] = {}
    i = 2
    while i < len(lines):
        head = lines[i].split()
        if head[0] == "meta":
            meta[head[1]] = " ".join(head[2:])
            i += 1
        elif head[0] == "tensor":
            name, ndim = head[1], int(head[2])
            shape = tuple(int(x) for x in head[3:3 + ndim])
            body = lines[i + 1].split()
            arr = np.array([float(x) for x in body], dtype=np.float64)
            if arr.size != int(np.prod(shape)):
                raise CheckpointError(f"{path}: tensor {name} has {arr.size} values for shape {shape}")
            arrays[name] = arr.reshape(shape)
            i += 2
        else:
            raise CheckpointError(f"{path}: unexpected line {i + 1}: {lines[i][:40]!r}")
    return kind, meta, arrays
