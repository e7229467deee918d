"""Checkpoint files: text header, config echo, then named float32 blobs.

Layout::

    PHN-CKPT v1
    config <n_bytes>
    <config text, n_bytes of UTF-8>
    tensors <count>
    <name> <d0>x<d1>...        (one line per tensor, then its raw '<f4' bytes)
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PHN-CKPT v1\n"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray], config_text: str = "") -> None:
    cfg = config_text.encode("utf-8")
    parts = [MAGIC, f"config {len(cfg)}\n".encode(), cfg, f"tensors {len(tensors)}\n".encode()]
    for name, arr in tensors.items():
        if any(c.isspace() for c in name):
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        arr = np.asarray(arr)
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        parts.append(f"{name} {shape}\n".encode())
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[str, dict[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: missing PHN-CKPT v1 magic")
    pos = len(MAGIC)

    def line() -> str:
        nonlocal pos
        end = blob.index(b"\n", pos)
        text = blob[pos:end].decode()
        pos = end + 1
        return text

    try:
        key, n = line().split()
        if key != "config":
            raise CheckpointError(f"{path}: expected config block")
        config_text = blob[pos : pos + int(n)].decode("utf-8")
        pos += int(n)
        key, count = line().split()
        if key != "tensors":
            raise CheckpointError(f"{path}: expected tensors block")
        tensors: dict[str, np.ndarray] = {}
        for _ in range(int(count)):
            name, shape_text = line().split()
            shape = () if shape_text == "scalar" else tuple(int(d) for d in shape_text.split("x"))
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(blob):
                raise CheckpointError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(blob[pos : pos + nbytes], dtype="<f4").reshape(shape).copy()
            pos += nbytes
    except (ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    return config_text, tensors
