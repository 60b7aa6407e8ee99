"""Checkpoint files: a JSON header followed by little-endian raw tensor data.

Layout (version 1)::

    magic      4 bytes   b"HIQF"
    version    uint32 LE
    header_len uint64 LE
    header     UTF-8 JSON {"format", "version", "metadata", "tensors"}
    data       concatenated tensors, row-major, little-endian

``tensors`` maps name -> {"shape", "dtype", "offset", "nbytes"}; offsets are
relative to the start of the data block. Names are namespaced by owner:
``backbone.*``, ``adapters.*``, ``hyper.*``, ``infini.*``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"HIQF"
FORMAT_VERSION = 1
_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "int64": (torch.int64, "<i8"),
}
_TORCH_TO_NAME = {v[0]: k for k, v in _DTYPES.items()}


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor], metadata: dict | None = None) -> None:
    entries, blobs, offset = {}, [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _TORCH_TO_NAME:
            raise CheckpointError(f"unsupported dtype {t.dtype} for tensor {name}")
        dname = _TORCH_TO_NAME[t.dtype]
        raw = t.numpy().astype(_DTYPES[dname][1], copy=False).tobytes(order="C")
        entries[name] = {"shape": list(t.shape), "dtype": dname, "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"format": "hyperinfini-checkpoint", "version": FORMAT_VERSION,
         "metadata": metadata or {}, "tensors": entries},
        sort_keys=True,
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_header(path: str | Path) -> tuple[dict, int]:
    with Path(path).open("rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
    return header, 16 + hlen


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    header, data_start = read_header(path)
    raw = Path(path).read_bytes()[data_start:]
    tensors = {}
    for name, info in header["tensors"].items():
        tdtype, npdtype = _DTYPES[info["dtype"]]
        chunk = raw[info["offset"]: info["offset"] + info["nbytes"]]
        arr = np.frombuffer(chunk, dtype=npdtype).reshape(info["shape"])
        tensors[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True)).to(tdtype)
    return tensors, header["metadata"]
