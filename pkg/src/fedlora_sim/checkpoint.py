"""Binary checkpoint of trainable parameters.

Layout (all integers little-endian)::

    magic     8 bytes   b"FLSCKPT1"
    count     uint32    number of tensors
    repeated count times:
      name_len  uint16
      name      name_len bytes, UTF-8 (e.g. "lora.3.B_v", "head.W")
      ndim      uint8
      dims      ndim x uint32
      data      prod(dims) x float64, little-endian, row-major

Tensors appear in :meth:`TrainableParams.named_tensors` order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ShapeError
from .model import LORA_KEYS, TrainableParams

MAGIC = b"FLSCKPT1"


def save_checkpoint(params: TrainableParams, path) -> None:
    with open(path, "wb") as fh:
        tensors = params.named_tensors()
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> TrainableParams:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ShapeError(f"{path} is not a checkpoint file")
    pos = 8
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(blob):
        raise ShapeError(f"{path} has {len(blob) - pos} trailing bytes")
    n_layers = len({k.split(".")[1] for k in tensors if k.startswith("lora.")})
    try:
        lora = [{k: tensors[f"lora.{j}.{k}"] for k in LORA_KEYS} for j in range(n_layers)]
        head = {"W": tensors["head.W"], "b": tensors["head.b"]}
    except KeyError as exc:
        raise ShapeError(f"checkpoint is missing tensor {exc}") from None
    return TrainableParams(lora, head)
