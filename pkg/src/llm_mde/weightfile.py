"""Little-endian tensor container.

Layout::

    b"LMDE1"
    uint32 n_fields, then n_fields x int32 config values
    uint32 n_tensors, then per tensor:
        uint32 name_len, name (utf-8), uint32 rank, rank x uint32 dims,
        float32 row-major data

LoRA adapters are stored as ``lora.{target}.A``, ``lora.{target}.B`` and
``lora.{target}.meta`` (``[alpha, rank]``).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import WeightLoadError
from .lora import LoraLinear

MAGIC = b"LMDE1"
ADAPTER_TAG = ".adapter."


def write_tensors(path, header: list[int], tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(struct.pack(f"<{len(header)}i", *header))
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_tensors(path) -> tuple[list[int], dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise WeightLoadError(f"cannot read {path}: {exc}") from exc
    if not data.startswith(MAGIC):
        raise WeightLoadError(f"{path}: bad magic")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise WeightLoadError(f"{path}: truncated")
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    (n_fields,) = take("<I")
    header = list(take(f"<{n_fields}i"))
    (n_tensors,) = take("<I")
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = take("<I")
        if pos + name_len > len(data):
            raise WeightLoadError(f"{path}: truncated")
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}I")
        count = int(np.prod(dims, dtype=np.int64))
        if pos + 4 * count > len(data):
            raise WeightLoadError(f"{path}: truncated tensor {name}")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
        pos += 4 * count
    return header, tensors


def named_tensors(module: nn.Module) -> dict[str, np.ndarray]:
    out = {}
    for key, value in module.state_dict().items():
        if not value.is_floating_point():
            continue  # batch-norm step counters
        arr = value.detach().cpu().numpy().astype(np.float32)
        if ADAPTER_TAG in key:
            target, leaf = key.split(ADAPTER_TAG)
            out[f"lora.{target}.{leaf}"] = arr
        else:
            out[key] = arr
    for name, m in module.named_modules():
        if isinstance(m, LoraLinear) and m.adapter is not None:
            out[f"lora.{name}.meta"] = np.array([m.adapter.alpha, m.adapter.rank], dtype=np.float32)
    return out


def save_module(module: nn.Module, path, header: list[int]) -> None:
    write_tensors(path, header, named_tensors(module))


def load_into(module: nn.Module, path, header: list[int], strict: bool = True) -> None:
    """Copy tensors from ``path`` into ``module``; header must match (prefix match if not strict)."""
    file_header, tensors = read_tensors(path)
    if file_header[:len(header)] != header or (strict and file_header != header):
        raise WeightLoadError(f"config mismatch: file {file_header}, expected {header}")

    layers = dict(module.named_modules())
    for key in sorted(k for k in tensors if k.startswith("lora.") and k.endswith(".meta")):
        target = key[len("lora."):-len(".meta")]
        layer = layers.get(target)
        if not isinstance(layer, LoraLinear):
            if strict:
                raise WeightLoadError(f"adapter target {target!r} is not a LoRA-capable layer")
            continue
        alpha, rank = (float(v) for v in tensors[key])
        if layer.adapter is None:
            layer.attach(int(rank), alpha, seed=0, target=target)
        elif layer.adapter.rank != int(rank):
            raise WeightLoadError(f"{target}: adapter rank {layer.adapter.rank} vs file {int(rank)}")
        layer.adapter.alpha = alpha

    state = module.state_dict()
    seen = set()
    for key, arr in tensors.items():
        if key.endswith(".meta") and key.startswith("lora."):
            continue
        if key.startswith("lora."):
            target, leaf = key[len("lora."):].rsplit(".", 1)
            key = f"{target}{ADAPTER_TAG}{leaf}"
        if key not in state:
            if strict:
                raise WeightLoadError(f"unexpected tensor {key!r}")
            continue
        if tuple(state[key].shape) != arr.shape:
            raise WeightLoadError(f"{key}: shape {arr.shape} vs expected {tuple(state[key].shape)}")
        with torch.no_grad():
            state[key].copy_(torch.from_numpy(arr))
        seen.add(key)
    if strict:
        missing = [k for k, v in state.items() if v.is_floating_point() and k not in seen]
        if missing:
            raise WeightLoadError(f"missing tensors: {missing[:5]}")
