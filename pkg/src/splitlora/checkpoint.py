"""Binary checkpoints for base weights and adapter sets.

Layout (all little-endian)::

    magic      4 bytes  b"SLRA"
    version    u32      1
    kind       u32      1 = base weights, 2 = adapter set
    config     8 x u32  num_blocks hidden num_heads ffn_mult vocab seq_len num_classes lora_rank
               f64      lora_alpha
    count      u32      number of tensors
    tensors    count x (rank u32, dims rank x u32, data prod(dims) x f64)

Adapter sets are written with a JSON manifest next to the binary
(``<path>.manifest.json``) listing name, block, target, owner and shape of
every tensor in file order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import ValidationError
from .model import (AdapterSet, BaseWeights, BlockWeights, LoraAdapter, ModelConfig, Partition)

MAGIC = b"SLRA"
VERSION = 1
KIND_BASE = 1
KIND_ADAPTERS = 2
_CONFIG_INTS = ("num_blocks", "hidden", "num_heads", "ffn_mult", "vocab", "seq_len",
                "num_classes", "lora_rank")
_BLOCK_FIELDS = ("wq", "wk", "wv", "wo", "w1", "w2", "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta")


def _header(kind: int, config: ModelConfig, count: int) -> bytes:
    ints = [getattr(config, k) for k in _CONFIG_INTS]
    return (MAGIC + struct.pack("<II", VERSION, kind) + struct.pack("<8I", *ints)
            + struct.pack("<d", config.lora_alpha) + struct.pack("<I", count))


def _write_tensor(fh, arr: np.ndarray) -> None:
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read(path) -> tuple[int, ModelConfig, list[np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValidationError(f"{path}: not a checkpoint (bad magic {buf[:4]!r})")
    version, kind = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported version {version}")
    ints = struct.unpack_from("<8I", buf, 12)
    (alpha,) = struct.unpack_from("<d", buf, 44)
    (count,) = struct.unpack_from("<I", buf, 52)
    config = ModelConfig(**dict(zip(_CONFIG_INTS, ints)), lora_alpha=alpha)
    off = 56
    arrays = []
    for _ in range(count):
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arrays.append(np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(dims).astype(np.float64))
        off += 8 * n
    if off != len(buf):
        raise ValidationError(f"{path}: {len(buf) - off} trailing bytes")
    return kind, config, arrays


def save_base(path, base: BaseWeights) -> None:
    tensors = base.tensors()
    with open(path, "wb") as fh:
        fh.write(_header(KIND_BASE, base.config, len(tensors)))
        for t in tensors:
            _write_tensor(fh, t.data)


def load_base(path) -> BaseWeights:
    kind, config, arrays = _read(path)
    if kind != KIND_BASE:
        raise ValidationError(f"{path}: holds kind {kind}, expected base weights")
    it = iter(arrays)
    tok, pos = Tensor(next(it)), Tensor(next(it))
    blocks = {}
    for i in range(config.num_blocks):
        blocks[i] = BlockWeights(**{f: Tensor(next(it)) for f in _BLOCK_FIELDS})
    return BaseWeights(config, tok, pos, blocks)


def manifest(adapters: AdapterSet, partition: Partition | None = None) -> list[dict]:
    rows = []
    for name, t in adapters.named_tensors().items():
        parts = name.split(".")
        if parts[0] == "blocks":
            block, target = int(parts[1]), parts[2]
            owner = partition.owner(block) if partition else "global"
        else:
            block, target = None, "head"
            owner = "server" if partition else "global"
        rows.append({"name": name, "block": block, "target": target, "owner": owner,
                     "shape": list(t.shape)})
    return rows


def save_adapters(path, adapters: AdapterSet, config: ModelConfig,
                  partition: Partition | None = None) -> None:
    named = adapters.named_tensors()
    with open(path, "wb") as fh:
        fh.write(_header(KIND_ADAPTERS, config, len(named)))
        for t in named.values():
            _write_tensor(fh, t.data)
    doc = {"cut": partition.cut if partition else None, "tensors": manifest(adapters, partition)}
    Path(f"{path}.manifest.json").write_text(json.dumps(doc, indent=1))


def load_adapters(path) -> tuple[AdapterSet, ModelConfig]:
    kind, config, arrays = _read(path)
    if kind != KIND_ADAPTERS:
        raise ValidationError(f"{path}: holds kind {kind}, expected an adapter set")
    mpath = Path(f"{path}.manifest.json")
    if mpath.exists():
        names = [row["name"] for row in json.loads(mpath.read_text())["tensors"]]
    else:
        names = list(_full_names(config))
    if len(names) != len(arrays):
        raise ValidationError(f"{path}: manifest lists {len(names)} tensors, file has {len(arrays)}")
    values = dict(zip(names, arrays))
    adapters = {}
    for name in names:
        parts = name.split(".")
        if parts[0] == "blocks" and parts[3] == "A":
            b, t = int(parts[1]), parts[2]
            adapters[(b, t)] = LoraAdapter(
                b, t, Tensor(values[name], requires_grad=True, name=name),
                Tensor(values[f"blocks.{b}.{t}.B"], requires_grad=True, name=f"blocks.{b}.{t}.B"),
                config.scaling)
    head = "head.weight" in values
    return AdapterSet(
        config.num_blocks, adapters,
        Tensor(values["head.weight"], requires_grad=True, name="head.weight") if head else None,
        Tensor(values["head.bias"], requires_grad=True, name="head.bias") if head else None,
    ), config


def _full_names(config: ModelConfig):
    for b in range(config.num_blocks):
        for t in ("q", "v"):
            yield f"blocks.{b}.{t}.A"
            yield f"blocks.{b}.{t}.B"
    yield "head.weight"
    yield "head.bias"
