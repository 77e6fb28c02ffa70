"""Pairing of client/server adapter fragments, FedAvg, and redistribution."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .errors import AggregationError, PairingError, ValidationError
from .model import AdapterSet, ModelConfig, Partition, TARGETS


@dataclass
class PairedAdapters:
    client_id: int
    adapters: AdapterSet
    sample_count: int


@dataclass
class GlobalAdapterSet:
    adapters: AdapterSet
    version: int = 0


def pair(client_adapters: AdapterSet, server_adapters: AdapterSet, partition: Partition,
         client_id: int = 0, sample_count: int = 1) -> PairedAdapters:
    """Join the client fragment (blocks below the cut) with the server fragment."""
    L = partition.num_blocks
    if client_adapters.num_blocks != L or server_adapters.num_blocks != L:
        raise PairingError("fragments were built for a different number of blocks")
    if client_adapters.has_head:
        raise PairingError("client fragment must not carry the classifier head")
    if not server_adapters.has_head:
        raise PairingError("server fragment is missing the classifier head")
    merged = {}
    for b in range(L):
        for t in TARGETS:
            in_client = (b, t) in client_adapters.adapters
            in_server = (b, t) in server_adapters.adapters
            if in_client and in_server:
                raise PairingError(f"block {b} ({t}) present on both sides of cut {partition.cut}")
            if not (in_client or in_server):
                raise PairingError(f"block {b} ({t}) missing on both sides of cut {partition.cut}")
            side = "client" if in_client else "server"
            if side != partition.owner(b):
                raise PairingError(f"block {b} ({t}) found on {side} side but cut is {partition.cut}")
            merged[(b, t)] = (client_adapters if in_client else server_adapters).adapters[(b, t)]
    full = AdapterSet(L, merged, server_adapters.head_weight, server_adapters.head_bias)
    return PairedAdapters(client_id, full, sample_count)


def split(adapters: AdapterSet, partition: Partition) -> tuple[AdapterSet, AdapterSet]:
    return adapters.client_side(partition), adapters.server_side(partition)


def fedavg_weights(counts: Sequence[int], uniform: bool = False) -> list[Fraction]:
    """Exact rational weights; they sum to one by construction."""
    if uniform:
        return [Fraction(1, len(counts))] * len(counts)
    if any(c < 0 for c in counts) or sum(counts) == 0:
        raise ValidationError(f"sample counts must be non-negative with a positive total: {counts}")
    total = sum(counts)
    return [Fraction(int(c), total) for c in counts]


def fedavg(sets: Sequence[PairedAdapters], version: int = 0, uniform: bool = False) -> GlobalAdapterSet:
    """Sample-weighted per-tensor mean; A and B are averaged separately.

    Contributors are processed in client-id order and the mean is taken as
    an offset from the first one, so the result does not depend on input
    order and identical inputs come back unchanged.  A final clip keeps
    every coordinate inside the contributors' range despite round-off.
    """
    if not sets:
        raise AggregationError("fedavg needs at least one adapter set")
    ordered = sorted(sets, key=lambda p: p.client_id)
    names = list(ordered[0].adapters.named_tensors())
    arrays = [p.adapters.arrays() for p in ordered]
    for p, arr in zip(ordered, arrays):
        if list(arr) != names:
            raise AggregationError(f"client {p.client_id} has a different adapter structure")
        for k in names:
            if arr[k].shape != arrays[0][k].shape:
                raise AggregationError(f"client {p.client_id}: {k} has shape {arr[k].shape}")
    weights = [float(w) for w in fedavg_weights([p.sample_count for p in ordered], uniform)]

    out = {}
    for k in names:
        ref = arrays[0][k]
        acc = np.zeros_like(ref)
        for w, arr in zip(weights[1:], arrays[1:]):
            acc += w * (arr[k] - ref)
        stack = [arr[k] for arr in arrays]
        out[k] = np.clip(ref + acc, np.minimum.reduce(stack), np.maximum.reduce(stack))
    return GlobalAdapterSet(ordered[0].adapters.with_values(out), version)


def split_and_distribute(global_set: GlobalAdapterSet | AdapterSet,
                         partitions: Mapping[int, Partition]) -> dict[int, tuple[AdapterSet, AdapterSet]]:
    """Cut the global set at each client's partition: client_id -> (client side, server side)."""
    adapters = global_set.adapters if isinstance(global_set, GlobalAdapterSet) else global_set
    out = {}
    for cid, p in partitions.items():
        if p.num_blocks != adapters.num_blocks:
            raise ValidationError(f"client {cid}: partition for {p.num_blocks} blocks, "
                                  f"adapters have {adapters.num_blocks}")
        out[cid] = split(adapters, p)
    return out


def distribution_bytes(cut: int, config: ModelConfig, bytes_per_value: int = 8) -> int:
    """Payload to send a client its blocks: per block two adapters of 2·r·H values."""
    return cut * len(TARGETS) * (2 * config.lora_rank * config.hidden) * bytes_per_value
