"""Synthetic token-classification task and Dirichlet label-skew partitioning."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

MAX_PARTITION_RETRIES = 1000


@dataclass(frozen=True)
class TaskSpec:
    """Token 0 is padding; ids ``1..vocab-1`` are split into contiguous class groups.

    The label of a sequence is the class whose group occurs most often in it,
    ties going to the lowest class index.
    """

    vocab: int = 64
    num_classes: int = 4
    seq_len: int = 16
    dominance: float = 0.6

    def __post_init__(self):
        if self.num_classes < 1 or self.seq_len < 1:
            raise ValidationError("num_classes and seq_len must be positive")
        if self.vocab - 1 < self.num_classes:
            raise ValidationError(
                f"vocab {self.vocab} leaves fewer than one token per class ({self.num_classes})")
        if not 0.0 <= self.dominance <= 1.0:
            raise ValidationError(f"dominance must lie in [0, 1], got {self.dominance}")

    @property
    def groups(self) -> list[np.ndarray]:
        return np.array_split(np.arange(1, self.vocab), self.num_classes)

    def token_class(self) -> np.ndarray:
        """Class of every token id; -1 for padding."""
        out = np.full(self.vocab, -1, dtype=np.int64)
        for c, g in enumerate(self.groups):
            out[g] = c
        return out

    def label(self, tokens) -> np.ndarray:
        """Apply the counting rule to one sequence or a batch of sequences."""
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        cls = self.token_class()[tokens]
        counts = np.stack([(cls == c).sum(axis=1) for c in range(self.num_classes)], axis=1)
        return counts.argmax(axis=1)  # argmax returns the first maximum


@dataclass
class Dataset:
    tokens: np.ndarray  # (n, S) int64
    labels: np.ndarray  # (n,) int64

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.tokens[idx], self.labels[idx])

    def to_csv(self, path) -> None:
        s = self.tokens.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label"] + [f"t{i}" for i in range(s)])
            for lab, row in zip(self.labels, self.tokens):
                w.writerow([int(lab)] + [int(t) for t in row])

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        arr = np.array(rows, dtype=np.int64).reshape(len(rows), -1)
        return cls(arr[:, 1:].copy(), arr[:, 0].copy())


@dataclass
class Shard:
    client_id: int
    indices: np.ndarray
    data: Dataset = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.indices)


def generate(spec: TaskSpec, n: int, seed: int) -> Dataset:
    """Sample ``n`` sequences, each dominated by one uniformly chosen class.

    ``round(dominance * S)`` positions draw from the dominant group, the rest
    uniformly from all non-padding tokens; positions are then shuffled.
    """
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    groups = spec.groups
    S = spec.seq_len
    n_dom = int(round(spec.dominance * S))
    dominant = rng.integers(0, spec.num_classes, size=n)
    tokens = np.empty((n, S), dtype=np.int64)
    for i in range(n):
        g = groups[dominant[i]]
        row = np.concatenate([g[rng.integers(0, len(g), size=n_dom)],
                              rng.integers(1, spec.vocab, size=S - n_dom)])
        tokens[i] = rng.permutation(row)
    return Dataset(tokens, spec.label(tokens))


def dirichlet_partition(dataset: Dataset, K: int, alpha: float, seed: int) -> list[Shard]:
    """Split ``dataset`` over ``K`` clients with Dirichlet(alpha) label skew.

    For each class, the class's examples are shuffled and cut according to a
    Dirichlet draw over clients.  Draws are repeated until every client gets
    at least one example.
    """
    if K < 1:
        raise ValidationError(f"K must be >= 1, got {K}")
    if not alpha > 0:
        raise ValidationError(f"alpha must be positive, got {alpha}")
    if len(dataset) < K:
        raise ValidationError(f"dataset of {len(dataset)} examples cannot cover {K} clients")
    if K == 1:
        return [Shard(0, np.arange(len(dataset)), dataset)]

    rng = np.random.default_rng(seed)
    classes = np.unique(dataset.labels)
    for _ in range(MAX_PARTITION_RETRIES):
        parts: list[list[np.ndarray]] = [[] for _ in range(K)]
        for c in classes:
            idx = rng.permutation(np.flatnonzero(dataset.labels == c))
            props = rng.dirichlet(np.full(K, alpha))
            bounds = (np.cumsum(props)[:-1] * len(idx)).astype(np.int64)
            for k, chunk in enumerate(np.split(idx, bounds)):
                parts[k].append(chunk)
        sizes = [sum(len(p) for p in ps) for ps in parts]
        if min(sizes) >= 1:
            shards = []
            for k, ps in enumerate(parts):
                ind = np.sort(np.concatenate(ps))
                shards.append(Shard(k, ind, dataset.subset(ind)))
            return shards
    raise ValidationError(f"could not give every one of {K} clients an example "
                          f"after {MAX_PARTITION_RETRIES} Dirichlet draws")


def write_manifest(shards: list[Shard], path) -> None:
    doc = [{"client_id": s.client_id, "indices": [int(i) for i in s.indices]} for s in shards]
    Path(path).write_text(json.dumps(doc, indent=1))


def label_entropy(labels, num_classes: int) -> float:
    p = np.bincount(np.asarray(labels), minlength=num_classes) / max(len(labels), 1)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())
