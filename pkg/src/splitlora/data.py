"""Synthetic token datasets, client partitioning and mini-batch sampling.

Tasks
-----
``copy_next_token``
    The vocabulary is cut into ``groups`` equal blocks and a fixed random
    permutation maps each block onto itself. A sequence starts at a random
    token of a random block and follows the permutation; with probability
    ``noise`` a step instead jumps to a uniform token of the same block.
    ``seq_len + 1`` tokens are generated; ``x`` is the first ``seq_len`` and
    ``y`` is ``x`` shifted left by one, so the final target (the padding
    slot) is the chain's continuation token. The sample label is the block.
``pattern_classify``
    A class ``c`` picks a vocabulary block; each token comes from that block
    with probability ``1 - noise`` and from the whole vocabulary otherwise.
    Every position of ``y`` holds ``c``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, ParameterError
from .numerics import SeededRng

TASKS = ("copy_next_token", "pattern_classify")


@dataclass(frozen=True, eq=False)
class Dataset:
    x: np.ndarray        # n x seq_len token ids
    y: np.ndarray        # n x seq_len targets
    labels: np.ndarray   # n sample classes, used for label-skew partitioning
    vocab: int
    num_classes: int

    def __post_init__(self):
        if not (len(self.x) == len(self.y) == len(self.labels)):
            raise DataError("x, y and labels must have one row per sample")
        if len(self.x) and (self.x.max() >= self.vocab or self.y.max() >= self.vocab
                            or self.x.min() < 0 or self.y.min() < 0):
            raise DataError(f"token ids must lie in [0, {self.vocab})")

    def __len__(self) -> int:
        return len(self.x)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.labels[idx], self.vocab, self.num_classes)

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        first = parts[0]
        return Dataset(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]),
                       np.concatenate([p.labels for p in parts]), first.vocab, first.num_classes)


@dataclass(frozen=True, eq=False)
class Batch:
    x: np.ndarray
    y: np.ndarray

    @property
    def b(self) -> int:
        return len(self.x)


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "iid"
    concentration: float = 0.5

    def __post_init__(self):
        if self.mode not in ("iid", "label_skew"):
            raise ParameterError(f"unknown partition mode {self.mode!r}")
        if self.mode == "label_skew" and not self.concentration > 0:
            raise ParameterError("label_skew needs concentration > 0")


def shift_targets(chain: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split ``seq_len + 1`` chain tokens into (x, y) with y = x shifted by one."""
    return chain[..., :-1], chain[..., 1:]


def gen_synthetic(task: str, vocab: int, seq_len: int, n: int, rng: SeededRng, *,
                  groups: int = 4, noise: float = 0.1) -> Dataset:
    if task not in TASKS:
        raise ParameterError(f"unknown task {task!r}; expected one of {TASKS}")
    if n < 1 or seq_len < 1 or groups < 1 or vocab < groups or vocab % groups:
        raise ParameterError(f"bad dataset shape: n={n}, seq_len={seq_len}, vocab={vocab}, groups={groups}")
    if not 0.0 <= noise <= 1.0:
        raise ParameterError(f"noise must lie in [0, 1], got {noise}")
    block = vocab // groups
    labels = np.array([rng.randbelow(groups) for _ in range(n)], dtype=np.int64)
    if task == "copy_next_token":
        perm = np.concatenate([g * block + rng.permutation(block) for g in range(groups)])
        chain = np.empty((n, seq_len + 1), dtype=np.int64)
        chain[:, 0] = labels * block + (rng.uniform(n) * block).astype(np.int64)
        jumps = rng.uniform(n * seq_len).reshape(n, seq_len) < noise
        fresh = labels[:, None] * block + (rng.uniform(n * seq_len).reshape(n, seq_len) * block).astype(np.int64)
        for t in range(seq_len):
            chain[:, t + 1] = np.where(jumps[:, t], fresh[:, t], perm[chain[:, t]])
        x, y = shift_targets(chain)
        return Dataset(x.copy(), y.copy(), labels, vocab, groups)
    inside = rng.uniform(n * seq_len).reshape(n, seq_len) >= noise
    local = labels[:, None] * block + (rng.uniform(n * seq_len).reshape(n, seq_len) * block).astype(np.int64)
    anywhere = (rng.uniform(n * seq_len).reshape(n, seq_len) * vocab).astype(np.int64)
    x = np.where(inside, local, anywhere)
    y = np.repeat(labels[:, None], seq_len, axis=1)
    return Dataset(x, y, labels, vocab, groups)


def partition(dataset: Dataset, num_clients: int, spec: PartitionSpec, rng: SeededRng) -> list[Dataset]:
    """Disjoint cover of ``dataset`` by ``num_clients`` client datasets.

    ``iid``: a random permutation cut into contiguous chunks whose sizes
    differ by at most one; each chunk keeps the original sample order.

    ``label_skew``: classes are visited in ascending order; each class's
    shuffled samples are split across clients by a symmetric
    Dirichlet(concentration) draw, with clients that already hold
    ``ceil(n / N)`` samples excluded from later draws. Any client left
    empty then takes one sample from the currently largest client.
    """
    n = len(dataset)
    if num_clients < 1 or num_clients > n:
        raise ParameterError(f"cannot split {n} samples across {num_clients} clients")
    if num_clients == 1:
        return [dataset]
    if spec.mode == "iid":
        perm = rng.permutation(n)
        sizes = [n // num_clients + (1 if i < n % num_clients else 0) for i in range(num_clients)]
        bounds = np.cumsum([0, *sizes])
        return [dataset.take(np.sort(perm[a:b])) for a, b in zip(bounds[:-1], bounds[1:])]

    cap = math.ceil(n / num_clients)
    owned: list[list[int]] = [[] for _ in range(num_clients)]
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if not idx.size:
            continue
        idx = idx[rng.permutation(idx.size)]
        logp = rng.log_dirichlet(spec.concentration, num_clients)
        full = np.array([len(o) >= cap for o in owned])
        if not full.all():
            logp = np.where(full, -np.inf, logp)
        p = np.exp(logp - logp.max())
        p /= p.sum()
        cuts = np.floor(np.cumsum(p)[:-1] * idx.size).astype(int)
        for i, part in enumerate(np.split(idx, cuts)):
            owned[i].extend(int(j) for j in part)
    for i in range(num_clients):
        if not owned[i]:
            donor = max(range(num_clients), key=lambda j: (len(owned[j]), -j))
            owned[i].append(owned[donor].pop())
    return [dataset.take(sorted(o)) for o in owned]


def data_weights(parts: Sequence[Dataset]) -> list[float]:
    """Aggregation weights |D_i| / |D|."""
    total = sum(len(p) for p in parts)
    return [len(p) / total for p in parts]


def sample_minibatch(dataset: Dataset, b: int, rng: SeededRng) -> Batch:
    """``b`` distinct samples; each call draws afresh."""
    if not 1 <= b <= len(dataset):
        raise ParameterError(f"batch size {b} outside [1, {len(dataset)}]")
    idx = rng.sample_indices(len(dataset), b)
    return Batch(dataset.x[idx], dataset.y[idx])


def dump_jsonl(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w") as fh:
        for x, y, lab in zip(dataset.x, dataset.y, dataset.labels):
            fh.write(json.dumps({"x": x.tolist(), "y": y.tolist(), "label": int(lab)}) + "\n")


def load_jsonl(path: str | Path, vocab: int, num_classes: int) -> Dataset:
    xs, ys, labs = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                xs.append(rec["x"])
                ys.append(rec["y"])
                labs.append(rec.get("label", 0))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad sample record ({exc})") from exc
    return Dataset(np.array(xs, dtype=np.int64), np.array(ys, dtype=np.int64),
                   np.array(labs, dtype=np.int64), vocab, num_classes)
