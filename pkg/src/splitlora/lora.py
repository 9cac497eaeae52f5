"""Low-rank adapters on frozen weights.

An adapter for a frozen ``d x m`` weight ``W`` holds ``A`` (d x r) and
``B`` (r x m); the adapted map is ``h -> h W + s (h A) B`` with
``s = alpha / r``. Updates return new adapters; arrays are read-only.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ParameterError, ShapeError, StructureError
from .numerics import Matrix, SeededRng, check_finite, frozen, gaussian_init, zeros

CHECKPOINT_MAGIC = b"SLRA"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True, eq=False)
class LoraAdapter:
    site_id: int
    A: Matrix
    B: Matrix
    alpha: float

    def __post_init__(self):
        A, B = self.A, self.B
        if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
            raise ShapeError(f"site {self.site_id}: A {A.shape} and B {B.shape} do not share a rank")
        r = A.shape[1]
        if not 1 <= r <= min(A.shape[0], B.shape[1]):
            raise ParameterError(f"site {self.site_id}: rank {r} outside [1, min(d, m)]")
        if self.alpha < 0 or not math.isfinite(self.alpha / r):
            raise ParameterError(f"site {self.site_id}: bad alpha {self.alpha}")
        object.__setattr__(self, "A", frozen(np.asarray(A, dtype=np.float64)))
        object.__setattr__(self, "B", frozen(np.asarray(B, dtype=np.float64)))

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def same_structure(self, other: "LoraAdapter") -> bool:
        return (self.site_id == other.site_id and self.A.shape == other.A.shape
                and self.B.shape == other.B.shape and self.alpha == other.alpha)

    def bitwise_equal(self, other: "LoraAdapter") -> bool:
        return (self.same_structure(other) and self.A.tobytes() == other.A.tobytes()
                and self.B.tobytes() == other.B.tobytes())


@dataclass(frozen=True, eq=False)
class AdapterGrad:
    """Gradients of one adapter's A and B."""
    ga: Matrix
    gb: Matrix


AdapterGradients = Mapping[int, AdapterGrad]


@dataclass(frozen=True, eq=False)
class AdapterSet:
    adapters: tuple[LoraAdapter, ...] = ()
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        adapters = tuple(sorted(self.adapters, key=lambda a: a.site_id))
        ids = [a.site_id for a in adapters]
        if len(set(ids)) != len(ids):
            raise StructureError(f"duplicate site ids in adapter set: {ids}")
        object.__setattr__(self, "adapters", adapters)
        object.__setattr__(self, "_index", {a.site_id: a for a in adapters})

    def __len__(self) -> int:
        return len(self.adapters)

    def __iter__(self):
        return iter(self.adapters)

    def __contains__(self, site_id) -> bool:
        return site_id in self._index

    def __getitem__(self, site_id: int) -> LoraAdapter:
        return self._index[site_id]

    def get(self, site_id: int):
        return self._index.get(site_id)

    @property
    def site_ids(self) -> tuple[int, ...]:
        return tuple(a.site_id for a in self.adapters)

    def subset(self, site_ids: Iterable[int]) -> "AdapterSet":
        keep = set(site_ids)
        return AdapterSet(tuple(a for a in self.adapters if a.site_id in keep))

    def union(self, other: "AdapterSet") -> "AdapterSet":
        return AdapterSet(self.adapters + other.adapters)

    def same_structure(self, other: "AdapterSet") -> bool:
        return (self.site_ids == other.site_ids
                and all(a.same_structure(b) for a, b in zip(self.adapters, other.adapters)))

    def bitwise_equal(self, other: "AdapterSet") -> bool:
        return self.site_ids == other.site_ids and all(
            a.bitwise_equal(b) for a, b in zip(self.adapters, other.adapters))


def init_adapter(site_id: int, d: int, m: int, r: int, alpha: float | None,
                 sigma: float, rng: SeededRng) -> LoraAdapter:
    """Gaussian A, zero B, so the adapted weight starts equal to the frozen one."""
    if not 1 <= r <= min(d, m):
        raise ParameterError(f"rank {r} outside [1, min({d}, {m})]")
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    return LoraAdapter(site_id, gaussian_init(d, r, sigma, rng), zeros(r, m),
                       float(r if alpha is None else alpha))


def _check_forward_shapes(h: Matrix, W: Matrix, adapter: LoraAdapter) -> None:
    if not (h.shape[1] == W.shape[0] == adapter.d and W.shape[1] == adapter.m):
        raise ShapeError(f"site {adapter.site_id}: h {h.shape}, W {W.shape}, "
                         f"A {adapter.A.shape}, B {adapter.B.shape} are incompatible")


def adapter_forward(h: Matrix, W: Matrix, adapter: LoraAdapter) -> Matrix:
    """``h W + s (h A) B`` through the rank-r bottleneck."""
    _check_forward_shapes(h, W, adapter)
    return h @ W + adapter.scale * ((h @ adapter.A) @ adapter.B)


def adapter_backward(h: Matrix, g_out: Matrix, W: Matrix,
                     adapter: LoraAdapter) -> tuple[Matrix, Matrix, Matrix]:
    """Returns (G_A, G_B, g_h) for upstream gradient ``g_out`` of the forward output."""
    _check_forward_shapes(h, W, adapter)
    if g_out.shape != (h.shape[0], adapter.m):
        raise ShapeError(f"site {adapter.site_id}: g_out {g_out.shape}, expected {(h.shape[0], adapter.m)}")
    s = adapter.scale
    g_bt = g_out @ adapter.B.T
    ga = s * (h.T @ g_bt)
    gb = s * ((h @ adapter.A).T @ g_out)
    gh = g_out @ W.T + s * (g_bt @ adapter.A.T)
    return ga, gb, gh


def sgd_update(adapter: LoraAdapter, grad: AdapterGrad, gamma: float) -> LoraAdapter:
    if not gamma > 0:
        raise ParameterError(f"learning rate must be positive, got {gamma}")
    if grad.ga.shape != adapter.A.shape or grad.gb.shape != adapter.B.shape:
        raise ShapeError(f"site {adapter.site_id}: gradient shapes {grad.ga.shape}, {grad.gb.shape} "
                         f"do not match A {adapter.A.shape}, B {adapter.B.shape}")
    A = adapter.A - gamma * grad.ga
    B = adapter.B - gamma * grad.gb
    check_finite(A, f"A at site {adapter.site_id}")
    check_finite(B, f"B at site {adapter.site_id}")
    return LoraAdapter(adapter.site_id, A, B, adapter.alpha)


def apply_sgd(adapters: AdapterSet, grads: AdapterGradients, gamma: float) -> AdapterSet:
    """One plain SGD step on every adapter of the set; ``gamma == 0`` is a no-op."""
    if gamma == 0:
        return adapters
    if set(grads) != set(adapters.site_ids):
        raise StructureError(f"gradient sites {sorted(grads)} != adapter sites {list(adapters.site_ids)}")
    return AdapterSet(tuple(sgd_update(a, grads[a.site_id], gamma) for a in adapters))


def _weighted_mean(mats: Sequence[Matrix], weights: Sequence[float], anchor: int) -> Matrix:
    # Anchored form: ref + sum_i w_i (x_i - ref), equal to sum_i w_i x_i when the
    # weights sum to one. Identical inputs and a lone weight-one client come
    # back bitwise unchanged.
    ref = mats[anchor]
    delta = np.zeros_like(ref)
    for i, (x, w) in enumerate(zip(mats, weights)):
        if i != anchor and w != 0.0:
            delta += w * (x - ref)
    return np.where(delta == 0.0, ref, ref + delta)


def aggregate(sets: Sequence[AdapterSet], weights: Sequence[float]) -> AdapterSet:
    """Weighted mean of A matrices and, separately, of B matrices, site by site.

    Reductions run in ascending client index. The products A B are never
    averaged.
    """
    if not sets:
        raise StructureError("aggregate needs at least one adapter set")
    if len(weights) != len(sets):
        raise ParameterError(f"{len(weights)} weights for {len(sets)} adapter sets")
    w = [float(x) for x in weights]
    if any(x < 0 or not math.isfinite(x) for x in w) or abs(math.fsum(w) - 1.0) > 1e-9:
        raise ParameterError(f"weights must be nonnegative and sum to 1, got {w}")
    first = sets[0]
    for i, s in enumerate(sets[1:], start=1):
        if not s.same_structure(first):
            raise StructureError(f"adapter set of client {i} differs in structure from client 0")
    anchor = max(range(len(w)), key=lambda i: (w[i], -i))
    out = []
    for pos, a0 in enumerate(first.adapters):
        A = _weighted_mean([s.adapters[pos].A for s in sets], w, anchor)
        B = _weighted_mean([s.adapters[pos].B for s in sets], w, anchor)
        out.append(LoraAdapter(a0.site_id, A, B, a0.alpha))
    return AdapterSet(tuple(out))


def count_trainable(adapters: AdapterSet) -> int:
    return sum(a.rank * (a.d + a.m) for a in adapters)


def encode_checkpoint(adapters: AdapterSet) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(adapters))]
    for a in adapters:
        parts.append(struct.pack("<IIIId", a.site_id, a.d, a.m, a.rank, a.alpha))
        parts.append(np.ascontiguousarray(a.A, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(a.B, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> AdapterSet:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise StructureError("not an adapter checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise StructureError(f"unsupported checkpoint version {version}")
        off = 12
        adapters = []
        for _ in range(count):
            site, d, m, r, alpha = struct.unpack_from("<IIIId", blob, off)
            off += 24
            A = np.frombuffer(blob, dtype="<f8", count=d * r, offset=off).reshape(d, r)
            off += 8 * d * r
            B = np.frombuffer(blob, dtype="<f8", count=r * m, offset=off).reshape(r, m)
            off += 8 * r * m
            adapters.append(LoraAdapter(site, A.astype(np.float64), B.astype(np.float64), alpha))
    except (struct.error, ValueError) as exc:
        raise StructureError(f"truncated or corrupt checkpoint: {exc}") from exc
    if off != len(blob):
        raise StructureError(f"{len(blob) - off} trailing bytes in checkpoint")
    return AdapterSet(tuple(adapters))


def save_checkpoint(path: str | Path, adapters: AdapterSet) -> None:
    Path(path).write_bytes(encode_checkpoint(adapters))


def load_checkpoint(path: str | Path) -> AdapterSet:
    return decode_checkpoint(Path(path).read_bytes())
